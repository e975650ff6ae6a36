//! `latent-router` command-line driver.
//!
//! Every subcommand reads its inputs from files, writes its artifacts to
//! files, and is deterministic for fixed inputs and seeds.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use latent_router::anchors::{select_anchors, AnchorSet};
use latent_router::config::{Experiment, Settings, StreamKind};
use latent_router::estimators::{read_measurements, ModelPricing, TokenizerRegistry};
use latent_router::irt::{fit_calibration, profile_new_model, CalibratedSpace, ProfilingObservation, ResponseMatrix};
use latent_router::predictor::{self, EmbeddingFile, TrainingExample};
use latent_router::registry::{onboard_model, ModelProfile, Onboarding, ProfileMetadata, Registry, RegistryHandle};
use latent_router::router::{route_constrained_with, score_matrix, write_assignment_csv, PolicyWeights, ScoringQuery};
use latent_router::service::{RequestQuery, Server, Service};
use latent_router::sim::{
    calibrate_world, compare_sampling_strategies, dominance_stream, generate_world, random_stream,
    simulate_evolving_pool, write_metrics_csv, AblationConfig, PoolConfig, StrategyReport,
};
use latent_router::{Error, Result};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "latent-router", version, about = "Zero-shot LLM routing in a calibrated latent space")]
struct Cli {
    /// Settings file (TOML). LATROUTE_<SECTION>_<KEY> variables override it.
    #[arg(long, global = true, env = "LATROUTE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit item and model parameters to a response matrix CSV.
    Calibrate(CalibrateArgs),
    /// Greedy D-optimal anchor selection from a calibrated space.
    SelectAnchors(SelectAnchorsArgs),
    /// Profile a new model's ability from its anchor scores.
    ProfileModel(ProfileModelArgs),
    /// Fit verbosity and latency estimators into a profile.
    CalibrateEstimators(CalibrateEstimatorsArgs),
    /// Train the query → (α, b) predictor.
    TrainPredictor(TrainPredictorArgs),
    /// Create a registry directory from a calibrated space.
    InitRegistry(InitRegistryArgs),
    /// Add a profile to a registry.
    Register(RegisterArgs),
    /// Route a batch of queries and write the assignment CSV.
    Route(RouteArgs),
    /// Serve NDJSON routing requests over TCP.
    Serve(ServeArgs),
    /// Run a simulation scenario and write its metrics CSV.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with header `model_id,<item ids…>`; empty cells are missing.
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Latent dimension; overrides `calibration.dim`.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SelectAnchorsArgs {
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of anchors; overrides `anchors.count`.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Also write the gain curve here; it is always printed to stdout.
    #[arg(long)]
    gains: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileModelArgs {
    #[arg(long)]
    space: PathBuf,
    /// CSV with at least `item_id,score` columns.
    #[arg(long)]
    observations: PathBuf,
    #[arg(long)]
    model_id: String,
    /// Currency per input token.
    #[arg(long)]
    price_in: f64,
    /// Currency per output token.
    #[arg(long)]
    price_out: f64,
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long)]
    anchor_set_id: Option<String>,
    #[arg(long)]
    display_name: Option<String>,
    /// Free-form onboarding label stored in the metadata.
    #[arg(long)]
    onboarded_at: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateEstimatorsArgs {
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    /// CSV `item_id,score,output_tokens,latency_seconds`.
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    /// Defaults to rewriting `--profile` in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainPredictorArgs {
    #[arg(long)]
    space: PathBuf,
    /// JSONL `{"id","text"}`; `alpha`/`b` default to the space's item.
    #[arg(long)]
    examples: PathBuf,
    /// EMB v1 file; switches the predictor to precomputed vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitRegistryArgs {
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    anchor_set_id: String,
    #[arg(long)]
    predictor: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct PolicyArgs {
    /// Preset: max-acc, min-cost, min-lat or balanced.
    #[arg(long)]
    policy: Option<String>,
    /// Explicit weights `p,c,t` summing to 1.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    max_cost: Option<f64>,
    #[arg(long)]
    max_latency: Option<f64>,
    #[arg(long)]
    min_accuracy: Option<f64>,
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    registry: PathBuf,
    /// JSONL `{"id","text"}` with optional `embedding` or `latent`.
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Overrides `service.addr`.
    #[arg(long)]
    addr: Option<String>,
    /// Shorthand for `--addr 127.0.0.1:<port>`.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file; merged over `--config` as a second settings layer.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-step log (pool) or per-trial results (ablation) as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty lines of a JSONL file, each with its 1-based line number.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn calibrate(settings: &Settings, a: &CalibrateArgs) -> Result<()> {
    let responses = ResponseMatrix::read_csv(open(&a.responses)?)?;
    let mut config = settings.calibration.clone();
    if let Some(d) = a.dim {
        config.dim = d;
        config.prior_mean.clear();
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let space = fit_calibration(&responses, &config)?;
    eprintln!(
        "calibrated {} models × {} items in D={} (final loss {:.6})",
        responses.models().len(),
        responses.items().len(),
        space.dim,
        space.fit_report.final_loss
    );
    write_json(&a.out, &space)
}

fn select(settings: &Settings, a: &SelectAnchorsArgs) -> Result<()> {
    let space: CalibratedSpace = read_json(&a.space)?;
    let items: Vec<_> = space.items.values().cloned().collect();
    let n = a.n.unwrap_or(settings.anchors.count);
    let set = select_anchors(&items, n, a.epsilon.unwrap_or(settings.anchors.epsilon))?;
    write_json(&a.out, &set)?;
    let curve = set.gain_curve_csv();
    if let Some(p) = &a.gains {
        write_text(p, &curve)?;
    }
    print!("{curve}");
    Ok(())
}

#[derive(Deserialize)]
struct ObservationRow {
    item_id: String,
    score: f64,
}

fn profile(settings: &Settings, a: &ProfileModelArgs) -> Result<()> {
    let space: CalibratedSpace = read_json(&a.space)?;
    let mut rdr = csv::Reader::from_reader(open(&a.observations)?);
    let obs = rdr
        .deserialize::<ObservationRow>()
        .map(|r| r.map(|r| ProfilingObservation::new(r.item_id, r.score)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let ability = profile_new_model(&a.model_id, &obs, &space, &settings.calibration_for(space.dim))?;
    let profile = ModelProfile {
        model_id: a.model_id.clone(),
        ability,
        pricing: ModelPricing::new(a.price_in, a.price_out)?,
        verbosity: None,
        latency: None,
        tokenizer_id: a.tokenizer.clone().unwrap_or_else(|| settings.estimators.tokenizer.clone()),
        metadata: ProfileMetadata {
            display_name: a.display_name.clone(),
            onboarded_at: a.onboarded_at.clone(),
            anchor_set_id: a.anchor_set_id.clone(),
        },
    };
    profile.validate()?;
    write_json(&a.out, &profile)
}

fn calibrate_estimators(settings: &Settings, a: &CalibrateEstimatorsArgs) -> Result<()> {
    let space: CalibratedSpace = read_json(&a.space)?;
    let mut profile: ModelProfile = read_json(&a.profile)?;
    let measurements = read_measurements(open(&a.measurements)?)?;
    // Reuse the onboarding path for the estimator half, keeping the profiled θ.
    let fitted = onboard_model(
        &space,
        &Onboarding {
            model_id: &profile.model_id,
            measurements: &measurements,
            pricing: profile.pricing,
            tokenizer_id: &profile.tokenizer_id,
            anchor_set_id: None,
            verbosity_bins: a.bins.unwrap_or(settings.estimators.verbosity_bins),
        },
        &settings.calibration_for(space.dim),
    )?;
    profile.verbosity = fitted.verbosity;
    profile.latency = fitted.latency;
    profile.validate()?;
    write_json(a.out.as_deref().unwrap_or(&a.profile), &profile)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    id: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
    #[serde(default)]
    alpha: Option<Vec<f64>>,
    #[serde(default)]
    b: Option<Vec<f64>>,
}

fn train_predictor(settings: &Settings, a: &TrainPredictorArgs) -> Result<()> {
    let space: CalibratedSpace = read_json(&a.space)?;
    let mut config = settings.predictor.clone();
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let vectors: BTreeMap<String, Vec<f64>> = match &a.embeddings {
        Some(p) => {
            let file = EmbeddingFile::read(open(p)?)?;
            config.embedding = predictor::EmbeddingSource::Precomputed { dim: file.dim };
            file.to_map()
        }
        None => BTreeMap::new(),
    };
    let lines: Vec<ExampleLine> = read_jsonl(&a.examples)?;
    let examples = lines
        .into_iter()
        .map(|l| {
            let (alpha, b) = match (l.alpha, l.b) {
                (Some(alpha), Some(b)) => (alpha, b),
                _ => {
                    let it = space.item(&l.id)?;
                    (it.alpha.clone(), it.b.clone())
                }
            };
            let embedding = l.embedding.or_else(|| vectors.get(&l.id).cloned());
            Ok(TrainingExample {
                query_id: l.id,
                text: l.text,
                embedding,
                alpha,
                b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = predictor::train(&examples, &space, &config)?;
    eprintln!(
        "trained predictor on {} examples, final loss {:.6}",
        examples.len(),
        model.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    write_json(&a.out, &model)
}

fn init_registry(a: &InitRegistryArgs) -> Result<()> {
    let space: CalibratedSpace = read_json(&a.space)?;
    let mut reg = Registry::new(space)?;
    if let Some(p) = &a.anchors {
        let set: AnchorSet = read_json(p)?;
        reg.add_anchor_set(&a.anchor_set_id, set, false)?;
    }
    if let Some(p) = &a.predictor {
        reg.set_predictor(read_json(p)?)?;
    }
    reg.save(&a.dir)?;
    eprintln!("registry at {} (version {})", a.dir.display(), reg.version);
    Ok(())
}

fn register(a: &RegisterArgs) -> Result<()> {
    let handle = RegistryHandle::open(&a.registry)?;
    let profile: ModelProfile = read_json(&a.profile)?;
    let id = profile.model_id.clone();
    let v = handle.register_model(profile, a.overwrite)?;
    eprintln!("registered `{id}` (version {v})");
    Ok(())
}

fn weights(settings: &Settings, p: &PolicyArgs) -> Result<PolicyWeights> {
    if let Some(w) = &p.weights {
        let [wp, wc, wt] = w[..] else {
            return Err(Error::InvalidInput(format!("--weights needs three values, got {}", w.len())));
        };
        return PolicyWeights::new(wp, wc, wt);
    }
    match &p.policy {
        Some(name) => PolicyWeights::preset(name).ok_or_else(|| Error::InvalidInput(format!("unknown policy `{name}`"))),
        None => settings.router.resolved_weights(),
    }
}

fn route(settings: &Settings, a: &RouteArgs) -> Result<()> {
    let reg = Registry::load(&a.registry)?;
    let queries: Vec<RequestQuery> = read_jsonl(&a.queries)?;
    let mut scoring = Vec::with_capacity(queries.len());
    for q in queries {
        let item = match q.latent {
            Some(l) => latent_router::irt::ItemParams::new(q.id.clone(), l.alpha, l.b)?,
            None => reg
                .predictor
                .as_ref()
                .ok_or_else(|| Error::Registry("registry has no predictor; supply `latent` per query".into()))?
                .predict_item(&q.id, &q.text, q.embedding.as_deref())?,
        };
        scoring.push(ScoringQuery {
            query_id: q.id,
            item,
            text: q.text,
        });
    }
    let profiles = reg.routable_profiles();
    let est = score_matrix(&scoring, &profiles, &TokenizerRegistry::default())?;
    let mut constraints = settings.router.constraints;
    let p = &a.policy;
    constraints.max_total_cost = p.max_cost.or(constraints.max_total_cost);
    constraints.max_total_latency = p.max_latency.or(constraints.max_total_latency);
    constraints.min_mean_accuracy = p.min_accuracy.or(constraints.min_mean_accuracy);
    let mut options = settings.router.options();
    options.normalize |= p.normalize;
    let assignment = route_constrained_with(&est, &weights(settings, p)?, &constraints, &options)?;
    let mut w = create(&a.out)?;
    write_assignment_csv(&mut w, &est, &assignment)?;
    w.flush().map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    eprintln!(
        "routed {} queries over {} models: solver {}, feasible {}, objective {:.6}",
        est.num_queries(),
        est.num_models(),
        assignment.solver.as_str(),
        assignment.feasible,
        assignment.objective_value
    );
    if assignment.feasible {
        Ok(())
    } else {
        Err(Error::InvalidInput("constraints are infeasible; wrote the best-effort assignment".into()))
    }
}

fn serve(settings: &Settings, a: &ServeArgs) -> Result<()> {
    let dir = a
        .registry
        .clone()
        .or_else(|| settings.service.registry_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::InvalidInput("no registry directory (use --registry or service.registry_dir)".into()))?;
    let addr = match (a.port, &a.addr) {
        (Some(port), _) => format!("127.0.0.1:{port}"),
        (None, Some(addr)) => addr.clone(),
        (None, None) => settings.service.addr.clone(),
    };
    let handle = Arc::new(RegistryHandle::open(&dir)?);
    let mut service = Service::new(handle).with_reload_dir(&dir);
    service.options = settings.router.options();
    let server = Server::bind(addr.as_str(), service)?;
    // The bound address goes to stdout so callers using port 0 can find it.
    println!("listening on {}", server.local_addr()?);
    std::io::stdout().flush().ok();
    server.run(Arc::new(std::sync::atomic::AtomicBool::new(false)))
}

fn write_ablation_csv(path: &Path, reports: &[StrategyReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["strategy", "trial", "heldout_model", "theta_error", "heldout_mae"])?;
    for r in reports {
        for t in &r.trials {
            w.write_record([
                r.name().to_string(),
                t.trial.to_string(),
                t.heldout_model.clone(),
                t.theta_error.to_string(),
                t.heldout_mae.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn simulate(settings: &Settings, config: Option<&Path>, a: &SimulateArgs) -> Result<()> {
    let settings = match &a.scenario {
        Some(p) => Settings::load_layers(&[config.map(Path::new), Some(p.as_path())].into_iter().flatten().collect::<Vec<_>>())?,
        None => settings.clone(),
    };
    let sim = &settings.simulation;
    let world = generate_world(&sim.world)?;
    let calibration = settings.calibration_for(world.dim());
    let space = calibrate_world(&world, &calibration)?;
    eprintln!("calibrated world: final loss {:.6}", space.fit_report.final_loss);
    match sim.experiment {
        Experiment::Ablation => {
            let reports = compare_sampling_strategies(
                &world,
                &space,
                &AblationConfig {
                    anchors: sim.ablation.anchors,
                    trials: sim.ablation.trials,
                    seed: sim.ablation.seed,
                    calibration,
                },
            )?;
            for r in &reports {
                eprintln!(
                    "{:>13}: mean MAE {:.4}, mean θ error {:.4}",
                    r.name(),
                    r.mean_mae,
                    r.mean_theta_error
                );
            }
            write_ablation_csv(&a.out, &reports)?;
            if let Some(p) = &a.log {
                write_json(p, &reports)?;
            }
        }
        Experiment::Pool => {
            let pool = &sim.pool;
            let items: Vec<_> = space.items.values().cloned().collect();
            let anchors = select_anchors(&items, pool.anchors, settings.anchors.epsilon)?;
            let count = pool.pool_size + pool.steps;
            let template = world.sample_model("template", pool.seed.wrapping_add(1 << 20));
            let stream = match pool.stream {
                StreamKind::Dominance => dominance_stream(&template, count, pool.delta),
                StreamKind::Clone => dominance_stream(&template, count, 0.0),
                StreamKind::Random => random_stream(&world, count, pool.seed),
            };
            let weights = PolicyWeights::preset(&pool.policy)
                .ok_or_else(|| Error::InvalidInput(format!("unknown policy `{}`", pool.policy)))?;
            let run = simulate_evolving_pool(
                &world,
                &space,
                &anchors,
                &stream,
                &PoolConfig {
                    pool_size: pool.pool_size,
                    steps: pool.steps,
                    policy_name: pool.policy.clone(),
                    weights,
                    constraints: pool.constraints,
                    eval_items: pool.eval_items,
                    verbosity_bins: settings.estimators.verbosity_bins,
                    seed: pool.seed,
                    calibration,
                },
            )?;
            let mut w = create(&a.out)?;
            write_metrics_csv(&mut w, &run.records)?;
            w.flush().map_err(|source| Error::Io {
                path: a.out.clone(),
                source,
            })?;
            if let Some(p) = &a.log {
                write_json(p, &run)?;
            }
            eprintln!(
                "{} steps, reward {:.4} → {:.4}, training runs after step 0: {}",
                pool.steps,
                run.records.first().map_or(f64::NAN, |r| r.reward),
                run.records.last().map_or(f64::NAN, |r| r.reward),
                run.training_runs_after_step0
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Calibrate(a) => calibrate(&settings, a),
        Command::SelectAnchors(a) => select(&settings, a),
        Command::ProfileModel(a) => profile(&settings, a),
        Command::CalibrateEstimators(a) => calibrate_estimators(&settings, a),
        Command::TrainPredictor(a) => train_predictor(&settings, a),
        Command::InitRegistry(a) => init_registry(a),
        Command::Register(a) => register(a),
        Command::Route(a) => route(&settings, a),
        Command::Serve(a) => serve(&settings, a),
        Command::Simulate(a) => simulate(&settings, cli.config.as_deref(), a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
