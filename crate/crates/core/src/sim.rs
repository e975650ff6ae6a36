//! Synthetic worlds with planted latent parameters, and the experiments run
//! on them.
//!
//! A world draws `θ ~ N(0, I)` per model and `b ~ N(0, I)`, `α = |N(0, I)|`
//! per item. Scores are either the exact response probability (graded, with
//! optional additive Gaussian noise clipped to `[0, 1]`) or a Bernoulli draw.
//! Each model also has true token prices, a true `(TTFT, TPOT)` pair and a
//! verbosity multiplier; its true output length on an item is
//!
//! ```text
//! len = verbosity · (20 + 180 · σ(αᵀb))
//! ```
//!
//! which is strictly increasing in the complexity score `αᵀb`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::{select_anchors, AnchorSet, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::estimators::{
    complexity_score, cost_with_length, AnchorMeasurement, ModelPricing, TokenizerRegistry, DEFAULT_VERBOSITY_BINS,
    WHITESPACE_TOKENIZER,
};
use crate::instrument;
use crate::irt::{
    fit_calibration, predict_prob, profile_new_model, CalibratedSpace, CalibrationConfig, ItemParams, LatentAbility,
    ProfilingObservation, ResponseMatrix,
};
use crate::math::{dot, fnv1a, mean, sigmoid};
use crate::registry::{onboard_model, ModelProfile, Onboarding};
use crate::router::{
    route_constrained, score_matrix, total_reward, GlobalConstraints, Observation, PolicyWeights, ScoringQuery,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Graded,
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub models: usize,
    pub items: usize,
    #[serde(rename = "D", alias = "d")]
    pub dim: usize,
    /// Std of additive score noise in graded mode.
    pub noise: f64,
    pub mode: ScoreMode,
    /// Std of the log-normal factor on measured output lengths.
    pub length_noise: f64,
    /// Std of the relative error on measured latencies.
    pub latency_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            models: 50,
            items: 500,
            dim: 3,
            noise: 0.0,
            mode: ScoreMode::Graded,
            length_noise: 0.0,
            latency_noise: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn new(seed: u64, models: usize, items: usize, dim: usize, noise: f64) -> Self {
        Self {
            seed,
            models,
            items,
            dim,
            noise,
            ..Self::default()
        }
    }
}

/// A model with known true behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub ability: LatentAbility,
    pub pricing: ModelPricing,
    pub ttft: f64,
    pub tpot: f64,
    pub verbosity: f64,
}

impl PlantedModel {
    pub fn id(&self) -> &str {
        &self.ability.model_id
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub models: Vec<PlantedModel>,
    /// Planted item parameters, ids `item-0000`, … in index order.
    pub items: Vec<ItemParams>,
    pub texts: Vec<String>,
    pub responses: ResponseMatrix,
    item_index: BTreeMap<String, usize>,
}

/// Independent random stream `stream` under `seed`.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_ITEMS: u64 = 1;
const STREAM_MODELS: u64 = 2;
const STREAM_SCORES: u64 = 3;
const STREAM_TEXT: u64 = 4;
const STREAM_HELDOUT: u64 = 1 << 32;

const WORDS: [&str; 24] = [
    "compute", "explain", "the", "value", "of", "a", "function", "given", "list", "prove", "that", "each", "number",
    "why", "how", "which", "table", "graph", "sum", "and", "order", "find", "when", "what",
];

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn draw_model(id: String, dim: usize, rng: &mut ChaCha8Rng) -> PlantedModel {
    let theta = standard_normal(rng, dim);
    let price_in = rng.gen_range(0.1..5.0) * 1e-6;
    PlantedModel {
        ability: LatentAbility {
            model_id: id,
            theta,
        },
        pricing: ModelPricing {
            price_in,
            price_out: price_in * rng.gen_range(2.0..4.0),
        },
        ttft: rng.gen_range(0.1..1.0),
        tpot: rng.gen_range(0.005..0.05),
        verbosity: rng.gen_range(0.6..1.6),
    }
}

pub fn model_id(k: usize) -> String {
    format!("model-{k:03}")
}

pub fn item_id(k: usize) -> String {
    format!("item-{k:04}")
}

/// Builds a world deterministically from its config.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    if config.models == 0 || config.items == 0 || config.dim == 0 {
        return Err(Error::invalid("world needs at least one model, item and dimension"));
    }
    if !(config.noise >= 0.0 && config.length_noise >= 0.0 && config.latency_noise >= 0.0) {
        return Err(Error::invalid("noise levels must be >= 0"));
    }
    let d = config.dim;
    let mut item_rng = rng_for(config.seed, STREAM_ITEMS);
    let items: Vec<ItemParams> = (0..config.items)
        .map(|k| {
            let alpha = standard_normal(&mut item_rng, d).into_iter().map(f64::abs).collect();
            let b = standard_normal(&mut item_rng, d);
            ItemParams {
                item_id: item_id(k),
                alpha,
                b,
            }
        })
        .collect();
    let mut model_rng = rng_for(config.seed, STREAM_MODELS);
    let models: Vec<PlantedModel> = (0..config.models)
        .map(|k| draw_model(model_id(k), d, &mut model_rng))
        .collect();
    let mut text_rng = rng_for(config.seed, STREAM_TEXT);
    let texts = (0..config.items)
        .map(|_| {
            let n = text_rng.gen_range(5..40);
            (0..n).map(|_| *WORDS.choose(&mut text_rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let item_index = items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();
    let mut world = SyntheticWorld {
        config: config.clone(),
        models,
        items,
        texts,
        responses: ResponseMatrix::new(vec![], vec![], vec![])?,
        item_index,
    };
    let mut score_rng = rng_for(config.seed, STREAM_SCORES);
    let mut scores = Vec::with_capacity(config.models * config.items);
    for m in &world.models {
        for i in 0..config.items {
            scores.push(Some(world.sample_score(m, i, &mut score_rng)));
        }
    }
    world.responses = ResponseMatrix::new(
        world.models.iter().map(|m| m.id().to_string()).collect(),
        world.items.iter().map(|i| i.item_id.clone()).collect(),
        scores,
    )?;
    Ok(world)
}

impl SyntheticWorld {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn item_index(&self, id: &str) -> Result<usize> {
        self.item_index.get(id).copied().ok_or_else(|| Error::UnknownId {
            kind: "item",
            id: id.to_string(),
        })
    }

    /// A fresh model drawn from the same priors, independent of the world's
    /// own models.
    pub fn sample_model(&self, id: impl Into<String>, index: u64) -> PlantedModel {
        let mut rng = rng_for(self.config.seed, STREAM_HELDOUT + index);
        draw_model(id.into(), self.dim(), &mut rng)
    }

    pub fn true_prob(&self, model: &PlantedModel, item: usize) -> f64 {
        predict_prob(&model.ability, &self.items[item]).expect("planted dimensions agree")
    }

    pub fn sample_score<R: Rng>(&self, model: &PlantedModel, item: usize, rng: &mut R) -> f64 {
        let p = self.true_prob(model, item);
        match self.config.mode {
            ScoreMode::Graded if self.config.noise == 0.0 => p,
            ScoreMode::Graded => {
                let e: f64 = StandardNormal.sample(rng);
                (p + self.config.noise * e).clamp(0.0, 1.0)
            }
            ScoreMode::Bernoulli => f64::from(u8::from(rng.gen::<f64>() < p)),
        }
    }

    /// Planted complexity score `αᵀb`.
    pub fn true_complexity(&self, item: usize) -> f64 {
        dot(&self.items[item].alpha, &self.items[item].b)
    }

    pub fn true_length(&self, model: &PlantedModel, item: usize) -> f64 {
        model.verbosity * (20.0 + 180.0 * sigmoid(self.true_complexity(item)))
    }

    pub fn input_tokens(&self, item: usize) -> f64 {
        self.texts[item].split_whitespace().count() as f64
    }

    pub fn true_cost(&self, model: &PlantedModel, item: usize) -> f64 {
        cost_with_length(&model.pricing, self.input_tokens(item), self.true_length(model, item))
    }

    pub fn true_latency(&self, model: &PlantedModel, item: usize) -> f64 {
        model.ttft + model.tpot * self.true_length(model, item)
    }

    /// Runs `model` on the given items and records what an operator would
    /// observe: score, output length and wall-clock latency.
    pub fn measure(&self, model: &PlantedModel, item_ids: &[String], seed: u64) -> Result<Vec<AnchorMeasurement>> {
        let mut rng = rng_for(seed ^ fnv1a(model.id().as_bytes()), STREAM_SCORES);
        item_ids
            .iter()
            .map(|id| {
                let i = self.item_index(id)?;
                let score = self.sample_score(model, i, &mut rng);
                let z: f64 = StandardNormal.sample(&mut rng);
                let len = (self.true_length(model, i) * (self.config.length_noise * z).exp()).max(1.0);
                let z: f64 = StandardNormal.sample(&mut rng);
                let secs = ((model.ttft + model.tpot * len) * (1.0 + self.config.latency_noise * z)).max(0.0);
                Ok(AnchorMeasurement {
                    item_id: id.clone(),
                    score,
                    output_tokens: len,
                    latency_seconds: secs,
                })
            })
            .collect()
    }

    /// Semantic vectors that are a fixed random linear image of each item's
    /// planted `(α, b)`, for predictor experiments. Requires `d_sem ≥ 2D`
    /// for the map to be injective.
    pub fn item_embeddings(&self, d_sem: usize, seed: u64) -> Vec<Vec<f64>> {
        let d2 = 2 * self.dim();
        let mut rng = rng_for(seed, STREAM_TEXT + 1);
        let normal = Normal::new(0.0, 1.0 / (d2 as f64).sqrt()).expect("valid std");
        let map: Vec<f64> = (0..d_sem * d2).map(|_| normal.sample(&mut rng)).collect();
        self.items
            .iter()
            .map(|it| {
                let z: Vec<f64> = it.alpha.iter().chain(&it.b).copied().collect();
                map.chunks_exact(d2).map(|row| dot(row, &z)).collect()
            })
            .collect()
    }
}

/// Calibrates a space on the world's response matrix.
pub fn calibrate_world(world: &SyntheticWorld, config: &CalibrationConfig) -> Result<CalibratedSpace> {
    fit_calibration(&world.responses, config)
}

/// Profiles `model` from its scores on `anchor_ids`.
pub fn profile_planted(
    world: &SyntheticWorld,
    space: &CalibratedSpace,
    model: &PlantedModel,
    anchor_ids: &[String],
    config: &CalibrationConfig,
    seed: u64,
) -> Result<LatentAbility> {
    let obs: Vec<ProfilingObservation> = world
        .measure(model, anchor_ids, seed)?
        .into_iter()
        .map(|m| ProfilingObservation::new(m.item_id, m.score))
        .collect();
    profile_new_model(model.id(), &obs, space, config)
}

/// Mean absolute error between predicted and true response probabilities
/// over `items` (world indices).
pub fn probability_mae(
    world: &SyntheticWorld,
    space: &CalibratedSpace,
    estimate: &LatentAbility,
    model: &PlantedModel,
    items: &[usize],
) -> Result<f64> {
    let mut errs = Vec::with_capacity(items.len());
    for &i in items {
        let fitted = predict_prob(estimate, space.item(&world.items[i].item_id)?)?;
        errs.push((fitted - world.true_prob(model, i)).abs());
    }
    Ok(mean(&errs))
}

// ---------------------------------------------------------------------------
// Anchor sampling ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    DiffBased,
    DiscBased,
    TaskAware,
    DOptimality,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::DiffBased,
        Strategy::DiscBased,
        Strategy::TaskAware,
        Strategy::DOptimality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::DiffBased => "diff-based",
            Strategy::DiscBased => "disc-based",
            Strategy::TaskAware => "task-aware",
            Strategy::DOptimality => "d-optimality",
        }
    }
}

fn top_by(items: &[&ItemParams], n: usize, key: impl Fn(&ItemParams) -> f64) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = items.iter().map(|it| (key(it), it.item_id.as_str())).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Anchor ids chosen by `strategy` from the calibrated items.
///
/// * random: uniform without replacement
/// * diff-based: largest `‖b‖`
/// * disc-based: largest `‖α‖`
/// * task-aware: sort by `s = αᵀb`, cut into `n` equal-count strata, and
///   take the most discriminating item (largest `‖α‖`) of each stratum, so
///   the picks span the complexity range and stay informative
/// * d-optimality: greedy log-det selection
pub fn select_by_strategy(
    strategy: Strategy,
    space: &CalibratedSpace,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let items: Vec<&ItemParams> = space.items.values().collect();
    if n > items.len() {
        return Err(Error::TooFew {
            what: "items for anchor selection",
            minimum: n,
            found: items.len(),
        });
    }
    Ok(match strategy {
        Strategy::Random => {
            let mut ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
            ids.shuffle(rng);
            ids.truncate(n);
            ids
        }
        Strategy::DiffBased => top_by(&items, n, |it| norm(&it.b)),
        Strategy::DiscBased => top_by(&items, n, |it| norm(&it.alpha)),
        Strategy::TaskAware => {
            let mut by_s: Vec<(f64, &str)> = items
                .iter()
                .map(|it| Ok((complexity_score(it)?, it.item_id.as_str())))
                .collect::<Result<_>>()?;
            by_s.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            let disc: BTreeMap<&str, f64> = items.iter().map(|it| (it.item_id.as_str(), norm(&it.alpha))).collect();
            let p = by_s.len();
            (0..n)
                .map(|k| {
                    let stratum = &by_s[k * p / n..(k + 1) * p / n];
                    let best = stratum
                        .iter()
                        .max_by(|a, b| disc[a.1].total_cmp(&disc[b.1]).then_with(|| b.1.cmp(a.1)))
                        .expect("strata are non-empty when n <= P");
                    best.1.to_string()
                })
                .collect()
        }
        Strategy::DOptimality => {
            let owned: Vec<ItemParams> = items.into_iter().cloned().collect();
            select_anchors(&owned, n, DEFAULT_EPSILON)?.item_ids
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub anchors: usize,
    pub trials: usize,
    pub seed: u64,
    /// Prior and stopping settings used for profiling.
    pub calibration: CalibrationConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            anchors: 40,
            trials: 20,
            seed: 0,
            calibration: CalibrationConfig::new(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub heldout_model: String,
    /// `‖θ̂ − θ̂_full‖`, where `θ̂_full` is profiled from every item.
    pub theta_error: f64,
    pub heldout_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub trials: Vec<TrialResult>,
    pub mean_theta_error: f64,
    pub mean_mae: f64,
}

impl StrategyReport {
    pub fn name(&self) -> &'static str {
        self.strategy.name()
    }
}

/// Paired comparison: in each trial every strategy profiles the same fresh
/// held-out model, and MAE is measured on the items none of the strategies
/// used as anchors in that trial (all items if that set is empty).
pub fn compare_sampling_strategies(
    world: &SyntheticWorld,
    space: &CalibratedSpace,
    config: &AblationConfig,
) -> Result<Vec<StrategyReport>> {
    if config.trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let all_ids: Vec<String> = world.items.iter().map(|i| i.item_id.clone()).collect();
    let mut results: BTreeMap<Strategy, Vec<TrialResult>> = BTreeMap::new();
    for t in 0..config.trials {
        let model = world.sample_model(format!("heldout-{t:03}"), config.seed.wrapping_mul(1_000_003) + t as u64);
        let trial_seed = config.seed.wrapping_add(t as u64);
        let full = profile_planted(world, space, &model, &all_ids, &config.calibration, trial_seed)?;

        let mut picks = Vec::new();
        for s in Strategy::ALL {
            let mut rng = rng_for(trial_seed, 100 + s as u64);
            picks.push((s, select_by_strategy(s, space, config.anchors, &mut rng)?));
        }
        let used: BTreeSet<&str> = picks.iter().flat_map(|(_, ids)| ids.iter().map(String::as_str)).collect();
        let mut eval: Vec<usize> = (0..world.items.len())
            .filter(|&i| !used.contains(world.items[i].item_id.as_str()))
            .collect();
        if eval.is_empty() {
            eval = (0..world.items.len()).collect();
        }
        for (s, ids) in picks {
            let est = profile_planted(world, space, &model, &ids, &config.calibration, trial_seed)?;
            let diff: Vec<f64> = est.theta.iter().zip(&full.theta).map(|(a, b)| a - b).collect();
            results.entry(s).or_default().push(TrialResult {
                trial: t,
                heldout_model: model.id().to_string(),
                theta_error: norm(&diff),
                heldout_mae: probability_mae(world, space, &est, &model, &eval)?,
            });
        }
    }
    Ok(results
        .into_iter()
        .map(|(strategy, trials)| {
            let mean_theta_error = mean(&trials.iter().map(|t| t.theta_error).collect::<Vec<_>>());
            let mean_mae = mean(&trials.iter().map(|t| t.heldout_mae).collect::<Vec<_>>());
            StrategyReport {
                strategy,
                trials,
                mean_theta_error,
                mean_mae,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Evolving pool
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub pool_size: usize,
    pub steps: usize,
    pub policy_name: String,
    pub weights: PolicyWeights,
    pub constraints: GlobalConstraints,
    /// Number of non-anchor items in the fixed evaluation batch.
    pub eval_items: usize,
    pub verbosity_bins: usize,
    pub seed: u64,
    pub calibration: CalibrationConfig,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            pool_size: 6,
            steps: 10,
            policy_name: "max-acc".into(),
            weights: PolicyWeights::MAX_ACC,
            constraints: GlobalConstraints::default(),
            eval_items: 100,
            verbosity_bins: DEFAULT_VERBOSITY_BINS,
            seed: 0,
            calibration: CalibrationConfig::new(3),
        }
    }
}

/// One row of the evolving-pool log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub policy: String,
    /// Weighted reward under true accuracy, cost and latency.
    pub reward: f64,
    pub total_cost: f64,
    pub total_latency: f64,
    /// Totals the router planned with, from its own estimates.
    pub planned_cost: f64,
    pub planned_latency: f64,
    pub feasible: bool,
    pub pool: Vec<String>,
    pub pool_hash: String,
    pub onboarded: Option<String>,
    pub evicted: Option<String>,
    /// `(query_id, model_id)` in batch order.
    pub choices: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRun {
    pub records: Vec<StepRecord>,
    pub eval_items: Vec<String>,
    /// Calibration or predictor training runs observed after step 0.
    pub training_runs_after_step0: u64,
}

fn pool_hash(ids: &[String]) -> String {
    format!("{:016x}", fnv1a(ids.join(",").as_bytes()))
}

/// `count` models with `θ_k = θ_0 + k·δ·1` that share `template`'s prices,
/// timings and verbosity.
pub fn dominance_stream(template: &PlantedModel, count: usize, delta: f64) -> Vec<PlantedModel> {
    (0..count)
        .map(|k| {
            let mut m = template.clone();
            m.ability.model_id = format!("stream-{k:03}");
            m.ability.theta.iter_mut().for_each(|t| *t += k as f64 * delta);
            m
        })
        .collect()
}

/// `count` independent models drawn from the world's priors.
pub fn random_stream(world: &SyntheticWorld, count: usize, seed: u64) -> Vec<PlantedModel> {
    (0..count)
        .map(|k| world.sample_model(format!("stream-{k:03}"), seed.wrapping_mul(7_919).wrapping_add(10_000 + k as u64)))
        .collect()
}

struct Pool<'a> {
    world: &'a SyntheticWorld,
    space: &'a CalibratedSpace,
    eval: Vec<usize>,
    queries: Vec<ScoringQuery>,
    tokenizers: TokenizerRegistry,
}

impl Pool<'_> {
    fn onboard(&self, anchors: &AnchorSet, m: &PlantedModel, config: &PoolConfig) -> Result<ModelProfile> {
        let meas = self.world.measure(m, &anchors.item_ids, config.seed)?;
        onboard_model(
            self.space,
            &Onboarding {
                model_id: m.id(),
                measurements: &meas,
                pricing: m.pricing,
                tokenizer_id: WHITESPACE_TOKENIZER,
                anchor_set_id: None,
                verbosity_bins: config.verbosity_bins,
            },
            &config.calibration,
        )
    }

    fn record(
        &self,
        step: usize,
        members: &[(PlantedModel, ModelProfile)],
        config: &PoolConfig,
        onboarded: Option<String>,
        evicted: Option<String>,
    ) -> Result<StepRecord> {
        let profiles: Vec<&ModelProfile> = members.iter().map(|(_, p)| p).collect();
        let est = score_matrix(&self.queries, &profiles, &self.tokenizers)?;
        let a = route_constrained(&est, &config.weights, &config.constraints)?;
        let planted: BTreeMap<&str, &PlantedModel> = members.iter().map(|(m, _)| (m.id(), m)).collect();
        let mut observed = BTreeMap::new();
        let (mut cost, mut latency) = (0.0, 0.0);
        for (c, &i) in a.choices.iter().zip(&self.eval) {
            let m = planted[c.model_id.as_str()];
            let o = Observation {
                accuracy: self.world.true_prob(m, i),
                cost: self.world.true_cost(m, i),
                latency: self.world.true_latency(m, i),
            };
            cost += o.cost;
            latency += o.latency;
            observed.insert((c.query_id.clone(), c.model_id.clone()), o);
        }
        let reward = total_reward(&a, &observed, &config.weights)?;
        let mut pool: Vec<String> = members.iter().map(|(m, _)| m.id().to_string()).collect();
        pool.sort();
        Ok(StepRecord {
            step,
            policy: config.policy_name.clone(),
            reward: reward.total_reward,
            total_cost: cost,
            total_latency: latency,
            planned_cost: a.totals.cost,
            planned_latency: a.totals.latency,
            feasible: a.feasible,
            pool_hash: pool_hash(&pool),
            pool,
            onboarded,
            evicted,
            choices: a
                .choices
                .iter()
                .map(|c| (c.query_id.clone(), c.model_id.clone()))
                .collect(),
        })
    }

    /// Index of the member with the lowest mean estimated utility; ties
    /// evict the smaller model id.
    fn weakest(&self, members: &[(PlantedModel, ModelProfile)], weights: &PolicyWeights) -> Result<usize> {
        let profiles: Vec<&ModelProfile> = members.iter().map(|(_, p)| p).collect();
        let est = score_matrix(&self.queries, &profiles, &self.tokenizers)?;
        let mut worst: Option<(f64, &str, usize)> = None;
        for (k, (_, p)) in members.iter().enumerate() {
            let col = est.model_index(&p.model_id).expect("member is a column");
            let u = (0..est.num_queries())
                .map(|q| {
                    let e = est.get(q, col);
                    weights.utility(e.p, e.cost, e.latency)
                })
                .sum::<f64>()
                / est.num_queries() as f64;
            let better = match worst {
                None => true,
                Some((wu, wid, _)) => u < wu || (u == wu && p.model_id.as_str() < wid),
            };
            if better {
                worst = Some((u, p.model_id.as_str(), k));
            }
        }
        Ok(worst.expect("pool is not empty").2)
    }
}

/// Fixed-size pool simulation. The first `pool_size` stream models form the
/// initial pool (step 0); each later step onboards the next stream model from
/// anchor measurements only, evicts the member with the lowest mean
/// estimated utility on the evaluation batch, routes the batch and logs the
/// true reward.
pub fn simulate_evolving_pool(
    world: &SyntheticWorld,
    space: &CalibratedSpace,
    anchors: &AnchorSet,
    stream: &[PlantedModel],
    config: &PoolConfig,
) -> Result<PoolRun> {
    if config.pool_size < 2 {
        return Err(Error::invalid("pool size must be >= 2"));
    }
    if stream.len() < config.pool_size + config.steps {
        return Err(Error::TooFew {
            what: "stream models",
            minimum: config.pool_size + config.steps,
            found: stream.len(),
        });
    }
    config.weights.validate()?;
    let eval: Vec<usize> = (0..world.items.len())
        .filter(|&i| !anchors.contains(&world.items[i].item_id))
        .take(config.eval_items)
        .collect();
    if eval.is_empty() {
        return Err(Error::invalid("no non-anchor items left for the evaluation batch"));
    }
    let queries = eval
        .iter()
        .map(|&i| {
            let id = &world.items[i].item_id;
            Ok(ScoringQuery {
                query_id: id.clone(),
                item: space.item(id)?.clone(),
                text: world.texts[i].clone(),
            })
        })
        .collect::<Result<_>>()?;
    let pool = Pool {
        world,
        space,
        eval,
        queries,
        tokenizers: TokenizerRegistry::default(),
    };

    let mut members = Vec::with_capacity(config.pool_size + 1);
    for m in &stream[..config.pool_size] {
        members.push((m.clone(), pool.onboard(anchors, m, config)?));
    }
    let mut records = vec![pool.record(0, &members, config, None, None)?];
    let baseline = instrument::training_runs();

    for step in 1..=config.steps {
        let newcomer = &stream[config.pool_size + step - 1];
        members.push((newcomer.clone(), pool.onboard(anchors, newcomer, config)?));
        let k = pool.weakest(&members, &config.weights)?;
        let (gone, _) = members.remove(k);
        records.push(pool.record(
            step,
            &members,
            config,
            Some(newcomer.id().to_string()),
            Some(gone.id().to_string()),
        )?);
    }

    Ok(PoolRun {
        eval_items: pool.eval.iter().map(|&i| world.items[i].item_id.clone()).collect(),
        records,
        training_runs_after_step0: instrument::training_runs() - baseline,
    })
}

/// Metrics CSV: `step,policy,reward,total_cost,total_latency,pool_hash`
/// followed by the planned totals and feasibility flag.
pub fn write_metrics_csv<W: Write>(writer: W, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "step",
        "policy",
        "reward",
        "total_cost",
        "total_latency",
        "pool_hash",
        "planned_cost",
        "planned_latency",
        "feasible",
    ])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.policy.clone(),
            r.reward.to_string(),
            r.total_cost.to_string(),
            r.total_latency.to_string(),
            r.pool_hash.clone(),
            r.planned_cost.to_string(),
            r.planned_latency.to_string(),
            r.feasible.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worlds_are_reproducible() {
        let c = WorldConfig::new(7, 4, 20, 2, 0.0);
        let a = generate_world(&c).unwrap();
        let b = generate_world(&c).unwrap();
        assert_eq!(a.responses, b.responses);
        assert_eq!(a.items, b.items);
        assert_eq!(a.texts, b.texts);
        assert_eq!(a.models, b.models);
    }

    #[test]
    fn graded_noise_free_scores_are_probabilities() {
        let w = generate_world(&WorldConfig::new(1, 3, 10, 2, 0.0)).unwrap();
        for (m, model) in w.models.iter().enumerate() {
            for i in 0..10 {
                assert_eq!(w.responses.get(m, i), Some(w.true_prob(model, i)));
            }
        }
    }

    #[test]
    fn bernoulli_scores_are_binary() {
        let c = WorldConfig {
            mode: ScoreMode::Bernoulli,
            ..WorldConfig::new(2, 3, 10, 2, 0.0)
        };
        let w = generate_world(&c).unwrap();
        for m in 0..3 {
            for i in 0..10 {
                let s = w.responses.get(m, i).unwrap();
                assert!(s == 0.0 || s == 1.0);
            }
        }
    }

    #[test]
    fn planted_priors() {
        let w = generate_world(&WorldConfig::new(3, 2, 400, 3, 0.0)).unwrap();
        assert!(w.items.iter().all(|it| it.alpha.iter().all(|a| *a >= 0.0)));
        let b0: Vec<f64> = w.items.iter().map(|it| it.b[0]).collect();
        assert!(mean(&b0).abs() < 0.2);
        assert_eq!(w.items[7].item_id, "item-0007");
        assert_eq!(w.models[1].id(), "model-001");
    }

    #[test]
    fn true_length_is_monotone_in_complexity() {
        let w = generate_world(&WorldConfig::new(4, 1, 50, 2, 0.0)).unwrap();
        let m = &w.models[0];
        let mut idx: Vec<usize> = (0..50).collect();
        idx.sort_by(|&a, &b| w.true_complexity(a).total_cmp(&w.true_complexity(b)));
        for pair in idx.windows(2) {
            assert!(w.true_length(m, pair[0]) <= w.true_length(m, pair[1]));
        }
    }

    #[test]
    fn noiseless_measurements_match_truth() {
        let w = generate_world(&WorldConfig::new(5, 1, 5, 2, 0.0)).unwrap();
        let m = &w.models[0];
        let ids: Vec<String> = (0..5).map(item_id).collect();
        for (k, r) in w.measure(m, &ids, 0).unwrap().iter().enumerate() {
            assert_eq!(r.output_tokens, w.true_length(m, k).max(1.0));
            assert!((r.latency_seconds - w.true_latency(m, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_world() {
        assert!(generate_world(&WorldConfig::new(0, 0, 5, 2, 0.0)).is_err());
    }
}
