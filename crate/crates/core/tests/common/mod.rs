//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

use std::collections::BTreeMap;

use latent_router::estimators::{calibrate_verbosity, LatencyProfile, LengthRecord, ModelPricing};
use latent_router::irt::{CalibratedSpace, FitReport, ItemParams, LatentAbility};
use latent_router::predictor::{ClusterAssignment, PredictorConfig, PredictorModel};
use latent_router::registry::{ModelProfile, ProfileMetadata, Registry};
use latent_router::router::{EstimateMatrix, GlobalConstraints, PolicyWeights, QueryModelEstimate};
use rand::Rng;

/// Result of exhaustive enumeration over every assignment.
#[derive(Debug, Clone)]
pub struct BruteForce {
    pub feasible: bool,
    pub objective: f64,
    pub choice: Vec<usize>,
}

fn tol(rhs: f64) -> f64 {
    1e-9 * rhs.abs().max(1.0)
}

/// Enumerates all `|M|^|Q|` assignments.
pub fn brute_force(est: &EstimateMatrix, w: &PolicyWeights, c: &GlobalConstraints) -> BruteForce {
    let (nq, nm) = (est.num_queries(), est.num_models());
    let mut idx = vec![0usize; nq];
    let mut best = BruteForce {
        feasible: false,
        objective: f64::NEG_INFINITY,
        choice: vec![],
    };
    loop {
        let (mut u, mut cost, mut lat, mut acc) = (0.0, 0.0, 0.0, 0.0);
        for (q, &m) in idx.iter().enumerate() {
            let e = est.get(q, m);
            u += w.w_p * e.p - w.w_c * e.cost - w.w_t * e.latency;
            cost += e.cost;
            lat += e.latency;
            acc += e.p;
        }
        let mean_acc = acc / nq as f64;
        let ok = c.max_total_cost.map_or(true, |b| cost <= b + tol(b))
            && c.max_total_latency.map_or(true, |b| lat <= b + tol(b))
            && c.min_mean_accuracy.map_or(true, |b| mean_acc >= b - tol(b));
        if ok && u > best.objective {
            best = BruteForce {
                feasible: true,
                objective: u,
                choice: idx.clone(),
            };
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == nq {
                return best;
            }
            idx[k] += 1;
            if idx[k] < nm {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

pub fn random_matrix<R: Rng>(rng: &mut R, nq: usize, nm: usize) -> EstimateMatrix {
    let mut cells = Vec::with_capacity(nq * nm);
    for q in 0..nq {
        for m in 0..nm {
            cells.push(QueryModelEstimate {
                query_id: format!("q{q}"),
                model_id: format!("m{m}"),
                p: rng.gen_range(0.0..1.0),
                cost: rng.gen_range(0.0..2.0),
                latency: rng.gen_range(0.0..3.0),
            });
        }
    }
    EstimateMatrix::from_estimates(cells).expect("complete grid")
}

/// Random weights on the simplex.
pub fn random_weights<R: Rng>(rng: &mut R) -> PolicyWeights {
    let a: f64 = rng.gen_range(0.0..1.0);
    let b: f64 = rng.gen_range(0.0..1.0);
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    PolicyWeights {
        w_p: lo,
        w_c: hi - lo,
        w_t: 1.0 - hi,
    }
}

/// Budgets drawn between the smallest and largest achievable totals, so they
/// are usually active. Each budget is present with probability 1/2, and at
/// least one is always set.
pub fn random_constraints<R: Rng>(rng: &mut R, est: &EstimateMatrix) -> GlobalConstraints {
    let (nq, nm) = (est.num_queries(), est.num_models());
    let span = |f: &dyn Fn(&QueryModelEstimate) -> f64| {
        let (mut lo, mut hi) = (0.0, 0.0);
        for q in 0..nq {
            let vals: Vec<f64> = (0..nm).map(|m| f(est.get(q, m))).collect();
            lo += vals.iter().cloned().fold(f64::INFINITY, f64::min);
            hi += vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        (lo, hi)
    };
    let mut c = GlobalConstraints::default();
    while c.is_empty() {
        if rng.gen_bool(0.5) {
            let (lo, hi) = span(&|e| e.cost);
            c.max_total_cost = Some(rng.gen_range(lo * 0.9..=hi));
        }
        if rng.gen_bool(0.5) {
            let (lo, hi) = span(&|e| e.latency);
            c.max_total_latency = Some(rng.gen_range(lo * 0.9..=hi));
        }
        if rng.gen_bool(0.5) {
            let (lo, hi) = span(&|e| e.p);
            c.min_mean_accuracy = Some((rng.gen_range(lo..=hi * 1.05) / nq as f64).min(1.0));
        }
    }
    c
}

fn report() -> FitReport {
    FitReport {
        final_loss: 0.0,
        epochs: 1,
        seed: 0,
        checkpoints: vec![],
    }
}

/// A two-dimensional space with a handful of fixed items.
pub fn fixture_space() -> CalibratedSpace {
    let items: BTreeMap<String, ItemParams> = (0..12)
        .map(|k| {
            let t = k as f64;
            let it = ItemParams::new(
                format!("fx-{k:02}"),
                vec![0.4 + 0.1 * t, 1.6 - 0.1 * t],
                vec![-1.0 + 0.2 * t, 0.8 - 0.15 * t],
            )
            .unwrap();
            (it.item_id.clone(), it)
        })
        .collect();
    CalibratedSpace {
        dim: 2,
        abilities: BTreeMap::new(),
        items,
        fit_report: report(),
    }
}

/// A routable profile whose verbosity is `base + slope·s` over the fixture
/// items.
pub fn fixture_profile(id: &str, theta: [f64; 2], price: f64, ttft: f64, tpot: f64, base: f64) -> ModelProfile {
    let space = fixture_space();
    let records: Vec<LengthRecord> = space
        .items
        .values()
        .map(|it| {
            let s = it.alpha[0] * it.b[0] + it.alpha[1] * it.b[1];
            LengthRecord {
                item_id: it.item_id.clone(),
                score: s,
                output_tokens: base + 40.0 * s.max(-1.0),
            }
        })
        .collect();
    ModelProfile {
        model_id: id.into(),
        ability: LatentAbility::new(id, theta.to_vec()).unwrap(),
        pricing: ModelPricing::new(price, 2.0 * price).unwrap(),
        verbosity: Some(calibrate_verbosity(id, &records, 4).unwrap()),
        latency: Some(LatencyProfile {
            ttft,
            tpot,
            residual_rms: 0.0,
            clamped: false,
        }),
        tokenizer_id: "whitespace".into(),
        metadata: ProfileMetadata::default(),
    }
}

/// Registry with a big accurate model, a small cheap one, a fast mid-tier
/// one, and an untrained hashing predictor so text-only queries work.
pub fn fixture_registry() -> Registry {
    let mut reg = Registry::new(fixture_space()).unwrap();
    for p in [
        fixture_profile("big", [1.5, 1.2], 1e-3, 0.8, 0.02, 120.0),
        fixture_profile("small", [-0.5, 0.0], 1e-5, 0.2, 0.01, 60.0),
        fixture_profile("fast", [0.3, 0.6], 2e-4, 0.05, 0.004, 80.0),
    ] {
        reg.register_model(p, false).unwrap();
    }
    let config = PredictorConfig {
        trunk_widths: vec![16, 16],
        head_width: 8,
        seed: 11,
        ..PredictorConfig::default()
    };
    let predictor = PredictorModel::init(
        config.embedding.dim(),
        2,
        ClusterAssignment::singletons(2),
        vec![0.0, 0.0],
        &config,
    )
    .unwrap();
    reg.set_predictor(predictor).unwrap();
    reg
}

/// A request mixing latent overrides and text-only queries, with an active
/// cost budget.
pub fn fixture_request_line(id: &str) -> String {
    serde_json::json!({
        "id": id,
        "queries": [
            {"id": "q-hard", "text": "prove that the sum of the first n odd numbers is n squared",
             "latent": {"alpha": [1.4, 0.9], "b": [1.2, 0.7]}},
            {"id": "q-easy", "text": "what is 2 + 2?",
             "latent": {"alpha": [0.5, 0.5], "b": [-1.5, -1.0]}},
            {"id": "q-mid", "text": "explain how a hash table handles collisions",
             "latent": {"alpha": [0.8, 1.1], "b": [0.1, 0.3]}},
            {"id": "q-text", "text": "list three prime numbers greater than 100"}
        ],
        "weights": {"p": 0.8, "c": 0.1, "t": 0.1},
        "constraints": {"max_total_latency": 9.0}
    })
    .to_string()
}
