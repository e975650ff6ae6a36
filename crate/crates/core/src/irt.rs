//! Multidimensional two-parameter logistic (2PL) item response model.
//!
//! A model `u` with ability vector `θ` answers item `i` correctly with
//! probability `σ(αᵢ · (θ − bᵢ))`. This module holds the probability model,
//! MAP calibration of a whole response matrix, and zero-shot profiling of a
//! new model from a handful of anchor observations with item parameters held
//! fixed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::instrument;
use crate::math::{bce, sigmoid, softplus, softplus_inv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAbility {
    pub model_id: String,
    pub theta: Vec<f64>,
}

impl LatentAbility {
    pub fn new(model_id: impl Into<String>, theta: Vec<f64>) -> Result<Self> {
        let out = Self {
            model_id: model_id.into(),
            theta,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.is_empty() {
            return Err(Error::invalid(format!("ability `{}` is empty", self.model_id)));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "ability `{}` has a non-finite coordinate",
                self.model_id
            )));
        }
        Ok(())
    }
}

/// Discrimination (`alpha`, elementwise non-negative) and difficulty (`b`)
/// vectors of one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub item_id: String,
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
}

impl ItemParams {
    pub fn new(item_id: impl Into<String>, alpha: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let out = Self {
            item_id: item_id.into(),
            alpha,
            b,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("difficulty vector", self.alpha.len(), self.b.len())?;
        if self.alpha.is_empty() {
            return Err(Error::invalid(format!("item `{}` is empty", self.item_id)));
        }
        if self.alpha.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "item `{}` has a non-finite coordinate",
                self.item_id
            )));
        }
        if self.alpha.iter().any(|&a| a < 0.0) {
            return Err(Error::invalid(format!(
                "item `{}` has a negative discrimination",
                self.item_id
            )));
        }
        Ok(())
    }
}

/// Logit `α · (θ − b)` without any checks.
#[inline]
pub(crate) fn logit(theta: &[f64], alpha: &[f64], b: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(theta.iter().zip(b))
        .map(|(a, (t, d))| a * (t - d))
        .sum()
}

#[inline]
fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Probability of a correct response. The result is kept strictly inside
/// `(0, 1)` even when the logit saturates.
pub fn predict_prob(ability: &LatentAbility, item: &ItemParams) -> Result<f64> {
    check_dim("discrimination vector", ability.theta.len(), item.alpha.len())?;
    check_dim("difficulty vector", ability.theta.len(), item.b.len())?;
    Ok(open_unit(sigmoid(logit(&ability.theta, &item.alpha, &item.b))))
}

// ---------------------------------------------------------------------------
// Response matrix
// ---------------------------------------------------------------------------

/// Dense model × item matrix of graded scores in `[0, 1]`; `None` marks a
/// missing cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    models: Vec<String>,
    items: Vec<String>,
    scores: Vec<Option<f64>>,
}

impl ResponseMatrix {
    pub fn new(models: Vec<String>, items: Vec<String>, scores: Vec<Option<f64>>) -> Result<Self> {
        check_dim("score matrix", models.len() * items.len(), scores.len())?;
        for (kind, ids) in [("model", &models), ("item", &items)] {
            let mut seen = BTreeSet::new();
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Duplicate {
                        kind,
                        id: id.clone(),
                    });
                }
            }
        }
        for (k, s) in scores.iter().enumerate() {
            if let Some(v) = s {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::invalid(format!(
                        "score {v} for ({}, {}) is outside [0, 1]",
                        models[k / items.len()],
                        items[k % items.len()]
                    )));
                }
            }
        }
        Ok(Self {
            models,
            items,
            scores,
        })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn get(&self, model: usize, item: usize) -> Option<f64> {
        self.scores[model * self.items.len() + item]
    }

    pub fn present_cells(&self) -> usize {
        self.scores.iter().filter(|s| s.is_some()).count()
    }

    /// Reads the CSV layout: header `model_id,<item ids…>`, one row per model,
    /// empty cells for missing scores.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 2 {
            return Err(Error::Parse("response CSV needs a model column and at least one item".into()));
        }
        let items: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut models = Vec::new();
        let mut scores = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse(format!(
                    "response CSV row {} has {} fields, expected {}",
                    row + 2,
                    rec.len(),
                    header.len()
                )));
            }
            models.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                let cell = cell.trim();
                if cell.is_empty() {
                    scores.push(None);
                } else {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad score `{cell}` on row {}", row + 2)))?;
                    scores.push(Some(v));
                }
            }
        }
        Self::new(models, items, scores)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["model_id".to_string()];
        header.extend(self.items.iter().cloned());
        w.write_record(&header)?;
        for (m, model) in self.models.iter().enumerate() {
            let mut row = vec![model.clone()];
            for i in 0..self.items.len() {
                row.push(self.get(m, i).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Prior mean of θ; an empty vector means the zero vector.
    pub prior_mean: Vec<f64>,
    /// Prior precision of θ.
    pub prior_precision: f64,
    /// Prior precision of `b` and of the pre-softplus discrimination.
    pub item_prior_precision: f64,
    pub seed: u64,
    /// Gradient-norm stopping tolerance for profiling.
    pub profile_tolerance: f64,
    pub profile_max_iters: usize,
}

impl CalibrationConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            prior_mean: vec![0.0; dim],
            ..Self::default()
        }
    }

    pub fn prior_mean(&self) -> Vec<f64> {
        if self.prior_mean.is_empty() {
            vec![0.0; self.dim]
        } else {
            self.prior_mean.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("latent dimension must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must be in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::invalid("decay_every must be >= 1"));
        }
        if !(self.prior_precision > 0.0) || !(self.item_prior_precision > 0.0) {
            return Err(Error::invalid("prior precisions must be > 0"));
        }
        if !self.prior_mean.is_empty() {
            check_dim("prior mean", self.dim, self.prior_mean.len())?;
        }
        Ok(())
    }
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            epochs: 6000,
            learning_rate: 0.1,
            lr_decay: 0.99,
            decay_every: 100,
            prior_mean: Vec::new(),
            prior_precision: 1.0,
            item_prior_precision: 1.0,
            seed: 0,
            profile_tolerance: 1e-8,
            profile_max_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Regularized loss at every checkpoint (every `decay_every` epochs).
    #[serde(default)]
    pub checkpoints: Vec<f64>,
}

/// The calibrated latent space: item parameters and the abilities of every
/// model seen during calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceDoc", into = "SpaceDoc")]
pub struct CalibratedSpace {
    pub dim: usize,
    pub abilities: BTreeMap<String, LatentAbility>,
    pub items: BTreeMap<String, ItemParams>,
    pub fit_report: FitReport,
}

#[derive(Serialize, Deserialize)]
struct ItemDoc {
    alpha: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpaceDoc {
    #[serde(rename = "D")]
    dim: usize,
    items: BTreeMap<String, ItemDoc>,
    abilities: BTreeMap<String, Vec<f64>>,
    fit_report: FitReport,
}

impl From<CalibratedSpace> for SpaceDoc {
    fn from(s: CalibratedSpace) -> Self {
        SpaceDoc {
            dim: s.dim,
            items: s
                .items
                .into_iter()
                .map(|(k, v)| (k, ItemDoc { alpha: v.alpha, b: v.b }))
                .collect(),
            abilities: s.abilities.into_iter().map(|(k, v)| (k, v.theta)).collect(),
            fit_report: s.fit_report,
        }
    }
}

impl TryFrom<SpaceDoc> for CalibratedSpace {
    type Error = Error;

    fn try_from(d: SpaceDoc) -> Result<Self> {
        let space = CalibratedSpace {
            dim: d.dim,
            items: d
                .items
                .into_iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        ItemParams {
                            item_id: k,
                            alpha: v.alpha,
                            b: v.b,
                        },
                    )
                })
                .collect(),
            abilities: d
                .abilities
                .into_iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        LatentAbility {
                            model_id: k,
                            theta: v,
                        },
                    )
                })
                .collect(),
            fit_report: d.fit_report,
        };
        space.validate()?;
        Ok(space)
    }
}

impl CalibratedSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("space dimension must be >= 1"));
        }
        for a in self.abilities.values() {
            a.validate()?;
            check_dim("ability vector", self.dim, a.dim())?;
        }
        for it in self.items.values() {
            it.validate()?;
            check_dim("item vectors", self.dim, it.dim())?;
        }
        if !self.fit_report.final_loss.is_finite() {
            return Err(Error::invalid("fit report loss is not finite"));
        }
        Ok(())
    }

    pub fn item(&self, id: &str) -> Result<&ItemParams> {
        self.items.get(id).ok_or_else(|| Error::UnknownId {
            kind: "item",
            id: id.to_string(),
        })
    }

    pub fn ability(&self, id: &str) -> Result<&LatentAbility> {
        self.abilities.get(id).ok_or_else(|| Error::UnknownId {
            kind: "model",
            id: id.to_string(),
        })
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Flat parameter vector layout: `[θ (M×D) | b (P×D) | raw α (P×D)]`.
struct Problem<'a> {
    cells: Vec<(usize, usize, f64)>,
    n_models: usize,
    n_items: usize,
    dim: usize,
    prior_mean: Vec<f64>,
    config: &'a CalibrationConfig,
}

impl Problem<'_> {
    fn len(&self) -> usize {
        (self.n_models + 2 * self.n_items) * self.dim
    }

    fn theta_off(&self, m: usize) -> usize {
        m * self.dim
    }

    fn b_off(&self, i: usize) -> usize {
        (self.n_models + i) * self.dim
    }

    fn raw_off(&self, i: usize) -> usize {
        (self.n_models + self.n_items + i) * self.dim
    }

    /// Regularized negative log-likelihood and (optionally) its gradient.
    fn evaluate(&self, params: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let d = self.dim;
        let alpha: Vec<f64> = params[self.raw_off(0)..].iter().map(|&r| softplus(r)).collect();
        let mut loss = 0.0;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        for &(m, i, y) in &self.cells {
            let th = &params[self.theta_off(m)..self.theta_off(m) + d];
            let b = &params[self.b_off(i)..self.b_off(i) + d];
            let a = &alpha[i * d..(i + 1) * d];
            let z = logit(th, a, b);
            let p = sigmoid(z);
            loss += bce(y, p);
            if let Some(g) = grad.as_deref_mut() {
                let r = p - y;
                let raw = &params[self.raw_off(i)..self.raw_off(i) + d];
                for k in 0..d {
                    let diff = th[k] - b[k];
                    g[self.theta_off(m) + k] += r * a[k];
                    g[self.b_off(i) + k] -= r * a[k];
                    g[self.raw_off(i) + k] += r * diff * sigmoid(raw[k]);
                }
            }
        }
        let u = self.config.prior_precision;
        let v = self.config.item_prior_precision;
        for m in 0..self.n_models {
            for k in 0..d {
                let j = self.theta_off(m) + k;
                let dev = params[j] - self.prior_mean[k];
                loss += 0.5 * u * dev * dev;
                if let Some(g) = grad.as_deref_mut() {
                    g[j] += u * dev;
                }
            }
        }
        for j in self.b_off(0)..self.len() {
            loss += 0.5 * v * params[j] * params[j];
            if let Some(g) = grad.as_deref_mut() {
                g[j] += v * params[j];
            }
        }
        loss
    }
}

/// MAP calibration of the full response matrix.
///
/// Full-batch Adam on BCE over present cells plus Gaussian prior penalties.
/// The learning rate decays by `lr_decay` every `decay_every` epochs. At each
/// checkpoint the loss is compared against the previous checkpoint; if it went
/// up, parameters roll back to the previous checkpoint and the step size is
/// halved, so the recorded checkpoint losses never increase.
pub fn fit_calibration(responses: &ResponseMatrix, config: &CalibrationConfig) -> Result<CalibratedSpace> {
    config.validate()?;
    instrument::record_calibration();
    let n_models = responses.models.len();
    let n_items = responses.items.len();
    if n_models == 0 || n_items == 0 {
        return Err(Error::invalid("response matrix is empty"));
    }
    let mut cells = Vec::with_capacity(responses.present_cells());
    let mut model_seen = vec![false; n_models];
    let mut item_seen = vec![false; n_items];
    for m in 0..n_models {
        for i in 0..n_items {
            if let Some(y) = responses.get(m, i) {
                cells.push((m, i, y));
                model_seen[m] = true;
                item_seen[i] = true;
            }
        }
    }
    if let Some(m) = model_seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("model `{}` has no scores", responses.models[m])));
    }
    if let Some(i) = item_seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("item `{}` has no scores", responses.items[i])));
    }

    let dim = config.dim;
    let problem = Problem {
        cells,
        n_models,
        n_items,
        dim,
        prior_mean: config.prior_mean(),
        config,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    let mut params = vec![0.0; problem.len()];
    for m in 0..n_models {
        for k in 0..dim {
            params[problem.theta_off(m) + k] = problem.prior_mean[k] + init.sample(&mut rng);
        }
    }
    for j in problem.b_off(0)..problem.raw_off(0) {
        params[j] = init.sample(&mut rng);
    }
    let raw_one = softplus_inv(1.0);
    for j in problem.raw_off(0)..problem.len() {
        params[j] = raw_one + init.sample(&mut rng);
    }

    let mut grad = vec![0.0; problem.len()];
    let mut adam = Adam::new(problem.len());
    let mut backoff = 1.0;
    let mut checkpoints = Vec::new();
    let mut snapshot = params.clone();
    let mut snapshot_loss = f64::INFINITY;

    for epoch in 0..config.epochs {
        let loss = problem.evaluate(&params, Some(&mut grad));
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                stage: "epoch",
                index: epoch,
            });
        }
        if epoch % config.decay_every == 0 {
            if loss > snapshot_loss {
                params.copy_from_slice(&snapshot);
                adam.reset();
                backoff *= 0.5;
                checkpoints.push(snapshot_loss);
                problem.evaluate(&params, Some(&mut grad));
            } else {
                snapshot.copy_from_slice(&params);
                snapshot_loss = loss;
                checkpoints.push(loss);
            }
        }
        let lr = config.learning_rate
            * config.lr_decay.powi((epoch / config.decay_every) as i32)
            * backoff;
        adam.step(&mut params, &grad, lr);
    }

    let mut final_loss = problem.evaluate(&params, None);
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: "epoch",
            index: config.epochs,
        });
    }
    if final_loss > snapshot_loss {
        params.copy_from_slice(&snapshot);
        final_loss = snapshot_loss;
    }

    let abilities = responses
        .models
        .iter()
        .enumerate()
        .map(|(m, id)| {
            let off = problem.theta_off(m);
            (
                id.clone(),
                LatentAbility {
                    model_id: id.clone(),
                    theta: params[off..off + dim].to_vec(),
                },
            )
        })
        .collect();
    let items = responses
        .items
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let b = params[problem.b_off(i)..problem.b_off(i) + dim].to_vec();
            let alpha = params[problem.raw_off(i)..problem.raw_off(i) + dim]
                .iter()
                .map(|&r| softplus(r))
                .collect();
            (
                id.clone(),
                ItemParams {
                    item_id: id.clone(),
                    alpha,
                    b,
                },
            )
        })
        .collect();

    let space = CalibratedSpace {
        dim,
        abilities,
        items,
        fit_report: FitReport {
            final_loss,
            epochs: config.epochs,
            seed: config.seed,
            checkpoints,
        },
    };
    space.validate()?;
    Ok(space)
}

/// The regularized training objective of `space` on `responses`; the same
/// quantity `fit_calibration` minimizes.
pub fn calibration_loss(
    responses: &ResponseMatrix,
    space: &CalibratedSpace,
    config: &CalibrationConfig,
) -> Result<f64> {
    let mut loss = 0.0;
    let mu = config.prior_mean();
    check_dim("prior mean", space.dim, mu.len())?;
    for (m, mid) in responses.models.iter().enumerate() {
        let ab = space.ability(mid)?;
        for (i, iid) in responses.items.iter().enumerate() {
            if let Some(y) = responses.get(m, i) {
                loss += bce(y, predict_prob(ab, space.item(iid)?)?);
            }
        }
        loss += 0.5
            * config.prior_precision
            * ab.theta.iter().zip(&mu).map(|(t, m)| (t - m) * (t - m)).sum::<f64>();
    }
    for it in space.items.values() {
        let raw: f64 = it.alpha.iter().map(|&a| softplus_inv(a).powi(2)).sum();
        let b: f64 = it.b.iter().map(|x| x * x).sum();
        loss += 0.5 * config.item_prior_precision * (raw + b);
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Profiling
// ---------------------------------------------------------------------------

/// Graded score of a model on one anchor item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilingObservation {
    pub item_id: String,
    pub score: f64,
}

impl ProfilingObservation {
    pub fn new(item_id: impl Into<String>, score: f64) -> Self {
        Self {
            item_id: item_id.into(),
            score,
        }
    }
}

fn resolve<'s>(
    observations: &[ProfilingObservation],
    space: &'s CalibratedSpace,
) -> Result<Vec<(&'s ItemParams, f64)>> {
    if observations.is_empty() {
        return Err(Error::TooFew {
            what: "profiling observations",
            minimum: 1,
            found: 0,
        });
    }
    observations
        .iter()
        .map(|o| {
            if !(0.0..=1.0).contains(&o.score) {
                return Err(Error::invalid(format!(
                    "score {} for `{}` is outside [0, 1]",
                    o.score, o.item_id
                )));
            }
            Ok((space.item(&o.item_id)?, o.score))
        })
        .collect()
}

/// Stable form of the profiling objective: `Σ BCE(y, σ(z)) + u/2 ‖θ − μ‖²`,
/// with BCE written as `softplus(z) − y z`.
fn profile_objective(obs: &[(&ItemParams, f64)], theta: &[f64], mu: &[f64], precision: f64) -> f64 {
    let data: f64 = obs
        .iter()
        .map(|(it, y)| {
            let z = logit(theta, &it.alpha, &it.b);
            softplus(z) - y * z
        })
        .sum();
    let prior: f64 = theta.iter().zip(mu).map(|(t, m)| (t - m) * (t - m)).sum();
    data + 0.5 * precision * prior
}

fn profile_grad_hess(
    obs: &[(&ItemParams, f64)],
    theta: &[f64],
    mu: &[f64],
    precision: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = theta.len();
    let mut g = DVector::from_iterator(d, theta.iter().zip(mu).map(|(t, m)| precision * (t - m)));
    let mut h = DMatrix::identity(d, d) * precision;
    for (it, y) in obs {
        let p = sigmoid(logit(theta, &it.alpha, &it.b));
        let w = p * (1.0 - p);
        for r in 0..d {
            g[r] += (p - y) * it.alpha[r];
            for c in 0..d {
                h[(r, c)] += w * it.alpha[r] * it.alpha[c];
            }
        }
    }
    (g, h)
}

/// Gradient of the profiling objective at `theta`.
pub fn profile_gradient(
    observations: &[ProfilingObservation],
    space: &CalibratedSpace,
    config: &CalibrationConfig,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let obs = resolve(observations, space)?;
    check_dim("theta", space.dim, theta.len())?;
    let mu = config.prior_mean();
    Ok(profile_grad_hess(&obs, theta, &mu, config.prior_precision).0.as_slice().to_vec())
}

/// Estimates a new model's ability from anchor scores with item parameters
/// held fixed.
///
/// The objective is strictly convex in θ, so a damped Newton iteration from
/// the prior mean converges to the unique minimizer; iteration stops once the
/// gradient norm falls below `config.profile_tolerance`.
pub fn profile_new_model(
    model_id: &str,
    observations: &[ProfilingObservation],
    space: &CalibratedSpace,
    config: &CalibrationConfig,
) -> Result<LatentAbility> {
    let obs = resolve(observations, space)?;
    check_dim("prior mean", space.dim, config.prior_mean().len())?;
    let theta = profile_items(&obs, config)?;
    LatentAbility::new(model_id, theta)
}

/// Profiling against explicit item parameters.
pub fn profile_items(obs: &[(&ItemParams, f64)], config: &CalibrationConfig) -> Result<Vec<f64>> {
    let mu = config.prior_mean();
    let u = config.prior_precision;
    if !(u > 0.0) {
        return Err(Error::invalid("prior precision must be > 0"));
    }
    for (it, _) in obs {
        check_dim("item vectors", mu.len(), it.dim())?;
    }
    let mut theta = mu.clone();
    let mut f = profile_objective(obs, &theta, &mu, u);
    for _ in 0..config.profile_max_iters {
        let (g, h) = profile_grad_hess(obs, &theta, &mu, u);
        if g.norm() <= config.profile_tolerance {
            return Ok(theta);
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::Numerical("profiling Hessian is not positive definite".into()))?
            .solve(&g);
        let slope = g.dot(&step);
        if slope <= 1e-12 * f.abs().max(1.0) {
            // the predicted decrease is below the round-off of f, so the line
            // search cannot tell steps apart; inside the quadratic region the
            // plain Newton step is the right move
            theta = theta.iter().zip(step.iter()).map(|(x, s)| x - s).collect();
            f = profile_objective(obs, &theta, &mu, u);
            continue;
        }
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(x, s)| x - t * s).collect();
            let fc = profile_objective(obs, &cand, &mu, u);
            if fc <= f - 1e-4 * t * slope {
                theta = cand;
                f = fc;
                break;
            }
            if t < 1e-12 {
                // Armijo stalls on round-off once the gradient is tiny; the
                // full Newton step is then still the best move.
                theta = theta.iter().zip(step.iter()).map(|(x, s)| x - s).collect();
                f = profile_objective(obs, &theta, &mu, u);
                break;
            }
            t *= 0.5;
        }
    }
    let (g, _) = profile_grad_hess(obs, &theta, &mu, u);
    if g.norm() <= config.profile_tolerance.max(1e-6) {
        return Ok(theta);
    }
    Err(Error::Numerical(format!(
        "profiling did not converge (gradient norm {:.3e})",
        g.norm()
    )))
}
