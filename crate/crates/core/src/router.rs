//! Query-to-model assignment.
//!
//! Every (query, model) pair gets an estimated accuracy `p`, cost and
//! latency. The utility of a pair is `w_p·p − w_c·cost − w_t·latency`. Without
//! global budgets the problem separates per query; with budgets it is a
//! multiple-choice knapsack solved by branch-and-bound on small instances and
//! by Lagrangian relaxation with greedy repair on large ones.
//!
//! Ties are always broken towards the lexicographically smallest model id:
//! the estimate matrix keeps models sorted by id and every search visits
//! equal-utility candidates in column order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    complexity_score, cost_with_length, count_input_tokens, estimate_latency, estimate_output_length,
    TokenizerRegistry,
};
use crate::irt::{predict_prob, ItemParams};
use crate::registry::ModelProfile;

const WEIGHT_SUM_TOL: f64 = 1e-9;
/// Relative tolerance used when checking budget rows.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    #[serde(rename = "p", alias = "w_p")]
    pub w_p: f64,
    #[serde(rename = "c", alias = "w_c")]
    pub w_c: f64,
    #[serde(rename = "t", alias = "w_t")]
    pub w_t: f64,
}

impl PolicyWeights {
    pub const MAX_ACC: PolicyWeights = PolicyWeights {
        w_p: 0.8,
        w_c: 0.1,
        w_t: 0.1,
    };
    pub const MIN_COST: PolicyWeights = PolicyWeights {
        w_p: 0.1,
        w_c: 0.8,
        w_t: 0.1,
    };
    pub const MIN_LAT: PolicyWeights = PolicyWeights {
        w_p: 0.1,
        w_c: 0.1,
        w_t: 0.8,
    };
    pub const BALANCED: PolicyWeights = PolicyWeights {
        w_p: 0.5,
        w_c: 0.3,
        w_t: 0.2,
    };

    /// Named presets, as accepted by [`PolicyWeights::preset`].
    pub const PRESETS: [(&'static str, PolicyWeights); 4] = [
        ("max-acc", Self::MAX_ACC),
        ("min-cost", Self::MIN_COST),
        ("min-lat", Self::MIN_LAT),
        ("balanced", Self::BALANCED),
    ];

    pub fn new(w_p: f64, w_c: f64, w_t: f64) -> Result<Self> {
        let w = Self { w_p, w_c, w_t };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_p, self.w_c, self.w_t];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("policy weights must be finite and >= 0"));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("policy weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Case-insensitive lookup of a named preset.
    pub fn preset(name: &str) -> Option<Self> {
        let key = name.to_ascii_lowercase().replace('_', "-");
        Self::PRESETS.iter().find(|(n, _)| *n == key).map(|(_, w)| *w)
    }

    pub fn utility(&self, p: f64, cost: f64, latency: f64) -> f64 {
        self.w_p * p - self.w_c * cost - self.w_t * latency
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalConstraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_total_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_total_latency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_mean_accuracy: Option<f64>,
}

impl GlobalConstraints {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_total_cost", self.max_total_cost),
            ("max_total_latency", self.max_total_latency),
            ("min_mean_accuracy", self.min_mean_accuracy),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!("{name} must be finite and >= 0")));
                }
            }
        }
        if self.min_mean_accuracy.is_some_and(|a| a > 1.0) {
            return Err(Error::invalid("min_mean_accuracy must be <= 1"));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.max_total_cost.is_none() && self.max_total_latency.is_none() && self.min_mean_accuracy.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryModelEstimate {
    pub query_id: String,
    pub model_id: String,
    pub p: f64,
    pub cost: f64,
    pub latency: f64,
}

impl QueryModelEstimate {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!(
                "p = {} out of [0, 1] for ({}, {})",
                self.p, self.query_id, self.model_id
            )));
        }
        if !(self.cost.is_finite() && self.cost >= 0.0 && self.latency.is_finite() && self.latency >= 0.0) {
            return Err(Error::invalid(format!(
                "cost and latency must be finite and >= 0 for ({}, {})",
                self.query_id, self.model_id
            )));
        }
        Ok(())
    }
}

/// Dense query × model grid of estimates. Queries keep their input order;
/// models are sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateMatrix {
    query_ids: Vec<String>,
    model_ids: Vec<String>,
    /// Query-major cells.
    cells: Vec<QueryModelEstimate>,
}

impl EstimateMatrix {
    /// Builds the grid from estimates in any order. Every (query, model)
    /// pair must appear exactly once.
    pub fn from_estimates(estimates: Vec<QueryModelEstimate>) -> Result<Self> {
        let mut query_ids = Vec::new();
        let mut seen_q = BTreeSet::new();
        let mut models = BTreeSet::new();
        for e in &estimates {
            e.validate()?;
            if seen_q.insert(e.query_id.clone()) {
                query_ids.push(e.query_id.clone());
            }
            models.insert(e.model_id.clone());
        }
        let model_ids: Vec<String> = models.into_iter().collect();
        if query_ids.is_empty() {
            return Err(Error::invalid("estimate matrix has no queries"));
        }
        let q_index: BTreeMap<&str, usize> = query_ids.iter().enumerate().map(|(i, q)| (q.as_str(), i)).collect();
        let m_index: BTreeMap<&str, usize> = model_ids.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
        let nm = model_ids.len();
        let mut slots: Vec<Option<QueryModelEstimate>> = vec![None; query_ids.len() * nm];
        for e in estimates {
            let k = q_index[e.query_id.as_str()] * nm + m_index[e.model_id.as_str()];
            if slots[k].is_some() {
                return Err(Error::Duplicate {
                    kind: "estimate",
                    id: format!("{}/{}", e.query_id, e.model_id),
                });
            }
            slots[k] = Some(e);
        }
        let cells = slots
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                c.ok_or_else(|| {
                    Error::invalid(format!(
                        "missing estimate for ({}, {})",
                        query_ids[k / nm],
                        model_ids[k % nm]
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            query_ids,
            model_ids,
            cells,
        })
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn num_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn get(&self, q: usize, m: usize) -> &QueryModelEstimate {
        &self.cells[q * self.model_ids.len() + m]
    }

    pub fn row(&self, q: usize) -> &[QueryModelEstimate] {
        let nm = self.model_ids.len();
        &self.cells[q * nm..(q + 1) * nm]
    }

    pub fn cells(&self) -> &[QueryModelEstimate] {
        &self.cells
    }

    pub fn model_index(&self, model_id: &str) -> Option<usize> {
        self.model_ids.binary_search_by(|m| m.as_str().cmp(model_id)).ok()
    }
}

/// A query to be scored: its id, predicted item parameters and raw text.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringQuery {
    pub query_id: String,
    pub item: ItemParams,
    pub text: String,
}

/// Accuracy, cost and latency estimates for every (query, profile) pair.
pub fn score_matrix(
    queries: &[ScoringQuery],
    profiles: &[&ModelProfile],
    tokenizers: &TokenizerRegistry,
) -> Result<EstimateMatrix> {
    if profiles.is_empty() {
        return Err(Error::invalid("no model profiles to score against"));
    }
    let mut out = Vec::with_capacity(queries.len() * profiles.len());
    for prof in profiles {
        let verbosity = prof.verbosity.as_ref().ok_or_else(|| {
            Error::invalid(format!("model `{}` has no verbosity table", prof.model_id))
        })?;
        let latency = prof
            .latency
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("model `{}` has no latency profile", prof.model_id)))?;
        if !tokenizers.contains(&prof.tokenizer_id) {
            return Err(Error::invalid(format!(
                "model `{}` uses unknown tokenizer `{}`",
                prof.model_id, prof.tokenizer_id
            )));
        }
        for q in queries {
            let p = predict_prob(&prof.ability, &q.item)?;
            let input = count_input_tokens(tokenizers, &prof.tokenizer_id, &q.text)? as f64;
            let length = estimate_output_length(verbosity, complexity_score(&q.item)?);
            out.push(QueryModelEstimate {
                query_id: q.query_id.clone(),
                model_id: prof.model_id.clone(),
                p,
                cost: cost_with_length(&prof.pricing, input, length),
                latency: estimate_latency(latency, length),
            });
        }
    }
    EstimateMatrix::from_estimates(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Heuristic,
}

impl Solver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Solver::Exact => "exact",
            Solver::Heuristic => "heuristic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub query_id: String,
    pub model_id: String,
    /// Utility of the pair under the weights (and normalization) used.
    pub utility: f64,
}

/// Remaining headroom per present constraint: `budget − total` for cost and
/// latency, `mean p − p_min` for accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSlack {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub cost: f64,
    pub latency: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// One entry per query, in matrix order.
    pub choices: Vec<Choice>,
    pub objective_value: f64,
    pub feasible: bool,
    pub constraint_slack: ConstraintSlack,
    pub totals: Totals,
    pub solver: Solver,
    /// Upper bound on `optimum − objective_value`; zero for exact solves.
    pub gap: f64,
}

impl Assignment {
    pub fn model_for(&self, query_id: &str) -> Option<&str> {
        self.choices
            .iter()
            .find(|c| c.query_id == query_id)
            .map(|c| c.model_id.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteOptions {
    /// Min-max normalize p, cost and latency over the batch before weighting.
    pub normalize: bool,
    /// Largest `|Q|·|M|` solved by branch-and-bound.
    pub exact_threshold: usize,
    /// Search nodes after which branch-and-bound gives up and reports the
    /// best assignment found with tag "heuristic".
    pub node_limit: u64,
    pub lagrangian_iterations: usize,
}

impl Default for RouteOptions {
    fn default() -> Self {
        Self {
            normalize: false,
            exact_threshold: 4096,
            node_limit: 2_000_000,
            lagrangian_iterations: 300,
        }
    }
}

/// Per-cell utilities, row-major.
fn utilities(est: &EstimateMatrix, w: &PolicyWeights, normalize: bool) -> Vec<f64> {
    if !normalize {
        return est.cells.iter().map(|c| w.utility(c.p, c.cost, c.latency)).collect();
    }
    let range = |f: fn(&QueryModelEstimate) -> f64| {
        let lo = est.cells.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = est.cells.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        move |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }
    };
    let (np, nc, nt) = (range(|c| c.p), range(|c| c.cost), range(|c| c.latency));
    est.cells
        .iter()
        .map(|c| w.utility(np(c.p), nc(c.cost), nt(c.latency)))
        .collect()
}

/// A budget row in `Σ a·x ≤ rhs` form.
struct Row {
    coef: Vec<f64>,
    rhs: f64,
}

impl Row {
    fn tol(&self) -> f64 {
        FEASIBILITY_TOL * self.rhs.abs().max(1.0)
    }
}

fn budget_rows(est: &EstimateMatrix, c: &GlobalConstraints) -> Vec<Row> {
    let mut rows = Vec::new();
    if let Some(b) = c.max_total_cost {
        rows.push(Row {
            coef: est.cells.iter().map(|e| e.cost).collect(),
            rhs: b,
        });
    }
    if let Some(b) = c.max_total_latency {
        rows.push(Row {
            coef: est.cells.iter().map(|e| e.latency).collect(),
            rhs: b,
        });
    }
    if let Some(a) = c.min_mean_accuracy {
        rows.push(Row {
            coef: est.cells.iter().map(|e| -e.p).collect(),
            rhs: -a * est.num_queries() as f64,
        });
    }
    rows
}

fn row_usage(row: &Row, picks: &[usize], nm: usize) -> f64 {
    picks.iter().enumerate().map(|(q, &m)| row.coef[q * nm + m]).sum()
}

fn is_feasible(rows: &[Row], picks: &[usize], nm: usize) -> bool {
    rows.iter().all(|r| row_usage(r, picks, nm) <= r.rhs + r.tol())
}

fn build_assignment(
    est: &EstimateMatrix,
    u: &[f64],
    picks: &[usize],
    constraints: &GlobalConstraints,
    solver: Solver,
    gap: f64,
) -> Assignment {
    let nm = est.num_models();
    let nq = est.num_queries();
    let mut totals = Totals::default();
    let mut objective = 0.0;
    let choices = picks
        .iter()
        .enumerate()
        .map(|(q, &m)| {
            let c = est.get(q, m);
            totals.cost += c.cost;
            totals.latency += c.latency;
            totals.mean_accuracy += c.p;
            objective += u[q * nm + m];
            Choice {
                query_id: c.query_id.clone(),
                model_id: c.model_id.clone(),
                utility: u[q * nm + m],
            }
        })
        .collect();
    totals.mean_accuracy /= nq as f64;
    let slack = ConstraintSlack {
        cost: constraints.max_total_cost.map(|b| b - totals.cost),
        latency: constraints.max_total_latency.map(|b| b - totals.latency),
        accuracy: constraints.min_mean_accuracy.map(|a| totals.mean_accuracy - a),
    };
    let rows = budget_rows(est, constraints);
    Assignment {
        choices,
        objective_value: objective,
        feasible: is_feasible(&rows, picks, nm),
        constraint_slack: slack,
        totals,
        solver,
        gap,
    }
}

/// Column of the best utility in row `q`; ties go to the smaller index.
fn row_argmax(u: &[f64], q: usize, nm: usize) -> usize {
    let row = &u[q * nm..(q + 1) * nm];
    let mut best = 0;
    for m in 1..nm {
        if row[m] > row[best] {
            best = m;
        }
    }
    best
}

fn check_inputs(est: &EstimateMatrix, w: &PolicyWeights) -> Result<()> {
    w.validate()?;
    if est.num_models() == 0 {
        return Err(Error::invalid("no models to route to"));
    }
    Ok(())
}

/// Per-query argmax of the utility.
pub fn route_unconstrained(est: &EstimateMatrix, weights: &PolicyWeights) -> Result<Assignment> {
    route_unconstrained_with(est, weights, &RouteOptions::default())
}

pub fn route_unconstrained_with(
    est: &EstimateMatrix,
    weights: &PolicyWeights,
    options: &RouteOptions,
) -> Result<Assignment> {
    check_inputs(est, weights)?;
    let u = utilities(est, weights, options.normalize);
    let nm = est.num_models();
    let picks: Vec<usize> = (0..est.num_queries()).map(|q| row_argmax(&u, q, nm)).collect();
    Ok(build_assignment(
        est,
        &u,
        &picks,
        &GlobalConstraints::default(),
        Solver::Exact,
        0.0,
    ))
}

pub fn route_constrained(
    est: &EstimateMatrix,
    weights: &PolicyWeights,
    constraints: &GlobalConstraints,
) -> Result<Assignment> {
    route_constrained_with(est, weights, constraints, &RouteOptions::default())
}

/// Maximizes total utility subject to the global budgets. When no
/// assignment satisfies them the result has `feasible == false` and holds
/// the unconstrained argmax (exact solver) or the repaired heuristic point.
pub fn route_constrained_with(
    est: &EstimateMatrix,
    weights: &PolicyWeights,
    constraints: &GlobalConstraints,
    options: &RouteOptions,
) -> Result<Assignment> {
    check_inputs(est, weights)?;
    constraints.validate()?;
    let u = utilities(est, weights, options.normalize);
    let nq = est.num_queries();
    let nm = est.num_models();
    let greedy: Vec<usize> = (0..nq).map(|q| row_argmax(&u, q, nm)).collect();
    let rows = budget_rows(est, constraints);
    if is_feasible(&rows, &greedy, nm) {
        return Ok(build_assignment(est, &u, &greedy, constraints, Solver::Exact, 0.0));
    }
    if corner_infeasible(&rows, nq, nm) {
        return Ok(build_assignment(est, &u, &greedy, constraints, Solver::Exact, 0.0));
    }

    let lag = lagrangian(&u, &rows, nq, nm, options.lagrangian_iterations);
    if nq.saturating_mul(nm) > options.exact_threshold {
        return Ok(match lag.primal {
            Some((picks, value)) => {
                let gap = (lag.dual_bound - value).max(0.0);
                build_assignment(est, &u, &picks, constraints, Solver::Heuristic, gap)
            }
            None => build_assignment(est, &u, &greedy, constraints, Solver::Heuristic, f64::INFINITY),
        });
    }

    let mut bb = BranchAndBound::new(&u, &rows, nq, nm, options.node_limit);
    if let Some((picks, value)) = &lag.primal {
        bb.best = Some((picks.clone(), *value));
    }
    let complete = bb.run();
    let solver = if complete { Solver::Exact } else { Solver::Heuristic };
    Ok(match bb.best {
        Some((picks, value)) => {
            let gap = if complete {
                0.0
            } else {
                (lag.dual_bound.min(bb.root_bound) - value).max(0.0)
            };
            build_assignment(est, &u, &picks, constraints, solver, gap)
        }
        None => build_assignment(
            est,
            &u,
            &greedy,
            constraints,
            solver,
            if complete { 0.0 } else { f64::INFINITY },
        ),
    })
}

/// True if some row is violated even when every query takes its cheapest
/// option for that row alone.
fn corner_infeasible(rows: &[Row], nq: usize, nm: usize) -> bool {
    rows.iter().any(|r| {
        let best: f64 = (0..nq)
            .map(|q| r.coef[q * nm..(q + 1) * nm].iter().copied().fold(f64::INFINITY, f64::min))
            .sum();
        best > r.rhs + r.tol()
    })
}

struct BranchAndBound<'a> {
    u: &'a [f64],
    rows: &'a [Row],
    nq: usize,
    nm: usize,
    order: Vec<Vec<usize>>,
    /// `suffix_u[q]`: sum of the row maxima of queries `q..`.
    suffix_u: Vec<f64>,
    /// `suffix_min[j][q]`: smallest possible usage of row `j` by queries `q..`.
    suffix_min: Vec<Vec<f64>>,
    node_limit: u64,
    nodes: u64,
    root_bound: f64,
    best: Option<(Vec<usize>, f64)>,
}

impl<'a> BranchAndBound<'a> {
    fn new(u: &'a [f64], rows: &'a [Row], nq: usize, nm: usize, node_limit: u64) -> Self {
        let order = (0..nq)
            .map(|q| {
                let mut idx: Vec<usize> = (0..nm).collect();
                idx.sort_by(|&a, &b| u[q * nm + b].total_cmp(&u[q * nm + a]).then(a.cmp(&b)));
                idx
            })
            .collect::<Vec<_>>();
        let mut suffix_u = vec![0.0; nq + 1];
        for q in (0..nq).rev() {
            suffix_u[q] = suffix_u[q + 1] + u[q * nm + order[q][0]];
        }
        let suffix_min = rows
            .iter()
            .map(|r| {
                let mut s = vec![0.0; nq + 1];
                for q in (0..nq).rev() {
                    let lo = r.coef[q * nm..(q + 1) * nm].iter().copied().fold(f64::INFINITY, f64::min);
                    s[q] = s[q + 1] + lo;
                }
                s
            })
            .collect();
        Self {
            u,
            rows,
            nq,
            nm,
            order,
            root_bound: suffix_u[0],
            suffix_u,
            suffix_min,
            node_limit,
            nodes: 0,
            best: None,
        }
    }

    /// Returns false if the node limit was hit.
    fn run(&mut self) -> bool {
        let mut picks = vec![0; self.nq];
        let mut used = vec![0.0; self.rows.len()];
        self.dfs(0, 0.0, &mut picks, &mut used)
    }

    fn dfs(&mut self, q: usize, value: f64, picks: &mut [usize], used: &mut [f64]) -> bool {
        self.nodes += 1;
        if self.nodes > self.node_limit {
            return false;
        }
        if q == self.nq {
            if self.best.as_ref().is_none_or(|(_, b)| value > *b) {
                self.best = Some((picks.to_vec(), value));
            }
            return true;
        }
        for k in 0..self.nm {
            let m = self.order[q][k];
            let cell = q * self.nm + m;
            let v = value + self.u[cell];
            if let Some((_, b)) = &self.best {
                // candidates are sorted, so no later one can do better either
                if v + self.suffix_u[q + 1] <= *b {
                    break;
                }
            }
            let ok = self.rows.iter().enumerate().all(|(j, r)| {
                used[j] + r.coef[cell] + self.suffix_min[j][q + 1] <= r.rhs + r.tol()
            });
            if !ok {
                continue;
            }
            for (j, r) in self.rows.iter().enumerate() {
                used[j] += r.coef[cell];
            }
            picks[q] = m;
            let complete = self.dfs(q + 1, v, picks, used);
            for (j, r) in self.rows.iter().enumerate() {
                used[j] -= r.coef[cell];
            }
            if !complete {
                return false;
            }
        }
        true
    }
}

struct Lagrangian {
    dual_bound: f64,
    primal: Option<(Vec<usize>, f64)>,
}

/// Subgradient descent on the budget multipliers. Each relaxed solution is
/// repaired into a feasible point and locally improved.
fn lagrangian(u: &[f64], rows: &[Row], nq: usize, nm: usize, iterations: usize) -> Lagrangian {
    // Rescale rows so multipliers live on comparable scales.
    let scale: Vec<f64> = rows
        .iter()
        .map(|r| {
            let mean_abs = r.coef.iter().map(|a| a.abs()).sum::<f64>() / nm as f64;
            r.rhs.abs().max(mean_abs).max(1e-12)
        })
        .collect();
    let mut lambda = vec![0.0; rows.len()];
    let mut dual_bound = f64::INFINITY;
    let mut primal: Option<(Vec<usize>, f64)> = None;
    let mut mu = 2.0;
    let mut stale = 0;
    let objective = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(q, &m)| u[q * nm + m]).sum() };

    for _ in 0..iterations.max(1) {
        let mut picks = vec![0; nq];
        let mut l_val = 0.0;
        for (q, pick) in picks.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for m in 0..nm {
                let cell = q * nm + m;
                let red = u[cell]
                    - rows
                        .iter()
                        .zip(&lambda)
                        .zip(&scale)
                        .map(|((r, l), s)| l * r.coef[cell] / s)
                        .sum::<f64>();
                if red > best {
                    best = red;
                    *pick = m;
                }
            }
            l_val += best;
        }
        l_val += rows.iter().zip(&lambda).zip(&scale).map(|((r, l), s)| l * r.rhs / s).sum::<f64>();
        if dual_bound.is_infinite() || l_val < dual_bound - 1e-12 * dual_bound.abs().max(1.0) {
            dual_bound = l_val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= 20 {
                mu /= 2.0;
                stale = 0;
            }
        }

        if let Some(p) = repair(u, rows, &scale, picks.clone(), nq, nm) {
            let p = improve(u, rows, p, nq, nm);
            let v = objective(&p);
            if primal.as_ref().is_none_or(|(_, b)| v > *b) {
                primal = Some((p, v));
            }
        }

        let g: Vec<f64> = rows
            .iter()
            .zip(&scale)
            .map(|(r, s)| (r.rhs - row_usage(r, &picks, nm)) / s)
            .collect();
        let norm2: f64 = g.iter().map(|x| x * x).sum();
        if norm2 < 1e-30 || mu < 1e-8 {
            break;
        }
        let target = match &primal {
            Some((_, v)) => *v,
            None => l_val - 0.05 * l_val.abs().max(1.0),
        };
        let step = mu * (l_val - target).max(1e-12) / norm2;
        for (l, gj) in lambda.iter_mut().zip(&g) {
            *l = (*l - step * gj).max(0.0);
        }
    }
    Lagrangian { dual_bound, primal }
}

fn violation(rows: &[Row], scale: &[f64], used: &[f64]) -> f64 {
    rows.iter()
        .zip(scale)
        .zip(used)
        .map(|((r, s), x)| ((x - r.rhs - r.tol()) / s).max(0.0))
        .sum()
}

/// Greedy single-query swaps that most reduce scaled violation per unit of
/// utility lost, until every row holds.
fn repair(u: &[f64], rows: &[Row], scale: &[f64], mut picks: Vec<usize>, nq: usize, nm: usize) -> Option<Vec<usize>> {
    let mut used: Vec<f64> = rows.iter().map(|r| row_usage(r, &picks, nm)).collect();
    loop {
        let v0 = violation(rows, scale, &used);
        if v0 <= 0.0 {
            return Some(picks);
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for q in 0..nq {
            let cur = q * nm + picks[q];
            for m in 0..nm {
                if m == picks[q] {
                    continue;
                }
                let cell = q * nm + m;
                let trial: Vec<f64> = rows
                    .iter()
                    .zip(&used)
                    .map(|(r, x)| x - r.coef[cur] + r.coef[cell])
                    .collect();
                let dv = v0 - violation(rows, scale, &trial);
                if dv <= 0.0 {
                    continue;
                }
                let loss = (u[cur] - u[cell]).max(0.0);
                let ratio = dv / (loss + 1e-12);
                if best.is_none_or(|(b, _, _)| ratio > b) {
                    best = Some((ratio, q, m));
                }
            }
        }
        let (_, q, m) = best?;
        let (cur, cell) = (q * nm + picks[q], q * nm + m);
        for (r, x) in rows.iter().zip(used.iter_mut()) {
            *x += r.coef[cell] - r.coef[cur];
        }
        picks[q] = m;
    }
}

/// Best-improvement local search over single-query swaps that keep the
/// assignment feasible.
fn improve(u: &[f64], rows: &[Row], mut picks: Vec<usize>, nq: usize, nm: usize) -> Vec<usize> {
    let mut used: Vec<f64> = rows.iter().map(|r| row_usage(r, &picks, nm)).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for q in 0..nq {
            let cur = q * nm + picks[q];
            for m in 0..nm {
                let cell = q * nm + m;
                let gain = u[cell] - u[cur];
                if gain <= 1e-15 {
                    continue;
                }
                let ok = rows
                    .iter()
                    .zip(&used)
                    .all(|(r, x)| x - r.coef[cur] + r.coef[cell] <= r.rhs + r.tol());
                if ok && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, q, m));
                }
            }
        }
        let Some((_, q, m)) = best else {
            return picks;
        };
        let (cur, cell) = (q * nm + picks[q], q * nm + m);
        for (r, x) in rows.iter().zip(used.iter_mut()) {
            *x += r.coef[cell] - r.coef[cur];
        }
        picks[q] = m;
    }
}

/// Measured outcome of running a query on its chosen model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub accuracy: f64,
    pub cost: f64,
    pub latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReward {
    pub query_id: String,
    pub model_id: String,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub total_reward: f64,
    pub per_query: Vec<QueryReward>,
    pub weights: PolicyWeights,
}

/// Weighted reward of an assignment under observed outcomes, keyed by
/// `(query_id, model_id)`.
pub fn total_reward(
    assignment: &Assignment,
    observed: &BTreeMap<(String, String), Observation>,
    weights: &PolicyWeights,
) -> Result<RewardReport> {
    weights.validate()?;
    let mut per_query = Vec::with_capacity(assignment.choices.len());
    for c in &assignment.choices {
        let o = observed
            .get(&(c.query_id.clone(), c.model_id.clone()))
            .ok_or_else(|| Error::UnknownId {
                kind: "observation for query",
                id: c.query_id.clone(),
            })?;
        per_query.push(QueryReward {
            query_id: c.query_id.clone(),
            model_id: c.model_id.clone(),
            reward: weights.utility(o.accuracy, o.cost, o.latency),
        });
    }
    Ok(RewardReport {
        total_reward: per_query.iter().map(|r| r.reward).sum(),
        per_query,
        weights: *weights,
    })
}

/// CSV export: `query_id,model_id,p,cost,latency,utility`.
pub fn write_assignment_csv<W: Write>(writer: W, est: &EstimateMatrix, assignment: &Assignment) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["query_id", "model_id", "p", "cost", "latency", "utility"])?;
    for c in &assignment.choices {
        let q = est
            .query_ids()
            .iter()
            .position(|id| *id == c.query_id)
            .ok_or_else(|| Error::UnknownId {
                kind: "query",
                id: c.query_id.clone(),
            })?;
        let m = est.model_index(&c.model_id).ok_or_else(|| Error::UnknownId {
            kind: "model",
            id: c.model_id.clone(),
        })?;
        let e = est.get(q, m);
        w.write_record([
            c.query_id.clone(),
            c.model_id.clone(),
            e.p.to_string(),
            e.cost.to_string(),
            e.latency.to_string(),
            c.utility.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<assignment>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(q: &str, m: &str, p: f64, cost: f64, latency: f64) -> QueryModelEstimate {
        QueryModelEstimate {
            query_id: q.into(),
            model_id: m.into(),
            p,
            cost,
            latency,
        }
    }

    /// Two queries, two models. Under Max-Acc the unconstrained optimum is
    /// (big, big) with cost 2.0. With a cost cap of 1.5 the assignments are:
    ///   (big, big)     cost 2.0  infeasible
    ///   (big, small)   cost 1.1  u = 0.62 + 0.39 = 1.01
    ///   (small, big)   cost 1.1  u = 0.47 + 0.49 = 0.96   (q2 on big is slower)
    ///   (small, small) cost 0.2  u = 0.47 + 0.39 = 0.86
    fn fixture() -> EstimateMatrix {
        EstimateMatrix::from_estimates(vec![
            est("q1", "big", 0.9, 1.0, 0.0),
            est("q1", "small", 0.6, 0.1, 0.0),
            est("q2", "big", 0.8, 1.0, 0.5),
            est("q2", "small", 0.5, 0.1, 0.0),
        ])
        .unwrap()
    }

    #[test]
    fn presets_are_valid() {
        for (name, w) in PolicyWeights::PRESETS {
            w.validate().unwrap();
            assert_eq!(PolicyWeights::preset(name), Some(w));
        }
        assert_eq!(PolicyWeights::preset("Max_Acc"), Some(PolicyWeights::MAX_ACC));
        assert!(PolicyWeights::new(0.5, 0.5, 0.5).is_err());
        assert!(PolicyWeights::new(1.2, -0.2, 0.0).is_err());
    }

    #[test]
    fn unconstrained_picks_highest_p_with_pure_accuracy() {
        let a = route_unconstrained(&fixture(), &PolicyWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(a.model_for("q1"), Some("big"));
        assert_eq!(a.model_for("q2"), Some("big"));
        assert_eq!(a.solver, Solver::Exact);
    }

    #[test]
    fn ties_go_to_smaller_model_id() {
        let m = EstimateMatrix::from_estimates(vec![est("q", "b", 0.5, 0.0, 0.0), est("q", "a", 0.5, 0.0, 0.0)]).unwrap();
        let a = route_unconstrained(&m, &PolicyWeights::MAX_ACC).unwrap();
        assert_eq!(a.model_for("q"), Some("a"));
    }

    #[test]
    fn cost_cap_selects_the_feasible_alternative() {
        let c = GlobalConstraints {
            max_total_cost: Some(1.5),
            ..Default::default()
        };
        let a = route_constrained(&fixture(), &PolicyWeights::MAX_ACC, &c).unwrap();
        assert!(a.feasible);
        assert_eq!(a.model_for("q1"), Some("big"));
        assert_eq!(a.model_for("q2"), Some("small"));
        assert!((a.objective_value - 1.01).abs() < 1e-12);
        assert!((a.constraint_slack.cost.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn impossible_budget_is_reported_not_raised() {
        let c = GlobalConstraints {
            max_total_cost: Some(0.1),
            ..Default::default()
        };
        let a = route_constrained(&fixture(), &PolicyWeights::BALANCED, &c).unwrap();
        assert!(!a.feasible);
        assert_eq!(a.choices.len(), 2);
        assert!(a.constraint_slack.cost.unwrap() < 0.0);
    }

    #[test]
    fn accuracy_floor() {
        let c = GlobalConstraints {
            min_mean_accuracy: Some(0.85),
            ..Default::default()
        };
        let a = route_constrained(&fixture(), &PolicyWeights::MIN_COST, &c).unwrap();
        assert!(a.feasible);
        assert_eq!(a.model_for("q1"), Some("big"));
        assert_eq!(a.model_for("q2"), Some("big"));
    }

    #[test]
    fn normalization_rescales_terms() {
        let m = EstimateMatrix::from_estimates(vec![
            est("q", "a", 0.9, 0.002, 1.0),
            est("q", "b", 0.5, 0.001, 1.0),
        ])
        .unwrap();
        let w = PolicyWeights::MIN_COST;
        let raw = route_unconstrained(&m, &w).unwrap();
        assert_eq!(raw.model_for("q"), Some("a"));
        let opts = RouteOptions {
            normalize: true,
            ..Default::default()
        };
        let norm = route_unconstrained_with(&m, &w, &opts).unwrap();
        assert_eq!(norm.model_for("q"), Some("b"));
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let r = EstimateMatrix::from_estimates(vec![
            est("q1", "a", 0.5, 0.0, 0.0),
            est("q1", "b", 0.5, 0.0, 0.0),
            est("q2", "a", 0.5, 0.0, 0.0),
        ]);
        assert!(r.is_err());
        assert!(EstimateMatrix::from_estimates(vec![est("q", "a", 1.5, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn reward_by_hand() {
        let m = EstimateMatrix::from_estimates(vec![est("q", "a", 0.3, 0.0, 0.0)]).unwrap();
        let a = route_unconstrained(&m, &PolicyWeights::MAX_ACC).unwrap();
        let mut obs = BTreeMap::new();
        obs.insert(
            ("q".to_string(), "a".to_string()),
            Observation {
                accuracy: 1.0,
                cost: 0.0,
                latency: 0.0,
            },
        );
        let r = total_reward(&a, &obs, &PolicyWeights::MAX_ACC).unwrap();
        assert!((r.total_reward - 0.8).abs() < 1e-15);
        obs.clear();
        let err = total_reward(&a, &obs, &PolicyWeights::MAX_ACC).unwrap_err();
        assert!(err.to_string().contains('q'));
    }

    #[test]
    fn csv_export() {
        let m = fixture();
        let a = route_unconstrained(&m, &PolicyWeights::MAX_ACC).unwrap();
        let mut buf = Vec::new();
        write_assignment_csv(&mut buf, &m, &a).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("query_id,model_id,p,cost,latency,utility"));
        assert!(lines.next().unwrap().starts_with("q1,big,0.9,1,0,"));
    }
}
