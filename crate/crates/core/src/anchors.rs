//! Greedy D-optimal anchor selection.
//!
//! Starting from `I₀ = εI`, each step adds the item whose discrimination
//! vector maximizes `log det(I + ααᵀ)`. By the matrix determinant lemma the
//! gain of a candidate is `ln(1 + αᵀ I⁻¹ α)`, so only the inverse has to be
//! maintained; it is updated in place with the Sherman–Morrison formula after
//! every pick.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::irt::{predict_prob, ItemParams, LatentAbility};

/// Regularizer used when the caller does not pick one.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Fisher information `Σ pᵢ(1 − pᵢ) αᵢ αᵢᵀ` of `items` at `ability`.
pub fn fisher_information(items: &[ItemParams], ability: &LatentAbility) -> Result<DMatrix<f64>> {
    let d = ability.dim();
    let mut info = DMatrix::zeros(d, d);
    for it in items {
        let p = predict_prob(ability, it)?;
        let a = DVector::from_column_slice(&it.alpha);
        info += (p * (1.0 - p)) * &a * a.transpose();
    }
    Ok(info)
}

/// Accumulated information `εI + Σ ααᵀ` over the picks so far, with its
/// inverse and log-determinant.
#[derive(Clone, Debug)]
pub struct InformationState {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    log_det: f64,
    selected: Vec<String>,
    dense_check: bool,
}

impl InformationState {
    pub fn new(dim: usize, epsilon: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be >= 1"));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            matrix: DMatrix::identity(dim, dim) * epsilon,
            inverse: DMatrix::identity(dim, dim) / epsilon,
            log_det: dim as f64 * epsilon.ln(),
            selected: Vec::new(),
            dense_check: cfg!(debug_assertions),
        })
    }

    /// Builds a state from an arbitrary symmetric positive-definite matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid("information matrix must be square"));
        }
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("information matrix is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self {
            inverse: chol.inverse(),
            matrix,
            log_det,
            selected: Vec::new(),
            dense_check: cfg!(debug_assertions),
        })
    }

    /// Re-derive the inverse densely after every update and compare it with
    /// the rank-one result. On by default in debug builds.
    pub fn with_dense_check(mut self, on: bool) -> Self {
        self.dense_check = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn selected(&self) -> &[String] {
        &self.selected
    }

    fn quad_form(&self, alpha: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for r in 0..d {
            let mut row = 0.0;
            for c in 0..d {
                row += self.inverse[(r, c)] * alpha[c];
            }
            acc += alpha[r] * row;
        }
        acc
    }

    /// `ln(1 + αᵀ I⁻¹ α)`, the log-det increase from adding `alpha`.
    pub fn gain(&self, alpha: &[f64]) -> Result<f64> {
        check_dim("discrimination vector", self.dim(), alpha.len())?;
        Ok(self.quad_form(alpha).max(0.0).ln_1p())
    }

    /// Adds `ααᵀ` and updates the inverse with Sherman–Morrison.
    pub fn add(&mut self, item_id: impl Into<String>, alpha: &[f64]) -> Result<f64> {
        check_dim("discrimination vector", self.dim(), alpha.len())?;
        let a = DVector::from_column_slice(alpha);
        let u = &self.inverse * &a;
        let denom = 1.0 + a.dot(&u);
        let gain = (denom - 1.0).max(0.0).ln_1p();
        self.inverse -= (&u * u.transpose()) / denom;
        // keep the inverse exactly symmetric
        self.inverse = (&self.inverse + self.inverse.transpose()) * 0.5;
        self.matrix += &a * a.transpose();
        self.log_det += gain;
        self.selected.push(item_id.into());
        if self.dense_check {
            self.verify_inverse()?;
        }
        Ok(gain)
    }

    /// Largest relative deviation between the maintained inverse and a fresh
    /// dense inversion.
    pub fn inverse_drift(&self) -> Result<f64> {
        let dense = self
            .matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("information matrix is not positive definite".into()))?
            .inverse();
        let scale = dense.amax().max(f64::MIN_POSITIVE);
        Ok((&self.inverse - &dense).amax() / scale)
    }

    fn verify_inverse(&self) -> Result<()> {
        let drift = self.inverse_drift()?;
        if drift > 1e-6 {
            return Err(Error::Numerical(format!(
                "rank-one inverse drifted from dense inverse by {drift:.3e}"
            )));
        }
        Ok(())
    }
}

/// Gain of adding `item` to `state`.
pub fn marginal_gain(state: &InformationState, item: &ItemParams) -> Result<f64> {
    state.gain(&item.alpha)
}

/// Ordered anchor items with the log-det gain recorded at each pick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnchorDoc", into = "AnchorDoc")]
pub struct AnchorSet {
    pub item_ids: Vec<String>,
    pub gains: Vec<f64>,
    pub epsilon: f64,
    pub dim: usize,
}

#[derive(Serialize, Deserialize)]
struct AnchorEntry {
    item_id: String,
    gain: f64,
}

#[derive(Serialize, Deserialize)]
struct AnchorDoc {
    epsilon: f64,
    #[serde(rename = "D")]
    dim: usize,
    anchors: Vec<AnchorEntry>,
}

impl From<AnchorSet> for AnchorDoc {
    fn from(a: AnchorSet) -> Self {
        AnchorDoc {
            epsilon: a.epsilon,
            dim: a.dim,
            anchors: a
                .item_ids
                .into_iter()
                .zip(a.gains)
                .map(|(item_id, gain)| AnchorEntry { item_id, gain })
                .collect(),
        }
    }
}

impl TryFrom<AnchorDoc> for AnchorSet {
    type Error = Error;

    fn try_from(d: AnchorDoc) -> Result<Self> {
        let (item_ids, gains) = d.anchors.into_iter().map(|e| (e.item_id, e.gain)).unzip();
        let set = AnchorSet {
            item_ids,
            gains,
            epsilon: d.epsilon,
            dim: d.dim,
        };
        let mut seen = BTreeSet::new();
        for id in &set.item_ids {
            if !seen.insert(id) {
                return Err(Error::Duplicate {
                    kind: "anchor item",
                    id: id.clone(),
                });
            }
        }
        Ok(set)
    }
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.item_ids.iter().any(|i| i == item_id)
    }

    /// Total log-det of the final information matrix.
    pub fn log_det(&self) -> f64 {
        self.dim as f64 * self.epsilon.ln() + self.gains.iter().sum::<f64>()
    }

    /// Gain curve as CSV: `step,item_id,gain,cumulative_log_det`.
    pub fn gain_curve_csv(&self) -> String {
        let mut out = String::from("step,item_id,gain,cumulative_log_det\n");
        let mut cum = self.dim as f64 * self.epsilon.ln();
        for (k, (id, g)) in self.item_ids.iter().zip(&self.gains).enumerate() {
            cum += g;
            out.push_str(&format!("{},{},{},{}\n", k + 1, id, g, cum));
        }
        out
    }
}

/// Greedy forward D-optimal selection of `n` anchors.
///
/// Only the discrimination vectors are read. Candidates are scanned in
/// ascending `item_id` order and a candidate replaces the incumbent only on a
/// strictly larger gain, so ties go to the smallest id regardless of input
/// order.
pub fn select_anchors(items: &[ItemParams], n: usize, epsilon: f64) -> Result<AnchorSet> {
    if n > items.len() {
        return Err(Error::TooFew {
            what: "candidate items",
            minimum: n,
            found: items.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let Some(first) = items.first() else {
        return Ok(AnchorSet {
            item_ids: vec![],
            gains: vec![],
            epsilon,
            dim: 0,
        });
    };
    let dim = first.dim();
    let mut sorted: Vec<&ItemParams> = items.iter().collect();
    sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    for w in sorted.windows(2) {
        if w[0].item_id == w[1].item_id {
            return Err(Error::Duplicate {
                kind: "item",
                id: w[0].item_id.clone(),
            });
        }
    }
    for it in &sorted {
        check_dim("discrimination vector", dim, it.alpha.len())?;
    }

    let mut state = InformationState::new(dim, epsilon)?;
    let mut taken = vec![false; sorted.len()];
    let mut gains = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (k, it) in sorted.iter().enumerate() {
            if taken[k] {
                continue;
            }
            let g = state.gain(&it.alpha)?;
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((k, g));
            }
        }
        let (k, _) = best.expect("n <= number of items");
        taken[k] = true;
        gains.push(state.add(sorted[k].item_id.clone(), &sorted[k].alpha)?);
    }
    Ok(AnchorSet {
        item_ids: state.selected.clone(),
        gains,
        epsilon,
        dim,
    })
}
