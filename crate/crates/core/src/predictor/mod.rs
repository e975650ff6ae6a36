//! Query text → latent item parameters `(α̂, b̂)`.
//!
//! Each query becomes a semantic vector `e_se` and 11 standardized structural
//! features `e_st`. The shared representation is
//!
//! ```text
//! h = trunk([W_se e_se + e_se ; W_st e_st + b_st])
//! ```
//!
//! The difficulty head predicts a residual around the training mean,
//! `b̂ = b̄ + diff_head(h)`. Each expert head `c` writes its outputs into the
//! dimensions of cluster `c`, and `α̂ = softplus(·)` of the assembled vector.
//!
//! Training minimizes `MSE(b̂, b) + λ·MSE(α̂, α)` with mini-batch Adam. All
//! gradients are computed by hand; [`PredictorModel::loss_and_gradient`] is
//! exposed so the backward pass can be checked against finite differences.

pub mod clusters;
pub mod embedding;
pub mod features;
pub mod network;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::instrument;
use crate::irt::{CalibratedSpace, ItemParams};
use crate::math::{sigmoid, softplus};

pub use clusters::{cluster_dimensions, ClusterAssignment, ClusterReport};
pub use embedding::{EmbeddingFile, EmbeddingSource, HashingEmbedder, HASHING_DIM};
pub use features::{extract_structural_features, Standardizer, FEATURE_NAMES, STRUCTURAL_DIM};
pub use network::{Dense, Mlp, Network};

/// Model input: a semantic vector and the standardized structural features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub semantic: Vec<f64>,
    pub structural: Vec<f64>,
}

impl FeatureVector {
    pub fn validate(&self, d_sem: usize) -> Result<()> {
        check_dim("semantic features", d_sem, self.semantic.len())?;
        check_dim("structural features", STRUCTURAL_DIM, self.structural.len())?;
        if self.semantic.iter().chain(&self.structural).any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature vector contains non-finite values"));
        }
        Ok(())
    }
}

/// One supervision pair. `embedding` is required when the predictor uses
/// precomputed vectors and optional otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
}

/// A training example after feature extraction and standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub features: FeatureVector,
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Requested number of expert clusters; capped at `D`.
    pub clusters: usize,
    /// Weight λ of the discrimination loss.
    pub loss_weight: f64,
    pub seed: u64,
    pub trunk_widths: Vec<usize>,
    pub head_width: usize,
    pub embedding: EmbeddingSource,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            clusters: 4,
            loss_weight: 1.0,
            seed: 0,
            trunk_widths: vec![128, 128],
            head_width: 64,
            embedding: EmbeddingSource::Hashing { dim: HASHING_DIM },
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.clusters == 0 {
            return Err(Error::invalid("epochs, batch_size and clusters must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::invalid("loss_weight must be non-negative"));
        }
        if self.trunk_widths.is_empty() || self.trunk_widths.contains(&0) || self.head_width == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.embedding.dim() == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub d_sem: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub network: Network,
    pub mean_b: Vec<f64>,
    pub clusters: ClusterAssignment,
    pub structural_stats: Standardizer,
    pub embedding: EmbeddingSource,
    pub loss_weight: f64,
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    x: Vec<f64>,
    trunk: Vec<Vec<f64>>,
    diff: Vec<Vec<f64>>,
    experts: Vec<Vec<Vec<f64>>>,
    raw_alpha: Vec<f64>,
    b_hat: Vec<f64>,
}

impl PredictorModel {
    /// Fresh randomly initialized model.
    pub fn init(
        d_sem: usize,
        dim: usize,
        clusters: ClusterAssignment,
        mean_b: Vec<f64>,
        config: &PredictorConfig,
    ) -> Result<Self> {
        config.validate()?;
        clusters.validate(dim)?;
        check_dim("mean_b", dim, mean_b.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fused = d_sem + STRUCTURAL_DIM;
        let hidden = *config.trunk_widths.last().expect("validated");
        let mut trunk_sizes = vec![fused];
        trunk_sizes.extend(&config.trunk_widths);
        let head_std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let network = Network {
            proj_se: Dense::random(d_sem, d_sem, false, 0.1 * head_std(d_sem), &mut rng),
            proj_st: Dense::random(STRUCTURAL_DIM, STRUCTURAL_DIM, true, head_std(STRUCTURAL_DIM), &mut rng),
            trunk: Mlp::new(&trunk_sizes, true, 0.0, &mut rng),
            diff_head: Mlp::new(&[hidden, config.head_width, dim], false, head_std(config.head_width), &mut rng),
            experts: clusters
                .clusters
                .iter()
                .map(|c| Mlp::new(&[hidden, config.head_width, c.len()], false, head_std(config.head_width), &mut rng))
                .collect(),
        };
        Ok(Self {
            d_sem,
            dim,
            network,
            mean_b,
            clusters,
            structural_stats: Standardizer::identity(STRUCTURAL_DIM),
            embedding: config.embedding.clone(),
            loss_weight: config.loss_weight,
            loss_history: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.clusters.validate(self.dim)?;
        check_dim("mean_b", self.dim, self.mean_b.len())?;
        check_dim("embedding source", self.d_sem, self.embedding.dim())?;
        check_dim("structural mean", STRUCTURAL_DIM, self.structural_stats.mean.len())?;
        check_dim("structural std", STRUCTURAL_DIM, self.structural_stats.std.len())?;
        let net = &self.network;
        check_dim("proj_se input", self.d_sem, net.proj_se.n_in)?;
        check_dim("proj_se output", self.d_sem, net.proj_se.n_out)?;
        check_dim("trunk input", self.d_sem + STRUCTURAL_DIM, net.trunk.n_in())?;
        check_dim("difficulty head output", self.dim, net.diff_head.n_out())?;
        check_dim("expert heads", self.clusters.clusters.len(), net.experts.len())?;
        for (e, c) in net.experts.iter().zip(&self.clusters.clusters) {
            check_dim("expert output", c.len(), e.n_out())?;
        }
        if !self.mean_b.iter().all(|v| v.is_finite()) || !net.is_finite() {
            return Err(Error::Numerical("predictor has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.clusters.len()
    }

    /// Builds model input for a query. `embedding` overrides the configured
    /// source and is mandatory for precomputed embeddings.
    pub fn features(&self, text: &str, embedding: Option<&[f64]>) -> Result<FeatureVector> {
        let semantic = semantic_vector(&self.embedding, text, embedding)?;
        let raw = extract_structural_features(text);
        Ok(FeatureVector {
            semantic,
            structural: self.structural_stats.apply(&raw),
        })
    }

    fn trace(&self, f: &FeatureVector) -> Trace {
        let net = &self.network;
        let mut x = net.proj_se.forward(&f.semantic);
        for (v, e) in x.iter_mut().zip(&f.semantic) {
            *v += e;
        }
        x.extend(net.proj_st.forward(&f.structural));
        let trunk = net.trunk.forward_cached(&x);
        let h = trunk.last().expect("trunk output");
        let diff = net.diff_head.forward_cached(h);
        let b_hat = self
            .mean_b
            .iter()
            .zip(diff.last().expect("head output"))
            .map(|(m, d)| m + d)
            .collect();
        let mut raw_alpha = vec![0.0; self.dim];
        let experts = net
            .experts
            .iter()
            .zip(&self.clusters.clusters)
            .map(|(e, dims)| {
                let acts = e.forward_cached(h);
                for (&d, v) in dims.iter().zip(acts.last().expect("expert output")) {
                    raw_alpha[d] = *v;
                }
                acts
            })
            .collect();
        Trace {
            x,
            trunk,
            diff,
            experts,
            raw_alpha,
            b_hat,
        }
    }

    /// Returns `(α̂, b̂)`.
    pub fn forward(&self, features: &FeatureVector) -> Result<(Vec<f64>, Vec<f64>)> {
        features.validate(self.d_sem)?;
        let t = self.trace(features);
        Ok((t.raw_alpha.iter().map(|&r| softplus(r)).collect(), t.b_hat))
    }

    /// Predicted item parameters for a query.
    pub fn predict_item(&self, item_id: &str, text: &str, embedding: Option<&[f64]>) -> Result<ItemParams> {
        let (alpha, b) = self.forward(&self.features(text, embedding)?)?;
        ItemParams::new(item_id, alpha, b)
    }

    fn example_loss(&self, t: &Trace, ex: &PreparedExample) -> f64 {
        let d = self.dim as f64;
        let lb: f64 = t.b_hat.iter().zip(&ex.b).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / d;
        let la: f64 = t
            .raw_alpha
            .iter()
            .zip(&ex.alpha)
            .map(|(r, y)| (softplus(*r) - y).powi(2))
            .sum::<f64>()
            / d;
        lb + self.loss_weight * la
    }

    /// Mean loss over `batch`.
    pub fn loss(&self, batch: &[PreparedExample]) -> f64 {
        let total: f64 = batch.iter().map(|ex| self.example_loss(&self.trace(&ex.features), ex)).sum();
        total / batch.len().max(1) as f64
    }

    /// Mean loss over `batch` and its gradient with respect to every
    /// parameter, in the same layout as `self.network`.
    pub fn loss_and_gradient(&self, batch: &[PreparedExample]) -> (f64, Network) {
        let net = &self.network;
        let mut grad = net.zeros_like();
        let n = batch.len().max(1) as f64;
        let d = self.dim as f64;
        let mut total = 0.0;
        for ex in batch {
            let t = self.trace(&ex.features);
            total += self.example_loss(&t, ex);

            let db: Vec<f64> = t.b_hat.iter().zip(&ex.b).map(|(p, y)| 2.0 * (p - y) / (d * n)).collect();
            let mut dh = net.diff_head.backward(&t.diff, &db, &mut grad.diff_head);

            for (k, (dims, acts)) in self.clusters.clusters.iter().zip(&t.experts).enumerate() {
                let dout: Vec<f64> = dims
                    .iter()
                    .map(|&j| {
                        let r = t.raw_alpha[j];
                        self.loss_weight * 2.0 * (softplus(r) - ex.alpha[j]) * sigmoid(r) / (d * n)
                    })
                    .collect();
                let g = net.experts[k].backward(acts, &dout, &mut grad.experts[k]);
                for (a, b) in dh.iter_mut().zip(g) {
                    *a += b;
                }
            }

            let dx = net.trunk.backward(&t.trunk, &dh, &mut grad.trunk);
            let (dse, dst) = dx.split_at(self.d_sem);
            net.proj_se.backward(&ex.features.semantic, dse, &mut grad.proj_se, false);
            net.proj_st.backward(&ex.features.structural, dst, &mut grad.proj_st, false);
            debug_assert_eq!(t.x.len(), dx.len());
        }
        (total / n, grad)
    }
}

fn semantic_vector(source: &EmbeddingSource, text: &str, embedding: Option<&[f64]>) -> Result<Vec<f64>> {
    match (embedding, source) {
        (Some(e), _) => {
            check_dim("query embedding", source.dim(), e.len())?;
            Ok(e.to_vec())
        }
        (None, EmbeddingSource::Hashing { dim }) => Ok(HashingEmbedder { dim: *dim }.embed(text)),
        (None, EmbeddingSource::Precomputed { .. }) => {
            Err(Error::invalid("predictor uses precomputed embeddings but none was supplied"))
        }
    }
}

/// Adam state over a [`Network`].
struct Adam {
    m: Network,
    v: Network,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Network, lr: f64) -> Self {
        Self {
            m: net.zeros_like(),
            v: net.zeros_like(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut Network, grad: &Network) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for k in 0..p.len() {
                m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * g[k];
                v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a predictor on examples whose targets come from `space`. Expert
/// clusters are derived from the discrimination columns of `space`.
pub fn train(examples: &[TrainingExample], space: &CalibratedSpace, config: &PredictorConfig) -> Result<PredictorModel> {
    config.validate()?;
    let dim = space.dim;
    let c = config.clusters.min(dim);
    let clusters = if c == dim {
        ClusterAssignment::singletons(dim)
    } else {
        let alphas: Vec<Vec<f64>> = space.items.values().map(|it| it.alpha.clone()).collect();
        cluster_dimensions(&alphas, c)?
    };
    train_with_clusters(examples, dim, clusters, config)
}

/// As [`train`], with an explicit cluster assignment.
pub fn train_with_clusters(
    examples: &[TrainingExample],
    dim: usize,
    clusters: ClusterAssignment,
    config: &PredictorConfig,
) -> Result<PredictorModel> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::TooFew {
            what: "training examples",
            minimum: 1,
            found: 0,
        });
    }
    for ex in examples {
        check_dim("target alpha", dim, ex.alpha.len())?;
        check_dim("target b", dim, ex.b.len())?;
        if ex.alpha.iter().chain(&ex.b).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite target for `{}`", ex.query_id)));
        }
    }
    instrument::record_predictor_training();

    let d_sem = config.embedding.dim();
    let semantic: Vec<Vec<f64>> = examples
        .iter()
        .map(|ex| semantic_vector(&config.embedding, &ex.text, ex.embedding.as_deref()))
        .collect::<Result<_>>()?;
    let raw: Vec<Vec<f64>> = examples
        .iter()
        .map(|ex| extract_structural_features(&ex.text).to_vec())
        .collect();
    let stats = Standardizer::fit(&raw);

    let mut mean_b = vec![0.0; dim];
    for ex in examples {
        for (m, v) in mean_b.iter_mut().zip(&ex.b) {
            *m += v;
        }
    }
    mean_b.iter_mut().for_each(|m| *m /= examples.len() as f64);

    let mut model = PredictorModel::init(d_sem, dim, clusters, mean_b, config)?;
    model.structural_stats = stats;

    let prepared: Vec<PreparedExample> = examples
        .iter()
        .zip(semantic)
        .zip(&raw)
        .map(|((ex, sem), r)| PreparedExample {
            features: FeatureVector {
                semantic: sem,
                structural: model.structural_stats.apply(r),
            },
            alpha: ex.alpha.clone(),
            b: ex.b.clone(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(&model.network, config.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut batch_index = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| prepared[i].clone()));
            let (loss, grad) = model.loss_and_gradient(&batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "predictor batch",
                    index: batch_index,
                });
            }
            adam.step(&mut model.network, &grad);
            epoch_loss += loss * chunk.len() as f64;
            batch_index += 1;
        }
        model.loss_history.push(epoch_loss / prepared.len() as f64);
    }
    Ok(model)
}

/// Standardized features for `examples` under an already trained model.
pub fn prepare_examples(model: &PredictorModel, examples: &[TrainingExample]) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|ex| {
            Ok(PreparedExample {
                features: model.features(&ex.text, ex.embedding.as_deref())?,
                alpha: ex.alpha.clone(),
                b: ex.b.clone(),
            })
        })
        .collect()
}
