//! Dense layers and MLPs with hand-written backpropagation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Affine layer `y = W x + b`. `weights` is `n_out × n_in`, row-major. An
/// empty `bias` means the layer has no bias term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize, with_bias: bool) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: if with_bias { vec![0.0; n_out] } else { Vec::new() },
        }
    }

    pub fn random<R: Rng>(n_in: usize, n_out: usize, with_bias: bool, std: f64, rng: &mut R) -> Self {
        let mut d = Self::zeros(n_in, n_out, with_bias);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            d.weights.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        d
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        let mut out = if self.bias.is_empty() {
            vec![0.0; self.n_out]
        } else {
            self.bias.clone()
        };
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.n_in)) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// `want_dx` is set.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, want_dx: bool) -> Vec<f64> {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut grad.weights[o * self.n_in..(o + 1) * self.n_in];
            for (w, v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
        if !self.bias.is_empty() {
            for (b, g) in grad.bias.iter_mut().zip(dy) {
                *b += g;
            }
        }
        if !want_dx {
            return Vec::new();
        }
        let mut dx = vec![0.0; self.n_in];
        for (row, &g) in self.weights.chunks_exact(self.n_in).zip(dy) {
            if g == 0.0 {
                continue;
            }
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.n_in, self.n_out, !self.bias.is_empty())
    }
}

/// Stack of dense layers with ReLU between them, and optionally after the
/// last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
}

impl Mlp {
    /// He-initialized hidden layers; the output layer uses `out_std`.
    pub fn new<R: Rng>(sizes: &[usize], relu_last: bool, out_std: f64, rng: &mut R) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let std = if l + 1 == n && !relu_last {
                    out_std
                } else {
                    (2.0 / sizes[l] as f64).sqrt()
                };
                Dense::random(sizes[l], sizes[l + 1], true, std, rng)
            })
            .collect();
        Self { layers, relu_last }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_last
    }

    /// Returns all activations: `acts[0]` is the input, `acts[l + 1]` the
    /// output of layer `l` after its nonlinearity.
    pub fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&acts[l]);
            if self.activates(l) {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).pop().expect("at least the input")
    }

    pub fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut dy = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            if self.activates(l) {
                for (d, a) in dy.iter_mut().zip(&acts[l + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dy = self.layers[l].backward(&acts[l], &dy, &mut grad.layers[l], true);
        }
        dy
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            relu_last: self.relu_last,
        }
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}

/// Parameters of the shared backbone and both heads. Also used as the
/// container for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// `W_se`, applied with a residual connection and no bias.
    pub proj_se: Dense,
    /// `W_st`, `b_st`.
    pub proj_st: Dense,
    pub trunk: Mlp,
    pub diff_head: Mlp,
    /// One head per cluster, in cluster order.
    pub experts: Vec<Mlp>,
}

impl Network {
    pub fn zeros_like(&self) -> Self {
        Self {
            proj_se: self.proj_se.zeros_like(),
            proj_st: self.proj_st.zeros_like(),
            trunk: self.trunk.zeros_like(),
            diff_head: self.diff_head.zeros_like(),
            experts: self.experts.iter().map(Mlp::zeros_like).collect(),
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.proj_se.weights, &self.proj_se.bias, &self.proj_st.weights, &self.proj_st.bias];
        out.extend(self.trunk.tensors());
        out.extend(self.diff_head.tensors());
        for e in &self.experts {
            out.extend(e.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![
            &mut self.proj_se.weights,
            &mut self.proj_se.bias,
            &mut self.proj_st.weights,
            &mut self.proj_st.bias,
        ];
        out.extend(self.trunk.tensors_mut());
        out.extend(self.diff_head.tensors_mut());
        for e in &mut self.experts {
            out.extend(e.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters flattened in `tensors()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut k = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        assert_eq!(k, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
