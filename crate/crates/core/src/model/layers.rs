use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::NormMode;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Variance offset inside the per-vector standard deviation.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/√in, 1/√in)`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Tensor::from_fn(&[in_dim, out_dim], |_| dist.sample(rng));
        let b = Tensor::from_fn(&[out_dim], |_| dist.sample(rng));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Running source-domain estimates of a hybrid layer norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: f64,
    pub std: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(momentum: f64) -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            momentum,
            initialized: false,
        }
    }

    /// `μ_s ← (1-m)μ_s + m·μ`, `σ_s ← (1-m)σ_s + m·σ`.
    pub fn update(&mut self, batch_mean: f64, batch_std: f64) {
        let m = self.momentum;
        self.mean = (1.0 - m) * self.mean + m * batch_mean;
        self.std = (1.0 - m) * self.std + m * batch_std;
        self.initialized = true;
    }

    /// Updates from a non-empty batch of vectors laid out along the last
    /// axis of `x`: per-vector mean and standard deviation, averaged over
    /// vectors.
    pub fn update_from_batch(&mut self, x: &Tensor) {
        let (mean, std) = batch_vector_stats(x);
        self.update(mean, std);
    }
}

/// Average over all vectors (last axis) of the per-vector mean and of the
/// per-vector `sqrt(var + LN_EPS)`.
pub fn batch_vector_stats(x: &Tensor) -> (f64, f64) {
    let d = *x.shape().last().expect("rank >= 1");
    let count = x.len() / d;
    let (mut mean_acc, mut std_acc) = (0.0, 0.0);
    for row in x.data().chunks_exact(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        mean_acc += mu;
        std_acc += (var + LN_EPS).sqrt();
    }
    (mean_acc / count as f64, std_acc / count as f64)
}

/// Batch statistics seen by a normalization layer during a source-train
/// forward pass, to be committed to the layer's running estimates.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Layer { site: usize, mean: f64, std: f64 },
    Batch { site: usize, mean: Vec<f64>, var: Vec<f64> },
}

/// Layer normalization over the last axis. With `stats` present it is a
/// hybrid layer norm: standard on source data, normalizing target data with
/// the recorded source statistics.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    /// Identifies this layer in [`Observation`]s.
    pub site: usize,
    pub stats: Option<RunningStats>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, site: usize, hybrid: Option<f64>) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
            site,
            stats: hybrid.map(RunningStats::new),
        }
    }

    pub fn is_hybrid(&self) -> bool {
        self.stats.is_some()
    }

    /// Hybrid layers in `SourceTrain` mode push their batch statistics to
    /// `observed`; the running estimates themselves are only read, and only
    /// in `TargetEval` mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: NormMode,
        observed: &mut Vec<Observation>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(Error::shape("layer_norm", &shape, &[self.dim]));
        }
        let normalized = match (&self.stats, mode) {
            (Some(stats), NormMode::TargetEval) => {
                if !stats.initialized {
                    return Err(Error::UninitializedStats);
                }
                let centered = g.add_scalar(x, -stats.mean);
                g.mul_scalar(centered, 1.0 / stats.std)
            }
            (stats, _) => {
                if stats.is_some() && mode == NormMode::SourceTrain {
                    let (mean, std) = batch_vector_stats(g.value(x));
                    observed.push(Observation::Layer { site: self.site, mean, std });
                }
                standardize_last_axis(g, x)?
            }
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul(normalized, gamma)?;
        g.add(scaled, beta)
    }
}

/// `(x - μ(x)) / sqrt(var(x) + LN_EPS)` per vector along the last axis.
pub(crate) fn standardize_last_axis(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let axis = shape.len() - 1;
    let mu = g.mean(x, axis, true)?;
    let mu = g.broadcast_to(mu, &shape)?;
    let centered = g.sub(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq, axis, true)?;
    let var = g.add_scalar(var, LN_EPS);
    let sd = g.sqrt(var);
    let sd = g.broadcast_to(sd, &shape)?;
    g.div(centered, sd)
}

/// Per-feature batch normalization (features on the last axis), used by the
/// AdaBN baseline in front of the decoder.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub site: usize,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, site: usize, momentum: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
            site,
            momentum,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Training mode normalizes with batch statistics and reports them to
    /// `observed`; otherwise the running estimates are used.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        train: bool,
        observed: &mut Vec<Observation>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(Error::shape("batch_norm", &shape, &[self.dim]));
        }
        let rows = g.value(x).len() / self.dim;
        let flat = g.reshape(x, &[rows, self.dim])?;
        let normalized = if train {
            let (mean, var) = feature_moments(g.value(flat));
            let unbiased = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
            let var = var.into_iter().map(|v| v * unbiased).collect();
            observed.push(Observation::Batch { site: self.site, mean, var });
            let mu = g.mean(flat, 0, false)?;
            let centered = g.sub(flat, mu)?;
            let sq = g.mul(centered, centered)?;
            let var = g.mean(sq, 0, false)?;
            let var = g.add_scalar(var, LN_EPS);
            let sd = g.sqrt(var);
            g.div(centered, sd)?
        } else {
            let mean = g.constant(Tensor::vector(self.running_mean.clone()));
            let inv = self.running_var.iter().map(|v| 1.0 / (v + LN_EPS).sqrt()).collect();
            let inv = g.constant(Tensor::vector(inv));
            let centered = g.sub(flat, mean)?;
            g.mul(centered, inv)?
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul(normalized, gamma)?;
        let out = g.add(scaled, beta)?;
        g.reshape(out, &shape)
    }

    /// Folds one batch's moments into the running estimates.
    pub fn observe(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for i in 0..self.dim {
            self.running_mean[i] = (1.0 - m) * self.running_mean[i] + m * mean[i];
            self.running_var[i] = (1.0 - m) * self.running_var[i] + m * var[i];
        }
    }

    /// Replaces the running estimates by the exact population moments of
    /// `batches` (each `[.., D]`). Learnable parameters are untouched.
    pub fn adapt<'a>(&mut self, batches: impl IntoIterator<Item = &'a Tensor>) {
        let mut sum = vec![0.0; self.dim];
        let mut sum_sq = vec![0.0; self.dim];
        let mut count = 0usize;
        for batch in batches {
            for row in batch.data().chunks_exact(self.dim) {
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v;
                    sum_sq[i] += v * v;
                }
                count += 1;
            }
        }
        if count < 2 {
            return;
        }
        let n = count as f64;
        for i in 0..self.dim {
            let mean = sum[i] / n;
            self.running_mean[i] = mean;
            self.running_var[i] = ((sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
        }
    }
}

fn feature_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.shape()[1];
    let n = x.shape()[0] as f64;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for i in 0..d {
            var[i] += (row[i] - mean[i]).powi(2) / n;
        }
    }
    (mean, var)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Scaled dot-product self-attention over `x: [B, N, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let dim = self.query.out_dim;
        let head_dim = dim / self.heads;
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 2, h * head_dim, head_dim)?;
            let kh = g.slice(k, 2, h * head_dim, head_dim)?;
            let vh = g.slice(v, 2, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.mul_scalar(scores, scale);
            let attn = g.softmax(scores, 2)?;
            outputs.push(g.matmul(attn, vh)?);
        }
        let merged = if outputs.len() == 1 { outputs[0] } else { g.concat(&outputs, 2)? };
        self.output.forward(g, store, merged)
    }
}

/// Post-norm transformer encoder layer without dropout.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        hybrid: Option<f64>,
        first_site: usize,
        rng: &mut Rng,
    ) -> Self {
        let attention = MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng);
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim, first_site, hybrid);
        let ff1 = Linear::new(store, &format!("{name}.ff1"), dim, ffn_dim, rng);
        let ff2 = Linear::new(store, &format!("{name}.ff2"), ffn_dim, dim, rng);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim, first_site + 1, hybrid);
        Self {
            attention,
            norm1,
            ff1,
            ff2,
            norm2,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: NormMode,
        observed: &mut Vec<Observation>,
    ) -> Result<Var> {
        let attended = self.attention.forward(g, store, x)?;
        let residual = g.add(x, attended)?;
        let x1 = self.norm1.forward(g, store, residual, mode, observed)?;
        let hidden = self.ff1.forward(g, store, x1)?;
        let hidden = g.relu(hidden);
        let ff = self.ff2.forward(g, store, hidden)?;
        let residual = g.add(x1, ff)?;
        self.norm2.forward(g, store, residual, mode, observed)
    }
}

/// Three linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: [Linear; 3],
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            layers: [
                Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng),
                Linear::new(store, &format!("{name}.1"), hidden, hidden, rng),
                Linear::new(store, &format!("{name}.2"), hidden, out_dim, rng),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.relu(h);
        self.layers[2].forward(g, store, h)
    }
}

pub(crate) fn standard_normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn running_update_arithmetic() {
        let mut s = RunningStats::new(0.1);
        assert!(!s.initialized);
        s.update(1.0, 1.0);
        assert!((s.mean - 0.1).abs() < 1e-15);
        assert!(s.initialized);

        let mut s = RunningStats::new(1.0);
        s.update(3.5, 0.25);
        assert_eq!((s.mean, s.std), (3.5, 0.25));
    }

    #[test]
    fn running_mean_gap_shrinks_geometrically() {
        let m = 0.2;
        let mut s = RunningStats::new(m);
        let target = 5.0;
        let mut gap = (s.mean - target).abs();
        for _ in 0..20 {
            s.update(target, 2.0);
            let next = (s.mean - target).abs();
            assert!((next - (1.0 - m) * gap).abs() < 1e-12);
            gap = next;
        }
    }

    #[test]
    fn hybrid_target_mode_requires_statistics() {
        let mut store = ParamStore::new();
        let mut ln = LayerNorm::new(&mut store, "ln", 3, 0, Some(0.1));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let mut seen = Vec::new();
        assert!(matches!(
            ln.forward(&mut g, &store, x, NormMode::TargetEval, &mut seen),
            Err(Error::UninitializedStats)
        ));
        ln.forward(&mut g, &store, x, NormMode::SourceTrain, &mut seen).unwrap();
        let Some(Observation::Layer { mean, std, .. }) = seen.pop() else { panic!("no observation") };
        ln.stats.as_mut().unwrap().update(mean, std);
        assert!(ln.forward(&mut g, &store, x, NormMode::TargetEval, &mut seen).is_ok());
        assert!(ln.stats.as_ref().unwrap().std > 0.0);
    }

    #[test]
    fn hybrid_with_unit_stats_is_identity() {
        let mut store = ParamStore::new();
        let mut ln = LayerNorm::new(&mut store, "ln", 4, 0, Some(0.1));
        ln.stats = Some(RunningStats {
            mean: 0.0,
            std: 1.0,
            momentum: 0.1,
            initialized: true,
        });
        let mut g = Graph::new();
        let input = Tensor::from_fn(&[3, 4], |i| (i as f64).sin() * 3.0);
        let x = g.constant(input.clone());
        let y = ln.forward(&mut g, &store, x, NormMode::TargetEval, &mut Vec::new()).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn batch_norm_adaptation_sets_population_moments() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 2, 0, 0.1);
        let before = store.clone();
        let a = Tensor::new(vec![2, 2], vec![1.0, 10.0, 3.0, 10.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![5.0, 40.0]).unwrap();
        bn.adapt([&a, &b]);
        assert_eq!(bn.running_mean, vec![3.0, 20.0]);
        assert_eq!(bn.running_var, vec![4.0, 300.0]);
        assert_eq!(store, before);
    }

    #[test]
    fn normal_draws_have_unit_scale() {
        let mut rng = stream(3, &[]);
        let xs: Vec<f64> = (0..20_000).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.05);
    }
}
