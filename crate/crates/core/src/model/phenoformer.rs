use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::{standard_normal, BatchNorm, LayerNorm, Linear, Mlp, Observation, RunningStats, TransformerLayer};
use super::{DecoderKind, HybridPlacement, ModelConfig, NormMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::rng::stream;
use crate::tensor::Tensor;

const PREDICT_CHUNK: usize = 64;

/// Per-channel input and per-species label z-scoring constants, fitted on
/// the training set and stored with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub label_mean: Vec<f64>,
    pub label_std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(channels: usize, species: usize) -> Self {
        Self {
            input_mean: vec![0.0; channels],
            input_std: vec![1.0; channels],
            label_mean: vec![0.0; species],
            label_std: vec![1.0; species],
        }
    }

    /// `series` are channel-major `channels × days` buffers. Zero spreads
    /// fall back to 1 and species without labels to the identity.
    pub fn fit(series: &[&[f64]], labels: &[&[Option<f64>]], channels: usize, species: usize) -> Self {
        let mut out = Self::identity(channels, species);
        if let Some(first) = series.first() {
            let days = first.len() / channels;
            for c in 0..channels {
                let values = series.iter().flat_map(|s| &s[c * days..(c + 1) * days]).copied();
                let (mean, std) = mean_std(values);
                out.input_mean[c] = mean;
                out.input_std[c] = if std > 0.0 { std } else { 1.0 };
            }
        }
        for s in 0..species {
            let values: Vec<f64> = labels.iter().filter_map(|l| l.get(s).copied().flatten()).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(values.into_iter());
            out.label_mean[s] = mean;
            out.label_std[s] = if std > 0.0 { std } else { 1.0 };
        }
        out
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Fixed sinusoidal encodings, `[steps, dim]`.
pub fn sinusoidal_positions(steps: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[steps, dim], |idx| {
        let (t, i) = ((idx / dim) as f64, idx % dim);
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        if i % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

#[derive(Clone, Debug)]
enum Decoder {
    Shared(Linear),
    PerSpecies { weight: ParamId, bias: ParamId },
}

/// Outputs of the first transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct T1Output {
    /// Whole sequence `[B, steps + S, D]`, the input of the second layer.
    pub full: Var,
    /// Series positions `H`, `[B, steps, D]`.
    pub series: Var,
    /// Token positions `Z` (mid-level features), `[B, S, D]`.
    pub tokens: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `Z`, `[B, S, D]`.
    pub mid: Var,
    /// `G`, `[B, S, D]`.
    pub late: Var,
    /// Standardized predictions `[B, S]`.
    pub prediction: Var,
}

#[derive(Clone, Debug)]
pub struct PhenoFormer {
    config: ModelConfig,
    params: ParamStore,
    encoder: Linear,
    tokens: ParamId,
    positions: Tensor,
    t1: TransformerLayer,
    t2: TransformerLayer,
    decoder: Decoder,
    decoder_norm: Option<BatchNorm>,
    discriminator: Option<Mlp>,
    standardizer: Standardizer,
}

impl PhenoFormer {
    /// Backbone parameters come from one seeded stream and the
    /// discriminator from another, so adding a discriminator never changes
    /// the backbone initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, s, d) = (config.channels, config.species, config.dim);
        let mut params = ParamStore::new();
        let mut rng = stream(seed, &[1]);

        let encoder = Linear::new(&mut params, "encoder", c, d, &mut rng);
        let token_init = Tensor::from_fn(&[s, d], |_| standard_normal(&mut rng));
        let tokens = params.add("tokens", token_init);
        let hybrid_t1 = matches!(config.hybrid, HybridPlacement::BothLayers).then_some(config.momentum);
        let hybrid_t2 = (config.hybrid != HybridPlacement::None).then_some(config.momentum);
        let t1 = TransformerLayer::new(&mut params, "t1", d, config.heads, config.ffn_dim, hybrid_t1, 0, &mut rng);
        let t2 = TransformerLayer::new(&mut params, "t2", d, config.heads, config.ffn_dim, hybrid_t2, 2, &mut rng);
        let decoder = match config.decoder {
            DecoderKind::Shared => Decoder::Shared(Linear::new(&mut params, "decoder", d, 1, &mut rng)),
            DecoderKind::PerSpecies => {
                let bound = 1.0 / (d as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight = params.add("decoder.weight", Tensor::from_fn(&[s, d], |_| dist.sample(&mut rng)));
                let bias = params.add("decoder.bias", Tensor::from_fn(&[s], |_| dist.sample(&mut rng)));
                Decoder::PerSpecies { weight, bias }
            }
        };
        let decoder_norm = config
            .decoder_batch_norm
            .then(|| BatchNorm::new(&mut params, "decoder_norm", d, 4, config.momentum));
        let discriminator = config.discriminator_out.map(|out| {
            let mut rng = stream(seed, &[2]);
            Mlp::new(&mut params, "discriminator", s * d, config.disc_dim, out, &mut rng)
        });

        Ok(Self {
            positions: sinusoidal_positions(config.steps(), d),
            standardizer: Standardizer::identity(c, s),
            config,
            params,
            encoder,
            tokens,
            t1,
            t2,
            decoder,
            decoder_norm,
            discriminator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, standardizer: Standardizer) {
        self.standardizer = standardizer;
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn set_positions(&mut self, positions: Tensor) -> Result<()> {
        if positions.shape() != self.positions.shape() {
            return Err(Error::shape("set_positions", self.positions.shape(), positions.shape()));
        }
        self.positions = positions;
        Ok(())
    }

    pub fn has_discriminator(&self) -> bool {
        self.discriminator.is_some()
    }

    /// Parameter ids of the discriminator MLP.
    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator
            .iter()
            .flat_map(|m| m.layers.iter().flat_map(|l| [l.weight, l.bias]))
            .collect()
    }

    /// Parameter ids whose name starts with `prefix` (`"t1."`, `"decoder"`, ...).
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Layer norms in site order: t1.norm1, t1.norm2, t2.norm1, t2.norm2.
    pub fn layer_norms(&self) -> [&LayerNorm; 4] {
        [&self.t1.norm1, &self.t1.norm2, &self.t2.norm1, &self.t2.norm2]
    }

    pub fn layer_norm_mut(&mut self, site: usize) -> &mut LayerNorm {
        match site {
            0 => &mut self.t1.norm1,
            1 => &mut self.t1.norm2,
            2 => &mut self.t2.norm1,
            3 => &mut self.t2.norm2,
            _ => panic!("no layer norm at site {site}"),
        }
    }

    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        self.decoder_norm.as_ref()
    }

    pub fn batch_norm_mut(&mut self) -> Option<&mut BatchNorm> {
        self.decoder_norm.as_mut()
    }

    /// Standardized, time-pooled inputs `[B, steps, C]` from channel-major
    /// `C × T` series.
    pub fn inputs(&self, series: &[&[f64]]) -> Result<Tensor> {
        let (c, t, pool) = (self.config.channels, self.config.seq_len, self.config.pool);
        let steps = self.config.steps();
        let mut data = Vec::with_capacity(series.len() * steps * c);
        for s in series {
            if s.len() != c * t {
                return Err(Error::shape("inputs", &[c, t], &[s.len()]));
            }
            for step in 0..steps {
                let (from, to) = (step * pool, ((step + 1) * pool).min(t));
                for ch in 0..c {
                    let row = &s[ch * t..(ch + 1) * t];
                    let mean = row[from..to].iter().sum::<f64>() / (to - from) as f64;
                    data.push((mean - self.standardizer.input_mean[ch]) / self.standardizer.input_std[ch]);
                }
            }
        }
        if series.is_empty() {
            return Err(Error::invalid("inputs", "empty batch"));
        }
        Tensor::new(vec![series.len(), steps, c], data)
    }

    /// Standardized targets and observation mask, both `[B, S]`.
    pub fn targets(&self, labels: &[&[Option<f64>]]) -> Result<(Tensor, Tensor)> {
        let s = self.config.species;
        let mut y = Vec::with_capacity(labels.len() * s);
        let mut mask = Vec::with_capacity(labels.len() * s);
        for l in labels {
            if l.len() != s {
                return Err(Error::shape("targets", &[s], &[l.len()]));
            }
            for (k, v) in l.iter().enumerate() {
                match v {
                    Some(v) => {
                        y.push((v - self.standardizer.label_mean[k]) / self.standardizer.label_std[k]);
                        mask.push(1.0);
                    }
                    None => {
                        y.push(0.0);
                        mask.push(0.0);
                    }
                }
            }
        }
        let shape = vec![labels.len(), s];
        Ok((Tensor::new(shape.clone(), y)?, Tensor::new(shape, mask)?))
    }

    /// Shared linear map of every time step: `[B, steps, C] -> [B, steps, D]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.encoder.forward(g, &self.params, x)
    }

    /// Adds positional encodings, appends the species tokens and applies the
    /// first transformer layer.
    pub fn forward_t1(
        &self,
        g: &mut Graph,
        embedded: Var,
        mode: NormMode,
        observed: &mut Vec<Observation>,
    ) -> Result<T1Output> {
        let shape = g.shape(embedded).to_vec();
        let (steps, s, d) = (self.config.steps(), self.config.species, self.config.dim);
        if shape.len() != 3 || shape[1] != steps || shape[2] != d {
            return Err(Error::shape("forward_t1", &shape, &[steps, d]));
        }
        let batch = shape[0];
        let pos = g.constant(self.positions.clone());
        let placed = g.add(embedded, pos)?;
        let tokens = g.param(&self.params, self.tokens);
        let tokens = g.broadcast_to(tokens, &[batch, s, d])?;
        let seq = g.concat(&[placed, tokens], 1)?;
        let full = self.t1.forward(g, &self.params, seq, mode, observed)?;
        let series = g.slice(full, 1, 0, steps)?;
        let tokens = g.slice(full, 1, steps, s)?;
        Ok(T1Output { full, series, tokens })
    }

    /// Second transformer layer; returns the token outputs `G`.
    pub fn forward_t2(&self, g: &mut Graph, full: Var, mode: NormMode, observed: &mut Vec<Observation>) -> Result<Var> {
        let (steps, s) = (self.config.steps(), self.config.species);
        let out = self.t2.forward(g, &self.params, full, mode, observed)?;
        g.slice(out, 1, steps, s)
    }

    /// `[B, S, D] -> [B, S]`.
    pub fn decode(&self, g: &mut Graph, late: Var, mode: NormMode, observed: &mut Vec<Observation>) -> Result<Var> {
        let shape = g.shape(late).to_vec();
        let (s, d) = (self.config.species, self.config.dim);
        if shape.len() != 3 || shape[1] != s || shape[2] != d {
            return Err(Error::shape("decode", &shape, &[s, d]));
        }
        let batch = shape[0];
        let late = match &self.decoder_norm {
            Some(bn) => bn.forward(g, &self.params, late, mode == NormMode::SourceTrain, observed)?,
            None => late,
        };
        match &self.decoder {
            Decoder::Shared(lin) => {
                let y = lin.forward(g, &self.params, late)?;
                g.reshape(y, &[batch, s])
            }
            Decoder::PerSpecies { weight, bias } => {
                let w = g.param(&self.params, *weight);
                let b = g.param(&self.params, *bias);
                let prod = g.mul(late, w)?;
                let y = g.sum(prod, 2, false)?;
                g.add(y, b)
            }
        }
    }

    /// Flattens `[B, S, D]` features and applies the discriminator MLP.
    pub fn discriminate(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let mlp = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Config("model has no discriminator".into()))?;
        let shape = g.shape(features).to_vec();
        let (s, d) = (self.config.species, self.config.dim);
        if shape.len() != 3 || shape[1] != s || shape[2] != d {
            return Err(Error::shape("discriminate", &shape, &[s, d]));
        }
        let flat = g.reshape(features, &[shape[0], s * d])?;
        mlp.forward(g, &self.params, flat)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: NormMode, observed: &mut Vec<Observation>) -> Result<Forward> {
        let e = self.encode(g, x)?;
        let t1 = self.forward_t1(g, e, mode, observed)?;
        let late = self.forward_t2(g, t1.full, mode, observed)?;
        let prediction = self.decode(g, late, mode, observed)?;
        Ok(Forward {
            mid: t1.tokens,
            late,
            prediction,
        })
    }

    /// Applies statistics gathered during source-train forward passes.
    pub fn commit(&mut self, observed: Vec<Observation>) {
        for obs in observed {
            match obs {
                Observation::Layer { site, mean, std } => {
                    if let Some(stats) = self.layer_norm_mut(site).stats.as_mut() {
                        stats.update(mean, std);
                    }
                }
                Observation::Batch { mean, var, .. } => {
                    if let Some(bn) = self.decoder_norm.as_mut() {
                        bn.observe(&mean, &var);
                    }
                }
            }
        }
    }

    /// Day-of-year predictions, one row of `S` per series. Never updates
    /// running statistics.
    pub fn predict(&self, series: &[&[f64]], mode: NormMode) -> Result<Vec<Vec<f64>>> {
        let mode = if mode == NormMode::SourceTrain { NormMode::SourceEval } else { mode };
        let s = self.config.species;
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(self.inputs(chunk)?);
            let fw = self.forward(&mut g, x, mode, &mut Vec::new())?;
            for row in g.value(fw.prediction).data().chunks_exact(s) {
                out.push(
                    row.iter()
                        .enumerate()
                        .map(|(k, v)| v * self.standardizer.label_std[k] + self.standardizer.label_mean[k])
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    /// One pass over unlabeled `series`, replacing the decoder batch-norm
    /// running estimates with their population moments.
    pub fn adapt_batch_norm(&mut self, series: &[&[f64]], mode: NormMode) -> Result<()> {
        if self.decoder_norm.is_none() {
            return Ok(());
        }
        let mut features = Vec::new();
        for chunk in series.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(self.inputs(chunk)?);
            let e = self.encode(&mut g, x)?;
            let t1 = self.forward_t1(&mut g, e, mode, &mut Vec::new())?;
            let late = self.forward_t2(&mut g, t1.full, mode, &mut Vec::new())?;
            features.push(g.value(late).clone());
        }
        if let Some(bn) = self.decoder_norm.as_mut() {
            bn.adapt(&features);
        }
        Ok(())
    }

    pub(crate) fn set_running_stats(&mut self, stats: [Option<RunningStats>; 4]) -> Result<()> {
        for (site, s) in stats.into_iter().enumerate() {
            let ln = self.layer_norm_mut(site);
            if ln.stats.is_some() != s.is_some() {
                return Err(Error::Checkpoint(format!("hybrid layout mismatch at norm site {site}")));
            }
            ln.stats = s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LN_EPS;
    use crate::rng::stream;
    use rand::Rng as _;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 3,
            seq_len: 6,
            species: 2,
            dim: 4,
            disc_dim: 5,
            heads: 2,
            ffn_dim: 8,
            discriminator_out: Some(3),
            ..ModelConfig::default()
        }
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, &[99]);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn set(model: &mut PhenoFormer, name: &str, value: Tensor) {
        let id = model.params().find(name).unwrap_or_else(|| panic!("no param {name}"));
        *model.params_mut().get_mut(id) = value;
    }

    fn get<'a>(model: &'a PhenoFormer, name: &str) -> &'a Tensor {
        model.params().get(model.params().find(name).unwrap())
    }

    fn zero_params(model: &mut PhenoFormer, prefix: &str) {
        for id in model.params_with_prefix(prefix) {
            let shape = model.params().get(id).shape().to_vec();
            *model.params_mut().get_mut(id) = Tensor::zeros(&shape);
        }
    }

    fn plain_ln(v: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        let sd = (var + LN_EPS).sqrt();
        v.iter().enumerate().map(|(i, x)| gamma[i] * (x - mu) / sd + beta[i]).collect()
    }

    fn affine(v: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(v.len(), rows);
        (0..cols)
            .map(|j| (0..rows).map(|i| v[i] * w.data()[i * cols + j]).sum::<f64>() + b.data()[j])
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn encode_matches_per_column_products() {
        let model = PhenoFormer::new(small_config(), 3).unwrap();
        let x = random_tensor(&[2, 6, 3], 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = model.encode(&mut g, xv).unwrap();
        assert_eq!(g.shape(e), &[2, 6, 4]);
        let (w, b) = (get(&model, "encoder.weight"), get(&model, "encoder.bias"));
        for (col, out) in x.data().chunks(3).zip(g.value(e).data().chunks(4)) {
            assert_close(out, &affine(col, w, b), 1e-12);
        }
    }

    #[test]
    fn zero_encoder_gives_zero_embeddings() {
        let mut model = PhenoFormer::new(small_config(), 3).unwrap();
        zero_params(&mut model, "encoder");
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[1, 6, 3], 2));
        let e = model.encode(&mut g, x).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn t1_has_no_cross_sample_mixing() {
        let model = PhenoFormer::new(small_config(), 4).unwrap();
        let a = random_tensor(&[1, 6, 4], 5);
        let b = random_tensor(&[1, 6, 4], 6);
        let run = |first: &Tensor, second: &Tensor| {
            let mut data = first.data().to_vec();
            data.extend_from_slice(second.data());
            let mut g = Graph::new();
            let e = g.constant(Tensor::new(vec![2, 6, 4], data).unwrap());
            let out = model.forward_t1(&mut g, e, NormMode::SourceTrain, &mut Vec::new()).unwrap();
            assert_eq!(g.shape(out.full), &[2, 8, 4]);
            assert_eq!(g.shape(out.series), &[2, 6, 4]);
            assert_eq!(g.shape(out.tokens), &[2, 2, 4]);
            g.value(out.full).data().to_vec()
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert_eq!(&ab[..32], &ba[32..]);
        assert_eq!(&ab[32..], &ba[..32]);
    }

    #[test]
    fn t1_with_zeroed_sublayers_is_layer_norm_of_tokens() {
        let mut model = PhenoFormer::new(small_config(), 7).unwrap();
        for prefix in ["t1.attn", "t1.ff"] {
            zero_params(&mut model, prefix);
        }
        set(&mut model, "t1.norm1.gamma", random_tensor(&[4], 8));
        set(&mut model, "t1.norm1.beta", random_tensor(&[4], 9));
        set(&mut model, "t1.norm2.gamma", random_tensor(&[4], 10));
        set(&mut model, "t1.norm2.beta", random_tensor(&[4], 11));
        let mut g = Graph::new();
        let e = g.constant(random_tensor(&[1, 6, 4], 12));
        let out = model.forward_t1(&mut g, e, NormMode::SourceEval, &mut Vec::new()).unwrap();
        let tokens = get(&model, "tokens").clone();
        for (token, z) in tokens.data().chunks(4).zip(g.value(out.tokens).data().chunks(4)) {
            let first = plain_ln(token, get(&model, "t1.norm1.gamma").data(), get(&model, "t1.norm1.beta").data());
            let expected = plain_ln(&first, get(&model, "t1.norm2.gamma").data(), get(&model, "t1.norm2.beta").data());
            assert_close(z, &expected, 1e-12);
        }
    }

    fn t2_output(model: &PhenoFormer, seed: u64, mode: NormMode) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let e = g.constant(random_tensor(&[2, 6, 4], seed));
        let t1 = model.forward_t1(&mut g, e, mode, &mut Vec::new()).unwrap();
        let out = model.forward_t2(&mut g, t1.full, mode, &mut Vec::new()).unwrap();
        (g.value(t1.full).data().to_vec(), g.value(out).data().to_vec())
    }

    #[test]
    fn source_train_t2_matches_standard_layer_norm() {
        let hybrid = PhenoFormer::new(small_config(), 13).unwrap();
        let plain = PhenoFormer::new(
            ModelConfig {
                hybrid: HybridPlacement::None,
                ..small_config()
            },
            13,
        )
        .unwrap();
        assert!(hybrid.layer_norms()[2].is_hybrid() && !plain.layer_norms()[2].is_hybrid());
        assert!(!hybrid.layer_norms()[0].is_hybrid());
        let (_, a) = t2_output(&hybrid, 14, NormMode::SourceTrain);
        let (_, b) = t2_output(&plain, 14, NormMode::SourceTrain);
        assert_close(&a, &b, 1e-12);
    }

    #[test]
    fn source_train_output_ignores_running_stats() {
        let mut model = PhenoFormer::new(small_config(), 15).unwrap();
        let (_, before) = t2_output(&model, 16, NormMode::SourceTrain);
        for site in [2, 3] {
            model.layer_norm_mut(site).stats.as_mut().unwrap().update(3.0, 7.0);
        }
        let (_, after) = t2_output(&model, 16, NormMode::SourceTrain);
        assert_eq!(before, after);
    }

    #[test]
    fn source_train_reports_stats_and_commit_applies_them() {
        let mut model = PhenoFormer::new(small_config(), 17).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[2, 6, 3], 18));
        let mut observed = Vec::new();
        model.forward(&mut g, x, NormMode::SourceTrain, &mut observed).unwrap();
        let sites: Vec<usize> = observed
            .iter()
            .map(|o| match o {
                Observation::Layer { site, .. } | Observation::Batch { site, .. } => *site,
            })
            .collect();
        assert_eq!(sites, vec![2, 3]);
        model.commit(observed);
        for ln in &model.layer_norms()[2..] {
            let stats = ln.stats.as_ref().unwrap();
            assert!(stats.initialized && stats.std > 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[2, 6, 3], 18));
        let mut observed = Vec::new();
        model.forward(&mut g, x, NormMode::SourceEval, &mut observed).unwrap();
        assert!(observed.is_empty());
    }

    #[test]
    fn target_eval_requires_initialized_stats() {
        let model = PhenoFormer::new(small_config(), 19).unwrap();
        let err = model.predict(&[&[0.5; 18]], NormMode::TargetEval).unwrap_err();
        assert_eq!(err.to_string(), "uninitialized running statistics");
    }

    #[test]
    fn target_eval_applies_recorded_statistics() {
        let mut model = PhenoFormer::new(small_config(), 20).unwrap();
        for prefix in ["t2.attn", "t2.ff"] {
            zero_params(&mut model, prefix);
        }
        let recorded = [(0.3, 1.7), (-0.2, 0.6)];
        for (site, (mean, std)) in [2, 3].into_iter().zip(recorded) {
            let stats = model.layer_norm_mut(site).stats.as_mut().unwrap();
            stats.mean = mean;
            stats.std = std;
            stats.initialized = true;
        }
        set(&mut model, "t2.norm1.gamma", random_tensor(&[4], 21));
        set(&mut model, "t2.norm2.beta", random_tensor(&[4], 22));
        let (full, out) = t2_output(&model, 23, NormMode::TargetEval);
        let hln = |v: &[f64], (mean, std): (f64, f64), gamma: &Tensor, beta: &Tensor| -> Vec<f64> {
            v.iter()
                .enumerate()
                .map(|(i, x)| gamma.data()[i] * (x - mean) / std + beta.data()[i])
                .collect()
        };
        for b in 0..2 {
            for s in 0..2 {
                let row = &full[(b * 8 + 6 + s) * 4..][..4];
                let first = hln(row, recorded[0], get(&model, "t2.norm1.gamma"), get(&model, "t2.norm1.beta"));
                let expected = hln(&first, recorded[1], get(&model, "t2.norm2.gamma"), get(&model, "t2.norm2.beta"));
                assert_close(&out[(b * 2 + s) * 4..][..4], &expected, 1e-12);
            }
        }
    }

    #[test]
    fn target_eval_with_unit_stats_is_identity() {
        let mut model = PhenoFormer::new(small_config(), 24).unwrap();
        zero_params(&mut model, "t2.attn");
        zero_params(&mut model, "t2.ff");
        for site in [2, 3] {
            model.layer_norm_mut(site).stats.as_mut().unwrap().initialized = true;
        }
        let (full, out) = t2_output(&model, 25, NormMode::TargetEval);
        for b in 0..2 {
            assert_close(&out[b * 8..][..8], &full[(b * 8 + 6) * 4..][..8], 1e-15);
        }
    }

    fn decode_values(model: &PhenoFormer, late: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.constant(late.clone());
        let y = model.decode(&mut g, v, NormMode::SourceEval, &mut Vec::new()).unwrap();
        assert_eq!(g.shape(y), &[late.shape()[0], 2]);
        g.value(y).data().to_vec()
    }

    #[test]
    fn decode_matches_affine_evaluation() {
        let shared = PhenoFormer::new(small_config(), 26).unwrap();
        let late = random_tensor(&[3, 2, 4], 27);
        let expected: Vec<f64> = late
            .data()
            .chunks(4)
            .map(|row| affine(row, get(&shared, "decoder.weight"), get(&shared, "decoder.bias"))[0])
            .collect();
        assert_close(&decode_values(&shared, &late), &expected, 1e-12);

        let per = PhenoFormer::new(
            ModelConfig {
                decoder: DecoderKind::PerSpecies,
                ..small_config()
            },
            26,
        )
        .unwrap();
        let (w, b) = (get(&per, "decoder.weight"), get(&per, "decoder.bias"));
        let expected: Vec<f64> = late
            .data()
            .chunks(4)
            .enumerate()
            .map(|(i, row)| {
                let s = i % 2;
                row.iter().zip(&w.data()[s * 4..][..4]).map(|(a, b)| a * b).sum::<f64>() + b.data()[s]
            })
            .collect();
        assert_close(&decode_values(&per, &late), &expected, 1e-12);
    }

    #[test]
    fn decode_zero_weights_returns_bias() {
        let mut model = PhenoFormer::new(small_config(), 28).unwrap();
        set(&mut model, "decoder.weight", Tensor::zeros(&[4, 1]));
        set(&mut model, "decoder.bias", Tensor::vector(vec![2.5]));
        let y = decode_values(&model, &random_tensor(&[2, 2, 4], 29));
        assert!(y.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn decode_is_local_to_each_species() {
        for decoder in [DecoderKind::Shared, DecoderKind::PerSpecies] {
            let model = PhenoFormer::new(ModelConfig { decoder, ..small_config() }, 30).unwrap();
            let late = random_tensor(&[1, 2, 4], 31);
            let mut zeroed = late.clone();
            zeroed.data_mut()[4..].fill(0.0);
            let (a, b) = (decode_values(&model, &late), decode_values(&model, &zeroed));
            assert_eq!(a[0], b[0]);
            assert_ne!(a[1], b[1]);
        }
    }

    #[test]
    fn discriminate_matches_layer_by_layer_evaluation() {
        let model = PhenoFormer::new(small_config(), 32).unwrap();
        let z = random_tensor(&[2, 2, 4], 33);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let f = model.discriminate(&mut g, zv).unwrap();
        assert_eq!(g.shape(f), &[2, 3]);
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        for (flat, out) in z.data().chunks(8).zip(g.value(f).data().chunks(3)) {
            let h = relu(affine(flat, get(&model, "discriminator.0.weight"), get(&model, "discriminator.0.bias")));
            let h = relu(affine(&h, get(&model, "discriminator.1.weight"), get(&model, "discriminator.1.bias")));
            let expected = affine(&h, get(&model, "discriminator.2.weight"), get(&model, "discriminator.2.bias"));
            assert_close(out, &expected, 1e-12);
        }
    }

    #[test]
    fn discriminate_zero_input_and_biases_gives_zero() {
        let mut model = PhenoFormer::new(small_config(), 34).unwrap();
        for i in 0..3 {
            let shape = get(&model, &format!("discriminator.{i}.bias")).shape().to_vec();
            set(&mut model, &format!("discriminator.{i}.bias"), Tensor::zeros(&shape));
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 4]));
        let f = model.discriminate(&mut g, z).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_does_not_change_backbone_init() {
        let with = PhenoFormer::new(small_config(), 35).unwrap();
        let without = PhenoFormer::new(
            ModelConfig {
                discriminator_out: None,
                ..small_config()
            },
            35,
        )
        .unwrap();
        for (id, name, t) in without.params().iter() {
            assert_eq!(with.params().get(id), t, "{name}");
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let configs = [
            small_config(),
            ModelConfig::default(),
            ModelConfig {
                decoder: DecoderKind::PerSpecies,
                decoder_batch_norm: true,
                discriminator_out: None,
                ..small_config()
            },
        ];
        for config in configs {
            let model = PhenoFormer::new(config.clone(), 0).unwrap();
            assert_eq!(model.params().numel(), config.parameter_count());
        }
        let d = ModelConfig {
            discriminator_out: Some(128),
            ..ModelConfig::default()
        };
        let backbone = 7 * 64 + 64 + 5 * 64 + 2 * (4 * (64 * 64 + 64) + 2 * 64 + 64 * 128 + 128 + 128 * 64 + 64 + 2 * 64) + 65;
        let disc = 320 * 128 + 128 + 128 * 128 + 128 + 128 * 128 + 128;
        assert_eq!(d.parameter_count(), backbone + disc);
    }

    #[test]
    fn shifting_positions_changes_output() {
        let mut model = PhenoFormer::new(small_config(), 36).unwrap();
        let series = random_tensor(&[18], 37);
        let before = model.predict(&[series.data()], NormMode::SourceEval).unwrap();
        let shifted = model.positions().data().iter().map(|p| p + 0.5).collect();
        model.set_positions(Tensor::new(vec![6, 4], shifted).unwrap()).unwrap();
        let after = model.predict(&[series.data()], NormMode::SourceEval).unwrap();
        let diff: f64 = before[0].iter().zip(&after[0]).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn sinusoidal_table_values() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.at(&[0, 0]), 0.0);
        assert_eq!(p.at(&[0, 1]), 1.0);
        assert!((p.at(&[2, 0]) - 2f64.sin()).abs() < 1e-15);
        assert!((p.at(&[2, 3]) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn inputs_pool_and_standardize() {
        let mut model = PhenoFormer::new(
            ModelConfig {
                channels: 1,
                seq_len: 5,
                pool: 2,
                ..small_config()
            },
            0,
        )
        .unwrap();
        model.set_standardizer(Standardizer {
            input_mean: vec![1.0],
            input_std: vec![2.0],
            ..Standardizer::identity(1, 2)
        });
        let x = model.inputs(&[&[1.0, 3.0, 5.0, 7.0, 9.0]]).unwrap();
        assert_eq!(x.shape(), &[1, 3, 1]);
        assert_eq!(x.data(), &[0.5, 2.5, 4.0]);
        assert!(model.inputs(&[&[1.0; 4]]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let config = small_config();
        let mut model = PhenoFormer::new(config, 38).unwrap();
        let x = random_tensor(&[2, 6, 3], 39);
        let loss_of = |model: &PhenoFormer| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let fw = model.forward(&mut g, xv, NormMode::SourceTrain, &mut Vec::new()).unwrap();
            let sq = g.mul(fw.prediction, fw.prediction).unwrap();
            let loss = g.sum_all(sq);
            (g.value(loss).item(), g, loss)
        };
        let (_, mut g, loss) = loss_of(&model);
        g.backward(loss).unwrap();
        let grads = g.param_grads(model.params());
        let h = 1e-6;
        for name in ["encoder.weight", "tokens", "t1.attn.q.weight", "t2.norm2.gamma", "t2.ff1.bias", "decoder.bias"] {
            let id = model.params().find(name).unwrap();
            let last = model.params().get(id).len() - 1;
            for idx in [0, last] {
                let orig = model.params().get(id).data()[idx];
                model.params_mut().get_mut(id).data_mut()[idx] = orig + h;
                let up = loss_of(&model).0;
                model.params_mut().get_mut(id).data_mut()[idx] = orig - h;
                let down = loss_of(&model).0;
                model.params_mut().get_mut(id).data_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[model.params().ids().position(|p| p == id).unwrap()].data()[idx];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{name}[{idx}]: {numeric} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model = PhenoFormer::new(
            ModelConfig {
                decoder_batch_norm: true,
                ..small_config()
            },
            40,
        )
        .unwrap();
        let series: Vec<Tensor> = (0..3).map(|i| random_tensor(&[18], 41 + i)).collect();
        let refs: Vec<&[f64]> = series.iter().map(Tensor::data).collect();
        let mut g = Graph::new();
        let x = g.constant(model.inputs(&refs).unwrap());
        let mut observed = Vec::new();
        model.forward(&mut g, x, NormMode::SourceTrain, &mut observed).unwrap();
        model.commit(observed);
        model.set_standardizer(Standardizer {
            input_mean: vec![0.1, 1.0 / 3.0, -2.0],
            input_std: vec![1.5, 0.7, 1e-3],
            label_mean: vec![120.25, 1.0 / 7.0],
            label_std: vec![9.0, 11.0],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = PhenoFormer::load(&path).unwrap();
        assert_eq!(loaded.to_checkpoint(), model.to_checkpoint());
        for mode in [NormMode::SourceEval, NormMode::TargetEval] {
            assert_eq!(loaded.predict(&refs, mode).unwrap(), model.predict(&refs, mode).unwrap());
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_layout() {
        let model = PhenoFormer::new(small_config(), 42).unwrap();
        let mut ck = model.to_checkpoint();
        ck.params[0].shape = vec![1, 12];
        assert!(PhenoFormer::from_checkpoint(ck).is_err());
        let mut ck = model.to_checkpoint();
        ck.format = "other".into();
        assert!(PhenoFormer::from_checkpoint(ck).is_err());
    }
}
