//! Training objectives, all expressed as differentiable graph nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor on feature norms inside the rank loss. Norms at or above it are
/// used unchanged, so the loss stays exactly invariant to row scaling.
pub const NORM_EPS: f64 = 1e-8;

/// Smallest accepted temperature: logit differences reach 2/τ, and
/// exp(2/τ) must stay finite.
pub const MIN_TAU: f64 = 0.005;

/// Sample metadata used to order samples in the rank loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    #[default]
    Year,
    AnnualTemperature,
    Elevation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankLossConfig {
    pub tau: f64,
    pub guidance: Guidance,
}

impl Default for RankLossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            guidance: Guidance::Year,
        }
    }
}

/// Rank loss value plus the number of zero-norm feature rows that were
/// only kept finite by [`NORM_EPS`].
#[derive(Clone, Copy, Debug)]
pub struct RankLoss {
    pub value: Var,
    pub degenerate: usize,
}

/// Mean squared error over the entries where `mask` is 1.
pub fn mse(g: &mut Graph, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    if g.shape(pred) != target.shape() || target.shape() != mask.shape() {
        return Err(Error::shape("mse", g.shape(pred), target.shape()));
    }
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return Err(Error::invalid("mse", "every entry is masked"));
    }
    let y = g.constant(target.clone());
    let m = g.constant(mask.clone());
    let diff = g.sub(pred, y)?;
    let sq = g.mul(diff, diff)?;
    let masked = g.mul(sq, m)?;
    let total = g.sum_all(masked);
    Ok(g.mul_scalar(total, 1.0 / count))
}

/// Rank-N-Contrast loss over the rows of `features` (`[N, F]`).
///
/// For every ordered pair `(i, j)`, `j != i`, the negatives are all
/// `k != i` whose guidance distance to `i` is at least that of `j` (ties
/// included, so `j` is always among them). Each pair contributes
/// `-log(exp(s_ij/τ) / Σ_k exp(s_ik/τ))` with cosine similarities `s`;
/// both the inner and the outer average divide by `N`.
pub fn rank_n_contrast(
    g: &mut Graph,
    features: Var,
    guidance: &[f64],
    cfg: &RankLossConfig,
) -> Result<RankLoss> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("rank_n_contrast", format!("features must be [N, F], got {shape:?}")));
    }
    let (n, f) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::invalid("rank_n_contrast", format!("needs N >= 2, got {n}")));
    }
    if guidance.len() != n {
        return Err(Error::shape("rank_n_contrast", &shape, &[guidance.len()]));
    }
    if !(cfg.tau >= MIN_TAU) {
        return Err(Error::invalid("rank_n_contrast", format!("tau = {} is below {MIN_TAU}", cfg.tau)));
    }

    let sq = g.mul(features, features)?;
    let ss = g.sum(sq, 1, true)?;
    let norm = g.sqrt(ss);
    let degenerate = g.value(norm).data().iter().filter(|&&v| v == 0.0).count();
    if degenerate > 0 {
        log::warn!("rank loss: {degenerate} zero-norm feature vector(s)");
    }
    let lift = Tensor::from_fn(&[n, 1], |i| (NORM_EPS - g.value(norm).data()[i]).max(0.0));
    let lift = g.constant(lift);
    let norm = g.add(norm, lift)?;
    let norm = g.broadcast_to(norm, &[n, f])?;
    let unit = g.div(features, norm)?;
    let unit_t = g.transpose(unit)?;
    let sim = g.matmul(unit, unit_t)?;
    let logits = g.mul_scalar(sim, 1.0 / cfg.tau);

    // Each pair term is log Σ_k exp(l_ik - l_ij) over the negatives of
    // (i, j). Differences are formed explicitly so that k = j contributes
    // exactly exp(0) = 1, and a lone negative gives exactly 0.
    let ones_col = g.constant(Tensor::full(&[n, n, 1], 1.0));
    let ones_row = g.constant(Tensor::full(&[n, 1, n], 1.0));
    let l_ik = g.reshape(logits, &[n, 1, n])?;
    let l_ik = g.matmul(ones_col, l_ik)?;
    let l_ij = g.reshape(logits, &[n, n, 1])?;
    let l_ij = g.matmul(l_ij, ones_row)?;
    let diff = g.sub(l_ik, l_ij)?;
    let e = g.exp(diff);
    let mask = g.constant(negative_set_mask(guidance));
    let masked = g.mul(e, mask)?;
    let denom = g.sum(masked, 2, false)?;
    let terms = g.log(denom);

    let pair_weight = 1.0 / (n * n) as f64;
    let weights = Tensor::from_fn(&[n, n], |idx| {
        if idx / n == idx % n {
            0.0
        } else {
            pair_weight
        }
    });
    let weights = g.constant(weights);
    let weighted = g.mul(terms, weights)?;
    let value = g.sum_all(weighted);
    Ok(RankLoss { value, degenerate })
}

/// `mask[i, j, k] = 1` when `k` is a negative for the pair `(i, j)`.
pub fn negative_set_mask(guidance: &[f64]) -> Tensor {
    let n = guidance.len();
    Tensor::from_fn(&[n, n, n], |idx| {
        let (i, j, k) = (idx / (n * n), (idx / n) % n, idx % n);
        let dj = (guidance[i] - guidance[j]).abs();
        let dk = (guidance[i] - guidance[k]).abs();
        if k != i && dk >= dj {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

/// Mean binary cross-entropy of domain logits (target = positive class).
pub fn binary_domain_loss(g: &mut Graph, logits: Var, domains: &[Domain]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let n: usize = shape.iter().product();
    if n != domains.len() {
        return Err(Error::shape("binary_domain_loss", &shape, &[domains.len()]));
    }
    let labels = Tensor::new(shape, domains.iter().map(|d| d.label()).collect())?;
    let y = g.constant(labels);
    // BCE-with-logits: softplus(z) - y·z
    let sp = g.softplus(logits);
    let yz = g.mul(logits, y)?;
    let per = g.sub(sp, yz)?;
    let total = g.sum_all(per);
    Ok(g.mul_scalar(total, 1.0 / n as f64))
}

/// Correlation alignment: `‖C_s - C_t‖²_F / (4 d²)` with unbiased feature
/// covariances of `[N, d]` and `[M, d]` inputs.
pub fn coral(g: &mut Graph, source: Var, target: Var) -> Result<Var> {
    let (ss, ts) = (g.shape(source).to_vec(), g.shape(target).to_vec());
    if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] {
        return Err(Error::shape("coral", &ss, &ts));
    }
    if ss[0] < 2 || ts[0] < 2 {
        return Err(Error::invalid("coral", "needs at least 2 samples per domain"));
    }
    let d = ss[1] as f64;
    let cs = covariance(g, source)?;
    let ct = covariance(g, target)?;
    let diff = g.sub(cs, ct)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq);
    Ok(g.mul_scalar(total, 1.0 / (4.0 * d * d)))
}

fn covariance(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let mean = g.mean(x, 0, false)?;
    let centered = g.sub(x, mean)?;
    let ct = g.transpose(centered)?;
    let prod = g.matmul(ct, centered)?;
    Ok(g.mul_scalar(prod, 1.0 / (n as f64 - 1.0)))
}
