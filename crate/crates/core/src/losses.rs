//! The generalized flow-matching objective
//! `𝔼_{t∼𝕋} 𝔼_{x_t} [ w(x_t, t) · ℓ(x₀, D_θ(x_t, t)) ]`.
//!
//! Weight rules, time distributions and loss maps are independent axes. Any
//! positive weight, any time density positive on `(0, 1)` and any invertible
//! linear map share the minimizer of the plain MSE objective (the posterior
//! mean); the Pseudo-Huber loss does not.

use alloc::vec;
use alloc::vec::Vec;

use crate::couplings::Batch;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{
    Activation, AdamConfig, DenoiseFn, Denoiser, Dropout, Graph, Mlp, Mode, OptimizerState,
    Recorded, TimeEmbedding, Var,
};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// `x_t = (1 − t)·x₀ + t·x₁`, with `t` broadcast over features.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    x1.expect_shape("interpolate", x0.shape())?;
    if t.len() != x0.rows() {
        return Err(Error::shape("interpolate time", &[x0.rows()], &[t.len()]));
    }
    if let Some(i) = t.iter().position(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::NonFinite {
            context: "interpolation time outside [0, 1]",
            index: i,
        });
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        for (o, b) in out.row_mut(i).iter_mut().zip(x1.row(i)) {
            *o = (1.0 - ti) * *o + ti * b;
        }
    }
    Ok(out)
}

/// Training time distribution `𝕋` on `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum TimeDist {
    Uniform,
    /// Density ∝ `cosh(4(t − 0.5))`.
    Cosh,
    /// `t = σ/(1 + σ)` with `ln σ ∼ 𝒩(p_mean, p_std²)`.
    LogNormal {
        p_mean: f64,
        p_std: f64,
    },
    /// Density ∝ `a^t`, `a ≥ 1`.
    Exponential {
        a: f64,
    },
}

impl TimeDist {
    pub fn lognormal_default() -> Self {
        TimeDist::LogNormal {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }

    pub fn exponential(a: f64) -> Result<Self> {
        let d = TimeDist::Exponential { a };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TimeDist::Exponential { a } if !(a >= 1.0) || !a.is_finite() => Err(Error::invalid(
                "exponential time distribution",
                "need a ≥ 1",
            )),
            TimeDist::LogNormal { p_std, p_mean } if !(p_std > 0.0) || !p_mean.is_finite() => Err(
                Error::invalid("lognormal time distribution", "need p_std > 0"),
            ),
            _ => Ok(()),
        }
    }

    /// Inverse CDF at `u ∈ (0, 1)`. Lognormal has no closed form in `u`;
    /// use [`TimeDist::sample`].
    pub fn inverse_cdf(&self, u: f64) -> Option<f64> {
        match *self {
            TimeDist::Uniform => Some(u),
            TimeDist::Cosh => {
                let s2 = math::sinh(2.0);
                Some(0.5 + math::asinh((2.0 * u - 1.0) * s2) / 4.0)
            }
            TimeDist::Exponential { a } => {
                if a == 1.0 {
                    Some(u)
                } else {
                    Some(math::ln(1.0 + u * (a - 1.0)) / math::ln(a))
                }
            }
            TimeDist::LogNormal { .. } => None,
        }
    }

    /// Normalized density on `(0, 1)`.
    pub fn density(&self, t: f64) -> f64 {
        if !(0.0..=1.0).contains(&t) {
            return 0.0;
        }
        match *self {
            TimeDist::Uniform => 1.0,
            TimeDist::Cosh => 4.0 * math::cosh(4.0 * (t - 0.5)) / (2.0 * math::sinh(2.0)),
            TimeDist::Exponential { a } => {
                if a == 1.0 {
                    1.0
                } else {
                    math::ln(a) * math::powf(a, t) / (a - 1.0)
                }
            }
            TimeDist::LogNormal { p_mean, p_std } => {
                if t <= 0.0 || t >= 1.0 {
                    return 0.0;
                }
                // change of variables σ = t/(1 − t), dσ/dt = 1/(1 − t)²
                let s = t / (1.0 - t);
                let z = (math::ln(s) - p_mean) / p_std;
                let pdf_log =
                    math::exp(-0.5 * z * z) / (p_std * math::sqrt(2.0 * core::f64::consts::PI));
                pdf_log / s / ((1.0 - t) * (1.0 - t))
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            TimeDist::LogNormal { p_mean, p_std } => {
                let s = math::exp(p_mean + p_std * rng::normal(rng));
                s / (1.0 + s)
            }
            _ => {
                let u = rng::open01(rng);
                self.inverse_cdf(u).unwrap_or(u)
            }
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Low-pass kernel `B` used to build `HPF = I − B`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum BlurSpec {
    /// `B = 11ᵀ/d`: keeps only the mean. For `d = 2` this is the 2×2
    /// averaging matrix.
    Average,
    /// Circular Gaussian blur over the feature index, `sigma` in index units.
    Gaussian { sigma: f64 },
}

impl BlurSpec {
    pub fn default_for(dim: usize) -> Self {
        if dim <= 2 {
            BlurSpec::Average
        } else {
            BlurSpec::Gaussian { sigma: 1.0 }
        }
    }

    /// Eigenvalue of `B` at circular frequency `f`. The Gaussian blur is
    /// defined by its transfer function `exp(−2π²σ²(f/d)²)`, which keeps the
    /// spectrum in `(0, 1]` for every `d`.
    fn transfer(&self, f: usize, dim: usize) -> f64 {
        let f = f.min(dim - f);
        match *self {
            BlurSpec::Average => {
                if f == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            BlurSpec::Gaussian { sigma } => {
                let x = f as f64 / dim as f64;
                math::exp(
                    -2.0 * core::f64::consts::PI * core::f64::consts::PI * sigma * sigma * x * x,
                )
            }
        }
    }

    /// First row of the symmetric circulant blur matrix.
    fn kernel(&self, dim: usize) -> Result<Vec<f64>> {
        if let BlurSpec::Gaussian { sigma } = *self {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::invalid("blur sigma", "must be positive"));
            }
        }
        let spectrum: Vec<f64> = (0..dim).map(|f| self.transfer(f, dim)).collect();
        Ok((0..dim)
            .map(|j| {
                spectrum
                    .iter()
                    .enumerate()
                    .map(|(f, mu)| {
                        mu * math::cos(2.0 * core::f64::consts::PI * (j * f) as f64 / dim as f64)
                    })
                    .sum::<f64>()
                    / dim as f64
            })
            .collect())
    }
}

/// Per-sample loss `ℓ(x₀, x̂₀)`.
#[derive(Clone, Debug, PartialEq)]
pub enum LossMap {
    /// `‖x − y‖²`.
    Mse,
    /// `(1/t)·(‖x − y‖² + (ct)²)^{1/2} − c`.
    PseudoHuber { c: f64 },
    /// `‖φx − φy‖²` with `φ = I + λ·HPF`.
    HighPass(HighPassMap),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HighPassMap {
    pub lambda: f64,
    pub blur: BlurSpec,
    /// `φ` as a dense `d × d` matrix (symmetric).
    phi: Tensor,
    /// Eigenvalues of `HPF`, indexed by circular frequency.
    hpf_eigenvalues: Vec<f64>,
}

impl HighPassMap {
    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    pub fn hpf_eigenvalues(&self) -> &[f64] {
        &self.hpf_eigenvalues
    }

    pub fn max_hpf_eigenvalue(&self) -> f64 {
        self.hpf_eigenvalues.iter().copied().fold(0.0, f64::max)
    }
}

impl LossMap {
    /// Pseudo-Huber with `c = 0.00054·√d`.
    pub fn pseudo_huber_for_dim(dim: usize) -> Self {
        LossMap::PseudoHuber {
            c: 0.00054 * math::sqrt(dim as f64),
        }
    }

    /// `φ = I + λ(I − B)`. Fails unless every eigenvalue of `I − B` lies in
    /// `[0, 1]`, which makes the spectrum of `φ` lie in `[1, 1 + λ]`.
    pub fn high_pass(dim: usize, lambda: f64, blur: BlurSpec) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(
                "hpf lambda",
                "must be finite and non-negative",
            ));
        }
        let k = blur.kernel(dim)?;
        // symmetric circulant: eigenvalue at frequency f is Σ_j k_j cos(2πjf/d)
        let hpf_eigenvalues: Vec<f64> = (0..dim)
            .map(|f| {
                let b: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        kj * math::cos(2.0 * core::f64::consts::PI * (j * f) as f64 / dim as f64)
                    })
                    .sum();
                1.0 - b
            })
            .collect();
        if hpf_eigenvalues
            .iter()
            .any(|&e| !(-1e-12..=1.0 + 1e-12).contains(&e))
        {
            return Err(Error::invalid(
                "hpf",
                "blur spectrum outside [0, 1]; φ not certified invertible",
            ));
        }
        let mut phi = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                let b = k[(c + dim - r) % dim];
                let hpf = if r == c { 1.0 - b } else { -b };
                phi[r * dim + c] = if r == c { 1.0 } else { 0.0 } + lambda * hpf;
            }
        }
        Ok(LossMap::HighPass(HighPassMap {
            lambda,
            blur,
            phi: Tensor::matrix(dim, dim, phi),
            hpf_eigenvalues,
        }))
    }

    /// Records the per-sample loss column `[n × 1]`.
    pub fn record(&self, g: &mut Graph, target: Var, pred: Var, t: &[f64]) -> Result<Var> {
        let diff = g.sub(target, pred)?;
        match self {
            LossMap::Mse => {
                let sq = g.square(diff);
                Ok(g.sum_cols(sq))
            }
            LossMap::PseudoHuber { c } => {
                let sq = g.square(diff);
                let s = g.sum_cols(sq);
                let ct2 = g.input(Tensor::column(
                    t.iter().map(|t| (c * t) * (c * t)).collect(),
                ));
                let inner = g.add(s, ct2)?;
                let root = g.sqrt(inner);
                let inv_t = g.input(Tensor::column(t.iter().map(|t| 1.0 / t).collect()));
                let scaled = g.scale_rows(root, inv_t)?;
                Ok(g.add_const(scaled, -c))
            }
            LossMap::HighPass(h) => {
                // rows are x, so φx is x·φᵀ; φ is symmetric
                let phi = g.input(h.phi.clone());
                let proj = g.matmul(diff, phi)?;
                let sq = g.square(proj);
                Ok(g.sum_cols(sq))
            }
        }
    }

    /// `ℓ(x_i, y_i)` for each row.
    pub fn evaluate(&self, x: &Tensor, y: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        y.expect_shape("loss", x.shape())?;
        if matches!(self, LossMap::PseudoHuber { .. }) && t.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::invalid("t", "Pseudo-Huber needs t > 0"));
        }
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let b = g.input(y.clone());
        let l = self.record(&mut g, a, b, t)?;
        Ok(g.value(l).data().to_vec())
    }
}

/// `ℓ(x₀, D_θ(x_t, t))` per sample.
pub fn per_sample_loss(
    d: &Denoiser,
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
    map: &LossMap,
    mode: Mode,
) -> Result<Vec<f64>> {
    let xt = interpolate(x0, x1, t)?;
    let pred = d.forward(&xt, t, None, mode)?;
    let losses = map.evaluate(x0, &pred, t)?;
    if let Some(index) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            context: "per-sample loss",
            index,
        });
    }
    Ok(losses)
}

/// Small scalar network `f_φ(x_t, t)` tracking the log of the per-sample loss.
#[derive(Clone, Debug)]
pub struct LossTracker {
    net: Mlp,
    embedding: TimeEmbedding,
    optimizer: OptimizerState,
}

impl LossTracker {
    pub fn new(dim: usize, hidden: usize, adam: AdamConfig, rng: &mut Rng) -> Result<Self> {
        let embedding = TimeEmbedding::default();
        let net = Mlp::new(
            &[dim + embedding.width(), hidden, 1],
            Activation::Silu,
            true,
            rng,
        )?;
        let optimizer = OptimizerState::new(adam, net.params())?;
        Ok(LossTracker {
            net,
            embedding,
            optimizer,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn features(&self, x_t: &Tensor, t: &[f64]) -> Tensor {
        let w = x_t.cols() + self.embedding.width();
        let mut f = Vec::with_capacity(x_t.rows() * w);
        for (i, &ti) in t.iter().enumerate() {
            f.extend_from_slice(x_t.row(i));
            self.embedding.features(ti, &mut f);
        }
        Tensor::matrix(x_t.rows(), w, f)
    }

    pub fn record(&self, g: &mut Graph, x_t: &Tensor, t: &[f64]) -> Result<(Var, Vec<Var>)> {
        let input = g.input(self.features(x_t, t));
        self.net.record(g, input, Dropout::Off)
    }

    /// `f_φ(x_t, t)` per row.
    pub fn log_loss(&self, x_t: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (f, _) = self.record(&mut g, x_t, t)?;
        Ok(g.value(f).data().to_vec())
    }

    pub fn apply_gradients(&mut self, grads: &[Tensor]) -> Result<()> {
        self.optimizer.step(self.net.params_mut(), grads)?;
        Ok(())
    }
}

/// Per-sample tracker objective `e^{−f}·ℓ + f`; minimized at `f = ln ℓ`.
pub fn tracker_objective(f: f64, loss: f64) -> f64 {
    math::exp(-f) * loss + f
}

/// Running per-time-bin loss means (stop-gradient batch normalization).
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedLossMeans {
    decay: f64,
    means: Vec<Option<f64>>,
}

impl BinnedLossMeans {
    pub fn new(bins: usize, decay: f64) -> Result<Self> {
        if bins == 0 || !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(
                "batch-norm weight",
                "need bins > 0 and decay in [0, 1)",
            ));
        }
        Ok(BinnedLossMeans {
            decay,
            means: vec![None; bins],
        })
    }

    fn bin(&self, t: f64) -> usize {
        let n = self.means.len();
        ((t * n as f64) as usize).min(n - 1)
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self.means[self.bin(t)] {
            Some(m) => 1.0 / m.max(1e-12),
            None => 1.0,
        }
    }

    pub fn observe(&mut self, t: &[f64], losses: &[f64]) {
        let n = self.means.len();
        let mut sums = vec![(0.0, 0usize); n];
        for (&ti, &l) in t.iter().zip(losses) {
            let b = self.bin(ti);
            sums[b].0 += l;
            sums[b].1 += 1;
        }
        for (m, (s, c)) in self.means.iter_mut().zip(sums) {
            if c == 0 {
                continue;
            }
            let batch_mean = s / c as f64;
            *m = Some(match *m {
                Some(prev) => self.decay * prev + (1.0 - self.decay) * batch_mean,
                None => batch_mean,
            });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WeightKind {
    One,
    InvT,
    InvT2,
    /// `(σ² + 0.5²)/(0.5σ)²` with `σ = t/(1 − t)`.
    Edm,
    /// `1/𝔼_{x_t}[sg ℓ]` tracked per time bin.
    BatchNorm,
    /// `1/sg[ℓ(x_t, t)]` through the tracker `e^{−f_φ}`.
    Tracker,
}

/// Weight `w(x_t, t)`; strictly positive for every kind.
#[derive(Clone, Debug)]
pub enum WeightRule {
    One,
    InvT,
    InvT2,
    Edm,
    BatchNorm(BinnedLossMeans),
    Tracker(LossTracker),
}

/// `(σ² + 0.25)/(0.25σ²)` written in `t` so `t = 1` gives the limit 4.
pub fn edm_weight(t: f64) -> f64 {
    let u = 1.0 - t;
    (t * t + 0.25 * u * u) / (0.25 * t * t)
}

impl WeightRule {
    /// Builds a rule. The tracker kind needs `tracker_hidden` and Adam
    /// settings; [`WeightRule::tracker`] is the direct constructor.
    pub fn new(kind: WeightKind, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            WeightKind::One => WeightRule::One,
            WeightKind::InvT => WeightRule::InvT,
            WeightKind::InvT2 => WeightRule::InvT2,
            WeightKind::Edm => WeightRule::Edm,
            WeightKind::BatchNorm => WeightRule::BatchNorm(BinnedLossMeans::new(64, 0.99)?),
            WeightKind::Tracker => WeightRule::tracker(dim, 64, AdamConfig::default(), rng)?,
        })
    }

    pub fn tracker(dim: usize, hidden: usize, adam: AdamConfig, rng: &mut Rng) -> Result<Self> {
        Ok(WeightRule::Tracker(LossTracker::new(
            dim, hidden, adam, rng,
        )?))
    }

    pub fn kind(&self) -> WeightKind {
        match self {
            WeightRule::One => WeightKind::One,
            WeightRule::InvT => WeightKind::InvT,
            WeightRule::InvT2 => WeightKind::InvT2,
            WeightRule::Edm => WeightKind::Edm,
            WeightRule::BatchNorm(_) => WeightKind::BatchNorm,
            WeightRule::Tracker(_) => WeightKind::Tracker,
        }
    }

    /// Stop-gradient weights for a batch.
    pub fn weights(&self, x_t: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            WeightRule::One => vec![1.0; t.len()],
            WeightRule::InvT => t.iter().map(|t| 1.0 / t).collect(),
            WeightRule::InvT2 => t.iter().map(|t| 1.0 / (t * t)).collect(),
            WeightRule::Edm => t.iter().map(|&t| edm_weight(t)).collect(),
            WeightRule::BatchNorm(b) => t.iter().map(|&t| b.weight(t)).collect(),
            WeightRule::Tracker(tr) => tr
                .log_loss(x_t, t)?
                .into_iter()
                .map(|f| math::exp(-f))
                .collect(),
        })
    }
}

/// Recorded batch objective.
#[derive(Debug)]
pub struct LossRecord {
    /// Scalar to differentiate.
    pub objective: Var,
    pub denoiser: Recorded,
    /// Tracker parameter leaves when the rule is [`WeightRule::Tracker`].
    pub tracker_params: Option<Vec<Var>>,
    pub per_sample: Vec<f64>,
    pub weights: Vec<f64>,
    /// `mean(w·ℓ)`.
    pub weighted_mean: f64,
}

/// Records `mean_i w_i·ℓ_i` (or `mean_i e^{−f_i}ℓ_i + f_i` for the tracker)
/// on `g` for the pairs in `batch` at times `t`.
pub fn weighted_batch_loss(
    g: &mut Graph,
    d: &Denoiser,
    batch: &Batch,
    t: &[f64],
    rule: &WeightRule,
    map: &LossMap,
    mode: Mode,
) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::TooFewSamples("weighted batch loss"));
    }
    let xt = interpolate(&batch.x0, &batch.x1, t)?;
    let rec = d.record(g, &xt, t, batch.labels.as_deref(), mode)?;
    let target = g.input(batch.x0.clone());
    let per = map.record(g, target, rec.output, t)?;
    let per_sample = g.value(per).data().to_vec();
    if let Some(index) = per_sample.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            context: "per-sample loss",
            index,
        });
    }
    let (objective, weights, tracker_params) = match rule {
        WeightRule::Tracker(tr) => {
            let (f, params) = tr.record(g, &xt, t)?;
            let neg = g.scale(f, -1.0);
            let w = g.exp(neg);
            let weights = g.value(w).data().to_vec();
            let wl = g.mul(w, per)?;
            let obj = g.add(wl, f)?;
            (g.mean(obj), weights, Some(params))
        }
        _ => {
            let weights = rule.weights(&xt, t)?;
            let w = g.input(Tensor::column(weights.clone()));
            let wl = g.scale_rows(per, w)?;
            (g.mean(wl), weights, None)
        }
    };
    let weighted_mean = per_sample
        .iter()
        .zip(&weights)
        .map(|(l, w)| l * w)
        .sum::<f64>()
        / per_sample.len() as f64;
    Ok(LossRecord {
        objective,
        denoiser: rec,
        tracker_params,
        per_sample,
        weights,
        weighted_mean,
    })
}

/// Spread of per-sample losses at a fixed time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpread {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl LossSpread {
    pub fn ratio(&self) -> f64 {
        self.max / self.min
    }
}

/// Min/mean/max of `ℓ(x₀, D(x_t, t))` over a batch of coupled pairs at one
/// time `t`.
pub fn relative_loss_diagnostic(
    d: &dyn DenoiseFn,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    map: &LossMap,
) -> Result<LossSpread> {
    if x0.rows() < 2 {
        return Err(Error::TooFewSamples("relative loss diagnostic"));
    }
    let ts = vec![t; x0.rows()];
    let xt = interpolate(x0, x1, &ts)?;
    let pred = d.denoise(&xt, &ts)?;
    let l = map.evaluate(x0, &pred, &ts)?;
    let min = l.iter().copied().fold(f64::INFINITY, f64::min);
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = l.iter().sum::<f64>() / l.len() as f64;
    Ok(LossSpread { min, mean, max })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints_and_example() {
        let x0 = Tensor::from_rows(&[&[0.0, 0.0]]);
        let x1 = Tensor::from_rows(&[&[2.0, 4.0]]);
        assert_eq!(interpolate(&x0, &x1, &[0.0]).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, &[1.0]).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, &[0.25]).unwrap().data(), &[0.5, 1.0]);
        assert!(interpolate(&x0, &x1, &[1.5]).is_err());
    }

    #[test]
    fn exponential_inverse_cdf() {
        let d = TimeDist::exponential(10.0).unwrap();
        let t = d.inverse_cdf(0.5).unwrap();
        assert!((t - 0.740_362_689_494_244).abs() < 1e-12, "{t}");
        let uni = TimeDist::exponential(1.0).unwrap();
        assert_eq!(uni.inverse_cdf(0.3), Some(0.3));
        assert!(TimeDist::exponential(0.5).is_err());
    }

    #[test]
    fn cosh_inverse_cdf_is_symmetric() {
        let d = TimeDist::Cosh;
        for i in 1..10 {
            let u = i as f64 / 10.0;
            let a = d.inverse_cdf(u).unwrap();
            let b = d.inverse_cdf(1.0 - u).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
        assert!((d.inverse_cdf(0.5).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn edm_weight_at_half() {
        assert!((edm_weight(0.5) - 5.0).abs() < 1e-12);
        assert!((edm_weight(1.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tracker_optimum_gives_unit_effective_loss() {
        for &l in &[1e-4, 0.3, 2.0, 55.0] {
            let f = libm::log(l);
            assert!((libm::exp(-f) * l - 1.0).abs() < 1e-12);
            // f = ln ℓ is the minimizer of e^{−f}ℓ + f
            let at = tracker_objective(f, l);
            assert!(tracker_objective(f + 1e-3, l) > at);
            assert!(tracker_objective(f - 1e-3, l) > at);
        }
    }

    #[test]
    fn hpf_zero_on_identical_inputs() {
        let m = LossMap::high_pass(4, 10.0, BlurSpec::Gaussian { sigma: 1.0 }).unwrap();
        let x = crate::rng::standard_normal(3, 4, &mut crate::rng::seeded(0));
        assert!(m
            .evaluate(&x, &x, &[0.5; 3])
            .unwrap()
            .iter()
            .all(|&l| l == 0.0));
        assert_eq!(
            LossMap::Mse.evaluate(&x, &x, &[0.5; 3]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn pseudo_huber_zero_and_validation() {
        let m = LossMap::pseudo_huber_for_dim(2);
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        assert!(m.evaluate(&x, &x, &[0.3]).unwrap()[0].abs() < 1e-15);
        assert!(m.evaluate(&x, &x, &[0.0]).is_err());
    }

    #[test]
    fn binned_means_weight_is_reciprocal() {
        let mut b = BinnedLossMeans::new(4, 0.5).unwrap();
        assert_eq!(b.weight(0.1), 1.0);
        b.observe(&[0.1, 0.2, 0.9], &[2.0, 4.0, 8.0]);
        assert!((b.weight(0.05) - 1.0 / 3.0).abs() < 1e-15);
        assert!((b.weight(0.95) - 1.0 / 8.0).abs() < 1e-15);
        b.observe(&[0.1], &[1.0]);
        assert!((b.weight(0.1) - 1.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn relative_diagnostic_needs_two_samples() {
        struct Zero;
        impl DenoiseFn for Zero {
            fn dim(&self) -> usize {
                1
            }
            fn denoise(&self, x: &Tensor, _t: &[f64]) -> Result<Tensor> {
                Ok(x.map(|_| 0.0))
            }
        }
        let x = Tensor::matrix(1, 1, vec![1.0]);
        assert!(relative_loss_diagnostic(&Zero, &x, &x, 1.0, &LossMap::Mse).is_err());
    }
}
