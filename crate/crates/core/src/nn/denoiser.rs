use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::graph::{Gradients, Graph, Var};
use super::mlp::{Activation, Dropout, Mlp};
use crate::error::{Error, Result};
use crate::math;
use crate::precond::{self, BridgeSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Smallest time at which a velocity is evaluated; `v = (x − D)/t` is
/// singular at 0.
pub const T_FLOOR: f64 = 1e-4;

/// Sinusoidal features `[t, sin(ω_k t), cos(ω_k t)]` with
/// `ω_k = π · base^(k/(K−1))`, `k = 0..K`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TimeEmbedding {
    pub frequencies: usize,
    pub base: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding {
            frequencies: 8,
            base: 16.0,
        }
    }
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        1 + 2 * self.frequencies
    }

    pub fn features(&self, t: f64, out: &mut Vec<f64>) {
        out.push(t);
        let denom = self.frequencies.saturating_sub(1).max(1) as f64;
        for k in 0..self.frequencies {
            let w = PI * math::powf(self.base, k as f64 / denom);
            out.push(math::sin(w * t));
            out.push(math::cos(w * t));
        }
    }
}

/// How the network output `F` becomes the data prediction `D`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum Parameterization {
    /// `D = F(x_t, t)`.
    Direct,
    /// `D = c_skip·x_t + c_out·F(c_in·x_t, t)` for flow matching against
    /// `𝒩(0, I)` with data scale `sigma_data`.
    Preconditioned { sigma_data: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DenoiserConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
    pub dropout_p: f64,
    /// Number of classes for label conditioning; 0 for unconditional.
    pub label_dim: usize,
    pub parameterization: Parameterization,
    pub zero_init_output: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            dim: 2,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            time_embedding: TimeEmbedding::default(),
            dropout_p: 0.0,
            label_dim: 0,
            parameterization: Parameterization::Preconditioned { sigma_data: 1.0 },
            zero_init_output: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if !(0.0..=0.5).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p", "must lie in [0, 0.5]"));
        }
        if let Parameterization::Preconditioned { sigma_data } = self.parameterization {
            if !(sigma_data > 0.0) {
                return Err(Error::invalid("sigma_data", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dim + self.time_embedding.width() + self.label_dim
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Eval,
    /// Training pass; dropout masks are drawn from `seed`.
    Train {
        seed: u64,
    },
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Recorded {
    pub output: Var,
    pub params: Vec<Var>,
}

/// Velocity evaluation with the number of rows whose time was clamped to
/// [`T_FLOOR`].
#[derive(Debug)]
pub struct VelocityEval {
    pub velocity: Tensor,
    pub clamped: usize,
}

/// Anything that predicts `x̂₀` from `(x_t, t)`.
pub trait DenoiseFn {
    fn dim(&self) -> usize;
    fn denoise(&self, x_t: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// MLP denoiser `D_θ(x_t, t[, label])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    net: Mlp,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.input_width()];
        widths.extend_from_slice(&config.hidden);
        widths.push(config.dim);
        let net = Mlp::new(&widths, config.activation, config.zero_init_output, rng)?;
        Ok(Denoiser { config, net })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn params(&self) -> &[Tensor] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.net.params_mut()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        self.net.set_params(params)
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout_p = p;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    fn check_inputs(
        &self,
        x_t: &Tensor,
        t: &[f64],
        labels: Option<&[Option<usize>]>,
    ) -> Result<()> {
        let n = x_t.rows();
        if x_t.cols() != self.config.dim || x_t.shape().len() != 2 {
            return Err(Error::shape(
                "denoiser input",
                &[n, self.config.dim],
                x_t.shape(),
            ));
        }
        if t.len() != n {
            return Err(Error::shape("denoiser time", &[n], &[t.len()]));
        }
        x_t.check_finite("denoiser input")?;
        if let Some(i) = t.iter().position(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::NonFinite {
                context: "denoiser time outside [0, 1]",
                index: i,
            });
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::shape("denoiser labels", &[n], &[l.len()]));
            }
            if l.iter().flatten().any(|&c| c >= self.config.label_dim) {
                return Err(Error::invalid("label", "class index exceeds label_dim"));
            }
        }
        Ok(())
    }

    fn scalars(&self, t: f64) -> Result<(f64, f64, f64)> {
        match self.config.parameterization {
            Parameterization::Direct => Ok((1.0, 0.0, 1.0)),
            Parameterization::Preconditioned { sigma_data } => {
                let spec = BridgeSpec::flow_matching(sigma_data);
                Ok((
                    precond::c_in(&spec, t)?,
                    precond::c_skip(&spec, t)?,
                    precond::c_out(&spec, t)?,
                ))
            }
        }
    }

    /// Records `D_θ(x_t, t)` on `g`.
    pub fn record(
        &self,
        g: &mut Graph,
        x_t: &Tensor,
        t: &[f64],
        labels: Option<&[Option<usize>]>,
        mode: Mode,
    ) -> Result<Recorded> {
        self.check_inputs(x_t, t, labels)?;
        let n = x_t.rows();
        let cfg = &self.config;
        let width = cfg.input_width();
        let mut feats = Vec::with_capacity(n * width);
        let mut skip = Vec::with_capacity(n);
        let mut out_scale = Vec::with_capacity(n);
        for (i, &ti) in t.iter().enumerate() {
            let (cin, cskip, cout) = self.scalars(ti)?;
            skip.push(cskip);
            out_scale.push(cout);
            feats.extend(x_t.row(i).iter().map(|x| cin * x));
            cfg.time_embedding.features(ti, &mut feats);
            if cfg.label_dim > 0 {
                let start = feats.len();
                feats.extend(core::iter::repeat_n(0.0, cfg.label_dim));
                if let Some(Some(c)) = labels.map(|l| l[i]) {
                    feats[start + c] = 1.0;
                }
            }
        }
        let input = g.input(Tensor::matrix(n, width, feats));
        let dropout = match mode {
            Mode::Train { seed } if cfg.dropout_p > 0.0 => Dropout::On {
                p: cfg.dropout_p,
                seed,
            },
            _ => Dropout::Off,
        };
        let (f, params) = self.net.record(g, input, dropout)?;
        let output = match cfg.parameterization {
            Parameterization::Direct => f,
            Parameterization::Preconditioned { .. } => {
                let cout = g.input(Tensor::column(out_scale));
                let scaled = g.scale_rows(f, cout)?;
                let mut base = x_t.clone();
                for (i, s) in skip.iter().enumerate() {
                    base.row_mut(i).iter_mut().for_each(|x| *x *= s);
                }
                let base = g.input(base);
                g.add(scaled, base)?
            }
        };
        Ok(Recorded { output, params })
    }

    /// `x̂₀ = D_θ(x_t, t)`.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t: &[f64],
        labels: Option<&[Option<usize>]>,
        mode: Mode,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, x_t, t, labels, mode)?;
        let out = g.value(rec.output).clone();
        out.check_finite("denoiser output")?;
        Ok(out)
    }

    /// `v = (x_t − D_θ(x_t, t)) / t` with `t` floored at [`T_FLOOR`].
    pub fn velocity(
        &self,
        x_t: &Tensor,
        t: &[f64],
        labels: Option<&[Option<usize>]>,
    ) -> Result<VelocityEval> {
        let d = self.forward(x_t, t, labels, Mode::Eval)?;
        Ok(velocity_from_denoised(x_t, &d, t))
    }

    /// Parameter gradients of a pass recorded by [`Denoiser::record`], in
    /// storage order; parameters the loss did not reach get zeros.
    pub fn collect_gradients(&self, rec: &Recorded, grads: &mut Gradients) -> Vec<Tensor> {
        rec.params
            .iter()
            .zip(self.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| p.map(|_| 0.0)))
            .collect()
    }
}

/// `(x_t − x̂₀) / max(t, T_FLOOR)` row-wise.
pub fn velocity_from_denoised(x_t: &Tensor, denoised: &Tensor, t: &[f64]) -> VelocityEval {
    let mut v = x_t.clone();
    let mut clamped = 0;
    for (i, &ti) in t.iter().enumerate() {
        let tt = if ti < T_FLOOR {
            clamped += 1;
            T_FLOOR
        } else {
            ti
        };
        for (a, b) in v.row_mut(i).iter_mut().zip(denoised.row(i)) {
            *a = (*a - b) / tt;
        }
    }
    VelocityEval {
        velocity: v,
        clamped,
    }
}

impl DenoiseFn for Denoiser {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn denoise(&self, x_t: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.forward(x_t, t, None, Mode::Eval)
    }
}
