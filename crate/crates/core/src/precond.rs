//! EDM-style preconditioning for the bridge interpolant
//! `X_t = α_t X₀ + β_t X_T + γ_t ε`.
//!
//! With `Var[X₀] = σ₀²`, `Var[X_T] = σ_T²` and `Cov[X₀, X_T] = σ₀ₜ²`:
//!
//! - `c_in` normalizes the network input to unit variance,
//! - `c_skip` minimizes `c_out²` for a fixed interpolant,
//! - `c_out` makes the network regression target unit variance,
//! - `λ(t) = c_out⁻²` weights each time uniformly.

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum Interpolant {
    /// `α = 1 − t`, `β = t`, `γ = 0` (flow matching).
    Linear,
    /// Brownian bridge: linear plus `γ = s·√(t(1 − t))`.
    Brownian { scale: f64 },
}

impl Interpolant {
    pub fn coefficients(&self, t: f64) -> BridgeCoefficients {
        match *self {
            Interpolant::Linear => BridgeCoefficients {
                alpha: 1.0 - t,
                beta: t,
                gamma: 0.0,
            },
            Interpolant::Brownian { scale } => BridgeCoefficients {
                alpha: 1.0 - t,
                beta: t,
                gamma: scale * math::sqrt((t * (1.0 - t)).max(0.0)),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeSpec {
    pub interpolant: Interpolant,
    /// σ₀²
    pub var_data: f64,
    /// σ_T²
    pub var_prior: f64,
    /// σ₀ₜ² (zero for the independent coupling)
    pub cov: f64,
}

impl BridgeSpec {
    pub fn new(interpolant: Interpolant, var_data: f64, var_prior: f64, cov: f64) -> Result<Self> {
        if !(var_data > 0.0) || !(var_prior >= 0.0) || !cov.is_finite() {
            return Err(Error::invalid(
                "bridge variances",
                "need σ₀² > 0, σ_T² ≥ 0, finite σ₀ₜ²",
            ));
        }
        Ok(BridgeSpec {
            interpolant,
            var_data,
            var_prior,
            cov,
        })
    }

    /// Flow matching against a standard normal prior, independent coupling.
    pub fn flow_matching(sigma_data: f64) -> Self {
        BridgeSpec {
            interpolant: Interpolant::Linear,
            var_data: sigma_data * sigma_data,
            var_prior: 1.0,
            cov: 0.0,
        }
    }

    /// `Var[X_t] = α²σ₀² + 2αβσ₀ₜ² + β²σ_T² + γ²`.
    pub fn marginal_variance(&self, t: f64) -> Result<f64> {
        let BridgeCoefficients { alpha, beta, gamma } = self.interpolant.coefficients(t);
        let v = alpha * alpha * self.var_data
            + 2.0 * alpha * beta * self.cov
            + beta * beta * self.var_prior
            + gamma * gamma;
        if !(v > 0.0) {
            return Err(Error::invalid(
                "bridge",
                "marginal variance is not positive",
            ));
        }
        Ok(v)
    }
}

pub fn c_in(spec: &BridgeSpec, t: f64) -> Result<f64> {
    Ok(1.0 / math::sqrt(spec.marginal_variance(t)?))
}

pub fn c_skip(spec: &BridgeSpec, t: f64) -> Result<f64> {
    let BridgeCoefficients { alpha, beta, .. } = spec.interpolant.coefficients(t);
    Ok((alpha * spec.var_data + beta * spec.cov) / spec.marginal_variance(t)?)
}

/// `c_out²` evaluated at an arbitrary `c_skip` (the quadratic being minimized).
pub fn c_out_sq_at(spec: &BridgeSpec, t: f64, skip: f64) -> f64 {
    let BridgeCoefficients { alpha, beta, gamma } = spec.interpolant.coefficients(t);
    let r = 1.0 - alpha * skip;
    r * r * spec.var_data - 2.0 * beta * r * skip * spec.cov
        + skip * skip * beta * beta * spec.var_prior
        + gamma * gamma * skip * skip
}

/// Positive root of `c_out²` at the optimal `c_skip`. Rounding residue below
/// `1e-12` is treated as zero (e.g. `t = 0` for flow matching).
pub fn c_out(spec: &BridgeSpec, t: f64) -> Result<f64> {
    let sq = c_out_sq_at(spec, t, c_skip(spec, t)?);
    if sq < -1e-12 || !sq.is_finite() {
        return Err(Error::invalid("c_out", "c_out² is negative"));
    }
    Ok(math::sqrt(sq.max(0.0)))
}

/// `λ(t) = c_out(t)⁻²`.
pub fn lambda_weight(spec: &BridgeSpec, t: f64) -> Result<f64> {
    let c = c_out(spec, t)?;
    if c <= 0.0 {
        return Err(Error::invalid("c_out", "c_out is zero; λ(t) is unbounded"));
    }
    Ok(1.0 / (c * c))
}
