//! Moving the data side of an empirical coupling back onto `ℙ₀`.
//!
//! Minimizes `ED(x₀′, ref) + λ·S_ε(Γ, Q)` over the `x₀` side of the pair
//! cloud `Γ = {(x₀′ᵢ, x₁ᵢ)}`, where `Q` is the original coupling, `ED` is the
//! energy distance to a reference data sample and `S_ε` the Sinkhorn
//! divergence in pair space. `λ` starts large and decays each phase.

use alloc::vec::Vec;

use super::sinkhorn::{sinkhorn_divergence, sinkhorn_self, SinkhornCfg};
use super::Batch;
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::{diameter, energy_distance, energy_distance_grad};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ProjectionCfg {
    pub lambda0: f64,
    /// Multiplier applied to `λ` after each phase.
    pub decay: f64,
    pub max_phases: usize,
    pub steps_per_phase: usize,
    /// Base step `η₀`; the step used is `η₀/(1 + 2λ)`.
    pub step_size: f64,
    /// `ε = epsilon_frac · diameter²` of the pair cloud.
    pub epsilon_frac: f64,
    /// Stop once a phase improves `ED` by less than this fraction.
    pub saturation: f64,
    /// Abort after this many consecutive phases with increasing `ED`.
    pub patience: usize,
    pub sinkhorn_max_iter: usize,
    /// Distance smoothing in the energy-distance gradient, as a fraction of
    /// the reference diameter. Without it the gradient jumps where points
    /// coincide and the iterates chatter.
    pub smoothing_frac: f64,
}

impl Default for ProjectionCfg {
    fn default() -> Self {
        ProjectionCfg {
            lambda0: 1000.0,
            decay: 0.1,
            max_phases: 8,
            steps_per_phase: 50,
            step_size: 0.5,
            epsilon_frac: 0.1,
            saturation: 0.01,
            patience: 5,
            sinkhorn_max_iter: 5000,
            smoothing_frac: 0.01,
        }
    }
}

impl ProjectionCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0) || !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid(
                "projection lambda",
                "need λ₀ > 0 and decay in (0, 1)",
            ));
        }
        if !(self.step_size > 0.0)
            || !(self.epsilon_frac > 0.0)
            || !(self.smoothing_frac >= 0.0)
            || self.max_phases == 0
            || self.patience == 0
        {
            return Err(Error::invalid(
                "projection",
                "step size, ε fraction, phases and patience must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseLog {
    pub lambda: f64,
    pub energy_distance: f64,
    pub divergence: f64,
    pub mean_displacement: f64,
}

#[derive(Clone, Debug)]
pub struct ProjectionReport {
    pub pairs: Batch,
    pub initial_energy_distance: f64,
    pub phases: Vec<PhaseLog>,
    /// `ED` stopped improving.
    pub saturated: bool,
    /// `ED` rose for `patience` phases in a row; `pairs` holds the last iterate.
    pub aborted: bool,
}

fn stack(x0: &Tensor, x1: &Tensor) -> Tensor {
    let (n, d) = (x0.rows(), x0.cols());
    let mut out = Vec::with_capacity(n * 2 * d);
    for (a, b) in x0.iter_rows().zip(x1.iter_rows()) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    Tensor::matrix(n, 2 * d, out)
}

fn mean_displacement(a: &Tensor, b: &Tensor) -> f64 {
    a.iter_rows()
        .zip(b.iter_rows())
        .map(|(a, b)| math::sqrt(math::sq_dist(a, b)))
        .sum::<f64>()
        / a.rows() as f64
}

/// Projects `pairs` toward `Π(ℙ₀, ℙ₁)` using `reference ∼ ℙ₀`. The `x₁`
/// side is returned unchanged.
pub fn project_coupling(
    pairs: &Batch,
    reference: &Tensor,
    cfg: &ProjectionCfg,
) -> Result<ProjectionReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyPool("projection pairs"));
    }
    if reference.cols() != pairs.dim() {
        return Err(Error::shape(
            "projection reference",
            &[pairs.dim()],
            &[reference.cols()],
        ));
    }
    let (n, d) = (pairs.len(), pairs.dim());
    let q = stack(&pairs.x0, &pairs.x1);
    let diam = diameter(&q);
    let sk = SinkhornCfg {
        epsilon: cfg.epsilon_frac * (diam * diam).max(1e-12),
        max_iter: cfg.sinkhorn_max_iter,
        ..Default::default()
    };
    let p_qq = sinkhorn_self(&q, &sk, None)?;
    let smoothing = cfg.smoothing_frac * diameter(reference);
    let initial = energy_distance(&pairs.x0, reference)?;
    let mut z = pairs.x0.clone();
    let mut prev = initial;
    let mut improving = false;
    let mut rising = 0;
    let mut phases = Vec::new();
    let mut saturated = false;
    let mut aborted = false;
    let mut warm: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut lambda = cfg.lambda0;
    for _ in 0..cfg.max_phases {
        let eta = cfg.step_size / (1.0 + 2.0 * lambda);
        let mut div = 0.0;
        for _ in 0..cfg.steps_per_phase {
            let gamma = stack(&z, &pairs.x1);
            let w = warm.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
            let s = sinkhorn_divergence(&gamma, &q, &sk, w, Some(&p_qq))?;
            let ged = energy_distance_grad(&z, reference, smoothing)?;
            div = s.value;
            for i in 0..n {
                let gs = &s.grad.row(i)[..d];
                let ge = ged.row(i);
                for (k, zk) in z.row_mut(i).iter_mut().enumerate() {
                    *zk -= eta * n as f64 * (ge[k] + lambda * gs[k]);
                }
            }
            warm = Some((s.g_xy, s.g_xx));
        }
        z.check_finite("projected pairs")?;
        let ed = energy_distance(&z, reference)?;
        phases.push(PhaseLog {
            lambda,
            energy_distance: ed,
            divergence: div,
            mean_displacement: mean_displacement(&z, &pairs.x0),
        });
        if ed > prev {
            rising += 1;
            if rising >= cfg.patience {
                aborted = true;
                break;
            }
        } else {
            rising = 0;
        }
        let gain = if prev > 0.0 { (prev - ed) / prev } else { 0.0 };
        if improving && gain < cfg.saturation {
            saturated = true;
            break;
        }
        if gain >= cfg.saturation {
            improving = true;
        }
        prev = ed;
        lambda *= cfg.decay;
    }
    Ok(ProjectionReport {
        pairs: Batch {
            x0: z,
            x1: pairs.x1.clone(),
            labels: pairs.labels.clone(),
        },
        initial_energy_distance: initial,
        phases,
        saturated,
        aborted,
    })
}
