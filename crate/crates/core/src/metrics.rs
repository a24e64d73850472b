//! Evaluation metrics and the posterior-mean oracle.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::solvers::{
    make_schedule, solve_trajectory, Direction, Method, ScheduleKind, SolverCfg, VelocityField,
};
use crate::tensor::Tensor;

/// Smallest grid accepted by [`straightness`].
pub const MIN_STRAIGHTNESS_STEPS: usize = 32;

/// `∫₀¹ 𝔼‖(x₁ − x₀) − v(x_t, t)‖ dt` along the model's own trajectories.
///
/// Trajectories start at `noise` (`t = 1`) and are integrated with Heun on a
/// uniform grid of `fine_n` intervals; the integral is the trapezoid rule on
/// that grid.
pub fn straightness(field: &dyn VelocityField, noise: &Tensor, fine_n: usize) -> Result<f64> {
    if fine_n < MIN_STRAIGHTNESS_STEPS {
        return Err(Error::invalid(
            "straightness grid",
            "need at least 32 intervals",
        ));
    }
    if noise.rows() == 0 {
        return Err(Error::TooFewSamples("straightness"));
    }
    let cfg = SolverCfg::new(
        Method::Heun,
        make_schedule(ScheduleKind::Uniform, fine_n)?,
        Direction::Backward,
    )?;
    let sol = solve_trajectory(field, noise, &cfg)?;
    let x0 = &sol.terminal;
    let chord = noise.zip_map(x0, |a, b| a - b)?;
    let n = noise.rows();
    let mut integrand = Vec::with_capacity(sol.times.len());
    for (x, &t) in sol.trajectory.iter().zip(&sol.times) {
        let v = field.velocity(x, &vec![t; n])?;
        let mean: f64 = chord
            .iter_rows()
            .zip(v.iter_rows())
            .map(|(c, v)| math::sqrt(math::sq_dist(c, v)))
            .sum::<f64>()
            / n as f64;
        integrand.push(mean);
    }
    // times run 1 → 0 in equal steps
    let h = 1.0 / fine_n as f64;
    let inner: f64 = integrand[1..fine_n].iter().sum();
    Ok(h * (0.5 * integrand[0] + inner + 0.5 * integrand[fine_n]))
}

/// Mean `‖x₀ − x₁‖²` over pairs.
pub fn transport_cost(x0: &Tensor, x1: &Tensor) -> Result<f64> {
    x1.expect_shape("transport cost", x0.shape())?;
    if x0.rows() == 0 {
        return Err(Error::TooFewSamples("transport cost"));
    }
    let s: f64 = x0
        .iter_rows()
        .zip(x1.iter_rows())
        .map(|(a, b)| math::sq_dist(a, b))
        .sum();
    Ok(s / x0.rows() as f64)
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            s += math::sqrt(math::sq_dist(ra, rb));
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// Energy distance `2𝔼‖A − B‖ − 𝔼‖A − A′‖ − 𝔼‖B − B′‖` between two samples,
/// with all expectations as V-statistics (self-pairs included). This is
/// the squared distance between kernel mean embeddings, so it is
/// non-negative and exactly zero for identical samples.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::TooFewSamples("energy distance"));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("energy distance", &[a.cols()], &[b.cols()]));
    }
    let ed = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
    Ok(ed.max(0.0))
}

/// Gradient of [`energy_distance`] with respect to the rows of `a`, with
/// each distance `r` replaced by `√(r² + smoothing²)`. `smoothing = 0` is
/// the exact gradient (zero contribution from coincident points).
pub fn energy_distance_grad(a: &Tensor, b: &Tensor, smoothing: f64) -> Result<Tensor> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::TooFewSamples("energy distance"));
    }
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let mut g = Tensor::zeros(n, d);
    let cross = 2.0 / (n * m) as f64;
    let own = 2.0 / (n * n) as f64;
    let mut acc = vec![0.0; d];
    let s2 = smoothing * smoothing;
    for i in 0..n {
        let ai = a.row(i);
        acc.iter_mut().for_each(|x| *x = 0.0);
        for bj in b.iter_rows() {
            let r = math::sqrt(math::sq_dist(ai, bj) + s2);
            if r > 0.0 {
                for k in 0..d {
                    acc[k] += cross * (ai[k] - bj[k]) / r;
                }
            }
        }
        for (k2, ak) in a.iter_rows().enumerate() {
            if k2 == i {
                continue;
            }
            let r = math::sqrt(math::sq_dist(ai, ak) + s2);
            if r > 0.0 {
                for k in 0..d {
                    acc[k] -= own * (ai[k] - ak[k]) / r;
                }
            }
        }
        g.row_mut(i).copy_from_slice(&acc);
    }
    Ok(g)
}

/// Sliced 2-Wasserstein distance over `projections` random directions.
/// Unequal sample sizes are compared through their quantile functions.
pub fn sliced_wasserstein(
    a: &Tensor,
    b: &Tensor,
    projections: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::TooFewSamples("sliced Wasserstein"));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("sliced Wasserstein", &[a.cols()], &[b.cols()]));
    }
    if projections == 0 {
        return Err(Error::invalid("projections", "must be positive"));
    }
    let d = a.cols();
    let q = a.rows().max(b.rows());
    let project = |x: &Tensor, dir: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = x
            .iter_rows()
            .map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let quantile = |s: &[f64], u: f64| s[((u * s.len() as f64) as usize).min(s.len() - 1)];
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
        let nrm = math::norm(&dir);
        dir.iter_mut().for_each(|x| *x /= nrm);
        let pa = project(a, &dir);
        let pb = project(b, &dir);
        let mut s = 0.0;
        for k in 0..q {
            let u = (k as f64 + 0.5) / q as f64;
            let diff = quantile(&pa, u) - quantile(&pb, u);
            s += diff * diff;
        }
        total += s / q as f64;
    }
    Ok(math::sqrt(total / projections as f64))
}

/// Largest pairwise distance in a sample.
pub fn diameter(x: &Tensor) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in x.iter_rows().enumerate() {
        for b in x.iter_rows().skip(i + 1) {
            best = best.max(math::sq_dist(a, b));
        }
    }
    math::sqrt(best)
}

/// `ln f64::MAX`-ish cutoff past which `exp(−·)` is zero in `f64`.
const UNDERFLOW_EXPONENT: f64 = 745.0;

/// `𝔼[x₀ | x_t]` for a finite pair coupling, with the conditional smoothed by
/// an isotropic Gaussian of width `bandwidth` around each chord point
/// `(1 − t)x₀ⁱ + t·x₁ⁱ`. Returns one row per probe in `x_t`.
pub fn posterior_mean_oracle(
    x0: &Tensor,
    x1: &Tensor,
    x_t: &Tensor,
    t: f64,
    bandwidth: f64,
) -> Result<Tensor> {
    x1.expect_shape("posterior oracle", x0.shape())?;
    if x0.rows() == 0 {
        return Err(Error::EmptyPool("posterior oracle coupling"));
    }
    if x_t.cols() != x0.cols() {
        return Err(Error::shape(
            "posterior oracle probe",
            &[x0.cols()],
            &[x_t.cols()],
        ));
    }
    if !(0.0..=1.0).contains(&t) || !(bandwidth > 0.0) {
        return Err(Error::invalid(
            "posterior oracle",
            "need t in [0, 1] and bandwidth > 0",
        ));
    }
    let d = x0.cols();
    let chords: Vec<f64> = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let chords = Tensor::matrix(x0.rows(), d, chords);
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut out = Tensor::zeros(x_t.rows(), d);
    let mut logw = vec![0.0; x0.rows()];
    for (p, probe) in x_t.iter_rows().enumerate() {
        for (lw, c) in logw.iter_mut().zip(chords.iter_rows()) {
            *lw = -math::sq_dist(probe, c) * inv;
        }
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if -top > UNDERFLOW_EXPONENT {
            return Err(Error::WeightUnderflow {
                probe: p,
                scaled_distance: math::sqrt(-2.0 * top),
            });
        }
        let mut z = 0.0;
        let row = out.row_mut(p);
        for (lw, src) in logw.iter().zip(x0.iter_rows()) {
            let w = math::exp(lw - top);
            z += w;
            for (o, s) in row.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        row.iter_mut().for_each(|o| *o /= z);
    }
    Ok(out)
}

/// `σ = t/(1 − t)`.
pub fn time_to_sigma(t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::invalid("t", "σ is defined for t in [0, 1)"));
    }
    Ok(t / (1.0 - t))
}

/// `t = σ/(1 + σ)`.
pub fn sigma_to_time(sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma", "must be non-negative"));
    }
    if sigma.is_infinite() {
        return Ok(1.0);
    }
    Ok(sigma / (1.0 + sigma))
}

/// `y = x/(1 − t)`, the diffusion-coordinate state.
pub fn flow_to_diffusion_state(x: &Tensor, t: f64) -> Result<Tensor> {
    time_to_sigma(t)?;
    Ok(x.map(|v| v / (1.0 - t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::FnField;

    #[test]
    fn transport_cost_example() {
        let x0 = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let x1 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(transport_cost(&x0, &x1).unwrap(), 2.5);
        assert_eq!(transport_cost(&x0, &x0).unwrap(), 0.0);
    }

    #[test]
    fn energy_distance_point_masses() {
        let a = Tensor::from_rows(&[&[0.0, 0.0]]);
        let b = Tensor::from_rows(&[&[3.0, 4.0]]);
        assert!((energy_distance(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        let x = crate::rng::standard_normal(50, 2, &mut crate::rng::seeded(1));
        assert_eq!(energy_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn straightness_zero_on_constant_field() {
        let f = FnField::new(2, |x: &Tensor, _t: &[f64]| x.map(|_| 0.5));
        let noise = crate::rng::standard_normal(10, 2, &mut crate::rng::seeded(3));
        assert!(straightness(&f, &noise, 32).unwrap() < 1e-12);
        assert!(straightness(&f, &noise, 8).is_err());
    }

    #[test]
    fn sigma_round_trip() {
        assert_eq!(time_to_sigma(0.0).unwrap(), 0.0);
        assert_eq!(time_to_sigma(0.5).unwrap(), 1.0);
        assert!(time_to_sigma(1.0).is_err());
        for i in 0..100 {
            let t = i as f64 / 100.0;
            let back = sigma_to_time(time_to_sigma(t).unwrap()).unwrap();
            assert!((back - t).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_single_pair_and_underflow() {
        let x0 = Tensor::from_rows(&[&[1.0, -1.0]]);
        let x1 = Tensor::from_rows(&[&[0.0, 2.0]]);
        let probe = Tensor::from_rows(&[&[0.3, 0.3]]);
        let m = posterior_mean_oracle(&x0, &x1, &probe, 0.4, 0.5).unwrap();
        assert_eq!(m.row(0), x0.row(0));
        let far = Tensor::from_rows(&[&[100.0, 0.0]]);
        assert!(matches!(
            posterior_mean_oracle(&x0, &x1, &far, 0.4, 0.01),
            Err(Error::WeightUnderflow { .. })
        ));
    }
}
