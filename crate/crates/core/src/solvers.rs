//! Time grids and ODE integration of `dx = v(x, t) dt`.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Denoiser, T_FLOOR};
use crate::tensor::Tensor;

/// A velocity source `v(x, t)` evaluated on a batch.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor>;
}

impl<V: VelocityField + ?Sized> VelocityField for &V {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        (**self).velocity(x, t)
    }
}

impl VelocityField for Denoiser {
    fn dim(&self) -> usize {
        self.config().dim
    }
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(Denoiser::velocity(self, x, t, None)?.velocity)
    }
}

/// A label-conditioned denoiser; `labels[i]` applies to row `i`.
#[derive(Clone, Debug)]
pub struct Conditioned<'a> {
    pub model: &'a Denoiser,
    pub labels: Vec<Option<usize>>,
}

impl VelocityField for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.model.config().dim
    }
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(self.model.velocity(x, t, Some(&self.labels))?.velocity)
    }
}

/// Closure-backed field, mostly for analytic test fields.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Tensor, &[f64]) -> Tensor> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(&Tensor, &[f64]) -> Tensor> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok((self.f)(x, t))
    }
}

/// Counts velocity calls made through it.
pub struct Counted<V> {
    inner: V,
    calls: Cell<usize>,
}

impl<V: VelocityField> Counted<V> {
    pub fn new(inner: V) -> Self {
        Counted {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<V: VelocityField> VelocityField for Counted<V> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(x, t)
    }
}

/// `(1 + g)·v_main − g·v_aux`: classifier-free guidance when `aux` is the
/// unconditional model, autoguidance when it is a degraded one.
pub struct Guided<M, A> {
    pub main: M,
    pub aux: A,
    pub scale: f64,
}

impl<M: VelocityField, A: VelocityField> Guided<M, A> {
    pub fn new(main: M, aux: A, scale: f64) -> Result<Self> {
        if main.dim() != aux.dim() {
            return Err(Error::shape("guidance", &[main.dim()], &[aux.dim()]));
        }
        if !scale.is_finite() {
            return Err(Error::invalid("guidance scale", "must be finite"));
        }
        Ok(Guided { main, aux, scale })
    }
}

impl<M: VelocityField, A: VelocityField> VelocityField for Guided<M, A> {
    fn dim(&self) -> usize {
        self.main.dim()
    }
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let a = self.main.velocity(x, t)?;
        if self.scale == 0.0 {
            return Ok(a);
        }
        let b = self.aux.velocity(x, t)?;
        let g = self.scale;
        a.zip_map(&b, |a, b| (1.0 + g) * a - g * b)
    }
}

/// Autoguidance: `main` steered away from a weaker checkpoint of itself.
pub fn autoguidance_pair<'a>(
    main: &'a Denoiser,
    degraded: &'a Denoiser,
    scale: f64,
) -> Result<Guided<&'a Denoiser, &'a Denoiser>> {
    Guided::new(main, degraded, scale)
}

/// Classifier-free guidance of a label-conditioned model.
pub fn cfg_pair(
    model: &Denoiser,
    labels: Vec<Option<usize>>,
    scale: f64,
) -> Result<Guided<Conditioned<'_>, Conditioned<'_>>> {
    let n = labels.len();
    Guided::new(
        Conditioned { model, labels },
        Conditioned {
            model,
            labels: vec![None; n],
        },
        scale,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum ScheduleKind {
    Uniform,
    Edm {
        sigma_min: f64,
        sigma_max: f64,
        rho: f64,
    },
    Sigmoid {
        kappa: f64,
    },
}

impl ScheduleKind {
    pub fn edm_default() -> Self {
        ScheduleKind::Edm {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

/// Time grid `0 = t₀ < … < t_N ≤ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    grid: Vec<f64>,
}

impl Schedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }
}

/// Builds an `N`-interval grid.
pub fn make_schedule(kind: ScheduleKind, n: usize) -> Result<Schedule> {
    if n == 0 {
        return Err(Error::invalid("schedule steps", "need N ≥ 1"));
    }
    let nf = n as f64;
    let grid: Vec<f64> = match kind {
        ScheduleKind::Uniform => (0..=n).map(|i| i as f64 / nf).collect(),
        ScheduleKind::Sigmoid { kappa } => {
            if !(kappa > 0.0) || !kappa.is_finite() {
                return Err(Error::invalid(
                    "sigmoid kappa",
                    "must be positive and finite",
                ));
            }
            // evaluate the lower half directly and mirror it, so values near
            // 0 keep full relative precision and the grid is symmetric
            let lo = math::sigmoid(-kappa / 2.0);
            let span = math::sigmoid(kappa / 2.0) - lo;
            let lower = |i: usize| (math::sigmoid(kappa * (i as f64 / nf - 0.5)) - lo) / span;
            (0..=n)
                .map(|i| {
                    if i == 0 {
                        0.0
                    } else if i == n {
                        1.0
                    } else if 2 * i == n {
                        0.5
                    } else if 2 * i < n {
                        lower(i)
                    } else {
                        1.0 - lower(n - i)
                    }
                })
                .collect()
        }
        ScheduleKind::Edm {
            sigma_min,
            sigma_max,
            rho,
        } => {
            if !(sigma_min > 0.0 && sigma_max > sigma_min && rho > 0.0 && sigma_max.is_finite()) {
                return Err(Error::invalid(
                    "edm schedule",
                    "need 0 < σ_min < σ_max and ρ > 0",
                ));
            }
            let a = math::powf(sigma_min, 1.0 / rho);
            let b = math::powf(sigma_max, 1.0 / rho);
            (0..=n)
                .map(|i| {
                    if i == 0 {
                        0.0
                    } else {
                        let s = math::powf(a + (i as f64 / nf) * (b - a), rho);
                        s / (s + 1.0)
                    }
                })
                .collect()
        }
    };
    // large κ can round neighbouring points onto 0 or 1, so only
    // monotonicity is enforced
    if grid.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::invalid("schedule", "grid is not increasing"));
    }
    Ok(Schedule { kind, grid })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum Method {
    Euler,
    Heun,
    /// Single-step second-order update with intermediate time
    /// `s = t_next^r · t_cur^{1−r}`.
    Dpm {
        r: f64,
    },
}

impl Method {
    fn evals_per_step(&self) -> usize {
        match self {
            Method::Euler => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Direction {
    /// From noise (`t = t_N`) to data (`t = 0`).
    Backward,
    /// From data (`t = 0`) to noise (`t = t_N`).
    Forward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverCfg {
    pub method: Method,
    pub schedule: Schedule,
    pub direction: Direction,
    /// Take the last interval with a single Euler evaluation.
    pub final_euler: bool,
}

impl SolverCfg {
    pub fn new(method: Method, schedule: Schedule, direction: Direction) -> Result<Self> {
        let cfg = SolverCfg {
            method,
            schedule,
            direction,
            final_euler: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_final_euler(mut self, on: bool) -> Self {
        self.final_euler = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Method::Dpm { r } = self.method {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid("dpm r", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Declared velocity evaluations for one solve.
    pub fn nfe(&self) -> usize {
        let n = self.schedule.steps();
        let per = self.method.evals_per_step();
        if self.final_euler && per > 1 {
            per * (n - 1) + 1
        } else {
            per * n
        }
    }

    /// Times in traversal order.
    pub fn times(&self) -> Vec<f64> {
        let mut g = self.schedule.grid().to_vec();
        if self.direction == Direction::Backward {
            g.reverse();
        }
        g
    }
}

/// Terminal state plus the visited states.
#[derive(Clone, Debug)]
pub struct Solution {
    pub terminal: Tensor,
    /// States at each time of `times`; empty unless requested.
    pub trajectory: Vec<Tensor>,
    pub times: Vec<f64>,
    pub nfe: usize,
}

fn eval_at(field: &dyn VelocityField, x: &Tensor, t: f64, nfe: &mut usize) -> Result<Tensor> {
    *nfe += 1;
    let tt = vec![t.max(T_FLOOR); x.rows()];
    field.velocity(x, &tt)
}

fn axpy(x: &Tensor, h: f64, v: &Tensor) -> Tensor {
    let mut out = x.clone();
    for (o, v) in out.data_mut().iter_mut().zip(v.data()) {
        *o += h * v;
    }
    out
}

/// One step from `t_cur` to `t_next` (either sign of `h`).
fn step(
    field: &dyn VelocityField,
    method: Method,
    x: &Tensor,
    t_cur: f64,
    t_next: f64,
    nfe: &mut usize,
) -> Result<Tensor> {
    let h = t_next - t_cur;
    let v0 = eval_at(field, x, t_cur, nfe)?;
    match method {
        Method::Euler => Ok(axpy(x, h, &v0)),
        Method::Heun => {
            let pred = axpy(x, h, &v0);
            let v1 = eval_at(field, &pred, t_next, nfe)?;
            let mut out = x.clone();
            for ((o, a), b) in out.data_mut().iter_mut().zip(v0.data()).zip(v1.data()) {
                *o += h * (0.5 * a + 0.5 * b);
            }
            Ok(out)
        }
        Method::Dpm { r } => {
            let s = math::powf(t_next, r) * math::powf(t_cur, 1.0 - r);
            let xs = axpy(x, s - t_cur, &v0);
            let vs = eval_at(field, &xs, s, nfe)?;
            let a = 1.0 / (2.0 * r);
            let b = 1.0 - a;
            let mut out = x.clone();
            for ((o, vs), v0) in out.data_mut().iter_mut().zip(vs.data()).zip(v0.data()) {
                *o += h * (a * vs + b * v0);
            }
            Ok(out)
        }
    }
}

/// Integration core. `lenient` zeroes and reports rows that turn non-finite
/// instead of failing.
fn integrate(
    field: &dyn VelocityField,
    x_init: &Tensor,
    cfg: &SolverCfg,
    keep: bool,
    mut dropped: Option<&mut Vec<bool>>,
) -> Result<Solution> {
    cfg.validate()?;
    if x_init.cols() != field.dim() {
        return Err(Error::shape(
            "solve",
            &[x_init.rows(), field.dim()],
            x_init.shape(),
        ));
    }
    x_init.check_finite("solver initial state")?;
    let times = cfg.times();
    let n = times.len() - 1;
    let mut x = x_init.clone();
    let mut trajectory = Vec::new();
    if keep {
        trajectory.push(x.clone());
    }
    let mut nfe = 0;
    for i in 0..n {
        let method = if cfg.final_euler && i + 1 == n {
            Method::Euler
        } else {
            cfg.method
        };
        x = step(field, method, &x, times[i], times[i + 1], &mut nfe)?;
        match dropped.as_deref_mut() {
            Some(mask) => {
                for (r, m) in mask.iter_mut().enumerate() {
                    if x.row(r).iter().any(|v| !v.is_finite()) {
                        *m = true;
                        x.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            None => {
                if x.first_non_finite().is_some() {
                    return Err(Error::SolverDiverged { step: i });
                }
            }
        }
        if keep {
            trajectory.push(x.clone());
        }
    }
    Ok(Solution {
        terminal: x,
        trajectory,
        times,
        nfe,
    })
}

/// Integrates along `cfg`; fails with the step index on a non-finite state.
pub fn solve(field: &dyn VelocityField, x_init: &Tensor, cfg: &SolverCfg) -> Result<Solution> {
    integrate(field, x_init, cfg, false, None)
}

/// As [`solve`], also keeping the state at every grid time.
pub fn solve_trajectory(
    field: &dyn VelocityField,
    x_init: &Tensor,
    cfg: &SolverCfg,
) -> Result<Solution> {
    integrate(field, x_init, cfg, true, None)
}

/// As [`solve`], but rows that diverge are zeroed and flagged in the
/// returned mask rather than failing the batch.
pub fn solve_lenient(
    field: &dyn VelocityField,
    x_init: &Tensor,
    cfg: &SolverCfg,
) -> Result<(Solution, Vec<bool>)> {
    let mut dropped = vec![false; x_init.rows()];
    let sol = integrate(field, x_init, cfg, false, Some(&mut dropped))?;
    Ok((sol, dropped))
}

/// Heun with `substeps` uniform substeps from `t_from` to `t_to`.
pub fn fine_solve(
    field: &dyn VelocityField,
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    substeps: usize,
) -> Result<Tensor> {
    let mut nfe = 0;
    let mut x = x.clone();
    let h = (t_to - t_from) / substeps as f64;
    for k in 0..substeps {
        let a = t_from + k as f64 * h;
        let b = if k + 1 == substeps { t_to } else { a + h };
        x = step(field, Method::Heun, &x, a, b, &mut nfe)?;
        if x.first_non_finite().is_some() {
            return Err(Error::SolverDiverged { step: k });
        }
    }
    Ok(x)
}

/// Substeps per interval of the reference solve in [`truncation_error`].
pub const REFERENCE_SUBSTEPS: usize = 64;

/// Mean `‖τ_i‖` of a single backward Euler step on each interval
/// `[t_i, t_{i+1}]`, indexed by `i`.
///
/// `noise` is the state at `t_N`. The start state of every interval comes
/// from the fine reference solve, so the errors do not accumulate.
pub fn truncation_error(
    field: &dyn VelocityField,
    schedule: &Schedule,
    noise: &Tensor,
) -> Result<Vec<f64>> {
    let g = schedule.grid();
    let n = schedule.steps();
    if noise.rows() == 0 {
        return Err(Error::TooFewSamples("truncation error"));
    }
    noise.check_finite("truncation probe start")?;
    let mut tau = vec![0.0; n];
    let mut x = noise.clone();
    let mut nfe = 0;
    for i in (0..n).rev() {
        let euler = step(field, Method::Euler, &x, g[i + 1], g[i], &mut nfe)?;
        let reference = fine_solve(field, &x, g[i + 1], g[i], REFERENCE_SUBSTEPS)?;
        let sum: f64 = euler
            .iter_rows()
            .zip(reference.iter_rows())
            .map(|(a, b)| math::sqrt(math::sq_dist(a, b)))
            .sum();
        tau[i] = sum / x.rows() as f64;
        x = reference;
    }
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserConfig;
    use crate::rng;

    fn uniform(n: usize) -> Schedule {
        make_schedule(ScheduleKind::Uniform, n).unwrap()
    }

    #[test]
    fn sigmoid_endpoints_and_midpoint() {
        for &k in &[1.0, 10.0, 20.0, 30.0] {
            let s = make_schedule(ScheduleKind::Sigmoid { kappa: k }, 8).unwrap();
            assert_eq!(s.grid()[0], 0.0);
            assert_eq!(s.grid()[8], 1.0);
        }
        let s = make_schedule(ScheduleKind::Sigmoid { kappa: 20.0 }, 10).unwrap();
        assert!((s.grid()[5] - 0.5).abs() < 1e-15);
        assert!(make_schedule(ScheduleKind::Sigmoid { kappa: 0.0 }, 4).is_err());
        assert!(make_schedule(ScheduleKind::Uniform, 0).is_err());
    }

    #[test]
    fn edm_grid_ends_below_one() {
        let s = make_schedule(ScheduleKind::edm_default(), 18).unwrap();
        assert_eq!(s.grid()[0], 0.0);
        assert!((s.grid()[18] - 80.0 / 81.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_exact() {
        let c = [0.7, -1.3];
        let f = FnField::new(2, |x: &Tensor, _t: &[f64]| {
            let mut v = x.clone();
            for r in 0..v.rows() {
                v.row_mut(r).copy_from_slice(&c);
            }
            v
        });
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        for m in [Method::Euler, Method::Heun, Method::Dpm { r: 0.4 }] {
            for kind in [ScheduleKind::Uniform, ScheduleKind::Sigmoid { kappa: 20.0 }] {
                let cfg = SolverCfg::new(m, make_schedule(kind, 7).unwrap(), Direction::Backward)
                    .unwrap();
                let out = solve(&f, &x, &cfg).unwrap().terminal;
                assert!((out.get(0, 0) - (1.0 - 0.7)).abs() < 1e-12);
                assert!((out.get(0, 1) - (2.0 + 1.3)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nfe_accounting() {
        let f = Counted::new(FnField::new(1, |x: &Tensor, _t: &[f64]| x.clone()));
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]);
        for (m, fe, want) in [
            (Method::Euler, false, 5),
            (Method::Heun, false, 10),
            (Method::Heun, true, 9),
            (Method::Dpm { r: 0.5 }, true, 9),
        ] {
            let before = f.calls();
            let cfg = SolverCfg::new(m, uniform(5), Direction::Backward)
                .unwrap()
                .with_final_euler(fe);
            let sol = solve(&f, &x, &cfg).unwrap();
            assert_eq!(sol.nfe, want);
            assert_eq!(cfg.nfe(), want);
            assert_eq!(f.calls() - before, want);
        }
    }

    #[test]
    fn dpm_r1_matches_heun_bitwise() {
        let mut r = rng::seeded(11);
        let cfg = DenoiserConfig {
            dim: 2,
            hidden: vec![16, 16],
            zero_init_output: false,
            ..Default::default()
        };
        let d = Denoiser::new(cfg, &mut r).unwrap();
        let x = rng::standard_normal(8, 2, &mut r);
        let sched = make_schedule(ScheduleKind::Sigmoid { kappa: 10.0 }, 6).unwrap();
        let heun = SolverCfg::new(Method::Heun, sched.clone(), Direction::Backward).unwrap();
        let dpm = SolverCfg::new(Method::Dpm { r: 1.0 }, sched, Direction::Backward).unwrap();
        let a = solve_trajectory(&d, &x, &heun).unwrap();
        let b = solve_trajectory(&d, &x, &dpm).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn guidance_combinations() {
        let a = FnField::new(1, |x: &Tensor, _t: &[f64]| x.map(|_| 2.0));
        let b = FnField::new(1, |x: &Tensor, _t: &[f64]| x.map(|_| 5.0));
        let x = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let g = Guided::new(&a, &b, 1.0).unwrap();
        assert_eq!(g.velocity(&x, &[0.5, 0.5]).unwrap().data(), &[-1.0, -1.0]);
        let g0 = Guided::new(&a, &b, 0.0).unwrap();
        assert_eq!(g0.velocity(&x, &[0.5, 0.5]).unwrap().data(), &[2.0, 2.0]);
        let wide = FnField::new(2, |x: &Tensor, _t: &[f64]| x.clone());
        assert!(Guided::new(&a, &wide, 1.0).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let f = FnField::new(1, |x: &Tensor, t: &[f64]| {
            if t[0] < 0.5 {
                x.map(|_| f64::NAN)
            } else {
                x.clone()
            }
        });
        let x = Tensor::matrix(2, 1, vec![1.0, 1.0]);
        let cfg = SolverCfg::new(Method::Euler, uniform(4), Direction::Backward).unwrap();
        assert!(matches!(
            solve(&f, &x, &cfg),
            Err(Error::SolverDiverged { step: 3 })
        ));
        let (_, dropped) = solve_lenient(&f, &x, &cfg).unwrap();
        assert_eq!(dropped, vec![true, true]);
    }

    #[test]
    fn truncation_error_zero_for_constant_field() {
        let f = FnField::new(1, |x: &Tensor, _t: &[f64]| x.map(|_| 3.0));
        let x = Tensor::matrix(4, 1, vec![0.1, 0.2, 0.3, 0.4]);
        let tau = truncation_error(&f, &uniform(5), &x).unwrap();
        assert!(tau.iter().all(|&t| t < 1e-12), "{tau:?}");
    }
}
