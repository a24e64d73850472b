//! Entropic OT between uniform empirical measures, in the log domain.

use alloc::vec;
use alloc::vec::Vec;

use super::Batch;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Geometric ε-scaling: start at `start` and multiply by `factor` each
/// iteration until the target ε is reached.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EpsilonDecay {
    pub start: f64,
    pub factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SinkhornCfg {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop when the largest marginal violation falls below this.
    pub tol: f64,
    pub decay: Option<EpsilonDecay>,
}

impl Default for SinkhornCfg {
    fn default() -> Self {
        SinkhornCfg {
            epsilon: 0.5,
            max_iter: 20_000,
            tol: 1e-6,
            decay: None,
        }
    }
}

impl SinkhornCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(
                "sinkhorn epsilon",
                "must be positive and finite",
            ));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::invalid("sinkhorn", "need tol > 0 and max_iter ≥ 1"));
        }
        if let Some(d) = self.decay {
            if !(d.start >= self.epsilon) || !(d.factor > 0.0 && d.factor < 1.0) {
                return Err(Error::invalid(
                    "epsilon decay",
                    "need start ≥ ε and factor in (0, 1)",
                ));
            }
        }
        Ok(())
    }
}

/// A converged (or capped) entropic plan `P = exp((fᵢ + gⱼ − Cᵢⱼ)/ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornPlan {
    pub plan: Tensor,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute row or column marginal error.
    pub max_violation: f64,
}

impl SinkhornPlan {
    /// Dual objective `⟨a, f⟩ + ⟨b, g⟩`.
    pub fn dual_value(&self) -> f64 {
        let n = self.f.len() as f64;
        let m = self.g.len() as f64;
        self.f.iter().sum::<f64>() / n + self.g.iter().sum::<f64>() / m
    }

    /// `Σᵢⱼ Pᵢⱼ Cᵢⱼ` for the cost the plan was built on.
    pub fn transport_cost(&self, x: &Tensor, y: &Tensor) -> f64 {
        let mut s = 0.0;
        for (i, a) in x.iter_rows().enumerate() {
            for (j, b) in y.iter_rows().enumerate() {
                s += self.plan.get(i, j) * math::sq_dist(a, b);
            }
        }
        s
    }
}

fn cost_matrix(x: &Tensor, y: &Tensor) -> Vec<f64> {
    let mut c = Vec::with_capacity(x.rows() * y.rows());
    for a in x.iter_rows() {
        for b in y.iter_rows() {
            c.push(math::sq_dist(a, b));
        }
    }
    c
}

/// `fᵢ = ε ln aᵢ − ε LSEⱼ((gⱼ − Cᵢⱼ)/ε)`.
fn update_rows(f: &mut [f64], g: &[f64], c: &[f64], eps: f64, log_a: f64, buf: &mut [f64]) {
    let m = g.len();
    for (i, fi) in f.iter_mut().enumerate() {
        let row = &c[i * m..(i + 1) * m];
        for ((b, gj), cij) in buf.iter_mut().zip(g).zip(row) {
            *b = (gj - cij) / eps;
        }
        *fi = eps * (log_a - math::log_sum_exp(buf.iter().copied()));
    }
}

fn update_cols(g: &mut [f64], f: &[f64], c: &[f64], eps: f64, log_b: f64, buf: &mut [f64]) {
    let m = g.len();
    for (j, gj) in g.iter_mut().enumerate() {
        for (i, (b, fi)) in buf.iter_mut().zip(f).enumerate() {
            *b = (fi - c[i * m + j]) / eps;
        }
        *gj = eps * (log_b - math::log_sum_exp(buf.iter().copied()));
    }
}

/// Entropic OT plan with squared Euclidean cost and uniform marginals.
///
/// `warm_g` seeds the column potential, e.g. from the previous mini-batch.
/// When the iteration cap is hit the last plan is returned with
/// `converged = false`.
pub fn sinkhorn_coupling(
    x0: &Tensor,
    x1: &Tensor,
    cfg: &SinkhornCfg,
    warm_g: Option<&[f64]>,
) -> Result<SinkhornPlan> {
    cfg.validate()?;
    let (n, m) = (x0.rows(), x1.rows());
    if n == 0 || m == 0 {
        return Err(Error::TooFewSamples("sinkhorn"));
    }
    if x0.cols() != x1.cols() {
        return Err(Error::shape("sinkhorn", &[x0.cols()], &[x1.cols()]));
    }
    let c = cost_matrix(x0, x1);
    let log_a = -math::ln(n as f64);
    let log_b = -math::ln(m as f64);
    let mut f = vec![0.0; n];
    let mut g = match warm_g {
        Some(w) if w.len() == m => w.to_vec(),
        Some(w) => return Err(Error::shape("sinkhorn warm start", &[m], &[w.len()])),
        None => vec![0.0; m],
    };
    let mut row_buf = vec![0.0; m];
    let mut col_buf = vec![0.0; n];
    let mut eps = cfg.decay.map_or(cfg.epsilon, |d| d.start);
    let mut f_next = vec![0.0; n];
    update_rows(&mut f, &g, &c, eps, log_a, &mut row_buf);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        update_cols(&mut g, &f, &c, eps, log_b, &mut col_buf);
        update_rows(&mut f_next, &g, &c, eps, log_a, &mut row_buf);
        if eps == cfg.epsilon {
            // with columns exact, row i of the current plan sums to
            // aᵢ·exp((fᵢ − f_nextᵢ)/ε)
            let violation = f
                .iter()
                .zip(&f_next)
                .map(|(a, b)| (math::exp(log_a) * (math::exp((a - b) / eps) - 1.0)).abs())
                .fold(0.0, f64::max);
            if violation < cfg.tol {
                converged = true;
                break;
            }
        }
        core::mem::swap(&mut f, &mut f_next);
        if let Some(d) = cfg.decay {
            eps = (eps * d.factor).max(cfg.epsilon);
        }
    }
    let mut plan = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            plan.push(math::exp((f[i] + g[j] - c[i * m + j]) / eps));
        }
    }
    let plan = Tensor::matrix(n, m, plan);
    let max_violation = marginal_violation(&plan);
    Ok(SinkhornPlan {
        plan,
        f,
        g,
        epsilon: eps,
        iterations,
        converged: converged && max_violation < cfg.tol,
        max_violation,
    })
}

/// Entropic self-transport plan of `x` onto itself.
///
/// Uses the averaged symmetric update `f ← ½(f + T(f))`; plain alternating
/// updates oscillate on symmetric problems and converge very slowly.
pub fn sinkhorn_self(
    x: &Tensor,
    cfg: &SinkhornCfg,
    warm_f: Option<&[f64]>,
) -> Result<SinkhornPlan> {
    cfg.validate()?;
    let n = x.rows();
    if n == 0 {
        return Err(Error::TooFewSamples("sinkhorn"));
    }
    let c = cost_matrix(x, x);
    let log_a = -math::ln(n as f64);
    let mut f = match warm_f {
        Some(w) if w.len() == n => w.to_vec(),
        Some(w) => return Err(Error::shape("sinkhorn warm start", &[n], &[w.len()])),
        None => vec![0.0; n],
    };
    let mut tf = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut eps = cfg.decay.map_or(cfg.epsilon, |d| d.start);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        update_rows(&mut tf, &f, &c, eps, log_a, &mut buf);
        if eps == cfg.epsilon {
            // row i (and by symmetry column i) sums to aᵢ·exp((fᵢ − T(f)ᵢ)/ε)
            let violation = f
                .iter()
                .zip(&tf)
                .map(|(a, b)| (math::exp(log_a) * (math::exp((a - b) / eps) - 1.0)).abs())
                .fold(0.0, f64::max);
            if violation < cfg.tol {
                converged = true;
                break;
            }
        }
        for (a, b) in f.iter_mut().zip(&tf) {
            *a = 0.5 * (*a + b);
        }
        if let Some(d) = cfg.decay {
            eps = (eps * d.factor).max(cfg.epsilon);
        }
    }
    let mut plan = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            plan.push(math::exp((f[i] + f[j] - c[i * n + j]) / eps));
        }
    }
    let plan = Tensor::matrix(n, n, plan);
    let max_violation = marginal_violation(&plan);
    Ok(SinkhornPlan {
        plan,
        g: f.clone(),
        f,
        epsilon: eps,
        iterations,
        converged: converged && max_violation < cfg.tol,
        max_violation,
    })
}

/// Largest deviation of a row or column sum from the uniform marginal.
pub fn marginal_violation(plan: &Tensor) -> f64 {
    let (n, m) = (plan.rows(), plan.cols());
    let mut worst = 0.0f64;
    let mut cols = vec![0.0; m];
    for row in plan.iter_rows() {
        worst = worst.max((row.iter().sum::<f64>() - 1.0 / n as f64).abs());
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    cols.iter()
        .fold(worst, |w, c| w.max((c - 1.0 / m as f64).abs()))
}

/// Draws `b_loss` aligned pairs `(x₀ᵢ, x₁ⱼ)` with probability `Pᵢⱼ`.
pub fn subsample_plan(
    plan: &SinkhornPlan,
    x0: &Tensor,
    x1: &Tensor,
    b_loss: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let (n, m) = (plan.plan.rows(), plan.plan.cols());
    if x0.rows() != n || x1.rows() != m {
        return Err(Error::shape("subsample", &[n, m], &[x0.rows(), x1.rows()]));
    }
    if b_loss > n.max(m) {
        return Err(Error::invalid("b_loss", "exceeds the coupling batch"));
    }
    let mass: f64 = plan.plan.data().iter().sum();
    if !((mass - 1.0).abs() <= 1e-6) || plan.plan.data().iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::UnnormalizedPlan { mass });
    }
    let mut cdf = Vec::with_capacity(n * m);
    let mut acc = 0.0;
    for &p in plan.plan.data() {
        acc += p;
        cdf.push(acc);
    }
    let mut i0 = Vec::with_capacity(b_loss);
    let mut i1 = Vec::with_capacity(b_loss);
    for _ in 0..b_loss {
        let u = rng::uniform(rng) * acc;
        let k = cdf.partition_point(|&c| c <= u).min(n * m - 1);
        i0.push(k / m);
        i1.push(k % m);
    }
    Batch::new(x0.select_rows(&i0), x1.select_rows(&i1))
}

/// Largest instance [`exact_assignment`] enumerates.
pub const MAX_EXACT_POINTS: usize = 8;

/// Optimal permutation for squared Euclidean cost by enumeration; returns
/// `perm` with `x₀ᵢ ↦ x₁_{perm[i]}` and the mean cost.
pub fn exact_assignment(x0: &Tensor, x1: &Tensor) -> Result<(Vec<usize>, f64)> {
    x1.expect_shape("exact assignment", x0.shape())?;
    let n = x0.rows();
    if n == 0 || n > MAX_EXACT_POINTS {
        return Err(Error::invalid("exact assignment", "needs 1 to 8 points"));
    }
    let c = cost_matrix(x0, x1);
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| c[i * n + j])
            .sum::<f64>()
    };
    let mut best = perm.clone();
    let mut best_cost = cost(&perm);
    // Heap's algorithm
    let mut stack = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            let v = cost(&perm);
            if v < best_cost {
                best_cost = v;
                best.copy_from_slice(&perm);
            }
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok((best, best_cost / n as f64))
}

/// Debiased Sinkhorn divergence
/// `S(x, y) = OT_ε(x, y) − ½OT_ε(x, x) − ½OT_ε(y, y)` and its gradient in `x`.
#[derive(Clone, Debug)]
pub struct SinkhornDivergence {
    pub value: f64,
    pub grad: Tensor,
    /// Potentials of the `(x, y)` and `(x, x)` problems, for warm starts.
    pub g_xy: Vec<f64>,
    pub g_xx: Vec<f64>,
    pub converged: bool,
}

/// Evaluates [`SinkhornDivergence`]. `warm` holds column potentials of the
/// `(x, y)`, `(x, x)` and `(y, y)` problems from a previous call.
pub fn sinkhorn_divergence(
    x: &Tensor,
    y: &Tensor,
    cfg: &SinkhornCfg,
    warm: Option<(&[f64], &[f64])>,
    yy: Option<&SinkhornPlan>,
) -> Result<SinkhornDivergence> {
    let p_xy = sinkhorn_coupling(x, y, cfg, warm.map(|w| w.0))?;
    let p_xx = sinkhorn_self(x, cfg, warm.map(|w| w.1))?;
    let own_yy;
    let p_yy = match yy {
        Some(p) => p,
        None => {
            own_yy = sinkhorn_self(y, cfg, None)?;
            &own_yy
        }
    };
    let value = p_xy.dual_value() - 0.5 * p_xx.dual_value() - 0.5 * p_yy.dual_value();
    let (n, d) = (x.rows(), x.cols());
    let mut grad = Tensor::zeros(n, d);
    for i in 0..n {
        let xi = x.row(i);
        let gi = grad.row_mut(i);
        for (j, yj) in y.iter_rows().enumerate() {
            let p = p_xy.plan.get(i, j);
            for k in 0..d {
                gi[k] += p * 2.0 * (xi[k] - yj[k]);
            }
        }
        for (j, xj) in x.iter_rows().enumerate() {
            let p = p_xx.plan.get(i, j);
            for k in 0..d {
                gi[k] -= p * 2.0 * (xi[k] - xj[k]);
            }
        }
    }
    Ok(SinkhornDivergence {
        value,
        grad,
        converged: p_xy.converged && p_xx.converged && p_yy.converged,
        g_xy: p_xy.g,
        g_xx: p_xx.g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_batches_concentrate_on_diagonal() {
        let x = rng::standard_normal(16, 2, &mut rng::seeded(4));
        let cfg = SinkhornCfg {
            epsilon: 0.01,
            ..Default::default()
        };
        let p = sinkhorn_coupling(&x, &x, &cfg, None).unwrap();
        assert!(p.converged);
        let diag: f64 = (0..16).map(|i| p.plan.get(i, i)).sum();
        assert!(diag > 0.99, "{diag}");
    }

    #[test]
    fn huge_epsilon_gives_independent_plan() {
        let mut r = rng::seeded(5);
        let x = rng::standard_normal(32, 2, &mut r);
        let y = rng::standard_normal(32, 2, &mut r);
        let cfg = SinkhornCfg {
            epsilon: 1e6,
            ..Default::default()
        };
        let p = sinkhorn_coupling(&x, &y, &cfg, None).unwrap();
        assert!(p
            .plan
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 1024.0).abs() < 1e-6));
    }

    #[test]
    fn exact_assignment_finds_swap() {
        let x = Tensor::from_rows(&[&[0.0], &[10.0]]);
        let y = Tensor::from_rows(&[&[10.0], &[0.0]]);
        let (perm, cost) = exact_assignment(&x, &y).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn diagonal_plan_subsamples_matched_pairs() {
        let x = Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let mut plan = Tensor::zeros(4, 4);
        for i in 0..4 {
            plan.row_mut(i)[i] = 0.25;
        }
        let p = SinkhornPlan {
            plan,
            f: vec![0.0; 4],
            g: vec![0.0; 4],
            epsilon: 1.0,
            iterations: 0,
            converged: true,
            max_violation: 0.0,
        };
        let b = subsample_plan(&p, &x, &x, 4, &mut rng::seeded(0)).unwrap();
        assert_eq!(b.x0, b.x1);
        let mut bad = p.clone();
        bad.plan = bad.plan.map(|v| 2.0 * v);
        assert!(matches!(
            subsample_plan(&bad, &x, &x, 2, &mut rng::seeded(0)),
            Err(Error::UnnormalizedPlan { .. })
        ));
    }
}
