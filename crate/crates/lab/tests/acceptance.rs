//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all checks with `cargo test -p reflow-lab --test acceptance`, or
//! pass check names after `--` to run a subset.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use reflow_core::couplings::{
    marginal_violation, sinkhorn_coupling, Batch, PairSource, PairStore, SinkhornCfg,
};
use reflow_core::data::Dataset;
use reflow_core::losses::{
    relative_loss_diagnostic, weighted_batch_loss, BlurSpec, LossMap, TimeDist, WeightKind,
    WeightRule,
};
use reflow_core::metrics::{diameter, energy_distance, posterior_mean_oracle, straightness};
use reflow_core::nn::{
    Activation, AdamConfig, DenoiseFn, Denoiser, DenoiserConfig, Graph, Mode, Parameterization,
    TimeEmbedding,
};
use reflow_core::precond::{c_in, c_out, c_skip, BridgeSpec, Interpolant};
use reflow_core::rng::{self, Rng};
use reflow_core::solvers::{
    make_schedule, solve, solve_trajectory, truncation_error, Direction, FnField, Method,
    ScheduleKind, SolverCfg,
};
use reflow_core::train::{train, LossSpec, LrSchedule, PairFeed, TrainConfig};
use reflow_core::Tensor;
use reflow_lab::artifacts::load_checkpoint;
use reflow_lab::config::{
    DatasetSpec, EvalSpec, ExperimentConfig, MetricKind, ReflowSpec, SolverSpec,
};
use reflow_lab::pipelines::{run_reflow, run_train, Env};
use reflow_lab::table::MetricsTable;

type Check = std::result::Result<String, String>;
type CheckFn = fn() -> Check;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

const FD_H: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

struct GradCase {
    model: Denoiser,
    batch: Batch,
    t: Vec<f64>,
    rule: WeightRule,
    map: LossMap,
    seed: u64,
}

fn grad_case(seed: u64) -> reflow_core::Result<GradCase> {
    let mut r = rng::seeded(1000 + seed);
    let dim = 1 + rng::index(&mut r, 4);
    let depth = 1 + rng::index(&mut r, 3);
    let hidden = (0..depth).map(|_| 2 + rng::index(&mut r, 7)).collect();
    let label_dim = if seed.is_multiple_of(4) {
        2 + rng::index(&mut r, 2)
    } else {
        0
    };
    let config = DenoiserConfig {
        dim,
        hidden,
        activation: if rng::uniform(&mut r) < 0.5 {
            Activation::Silu
        } else {
            Activation::Tanh
        },
        time_embedding: TimeEmbedding {
            frequencies: 1 + rng::index(&mut r, 4),
            base: 4.0 + 12.0 * rng::uniform(&mut r),
        },
        dropout_p: if seed % 5 == 2 { 0.25 } else { 0.0 },
        label_dim,
        parameterization: if seed.is_multiple_of(3) {
            Parameterization::Direct
        } else {
            Parameterization::Preconditioned {
                sigma_data: 0.3 + 1.5 * rng::uniform(&mut r),
            }
        },
        zero_init_output: false,
    };
    let model = Denoiser::new(config, &mut r)?;
    let n = 2 + rng::index(&mut r, 4);
    let mut batch = Batch::new(
        rng::standard_normal(n, dim, &mut r),
        rng::standard_normal(n, dim, &mut r),
    )?;
    if label_dim > 0 {
        let labels = (0..n)
            .map(|i| (i % 3 != 1).then_some(i % label_dim))
            .collect();
        batch = batch.with_labels(labels)?;
    }
    let t = (0..n).map(|_| 0.02 + 0.96 * rng::uniform(&mut r)).collect();
    let map = match rng::index(&mut r, 3) {
        0 => LossMap::Mse,
        1 => LossMap::PseudoHuber {
            c: 0.05 + rng::uniform(&mut r),
        },
        _ => LossMap::high_pass(
            dim,
            0.1 + 10.0 * rng::uniform(&mut r),
            BlurSpec::default_for(dim),
        )?,
    };
    let rule = match seed % 5 {
        0 => WeightRule::new(WeightKind::One, dim, &mut r)?,
        1 => WeightRule::new(WeightKind::InvT, dim, &mut r)?,
        2 => WeightRule::new(WeightKind::InvT2, dim, &mut r)?,
        3 => WeightRule::new(WeightKind::Edm, dim, &mut r)?,
        _ => WeightRule::tracker(dim, 5, AdamConfig::default(), &mut r)?,
    };
    Ok(GradCase {
        model,
        batch,
        t,
        rule,
        map,
        seed,
    })
}

fn grad_objective(c: &GradCase, model: &Denoiser) -> reflow_core::Result<f64> {
    let mut g = Graph::new();
    let rec = weighted_batch_loss(
        &mut g,
        model,
        &c.batch,
        &c.t,
        &c.rule,
        &c.map,
        Mode::Train { seed: c.seed },
    )?;
    Ok(g.value(rec.objective).item())
}

fn grad_worst(c: &GradCase) -> reflow_core::Result<f64> {
    let mut g = Graph::new();
    let rec = weighted_batch_loss(
        &mut g,
        &c.model,
        &c.batch,
        &c.t,
        &c.rule,
        &c.map,
        Mode::Train { seed: c.seed },
    )?;
    let mut grads = g.backward(rec.objective)?;
    let analytic = c.model.collect_gradients(&rec.denoiser, &mut grads);
    let mut probe = c.model.clone();
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = probe.params()[p].data()[k];
            probe.params_mut()[p].data_mut()[k] = orig + FD_H;
            let up = grad_objective(c, &probe)?;
            probe.params_mut()[p].data_mut()[k] = orig - FD_H;
            let down = grad_objective(c, &probe)?;
            probe.params_mut()[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_H);
            let a = grad.data()[k];
            let scale = a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

fn check_gradients() -> Check {
    let n = 120;
    let mut worst = (0.0f64, 0);
    for seed in 0..n {
        let e = grad_worst(&grad_case(seed).map_err(fail)?).map_err(fail)?;
        if e > worst.0 {
            worst = (e, seed);
        }
    }
    ensure(
        worst.0 < 1e-4,
        format!(
            "{n} random nets, worst relative error {:.2e} (case {})",
            worst.0, worst.1
        ),
    )
}

// ----------------------------------------------------------- posterior mean

fn pentagon(radius: f64, phase: f64) -> Tensor {
    let pts: Vec<f64> = (0..5)
        .flat_map(|k| {
            let a = phase + 2.0 * std::f64::consts::PI * k as f64 / 5.0;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect();
    Tensor::matrix(5, 2, pts)
}

fn check_posterior_mean() -> Check {
    let x0 = pentagon(2.0, 0.0);
    let x1 = pentagon(1.0, std::f64::consts::PI / 5.0);
    let store = PairStore::new(
        Batch::new(x0.clone(), x1.clone()).map_err(fail)?,
        PairSource::Independent,
    );
    let h = 1e-2 * diameter(&x0);
    let n_probe = 100;
    let probe_t: Vec<f64> = (0..n_probe)
        .map(|k| 0.05 + 0.9 * (k / 5) as f64 / (n_probe / 5 - 1) as f64)
        .collect();
    let mut rows = Vec::new();
    for (k, &t) in probe_t.iter().enumerate() {
        let i = k % 5;
        rows.extend((0..2).map(|j| (1.0 - t) * x0.get(i, j) + t * x1.get(i, j)));
    }
    let probes = Tensor::matrix(n_probe, 2, rows);
    let mut oracle = Vec::with_capacity(n_probe * 2);
    for (k, &t) in probe_t.iter().enumerate() {
        let p = probes.select_rows(&[k]);
        oracle.extend_from_slice(
            posterior_mean_oracle(&x0, &x1, &p, t, h)
                .map_err(fail)?
                .data(),
        );
    }
    let oracle = Tensor::matrix(n_probe, 2, oracle);

    let hpf = |lambda| LossSpec::Hpf { lambda, blur: None };
    let combos = [
        (WeightKind::One, TimeDist::Uniform, LossSpec::Mse),
        (WeightKind::InvT, TimeDist::Cosh, LossSpec::Mse),
        (WeightKind::Edm, TimeDist::Cosh, hpf(10.0)),
        (WeightKind::Tracker, TimeDist::Uniform, hpf(10.0)),
        (
            WeightKind::InvT2,
            TimeDist::Exponential { a: 10.0 },
            hpf(0.1),
        ),
        (
            WeightKind::BatchNorm,
            TimeDist::Exponential { a: 10.0 },
            LossSpec::Mse,
        ),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for (c, (weight, time_dist, loss)) in combos.into_iter().enumerate() {
        let cfg = TrainConfig {
            steps: 25_000,
            batch: 128,
            weight,
            time_dist,
            loss,
            adam: AdamConfig {
                lr: 3e-3,
                ema_decay: 0.0,
                ..Default::default()
            },
            lr_schedule: LrSchedule::Cosine { final_frac: 0.01 },
            tracker_hidden: 32,
            tracker_lr: 1e-2,
            log_every: 1000,
            ..Default::default()
        };
        let mut r = rng::seeded(40 + c as u64);
        let model = Denoiser::new(
            DenoiserConfig {
                dim: 2,
                hidden: vec![64, 64],
                activation: Activation::Silu,
                parameterization: Parameterization::Preconditioned { sigma_data: 1.4 },
                zero_init_output: false,
                ..Default::default()
            },
            &mut r,
        )
        .map_err(fail)?;
        let out = train(model, &mut PairFeed::Store(&store), &cfg, &mut r).map_err(fail)?;
        let pred = out
            .ema
            .forward(&probes, &probe_t, None, Mode::Eval)
            .map_err(fail)?;
        let err = pred.max_abs_diff(&oracle);
        ok &= err < 1e-2;
        details.push(format!(
            "{weight:?}/{time_dist:?}/{}: {err:.1e}",
            loss_name(&loss)
        ));
    }
    ensure(
        ok,
        format!(
            "max |D - oracle| at {n_probe} probes: {}",
            details.join(", ")
        ),
    )
}

fn loss_name(l: &LossSpec) -> String {
    match l {
        LossSpec::Mse => "mse".into(),
        LossSpec::PseudoHuber { .. } => "ph".into(),
        LossSpec::Hpf { lambda, .. } => format!("hpf{lambda}"),
    }
}

// ------------------------------------------------------------ hpf identity

fn pred_gradient(map: &LossMap, x: &Tensor, y: &Tensor) -> reflow_core::Result<Tensor> {
    let mut g = Graph::new();
    let target = g.input(x.clone());
    let pred = g.param(y.clone());
    let t = vec![0.5; x.rows()];
    let per = map.record(&mut g, target, pred, &t)?;
    let total = g.sum(per);
    Ok(g.backward(total)?.take(pred).expect("param gradient"))
}

fn check_hpf_identity() -> Check {
    let mut r = rng::seeded(15);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for lambda in [0.1, 10.0] {
        for dim in 1..=12 {
            let map = LossMap::high_pass(dim, lambda, BlurSpec::default_for(dim)).map_err(fail)?;
            let LossMap::HighPass(hp) = &map else {
                return Err("high_pass returned another map".into());
            };
            let phi = hp.phi();
            for _ in 0..5 {
                let x = rng::standard_normal(4, dim, &mut r);
                let y = rng::standard_normal(4, dim, &mut r);
                let g_phi = pred_gradient(&map, &x, &y).map_err(fail)?;
                let g_mse = pred_gradient(&LossMap::Mse, &x, &y).map_err(fail)?;
                // φᵀφ g, formed entry by entry
                for row in 0..x.rows() {
                    for i in 0..dim {
                        let mut acc = 0.0;
                        for k in 0..dim {
                            for j in 0..dim {
                                acc += phi.get(k, i) * phi.get(k, j) * g_mse.get(row, j);
                            }
                        }
                        worst = worst.max((g_phi.get(row, i) - acc).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    ensure(
        worst < 1e-8,
        format!("{cases} random inputs, max abs deviation {worst:.1e}"),
    )
}

// -------------------------------------------------------------- loss ratio

struct ConstantDenoiser(Vec<f64>);

impl DenoiseFn for ConstantDenoiser {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn denoise(&self, x_t: &Tensor, _t: &[f64]) -> reflow_core::Result<Tensor> {
        let data = (0..x_t.rows())
            .flat_map(|_| self.0.iter().copied())
            .collect();
        Ok(Tensor::matrix(x_t.rows(), self.0.len(), data))
    }
}

fn check_loss_ratio() -> Check {
    let mut r = rng::seeded(21);
    let mut worst: f64 = 0.0;
    let trials = 50;
    for _ in 0..trials {
        let n = 3 + rng::index(&mut r, 20);
        let dim = 1 + rng::index(&mut r, 5);
        let x0 = rng::standard_normal(n, dim, &mut r);
        let x1 = rng::standard_normal(n, dim, &mut r);
        let mu: Vec<f64> = (0..dim)
            .map(|j| (0..n).map(|i| x0.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        let spread =
            relative_loss_diagnostic(&ConstantDenoiser(mu.clone()), &x0, &x1, 1.0, &LossMap::Mse)
                .map_err(fail)?;
        let d: Vec<f64> = (0..n)
            .map(|i| (0..dim).map(|j| (x0.get(i, j) - mu[j]).powi(2)).sum())
            .collect();
        let expect =
            d.iter().copied().fold(f64::MIN, f64::max) / d.iter().copied().fold(f64::MAX, f64::min);
        worst = worst.max((spread.ratio() - expect).abs());
    }
    ensure(
        worst < 1e-6,
        format!("{trials} datasets, max |ratio - oracle| {worst:.1e}"),
    )
}

// ---------------------------------------------------------- solver algebra

fn linear_field() -> FnField<impl Fn(&Tensor, &[f64]) -> Tensor> {
    FnField::new(1, |x: &Tensor, _t: &[f64]| x.clone())
}

/// Least-squares slope of log error against log step for `dx/dt = x`.
fn convergence_order(method: Method, direction: Direction) -> reflow_core::Result<f64> {
    let exact = match direction {
        Direction::Backward => (-1.0f64).exp(),
        Direction::Forward => 1.0f64.exp(),
    };
    let x = Tensor::from_rows(&[&[1.0]]);
    let mut pts = Vec::new();
    for n in [16, 32, 64, 128] {
        let cfg = SolverCfg::new(method, make_schedule(ScheduleKind::Uniform, n)?, direction)?;
        let got = solve(&linear_field(), &x, &cfg)?.terminal.item();
        pts.push(((1.0 / n as f64).ln(), (got - exact).abs().ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(num / den)
}

fn check_solver_algebra() -> Check {
    let mut identical = true;
    for seed in 0..5 {
        let net = Denoiser::new(
            DenoiserConfig {
                dim: 2,
                hidden: vec![16, 16],
                zero_init_output: false,
                ..Default::default()
            },
            &mut rng::seeded(seed),
        )
        .map_err(fail)?;
        let x = rng::standard_normal(32, 2, &mut rng::seeded(100 + seed));
        for kind in [
            ScheduleKind::Uniform,
            ScheduleKind::Sigmoid { kappa: 20.0 },
            ScheduleKind::edm_default(),
        ] {
            for dir in [Direction::Backward, Direction::Forward] {
                let s = make_schedule(kind, 7).map_err(fail)?;
                let heun = SolverCfg::new(Method::Heun, s.clone(), dir).map_err(fail)?;
                let dpm = SolverCfg::new(Method::Dpm { r: 1.0 }, s, dir).map_err(fail)?;
                let a = solve_trajectory(&net, &x, &heun).map_err(fail)?;
                let b = solve_trajectory(&net, &x, &dpm).map_err(fail)?;
                identical &= a.trajectory == b.trajectory;
            }
        }
    }
    let mut orders = Vec::new();
    let mut ok = identical;
    for dir in [Direction::Backward, Direction::Forward] {
        for (method, want) in [
            (Method::Euler, 1.0),
            (Method::Heun, 2.0),
            (Method::Dpm { r: 0.2 }, 2.0),
            (Method::Dpm { r: 0.4 }, 2.0),
            (Method::Dpm { r: 0.7 }, 2.0),
        ] {
            let p = convergence_order(method, dir).map_err(fail)?;
            ok &= (p - want).abs() <= 0.2;
            orders.push(format!("{p:.2}"));
        }
    }
    ensure(
        ok,
        format!(
            "dpm(r=1) == heun bitwise: {identical}; orders [euler heun dpm.2 dpm.4 dpm.7] x [bwd fwd]: {}",
            orders.join(" ")
        ),
    )
}

// --------------------------------------------------------------- schedules

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn check_schedules() -> Check {
    let mut problems = Vec::new();
    let mut formula_dev: f64 = 0.0;
    for kappa in [0.5, 1.0, 10.0, 20.0, 30.0, 200.0] {
        for n in [1, 2, 3, 4, 8, 9, 16, 64] {
            let g = make_schedule(ScheduleKind::Sigmoid { kappa }, n).map_err(fail)?;
            let g = g.grid();
            if g[0] != 0.0 || g[n] != 1.0 {
                problems.push(format!(
                    "sigmoid κ={kappa} N={n} endpoints {} {}",
                    g[0], g[n]
                ));
            }
            if g.windows(2).any(|w| w[1] < w[0]) {
                problems.push(format!("sigmoid κ={kappa} N={n} decreasing"));
            }
            let (lo, hi) = (logistic(-kappa / 2.0), logistic(kappa / 2.0));
            for (i, &t) in g.iter().enumerate() {
                let f = (logistic(kappa * (i as f64 / n as f64 - 0.5)) - lo) / (hi - lo);
                formula_dev = formula_dev.max((t - f).abs());
            }
        }
    }
    if formula_dev > 1e-12 {
        problems.push(format!("sigmoid formula deviation {formula_dev:.1e}"));
    }
    let mut uniform_dev: f64 = 0.0;
    for n in [4, 8, 16, 33, 64] {
        let g = make_schedule(ScheduleKind::Sigmoid { kappa: 1e-4 }, n).map_err(fail)?;
        for (i, &t) in g.grid().iter().enumerate() {
            uniform_dev = uniform_dev.max((t - i as f64 / n as f64).abs());
        }
    }
    if uniform_dev >= 1e-6 {
        problems.push(format!("κ=1e-4 deviates from uniform by {uniform_dev:.1e}"));
    }
    let n = 8;
    let g = make_schedule(ScheduleKind::Sigmoid { kappa: 200.0 }, n).map_err(fail)?;
    let clustered = g
        .grid()
        .iter()
        .enumerate()
        .all(|(i, &t)| (2 * i >= n || t < 1e-6) && (2 * i <= n || t > 1.0 - 1e-6));
    if !clustered {
        problems.push(format!("κ=200 grid not clustered: {:?}", g.grid()));
    }
    let (smin, smax, rho) = (0.002f64, 80.0f64, 7.0f64);
    let mut edm_dev: f64 = 0.0;
    let mut edm_top = 0.0;
    for n in [4, 18, 40] {
        let s = make_schedule(ScheduleKind::edm_default(), n).map_err(fail)?;
        let g = s.grid();
        if g[0] != 0.0 {
            problems.push(format!("edm N={n} starts at {}", g[0]));
        }
        let (a, b) = (smin.powf(1.0 / rho), smax.powf(1.0 / rho));
        for (i, &t) in g.iter().enumerate().skip(1) {
            let sig = (a + i as f64 / n as f64 * (b - a)).powf(rho);
            edm_dev = edm_dev.max((t - sig / (sig + 1.0)).abs());
        }
        let top = smax / (smax + 1.0);
        edm_dev = edm_dev.max((g[n] - top).abs());
        edm_top = g[n];
        if g[n] >= 1.0 {
            problems.push(format!("edm N={n} reaches t={}", g[n]));
        }
    }
    if edm_dev > 1e-14 {
        problems.push(format!(
            "edm grid deviates from its formula by {edm_dev:.1e}"
        ));
    }
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "sigmoid formula dev {formula_dev:.1e}, κ=1e-4 uniform dev {uniform_dev:.1e}, κ=200 clustered, edm t_N = {edm_top}"
            )
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- sinkhorn

fn check_sinkhorn() -> Check {
    let mut r = rng::seeded(3);
    let mut worst: f64 = 0.0;
    let mut plans = 0;
    let mut problems = Vec::new();
    for b in [64, 512] {
        for rep in 0..2 {
            let x0 = Dataset::eight_gaussians(2.0, 0.1).sample(b, &mut r);
            let x1 = rng::standard_normal(b, 2, &mut r);
            for eps in [0.5, 2.0, 10.0] {
                let cfg = SinkhornCfg {
                    epsilon: eps,
                    ..Default::default()
                };
                let p = sinkhorn_coupling(&x0, &x1, &cfg, None).map_err(fail)?;
                if !p.converged {
                    problems.push(format!("b={b} ε={eps} rep {rep} did not converge"));
                    continue;
                }
                plans += 1;
                worst = worst.max(marginal_violation(&p.plan));
            }
        }
    }
    if worst >= 1e-6 {
        problems.push(format!("marginal violation {worst:.1e}"));
    }
    let b = 64;
    let x0 = rng::standard_normal(b, 2, &mut r);
    let x1 = rng::standard_normal(b, 2, &mut r);
    let p = sinkhorn_coupling(
        &x0,
        &x1,
        &SinkhornCfg {
            epsilon: 1e6,
            ..Default::default()
        },
        None,
    )
    .map_err(fail)?;
    let u = 1.0 / (b * b) as f64;
    let dev = p
        .plan
        .data()
        .iter()
        .map(|v| (v - u).abs())
        .fold(0.0, f64::max);
    if dev >= 1e-6 {
        problems.push(format!("ε=1e6 plan deviates from uniform by {dev:.1e}"));
    }
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{plans} converged plans, max marginal violation {worst:.1e}; ε=1e6 max |P - 1/b²| {dev:.1e}")
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------- preconditioning

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn check_preconditioning() -> Check {
    let specs = [
        BridgeSpec::flow_matching(0.5),
        BridgeSpec::flow_matching(1.0),
        BridgeSpec::flow_matching(2.0),
        BridgeSpec::new(Interpolant::Linear, 1.5, 1.0, 0.6).map_err(fail)?,
        BridgeSpec::new(Interpolant::Brownian { scale: 0.7 }, 0.8, 1.0, 0.2).map_err(fail)?,
    ];
    let n = 100_000;
    let mut r = rng::seeded(77);
    let mut worst: f64 = 0.0;
    for spec in &specs {
        let s0 = spec.var_data.sqrt();
        let st = spec.var_prior.sqrt();
        let rho = spec.cov / (s0 * st);
        for k in 1..=9 {
            let t = k as f64 / 10.0;
            let c = spec.interpolant.coefficients(t);
            let (cin, skip, out) = (
                c_in(spec, t).map_err(fail)?,
                c_skip(spec, t).map_err(fail)?,
                c_out(spec, t).map_err(fail)?,
            );
            let mut scaled = Vec::with_capacity(n);
            let mut target = Vec::with_capacity(n);
            for _ in 0..n {
                let a = s0 * rng::normal(&mut r);
                let b = rho * st / s0 * a + st * (1.0 - rho * rho).sqrt() * rng::normal(&mut r);
                let xt = c.alpha * a + c.beta * b + c.gamma * rng::normal(&mut r);
                scaled.push(cin * xt);
                target.push((a - skip * xt) / out);
            }
            worst = worst.max((variance(&scaled) - 1.0).abs());
            worst = worst.max((variance(&target) - 1.0).abs());
        }
    }
    ensure(
        worst < 0.02,
        format!(
            "{} bridges x 9 times, max |Var - 1| {worst:.4}",
            specs.len()
        ),
    )
}

// ------------------------------------------------------------ reflow rounds

const REFLOW_SEEDS: [u64; 3] = [1, 2, 3];
const REFLOW_ROUNDS: usize = 3;

fn eight_gaussian_config(seed: u64, root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        id: format!("monotone{seed}"),
        seed,
        output_dir: Some(root.join(format!("seed{seed}"))),
        dataset: DatasetSpec::EightGaussians {
            radius: 2.0,
            std: 0.1,
        },
        model: DenoiserConfig {
            dim: 2,
            hidden: vec![64, 64],
            parameterization: Parameterization::Preconditioned { sigma_data: 1.5 },
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.train.steps = 20_000;
    cfg.train.batch = 256;
    cfg.train.log_every = 1000;
    cfg.reflow = ReflowSpec {
        rounds: REFLOW_ROUNDS,
        n_pairs: 10_000,
        solver: SolverSpec {
            steps: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut student = cfg.train.clone();
    student.steps = 10_000;
    cfg.reflow.train = Some(student);
    cfg.eval = EvalSpec {
        metrics: vec![MetricKind::Nfe],
        n_samples: 16,
        n_reference: 16,
        ..Default::default()
    };
    cfg
}

struct ReflowRuns {
    _tmp: tempfile::TempDir,
    dirs: Vec<PathBuf>,
}

fn reflow_runs() -> std::result::Result<&'static ReflowRuns, String> {
    static RUNS: OnceLock<std::result::Result<ReflowRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let tmp = tempfile::tempdir().map_err(fail)?;
        let mut dirs = Vec::new();
        for seed in REFLOW_SEEDS {
            let cfg = eight_gaussian_config(seed, tmp.path());
            dirs.push(run_reflow(&cfg, None, &Env::default()).map_err(fail)?.dir);
        }
        Ok(ReflowRuns { _tmp: tmp, dirs })
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Straightness and per-sample transport costs of one model on fixed noise.
fn round_metrics(model: &Denoiser, noise: &Tensor) -> reflow_core::Result<(f64, Vec<f64>)> {
    let s = straightness(model, noise, 64)?;
    let cfg = SolverSpec {
        steps: 64,
        ..Default::default()
    }
    .build(Direction::Backward)?;
    let x0 = solve(model, noise, &cfg)?.terminal;
    let costs = x0
        .iter_rows()
        .zip(noise.iter_rows())
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum())
        .collect();
    Ok((s, costs))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, variance(v).sqrt())
}

fn check_reflow_monotone() -> Check {
    let runs = reflow_runs()?;
    let noise = rng::standard_normal(2000, 2, &mut rng::seeded(4242));
    let mut ok = true;
    let mut lines = Vec::new();
    for (seed, dir) in REFLOW_SEEDS.iter().zip(&runs.dirs) {
        let mut s_seq = Vec::new();
        let mut c_seq = Vec::new();
        let mut prev: Option<Vec<f64>> = None;
        for k in 0..=REFLOW_ROUNDS {
            let model = load_checkpoint(&dir.join(format!("round{k}.json"))).map_err(fail)?;
            let (s, costs) = round_metrics(&model, &noise).map_err(fail)?;
            let (c, _) = mean_sd(&costs);
            if let Some(p) = &prev {
                ok &= s <= *s_seq.last().unwrap();
                // paired difference, allowed to rise by Monte-Carlo error
                let diff: Vec<f64> = costs.iter().zip(p).map(|(a, b)| a - b).collect();
                let (d, sd) = mean_sd(&diff);
                ok &= d <= 2.0 * sd / (diff.len() as f64).sqrt();
            }
            s_seq.push(s);
            c_seq.push(c);
            prev = Some(costs);
        }
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(">")
        };
        lines.push(format!(
            "seed {seed}: S {} cost {}",
            fmt(&s_seq),
            fmt(&c_seq)
        ));
    }
    ensure(ok, lines.join("; "))
}

fn check_truncation() -> Check {
    let runs = reflow_runs()?;
    let model = load_checkpoint(&runs.dirs[0].join("round1.json")).map_err(fail)?;
    let noise = rng::standard_normal(1000, 2, &mut rng::seeded(9));
    let n = 8;
    let uni = truncation_error(
        &model,
        &make_schedule(ScheduleKind::Uniform, n).map_err(fail)?,
        &noise,
    )
    .map_err(fail)?;
    let sig = truncation_error(
        &model,
        &make_schedule(ScheduleKind::Sigmoid { kappa: 20.0 }, n).map_err(fail)?,
        &noise,
    )
    .map_err(fail)?;
    ensure(
        sig[0] < uni[0] && sig[n - 1] < uni[n - 1],
        format!(
            "mean |τ| near t=0: sigmoid {:.2e} vs uniform {:.2e}; near t=1: sigmoid {:.2e} vs uniform {:.2e}",
            sig[0], uni[0], sig[n - 1], uni[n - 1]
        ),
    )
}

// ----------------------------------------------------------- mse vs pseudo-huber

const MIX_SEEDS: [u64; 3] = [11, 12, 13];
const MIX_N: usize = 2000;

fn mixture_config(seed: u64, loss: LossSpec, root: &Path) -> ExperimentConfig {
    let tag = match loss {
        LossSpec::Mse => "mse",
        _ => "ph",
    };
    let mut cfg = ExperimentConfig {
        id: format!("{tag}{seed}"),
        seed,
        output_dir: Some(root.join(format!("{tag}{seed}"))),
        dataset: DatasetSpec::TwoGaussians {
            offset: 2.0,
            std: 0.25,
            weight: 0.7,
        },
        model: DenoiserConfig {
            dim: 2,
            hidden: vec![64, 64],
            parameterization: Parameterization::Preconditioned { sigma_data: 1.5 },
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.train.steps = 5000;
    cfg.train.batch = 256;
    cfg.train.loss = loss;
    cfg.train.log_every = 500;
    cfg.eval = EvalSpec {
        solvers: vec![SolverSpec {
            steps: 64,
            ..Default::default()
        }],
        metrics: vec![MetricKind::EnergyDistance, MetricKind::TerminalDeviation],
        n_samples: MIX_N,
        n_reference: MIX_N,
        ..Default::default()
    };
    cfg
}

/// Null distribution of the energy distance between two independent samples
/// of size `MIX_N` from the same law.
fn null_energy(
    sample: impl Fn(&mut Rng) -> Tensor,
    reps: usize,
    seed: u64,
) -> reflow_core::Result<Vec<f64>> {
    let mut r = rng::seeded(seed);
    (0..reps)
        .map(|_| {
            let a = sample(&mut r);
            let b = sample(&mut r);
            energy_distance(&a, &b)
        })
        .collect()
}

fn check_mse_vs_pseudo_huber() -> Check {
    let data = Dataset::two_gaussians(2.0, 0.25, 0.7);
    let null_data = null_energy(|r| data.sample(MIX_N, r), 20, 5).map_err(fail)?;
    let null_gauss = null_energy(|r| rng::standard_normal(MIX_N, 2, r), 20, 6).map_err(fail)?;
    let (nd_mean, nd_sd) = mean_sd(&null_data);
    let (_, ng_sd) = mean_sd(&null_gauss);
    // a model sample counts as matching the data when its distance is within
    // three null standard deviations of the null mean
    let threshold = nd_mean + 3.0 * nd_sd;
    let tmp = tempfile::tempdir().map_err(fail)?;
    let label = SolverSpec {
        steps: 64,
        ..Default::default()
    }
    .label();
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in MIX_SEEDS {
        let mut vals = Vec::new();
        for loss in [LossSpec::Mse, LossSpec::PseudoHuber { c: None }] {
            let cfg = mixture_config(seed, loss, tmp.path());
            let out = run_train(&cfg, &Env::default()).map_err(fail)?;
            let get = |m: &str| {
                out.table
                    .get(&cfg.id, &format!("{m}/{label}"))
                    .ok_or_else(|| format!("missing {m} for {}", cfg.id))
            };
            vals.push((get("energy_distance")?, get("terminal_deviation")?));
        }
        let ((ed_mse, dev_mse), (ed_ph, dev_ph)) = (vals[0], vals[1]);
        ok &= ed_mse < threshold;
        ok &= dev_ph - dev_mse > 3.0 * ng_sd;
        lines.push(format!(
            "seed {seed}: ED mse {ed_mse:.4} ph {ed_ph:.4}, terminal dev mse {dev_mse:.4} ph {dev_ph:.4}"
        ));
    }
    ensure(
        ok,
        format!(
            "threshold {threshold:.4} (null {nd_mean:.4} ± {nd_sd:.4}), null sd at t=1 {ng_sd:.4}; {}",
            lines.join("; ")
        ),
    )
}

// ------------------------------------------------------------- determinism

fn check_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let mut cfg = eight_gaussian_config(7, tmp.path());
    cfg.train.steps = 300;
    cfg.reflow.rounds = 1;
    cfg.reflow.n_pairs = 512;
    if let Some(t) = cfg.reflow.train.as_mut() {
        t.steps = 200;
    }
    cfg.eval = EvalSpec {
        solvers: vec![
            SolverSpec::default(),
            SolverSpec {
                method: Method::Dpm { r: 0.4 },
                schedule: ScheduleKind::Sigmoid { kappa: 20.0 },
                steps: 4,
                final_euler: true,
            },
        ],
        metrics: vec![
            MetricKind::EnergyDistance,
            MetricKind::SlicedWasserstein,
            MetricKind::Straightness,
            MetricKind::TransportCost,
            MetricKind::Nfe,
            MetricKind::TerminalDeviation,
        ],
        n_samples: 300,
        n_reference: 300,
        every: 100,
        ..Default::default()
    };
    let mut bytes = Vec::new();
    for (run, threads) in [("a", 1), ("b", 2)] {
        cfg.output_dir = Some(tmp.path().join(run));
        let env = Env {
            threads: Some(threads),
            ..Env::default()
        };
        let out = run_reflow(&cfg, None, &env).map_err(fail)?;
        bytes.push(std::fs::read(out.dir.join("metrics.csv")).map_err(fail)?);
    }
    let rows = MetricsTable::from_csv(&bytes[0])
        .map_err(fail)?
        .rows()
        .len();
    ensure(
        bytes[0] == bytes[1],
        format!(
            "two runs, {} bytes, {rows} rows, identical: {}",
            bytes[0].len(),
            bytes[0] == bytes[1]
        ),
    )
}

// -------------------------------------------------------------------- main

fn main() {
    let checks: [(&str, CheckFn); 12] = [
        ("gradients", check_gradients),
        ("posterior-mean", check_posterior_mean),
        ("hpf-identity", check_hpf_identity),
        ("loss-ratio", check_loss_ratio),
        ("solver-algebra", check_solver_algebra),
        ("schedules", check_schedules),
        ("sinkhorn", check_sinkhorn),
        ("reflow-monotone", check_reflow_monotone),
        ("mse-vs-pseudo-huber", check_mse_vs_pseudo_huber),
        ("preconditioning", check_preconditioning),
        ("truncation", check_truncation),
        ("determinism", check_determinism),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (k, (name, f)) in checks.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name:<20} {secs:7.1}s  {detail}", k + 1);
    }
    if failed > 0 {
        println!("{failed} check(s) failed");
        std::process::exit(1);
    }
}
