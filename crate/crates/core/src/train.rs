//! Training loop and one ReFlow round.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::couplings::{
    generate_backward_pairs, generate_forward_pairs, independent_coupling, project_coupling,
    sinkhorn_coupling, subsample_plan, Batch, PairSource, PairStore, ProjectionCfg, SinkhornCfg,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{weighted_batch_loss, BlurSpec, LossMap, TimeDist, WeightKind, WeightRule};
use crate::math;
use crate::nn::{AdamConfig, Denoiser, Graph, Mode, OptimizerState};
use crate::rng::{self, Rng};
use crate::solvers::{Direction, SolverCfg};
use crate::tensor::Tensor;

/// Loss map as written in a config; resolved per data dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum LossSpec {
    Mse,
    /// `c` defaults to `0.00054·√d`.
    PseudoHuber {
        c: Option<f64>,
    },
    Hpf {
        lambda: f64,
        blur: Option<BlurSpec>,
    },
}

impl LossSpec {
    pub fn build(&self, dim: usize) -> Result<LossMap> {
        match *self {
            LossSpec::Mse => Ok(LossMap::Mse),
            LossSpec::PseudoHuber { c: None } => Ok(LossMap::pseudo_huber_for_dim(dim)),
            LossSpec::PseudoHuber { c: Some(c) } => {
                if !(c > 0.0) {
                    return Err(Error::invalid("pseudo-huber c", "must be positive"));
                }
                Ok(LossMap::PseudoHuber { c })
            }
            LossSpec::Hpf { lambda, blur } => {
                LossMap::high_pass(dim, lambda, blur.unwrap_or(BlurSpec::default_for(dim)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)
)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `final_frac` of it.
    Cosine {
        final_frac: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_frac } => {
                let p = if total <= 1 {
                    1.0
                } else {
                    step as f64 / (total - 1) as f64
                };
                final_frac + (1.0 - final_frac) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * p))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub weight: WeightKind,
    pub time_dist: TimeDist,
    pub loss: LossSpec,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Probability of dropping a label (classifier-free guidance training).
    pub label_dropout: f64,
    pub tracker_hidden: usize,
    pub tracker_lr: f64,
    /// Loss history stride.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 256,
            weight: WeightKind::One,
            time_dist: TimeDist::Uniform,
            loss: LossSpec::Mse,
            adam: AdamConfig {
                lr: 2e-3,
                ema_decay: 0.999,
                ..Default::default()
            },
            lr_schedule: LrSchedule::Cosine { final_frac: 0.05 },
            label_dropout: 0.0,
            tracker_hidden: 64,
            tracker_lr: 1e-3,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("train.batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::invalid("train.label_dropout", "must lie in [0, 1]"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("train.log_every", "must be positive"));
        }
        if let LrSchedule::Cosine { final_frac } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_frac) {
                return Err(Error::invalid(
                    "train.lr_schedule.final_frac",
                    "must lie in [0, 1]",
                ));
            }
        }
        self.time_dist.validate()?;
        self.adam.validate()?;
        if !(self.tracker_lr > 0.0) {
            return Err(Error::invalid("train.tracker_lr", "must be positive"));
        }
        Ok(())
    }
}

/// Mini-batch OT settings: couple `b_coupling` points, keep `batch` pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct OtFeedCfg {
    pub b_coupling: usize,
    pub sinkhorn: SinkhornCfg,
    pub warm_start: bool,
}

/// Where training pairs come from.
pub enum PairFeed<'a> {
    Independent(&'a Dataset),
    Store(&'a PairStore),
    MinibatchOt {
        data: &'a Dataset,
        cfg: OtFeedCfg,
        warm: Option<Vec<f64>>,
    },
}

impl PairFeed<'_> {
    pub fn next(&mut self, n: usize, rng: &mut Rng) -> Result<Batch> {
        match self {
            PairFeed::Independent(d) => Ok(independent_coupling(d, n, rng)),
            PairFeed::Store(s) => s.sample(n, rng),
            PairFeed::MinibatchOt { data, cfg, warm } => {
                let b = cfg.b_coupling.max(n);
                let x0 = data.sample(b, rng);
                let x1 = rng::standard_normal(b, data.dim(), rng);
                let plan = sinkhorn_coupling(&x0, &x1, &cfg.sinkhorn, warm.as_deref())?;
                if cfg.warm_start {
                    *warm = Some(plan.g.clone());
                }
                subsample_plan(&plan, &x0, &x1, n, rng)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossLog {
    pub step: usize,
    /// Mean of `w·ℓ` over the logging window.
    pub weighted: f64,
    /// Mean unweighted `ℓ` over the logging window.
    pub raw: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Denoiser,
    pub ema: Denoiser,
    pub history: Vec<LossLog>,
    pub skipped_steps: u64,
}

fn drop_labels(batch: &mut Batch, p: f64, rng: &mut Rng) {
    if let Some(labels) = batch.labels.as_mut() {
        if p > 0.0 {
            for l in labels.iter_mut() {
                if rng::uniform(rng) < p {
                    *l = None;
                }
            }
        }
    }
}

/// Trains `model` for `cfg.steps` Adam steps on pairs from `feed`.
pub fn train(
    model: Denoiser,
    feed: &mut PairFeed<'_>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    train_observed(model, feed, cfg, rng, 0, &mut |_, _| Ok(()))
}

/// As [`train`], calling `observe(step, ema)` after every `every`-th step
/// with the current EMA weights. `every = 0` never calls it. Observation
/// does not touch `rng`, so observed and unobserved runs are identical.
pub fn train_observed(
    mut model: Denoiser,
    feed: &mut PairFeed<'_>,
    cfg: &TrainConfig,
    rng: &mut Rng,
    every: usize,
    observe: &mut dyn FnMut(usize, &Denoiser) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dim = model.dim();
    let map = cfg.loss.build(dim)?;
    let mut rule = match cfg.weight {
        WeightKind::Tracker => WeightRule::tracker(
            dim,
            cfg.tracker_hidden,
            AdamConfig {
                lr: cfg.tracker_lr,
                ema_decay: 0.0,
                ..Default::default()
            },
            rng,
        )?,
        k => WeightRule::new(k, dim, rng)?,
    };
    let mut opt = OptimizerState::new(cfg.adam, model.params())?;
    let mut history = Vec::new();
    let (mut acc_w, mut acc_r, mut acc_n) = (0.0, 0.0, 0usize);
    let dropout = model.config().dropout_p > 0.0;
    for step in 0..cfg.steps {
        let mut batch = feed.next(cfg.batch, rng)?;
        if model.config().label_dim == 0 {
            batch.labels = None;
        }
        drop_labels(&mut batch, cfg.label_dropout, rng);
        let t = cfg.time_dist.sample_n(batch.len(), rng);
        let mode = if dropout {
            Mode::Train { seed: rng.random() }
        } else {
            Mode::Eval
        };
        let mut g = Graph::new();
        let rec = weighted_batch_loss(&mut g, &model, &batch, &t, &rule, &map, mode).map_err(
            |e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    context: "training loss at step",
                    index: step,
                },
                other => other,
            },
        )?;
        let mut grads = g.backward(rec.objective)?;
        let dg = model.collect_gradients(&rec.denoiser, &mut grads);
        opt.set_lr(cfg.adam.lr * cfg.lr_schedule.factor(step, cfg.steps));
        opt.step(model.params_mut(), &dg)?;
        opt.ema_update(model.params())?;
        match &mut rule {
            WeightRule::Tracker(tr) => {
                let vars = rec.tracker_params.as_deref().unwrap_or(&[]);
                let tg: Vec<Tensor> = vars
                    .iter()
                    .zip(tr.net().params())
                    .map(|(&v, p)| grads.take(v).unwrap_or_else(|| p.map(|_| 0.0)))
                    .collect();
                tr.apply_gradients(&tg)?;
            }
            WeightRule::BatchNorm(b) => b.observe(&t, &rec.per_sample),
            _ => {}
        }
        acc_w += rec.weighted_mean;
        acc_r += rec.per_sample.iter().sum::<f64>() / rec.per_sample.len() as f64;
        acc_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            history.push(LossLog {
                step: step + 1,
                weighted: acc_w / acc_n as f64,
                raw: acc_r / acc_n as f64,
            });
            (acc_w, acc_r, acc_n) = (0.0, 0.0, 0);
        }
        if every > 0 && (step + 1) % every == 0 {
            let mut snapshot = model.clone();
            snapshot.set_params(opt.ema().to_vec())?;
            observe(step + 1, &snapshot)?;
        }
    }
    let skipped_steps = opt.skipped();
    let mut ema = model.clone();
    ema.set_params(opt.into_ema())?;
    Ok(TrainOutcome {
        model,
        ema,
        history,
        skipped_steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflowCfg {
    /// Backward pairs simulated from noise.
    pub n_pairs: usize,
    /// Forward pairs simulated from data (used when `rho > 0`).
    pub n_forward: usize,
    pub rho: f64,
    /// Generation solver; its direction is overridden per pair kind.
    pub solver: SolverCfg,
    pub projection: Option<ProjectionCfg>,
    /// Reference sample size for projection.
    pub projection_reference: usize,
    /// Start the student from the teacher's weights.
    pub init_from_teacher: bool,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct ReflowOutcome {
    pub student: TrainOutcome,
    pub store: PairStore,
    pub dropped_pairs: usize,
}

/// Builds a [`PairStore`] by simulating `teacher`.
pub fn build_reflow_store(
    teacher: &Denoiser,
    data: &Dataset,
    cfg: &ReflowCfg,
    rng: &mut Rng,
) -> Result<(PairStore, usize)> {
    let mut back_cfg = cfg.solver.clone();
    back_cfg.direction = Direction::Backward;
    let noise = rng::standard_normal(cfg.n_pairs, data.dim(), rng);
    let back = generate_backward_pairs(teacher, &noise, &back_cfg)?;
    let mut dropped = back.dropped;
    let mut pairs = back.pairs;
    let mut source = PairSource::Backward;
    if let Some(pcfg) = &cfg.projection {
        let reference = data.sample(cfg.projection_reference.max(1), rng);
        let rep = project_coupling(&pairs, &reference, pcfg)?;
        pairs = rep.pairs;
        source = PairSource::Projected;
    }
    let mut store = PairStore::new(pairs, source);
    if cfg.rho > 0.0 {
        let mut fwd_cfg = cfg.solver.clone();
        fwd_cfg.direction = Direction::Forward;
        let x0 = data.sample(cfg.n_forward, rng);
        let fwd = generate_forward_pairs(teacher, &x0, &fwd_cfg)?;
        dropped += fwd.dropped;
        store = store.with_forward(fwd.pairs, cfg.rho)?;
    }
    Ok((store, dropped))
}

/// Simulates the teacher's coupling and trains a student on it.
pub fn reflow_round(
    teacher: &Denoiser,
    data: &Dataset,
    cfg: &ReflowCfg,
    rng: &mut Rng,
) -> Result<ReflowOutcome> {
    let (store, dropped_pairs) = build_reflow_store(teacher, data, cfg, rng)?;
    let student = if cfg.init_from_teacher {
        teacher.clone()
    } else {
        Denoiser::new(teacher.config().clone(), rng)?
    };
    let outcome = train(student, &mut PairFeed::Store(&store), &cfg.train, rng)?;
    Ok(ReflowOutcome {
        student: outcome,
        store,
        dropped_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserConfig;
    use crate::solvers::{make_schedule, Method, ScheduleKind};
    use alloc::vec;

    fn tiny_model(r: &mut Rng) -> Denoiser {
        Denoiser::new(
            DenoiserConfig {
                dim: 2,
                hidden: vec![16, 16],
                ..Default::default()
            },
            r,
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut r = rng::seeded(0);
        let m = tiny_model(&mut r);
        let ds = Dataset::eight_gaussians(2.0, 0.1);
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = train(m.clone(), &mut PairFeed::Independent(&ds), &cfg, &mut r).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.ema, m);
        assert!(out.history.is_empty());
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut r = rng::seeded(1);
        let m = tiny_model(&mut r);
        let ds = Dataset::eight_gaussians(2.0, 0.1);
        let cfg = TrainConfig {
            steps: 300,
            batch: 64,
            log_every: 50,
            ..Default::default()
        };
        let out = train(m, &mut PairFeed::Independent(&ds), &cfg, &mut r).unwrap();
        let first = out.history.first().unwrap().raw;
        let last = out.history.last().unwrap().raw;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn reflow_round_with_zero_steps_keeps_teacher() {
        let mut r = rng::seeded(2);
        let teacher = tiny_model(&mut r);
        let ds = Dataset::eight_gaussians(2.0, 0.1);
        let solver = SolverCfg::new(
            Method::Euler,
            make_schedule(ScheduleKind::Uniform, 4).unwrap(),
            Direction::Backward,
        )
        .unwrap();
        let cfg = ReflowCfg {
            n_pairs: 32,
            n_forward: 0,
            rho: 0.0,
            solver,
            projection: None,
            projection_reference: 0,
            init_from_teacher: true,
            train: TrainConfig {
                steps: 0,
                ..Default::default()
            },
        };
        let out = reflow_round(&teacher, &ds, &cfg, &mut r).unwrap();
        assert_eq!(out.student.model, teacher);
        assert_eq!(out.store.backward().len(), 32);
    }
}
