//! Couplings `Q₀₁` between data (`x₀`) and noise (`x₁`).

mod projection;
mod sinkhorn;

pub use projection::{project_coupling, PhaseLog, ProjectionCfg, ProjectionReport};
pub use sinkhorn::{
    exact_assignment, marginal_violation, sinkhorn_coupling, sinkhorn_divergence, sinkhorn_self,
    subsample_plan, EpsilonDecay, SinkhornCfg, SinkhornDivergence, SinkhornPlan,
};

use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::solvers::{solve_lenient, Direction, SolverCfg, VelocityField};
use crate::tensor::Tensor;

/// Aligned pairs `(x₀ⁱ, x₁ⁱ)`, optionally with a class label per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub labels: Option<Vec<Option<usize>>>,
}

impl Batch {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        x1.expect_shape("batch", x0.shape())?;
        Ok(Batch {
            x0,
            x1,
            labels: None,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Batch {
            x0: Tensor::zeros(0, dim),
            x1: Tensor::zeros(0, dim),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape("batch labels", &[self.len()], &[labels.len()]));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x0: self.x0.select_rows(idx),
            x1: self.x1.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PairSource {
    Independent,
    /// `x₀ = solve(x₁, 1 → 0)` with `x₁ ∼ 𝒩(0, I)`.
    Backward,
    /// `x₁ = solve(x₀, 0 → 1)` with `x₀` a dataset point.
    Forward,
    Projected,
}

/// An empirical coupling: a backward pool, a forward pool and the
/// probability `rho` of drawing from the forward pool.
#[derive(Clone, Debug, PartialEq)]
pub struct PairStore {
    backward: Batch,
    forward: Batch,
    backward_source: PairSource,
    rho: f64,
}

impl PairStore {
    pub fn new(backward: Batch, backward_source: PairSource) -> Self {
        let dim = backward.dim();
        PairStore {
            backward,
            forward: Batch::empty(dim),
            backward_source,
            rho: 0.0,
        }
    }

    pub fn with_forward(mut self, forward: Batch, rho: f64) -> Result<Self> {
        if forward.dim() != self.dim() {
            return Err(Error::shape(
                "forward pairs",
                &[self.dim()],
                &[forward.dim()],
            ));
        }
        self.forward = forward;
        self.set_rho(rho)?;
        Ok(self)
    }

    pub fn set_rho(&mut self, rho: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::invalid("rho", "must lie in [0, 1]"));
        }
        self.rho = rho;
        Ok(())
    }

    pub fn replace_backward(&mut self, backward: Batch, source: PairSource) -> Result<()> {
        backward
            .x0
            .expect_shape("replacement pairs", self.backward.x0.shape())?;
        self.backward = backward;
        self.backward_source = source;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.backward.dim()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn backward(&self) -> &Batch {
        &self.backward
    }

    pub fn forward(&self) -> &Batch {
        &self.forward
    }

    /// Provenance of the backward pool.
    pub fn backward_source(&self) -> PairSource {
        self.backward_source
    }

    /// Draws `n` pairs; each slot comes from the forward pool with
    /// probability `rho`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        sample_pairs(self, n, rng)
    }
}

/// See [`PairStore::sample`].
pub fn sample_pairs(store: &PairStore, n: usize, rng: &mut Rng) -> Result<Batch> {
    if store.rho > 0.0 && store.forward.is_empty() {
        return Err(Error::EmptyPool("forward"));
    }
    if store.rho < 1.0 && store.backward.is_empty() {
        return Err(Error::EmptyPool("backward"));
    }
    let d = store.dim();
    let labeled =
        store.backward.labels.is_some() && (store.rho == 0.0 || store.forward.labels.is_some());
    let mut x0 = Vec::with_capacity(n * d);
    let mut x1 = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(if labeled { n } else { 0 });
    for _ in 0..n {
        let pool = if store.rho > 0.0 && rng::uniform(rng) < store.rho {
            &store.forward
        } else {
            &store.backward
        };
        let i = rng::index(rng, pool.len());
        x0.extend_from_slice(pool.x0.row(i));
        x1.extend_from_slice(pool.x1.row(i));
        if labeled {
            labels.push(pool.labels.as_ref().and_then(|l| l[i]));
        }
    }
    Ok(Batch {
        x0: Tensor::matrix(n, d, x0),
        x1: Tensor::matrix(n, d, x1),
        labels: labeled.then_some(labels),
    })
}

/// `n` pairs from `ℙ₀ ⊗ 𝒩(0, I)`, labeled when the dataset is.
pub fn independent_coupling(data: &Dataset, n: usize, rng: &mut Rng) -> Batch {
    let (x0, labels) = data.sample_labeled(n, rng);
    let x1 = rng::standard_normal(n, data.dim(), rng);
    Batch {
        x0,
        x1,
        labels: (data.classes() > 0).then_some(labels),
    }
}

/// Largest tolerated fraction of dropped (diverged) pairs.
pub const MAX_DROP_FRACTION: f64 = 0.01;

/// Simulated pairs plus the rows that were kept.
#[derive(Clone, Debug)]
pub struct Generated {
    pub pairs: Batch,
    /// Indices into the solver input of the pairs that survived.
    pub kept: Vec<usize>,
    pub dropped: usize,
    pub nfe: usize,
}

fn generate(
    teacher: &dyn VelocityField,
    start: &Tensor,
    cfg: &SolverCfg,
    want: Direction,
) -> Result<Generated> {
    if cfg.direction != want {
        return Err(Error::invalid(
            "solver direction",
            "does not match the pair kind",
        ));
    }
    let (sol, dropped_mask) = solve_lenient(teacher, start, cfg)?;
    let kept: Vec<usize> = (0..start.rows()).filter(|&i| !dropped_mask[i]).collect();
    let dropped = start.rows() - kept.len();
    if dropped as f64 > MAX_DROP_FRACTION * start.rows() as f64 {
        return Err(Error::TooManyDropped {
            dropped,
            total: start.rows(),
        });
    }
    let end = sol.terminal.select_rows(&kept);
    let begin = start.select_rows(&kept);
    let pairs = match want {
        Direction::Backward => Batch::new(end, begin)?,
        Direction::Forward => Batch::new(begin, end)?,
    };
    Ok(Generated {
        pairs,
        kept,
        dropped,
        nfe: sol.nfe,
    })
}

/// Pairs `(solve(x₁, 1 → 0), x₁)` for each noise row.
pub fn generate_backward_pairs(
    teacher: &dyn VelocityField,
    noise: &Tensor,
    cfg: &SolverCfg,
) -> Result<Generated> {
    generate(teacher, noise, cfg, Direction::Backward)
}

/// Pairs `(x₀, solve(x₀, 0 → 1))` for each data row; `x₀` is copied
/// unchanged.
pub fn generate_forward_pairs(
    teacher: &dyn VelocityField,
    data: &Tensor,
    cfg: &SolverCfg,
) -> Result<Generated> {
    generate(teacher, data, cfg, Direction::Forward)
}
