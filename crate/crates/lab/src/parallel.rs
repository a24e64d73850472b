//! Chunked parallel pair generation.
//!
//! Rows are split into fixed-size chunks, each chunk is integrated on its
//! own, and the results are stitched back in row order. The solver acts on
//! rows independently, so the output does not depend on the thread count or
//! the chunk size.

use rayon::prelude::*;
use reflow_core::couplings::{
    project_coupling, Batch, Generated, PairSource, PairStore, ProjectionReport, MAX_DROP_FRACTION,
};
use reflow_core::data::Dataset;
use reflow_core::metrics::straightness;
use reflow_core::rng::{self, Rng};
use reflow_core::solvers::{solve_lenient, Direction, SolverCfg, VelocityField};
use reflow_core::{Error, Tensor};

use crate::config::ReflowSpec;
use crate::error::{LabError, Result};

/// Builds a pool with `threads` workers; `None` or 0 lets rayon decide.
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| LabError::config("threads", e.to_string()))
}

/// Terminal states and divergence mask of `start` under `cfg`.
pub fn solve_chunked<F: VelocityField + Sync>(
    field: &F,
    start: &Tensor,
    cfg: &SolverCfg,
    chunk: usize,
) -> reflow_core::Result<(Tensor, Vec<bool>, usize)> {
    let n = start.rows();
    let chunk = chunk.max(1);
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|a| (a, (a + chunk).min(n)))
        .collect();
    let parts = ranges
        .par_iter()
        .map(|&(a, b)| {
            let idx: Vec<usize> = (a..b).collect();
            solve_lenient(field, &start.select_rows(&idx), cfg)
        })
        .collect::<reflow_core::Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * start.cols());
    let mut mask = Vec::with_capacity(n);
    let mut nfe = 0;
    for (sol, m) in parts {
        data.extend_from_slice(sol.terminal.data());
        mask.extend(m);
        nfe = nfe.max(sol.nfe);
    }
    Ok((Tensor::matrix(n, start.cols(), data), mask, nfe))
}

/// Parallel counterpart of the core backward/forward pair generators with
/// the same drop policy.
pub fn generate_pairs<F: VelocityField + Sync>(
    teacher: &F,
    start: &Tensor,
    cfg: &SolverCfg,
    chunk: usize,
) -> reflow_core::Result<Generated> {
    let (end, dropped_mask, nfe) = solve_chunked(teacher, start, cfg, chunk)?;
    let kept: Vec<usize> = (0..start.rows()).filter(|&i| !dropped_mask[i]).collect();
    let dropped = start.rows() - kept.len();
    if dropped as f64 > MAX_DROP_FRACTION * start.rows() as f64 {
        return Err(Error::TooManyDropped {
            dropped,
            total: start.rows(),
        });
    }
    let (begin, end) = (start.select_rows(&kept), end.select_rows(&kept));
    let pairs = match cfg.direction {
        Direction::Backward => Batch::new(end, begin)?,
        Direction::Forward => Batch::new(begin, end)?,
    };
    Ok(Generated {
        pairs,
        kept,
        dropped,
        nfe,
    })
}

/// [`straightness`] over row chunks, combined by a size-weighted mean.
/// The value depends on `chunk` only through float rounding.
pub fn straightness_chunked<F: VelocityField + Sync>(
    field: &F,
    noise: &Tensor,
    fine_n: usize,
    chunk: usize,
) -> reflow_core::Result<f64> {
    let n = noise.rows();
    let chunk = chunk.max(1);
    let parts = (0..n)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&a| {
            let idx: Vec<usize> = (a..(a + chunk).min(n)).collect();
            Ok(straightness(field, &noise.select_rows(&idx), fine_n)? * idx.len() as f64)
        })
        .collect::<reflow_core::Result<Vec<f64>>>()?;
    if n == 0 {
        return straightness(field, noise, fine_n);
    }
    Ok(parts.iter().sum::<f64>() / n as f64)
}

pub struct BuiltStore {
    pub store: PairStore,
    pub dropped: usize,
    pub projection: Option<ProjectionReport>,
}

/// Simulates `teacher` into a pair store. Draws from `rng` in the same
/// order as the sequential core builder, so both give identical stores.
pub fn build_store<F: VelocityField + Sync>(
    teacher: &F,
    data: &Dataset,
    spec: &ReflowSpec,
    rng: &mut Rng,
) -> reflow_core::Result<BuiltStore> {
    let back_cfg = spec.solver.build(Direction::Backward)?;
    let noise = rng::standard_normal(spec.n_pairs, data.dim(), rng);
    let back = generate_pairs(teacher, &noise, &back_cfg, spec.chunk)?;
    let mut dropped = back.dropped;
    let mut pairs = back.pairs;
    let mut source = PairSource::Backward;
    let mut projection = None;
    if let Some(pcfg) = &spec.projection {
        let reference = data.sample(spec.projection_reference.max(1), rng);
        let rep = project_coupling(&pairs, &reference, pcfg)?;
        pairs = rep.pairs.clone();
        source = PairSource::Projected;
        projection = Some(rep);
    }
    let mut store = PairStore::new(pairs, source);
    if spec.rho > 0.0 {
        let fwd_cfg = spec.solver.build(Direction::Forward)?;
        let x0 = data.sample(spec.n_forward, rng);
        let fwd = generate_pairs(teacher, &x0, &fwd_cfg, spec.chunk)?;
        dropped += fwd.dropped;
        store = store.with_forward(fwd.pairs, spec.rho)?;
    }
    Ok(BuiltStore {
        store,
        dropped,
        projection,
    })
}
