//! The experiment pipelines behind the CLI subcommands.
//!
//! Every stochastic step draws from a named stream derived from the
//! config seed (see [`stream`]), so adding an evaluation or changing the
//! thread count never shifts the randomness of training.

use std::path::{Path, PathBuf};

use reflow_core::couplings::{
    marginal_violation, project_coupling, sinkhorn_coupling, subsample_plan, PairSource, PairStore,
};
use reflow_core::data::Dataset;
use reflow_core::metrics::{energy_distance, sliced_wasserstein, transport_cost};
use reflow_core::nn::Denoiser;
use reflow_core::rng::{self, Rng};
use reflow_core::solvers::{solve_trajectory, Counted, Direction};
use reflow_core::train::{train_observed, PairFeed, TrainConfig, TrainOutcome};
use reflow_core::Tensor;
use sha2::{Digest, Sha256};

use crate::artifacts::{
    hash_bytes, load_checkpoint, load_pairs, save_checkpoint, save_pairs, sha256_file, Manifest,
    StoredPairs,
};
use crate::config::{CouplingKind, EvalSpec, ExperimentConfig, MetricKind, SolverSpec};
use crate::error::{IoContext, LabError, Result};
use crate::parallel::{build_store, solve_chunked, straightness_chunked, thread_pool};
use crate::plot;
use crate::table::MetricsTable;

pub const OUTPUT_ROOT_VAR: &str = "REFLOW_OUTPUT_ROOT";
pub const THREADS_VAR: &str = "REFLOW_THREADS";

/// Rows per parallel work item in evaluation.
const EVAL_CHUNK: usize = 256;

/// Where runs go and how many worker threads they may use.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    pub output_root: PathBuf,
    pub threads: Option<usize>,
}

impl Default for Env {
    fn default() -> Self {
        Env {
            output_root: PathBuf::from("runs"),
            threads: None,
        }
    }
}

impl Env {
    /// Reads [`OUTPUT_ROOT_VAR`] and [`THREADS_VAR`].
    pub fn from_env() -> Result<Self> {
        let mut env = Env::default();
        if let Ok(root) = std::env::var(OUTPUT_ROOT_VAR) {
            if !root.is_empty() {
                env.output_root = root.into();
            }
        }
        if let Ok(t) = std::env::var(THREADS_VAR) {
            env.threads = Some(
                t.parse()
                    .map_err(|_| LabError::config(THREADS_VAR, "expected a thread count"))?,
            );
        }
        Ok(env)
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        thread_pool(self.threads)?.install(f)
    }
}

/// Independent RNG stream named `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    rng::seeded(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

/// Files written into one run directory, tracked for the manifest.
pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for `name`, recorded for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.into());
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, text).at(&p)
    }

    pub fn finish(self, command: &str, id: &str, seed: u64) -> Result<PathBuf> {
        let names: Vec<&str> = self.files.iter().map(String::as_str).collect();
        Manifest::new(command, id, seed).write(&self.dir, &names)?;
        Ok(self.dir)
    }
}

/// Result of a pipeline: its directory and every metric it recorded.
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub table: MetricsTable,
}

/// Samples and reference data from the last evaluation, for plotting.
pub struct EvalDraws {
    pub samples: Option<Tensor>,
    pub reference: Tensor,
}

fn metric_name(base: &str, solver: Option<&SolverSpec>, tag: &str) -> String {
    let mut s = base.to_string();
    if let Some(sv) = solver {
        s.push('/');
        s.push_str(&sv.label());
    }
    if !tag.is_empty() {
        s.push('@');
        s.push_str(tag);
    }
    s
}

/// Computes `eval.metrics` for `model` and appends them to `table`.
///
/// Noise, reference data and projection directions come from fixed streams,
/// so two models evaluated under the same seed see the same draws.
pub fn evaluate(
    model: &Denoiser,
    data: &Dataset,
    eval: &EvalSpec,
    seed: u64,
    id: &str,
    tag: &str,
    table: &mut MetricsTable,
) -> reflow_core::Result<EvalDraws> {
    let dim = data.dim();
    let noise = rng::standard_normal(eval.n_samples, dim, &mut stream(seed, "eval-noise"));
    let reference = data.sample(eval.n_reference, &mut stream(seed, "eval-reference"));
    let has = |m: MetricKind| eval.metrics.contains(&m);
    let mut first = None;
    for sv in &eval.solvers {
        let name = |b: &str| metric_name(b, Some(sv), tag);
        let cfg = sv.build(Direction::Backward)?;
        let (out, mask, nfe) = solve_chunked(model, &noise, &cfg, EVAL_CHUNK)?;
        let kept: Vec<usize> = (0..noise.rows()).filter(|&i| !mask[i]).collect();
        let dropped = noise.rows() - kept.len();
        if dropped > 0 {
            table.push(id, &name("dropped"), dropped as f64, noise.rows(), seed);
        }
        if kept.is_empty() {
            return Err(reflow_core::Error::SolverDiverged { step: 0 });
        }
        let samples = out.select_rows(&kept);
        let n = samples.rows();
        if has(MetricKind::Nfe) {
            table.push(id, &name("nfe"), nfe as f64, 1, seed);
        }
        if has(MetricKind::EnergyDistance) {
            let v = energy_distance(&samples, &reference)?;
            table.push(id, &name("energy_distance"), v, n, seed);
        }
        if has(MetricKind::SlicedWasserstein) {
            let v = sliced_wasserstein(
                &samples,
                &reference,
                eval.sw_projections,
                &mut stream(seed, "eval-sw"),
            )?;
            table.push(id, &name("sliced_wasserstein"), v, n, seed);
        }
        if has(MetricKind::TransportCost) {
            let v = transport_cost(&samples, &noise.select_rows(&kept))?;
            table.push(id, &name("transport_cost"), v, n, seed);
        }
        if has(MetricKind::TerminalDeviation) {
            let fwd = sv.build(Direction::Forward)?;
            let (z, zmask, _) = solve_chunked(model, &reference, &fwd, EVAL_CHUNK)?;
            let zk: Vec<usize> = (0..z.rows()).filter(|&i| !zmask[i]).collect();
            let gauss =
                rng::standard_normal(eval.n_reference, dim, &mut stream(seed, "eval-gaussian"));
            let v = energy_distance(&z.select_rows(&zk), &gauss)?;
            table.push(id, &name("terminal_deviation"), v, zk.len(), seed);
        }
        first.get_or_insert(samples);
    }
    if has(MetricKind::Straightness) {
        let v = straightness_chunked(model, &noise, eval.straightness_fine_n, EVAL_CHUNK)?;
        table.push(
            id,
            &metric_name("straightness", None, tag),
            v,
            noise.rows(),
            seed,
        );
    }
    Ok(EvalDraws {
        samples: first,
        reference,
    })
}

fn loss_rows(out: &TrainOutcome, cfg: &TrainConfig, id: &str, seed: u64, table: &mut MetricsTable) {
    let mut prev = 0;
    for l in &out.history {
        let n = (l.step - prev) * cfg.batch;
        prev = l.step;
        let tag = format!("step{}", l.step);
        table.push(id, &format!("loss_weighted@{tag}"), l.weighted, n, seed);
        table.push(id, &format!("loss_raw@{tag}"), l.raw, n, seed);
    }
    table.push(
        id,
        "skipped_steps",
        out.skipped_steps as f64,
        cfg.steps,
        seed,
    );
}

/// Trains `init` on `feed` with intermediate evaluations every
/// `eval.every` steps, then evaluates the final EMA weights.
#[allow(clippy::too_many_arguments)]
fn train_and_evaluate(
    init: Denoiser,
    feed: &mut PairFeed<'_>,
    tcfg: &TrainConfig,
    cfg: &ExperimentConfig,
    data: &Dataset,
    id: &str,
    rng: &mut Rng,
    table: &mut MetricsTable,
) -> Result<(Denoiser, EvalDraws)> {
    let seed = cfg.seed;
    let mut observe = |step: usize, ema: &Denoiser| {
        if step < tcfg.steps {
            evaluate(
                ema,
                data,
                &cfg.eval,
                seed,
                id,
                &format!("step{step}"),
                table,
            )
            .map(drop)
        } else {
            Ok(())
        }
    };
    let out = train_observed(init, feed, tcfg, rng, cfg.eval.every, &mut observe)?;
    loss_rows(&out, tcfg, id, seed, table);
    let draws = evaluate(&out.ema, data, &cfg.eval, seed, id, "", table)?;
    Ok((out.ema, draws))
}

fn write_plots(
    run: &mut RunDir,
    prefix: &str,
    model: &Denoiser,
    draws: &EvalDraws,
    seed: u64,
) -> Result<()> {
    if let Some(s) = &draws.samples {
        plot::samples_png(
            &run.file(&format!("{prefix}samples.png")),
            &draws.reference,
            s,
        )?;
    }
    if model.dim() >= 1 {
        let noise = rng::standard_normal(64, model.dim(), &mut stream(seed, "plot-noise"));
        let cfg = SolverSpec::default().build(Direction::Backward)?;
        let sol = solve_trajectory(model, &noise, &cfg)?;
        plot::trajectories_png(
            &run.file(&format!("{prefix}trajectories.png")),
            &sol.trajectory,
            64,
        )?;
    }
    Ok(())
}

fn prepare(cfg: &ExperimentConfig, env: &Env) -> Result<(Dataset, RunDir)> {
    cfg.validate()?;
    let data = cfg.dataset.build(Path::new("."))?;
    if data.dim() != cfg.model.dim {
        return Err(LabError::config(
            "model.dim",
            format!("dataset has dimension {}", data.dim()),
        ));
    }
    let mut run = RunDir::create(&cfg.run_dir(&env.output_root))?;
    run.write_text("config.toml", &cfg.to_toml()?)?;
    Ok((data, run))
}

/// Trains the first model on the configured coupling.
fn train_teacher(
    cfg: &ExperimentConfig,
    data: &Dataset,
    id: &str,
    table: &mut MetricsTable,
) -> Result<(Denoiser, EvalDraws)> {
    let init = Denoiser::new(cfg.model.clone(), &mut stream(cfg.seed, "init"))?;
    let mut rng = stream(cfg.seed, "train");
    let mut feed = match cfg.coupling.kind {
        CouplingKind::Independent => PairFeed::Independent(data),
        CouplingKind::MinibatchOt => PairFeed::MinibatchOt {
            data,
            cfg: cfg.coupling.ot_feed(),
            warm: None,
        },
    };
    train_and_evaluate(init, &mut feed, &cfg.train, cfg, data, id, &mut rng, table)
}

/// `train`: one model on the configured coupling.
pub fn run_train(cfg: &ExperimentConfig, env: &Env) -> Result<RunOutput> {
    let (data, mut run) = prepare(cfg, env)?;
    env.install(|| {
        let mut table = MetricsTable::new();
        let (model, draws) = train_teacher(cfg, &data, &cfg.id, &mut table)?;
        save_checkpoint(&model, &run.file("model.json"))?;
        write_plots(&mut run, "", &model, &draws, cfg.seed)?;
        table.write(&run.file("metrics.csv"))?;
        let dir = run.finish("train", &cfg.id, cfg.seed)?;
        Ok(RunOutput { dir, table })
    })
}

/// `reflow`: a teacher (loaded or trained) followed by `reflow.rounds`
/// rounds, each trained on pairs simulated from the previous model.
/// Rows are tagged `<id>/round<k>`, with round 0 the teacher.
pub fn run_reflow(cfg: &ExperimentConfig, teacher: Option<&Path>, env: &Env) -> Result<RunOutput> {
    let (data, mut run) = prepare(cfg, env)?;
    env.install(|| {
        let mut table = MetricsTable::new();
        let id0 = format!("{}/round0", cfg.id);
        let (mut model, mut hash) = match teacher {
            Some(p) => {
                let m = load_checkpoint(p)?;
                if m.config().dim != data.dim() {
                    return Err(LabError::config(
                        "teacher",
                        format!("checkpoint has dimension {}", m.config().dim),
                    ));
                }
                evaluate(&m, &data, &cfg.eval, cfg.seed, &id0, "", &mut table)?;
                let h = sha256_file(p)?;
                (m, h)
            }
            None => {
                let (m, draws) = train_teacher(cfg, &data, &id0, &mut table)?;
                let h = save_checkpoint(&m, &run.file("round0.json"))?;
                write_plots(&mut run, "round0_", &m, &draws, cfg.seed)?;
                (m, h)
            }
        };
        for k in 1..=cfg.reflow.rounds {
            let id = format!("{}/round{k}", cfg.id);
            let mut rng = stream(cfg.seed, &format!("reflow-round{k}"));
            let built = build_store(&model, &data, &cfg.reflow, &mut rng)?;
            let n = built.store.backward().len();
            table.push(
                &id,
                "dropped_pairs",
                built.dropped as f64,
                cfg.reflow.n_pairs,
                cfg.seed,
            );
            let b = built.store.backward();
            table.push(&id, "pair_cost", transport_cost(&b.x0, &b.x1)?, n, cfg.seed);
            if let Some(rep) = &built.projection {
                table.push(
                    &id,
                    "projection_ed_initial",
                    rep.initial_energy_distance,
                    n,
                    cfg.seed,
                );
                if let Some(last) = rep.phases.last() {
                    table.push(
                        &id,
                        "projection_ed_final",
                        last.energy_distance,
                        n,
                        cfg.seed,
                    );
                    table.push(
                        &id,
                        "projection_displacement",
                        last.mean_displacement,
                        n,
                        cfg.seed,
                    );
                }
            }
            save_pairs(
                &StoredPairs {
                    store: built.store.clone(),
                    teacher_hash: hash_bytes(&hash),
                },
                &run.file(&format!("pairs_round{k}.bin")),
            )?;
            let init = if cfg.reflow.init_from_teacher {
                model.clone()
            } else {
                Denoiser::new(
                    cfg.model.clone(),
                    &mut stream(cfg.seed, &format!("init{k}")),
                )?
            };
            let (student, draws) = train_and_evaluate(
                init,
                &mut PairFeed::Store(&built.store),
                cfg.student_train(),
                cfg,
                &data,
                &id,
                &mut rng,
                &mut table,
            )?;
            hash = save_checkpoint(&student, &run.file(&format!("round{k}.json")))?;
            write_plots(&mut run, &format!("round{k}_"), &student, &draws, cfg.seed)?;
            model = student;
        }
        table.write(&run.file("metrics.csv"))?;
        let dir = run.finish("reflow", &cfg.id, cfg.seed)?;
        Ok(RunOutput { dir, table })
    })
}

/// `sample`: `n` samples from a checkpoint, with the full trajectories.
pub fn run_sample(
    checkpoint: &Path,
    solver: &SolverSpec,
    n: usize,
    seed: u64,
    out: &Path,
    env: &Env,
) -> Result<RunOutput> {
    let model = load_checkpoint(checkpoint)?;
    let cfg = solver
        .build(Direction::Backward)
        .map_err(|e| LabError::config("solver", e.to_string()))?;
    let mut run = RunDir::create(out)?;
    let id = "sample";
    env.install(|| {
        let mut table = MetricsTable::new();
        let dim = model.dim();
        let noise = rng::standard_normal(n, dim, &mut stream(seed, "sample-noise"));
        let (samples, times, states, nfe) = if n == 0 {
            (Tensor::zeros(0, dim), Vec::new(), Vec::new(), 0)
        } else {
            let counted = Counted::new(&model);
            let sol = solve_trajectory(&counted, &noise, &cfg)?;
            (sol.terminal, sol.times, sol.trajectory, counted.calls())
        };
        plot::points_csv(&run.file("samples.csv"), &samples)?;
        plot::trajectory_csv(&run.file("trajectory.csv"), &times, &states)?;
        if n > 0 {
            plot::samples_png(&run.file("samples.png"), &samples, &samples)?;
            plot::trajectories_png(&run.file("trajectories.png"), &states, 128)?;
        }
        let label = solver.label();
        table.push(id, &format!("nfe/{label}"), nfe as f64, n, seed);
        table.push(
            id,
            &format!("declared_nfe/{label}"),
            cfg.nfe() as f64,
            n,
            seed,
        );
        table.write(&run.file("metrics.csv"))?;
        let dir = run.finish("sample", id, seed)?;
        Ok(RunOutput { dir, table })
    })
}

/// `metrics`: evaluates a checkpoint under the config's eval section.
pub fn run_metrics(cfg: &ExperimentConfig, checkpoint: &Path, env: &Env) -> Result<RunOutput> {
    let (data, mut run) = prepare(cfg, env)?;
    let model = load_checkpoint(checkpoint)?;
    env.install(|| {
        let mut table = MetricsTable::new();
        let draws = evaluate(&model, &data, &cfg.eval, cfg.seed, &cfg.id, "", &mut table)?;
        write_plots(&mut run, "", &model, &draws, cfg.seed)?;
        table.write(&run.file("metrics.csv"))?;
        let dir = run.finish("metrics", &cfg.id, cfg.seed)?;
        Ok(RunOutput { dir, table })
    })
}

/// `project-pairs`: projects a stored coupling's backward pool onto the
/// data marginal with the config's projection settings.
pub fn run_project_pairs(cfg: &ExperimentConfig, pairs: &Path, env: &Env) -> Result<RunOutput> {
    let (data, mut run) = prepare(cfg, env)?;
    let stored = load_pairs(pairs)?;
    if stored.store.dim() != data.dim() {
        return Err(LabError::config(
            "dataset",
            format!("pair store has dimension {}", stored.store.dim()),
        ));
    }
    let pcfg = cfg.reflow.projection.unwrap_or_default();
    let id = &cfg.id;
    let seed = cfg.seed;
    env.install(|| {
        let mut table = MetricsTable::new();
        let reference = data.sample(
            cfg.reflow.projection_reference.max(1),
            &mut stream(seed, "projection-reference"),
        );
        let back = stored.store.backward();
        let rep = project_coupling(back, &reference, &pcfg)?;
        let n = back.len();
        table.push(
            id,
            "energy_distance@initial",
            rep.initial_energy_distance,
            n,
            seed,
        );
        for (k, ph) in rep.phases.iter().enumerate() {
            let tag = format!("phase{k}");
            table.push(id, &format!("lambda@{tag}"), ph.lambda, n, seed);
            table.push(
                id,
                &format!("energy_distance@{tag}"),
                ph.energy_distance,
                n,
                seed,
            );
            table.push(id, &format!("divergence@{tag}"), ph.divergence, n, seed);
            table.push(
                id,
                &format!("mean_displacement@{tag}"),
                ph.mean_displacement,
                n,
                seed,
            );
        }
        table.push(id, "saturated", rep.saturated as u8 as f64, n, seed);
        table.push(id, "aborted", rep.aborted as u8 as f64, n, seed);
        let mut store = PairStore::new(rep.pairs.clone(), PairSource::Projected);
        if !stored.store.forward().is_empty() {
            store = store.with_forward(stored.store.forward().clone(), stored.store.rho())?;
        }
        save_pairs(
            &StoredPairs {
                store,
                teacher_hash: stored.teacher_hash,
            },
            &run.file("projected_pairs.bin"),
        )?;
        let mut c = plot::Canvas::new(
            512,
            512,
            plot::Bounds::around(&[&reference, &back.x0, &rep.pairs.x0]),
        );
        c.scatter(&reference, plot::GREY);
        c.scatter(&back.x0, plot::ORANGE);
        c.scatter(&rep.pairs.x0, plot::BLUE);
        c.save_png(&run.file("projection.png"))?;
        table.write(&run.file("metrics.csv"))?;
        let dir = run.finish("project-pairs", id, seed)?;
        Ok(RunOutput { dir, table })
    })
}

/// `sinkhorn-demo`: one entropic plan between `b` data points and `b`
/// Gaussian points, with marginal diagnostics and a subsampled coupling.
pub fn run_sinkhorn_demo(cfg: &ExperimentConfig, b: usize, env: &Env) -> Result<RunOutput> {
    let (data, mut run) = prepare(cfg, env)?;
    if b < 2 {
        return Err(LabError::config("b", "need at least 2 points"));
    }
    let sk = cfg.coupling.sinkhorn;
    if let Err(e) = sk.validate() {
        return Err(LabError::config("coupling.sinkhorn", e.to_string()));
    }
    let (id, seed) = (&cfg.id, cfg.seed);
    let mut rng = stream(seed, "sinkhorn-demo");
    let x0 = data.sample(b, &mut rng);
    let x1 = rng::standard_normal(b, data.dim(), &mut rng);
    let plan = sinkhorn_coupling(&x0, &x1, &sk, None)?;
    let mut table = MetricsTable::new();
    table.push(id, "iterations", plan.iterations as f64, b, seed);
    table.push(id, "converged", plan.converged as u8 as f64, b, seed);
    table.push(id, "max_violation", marginal_violation(&plan.plan), b, seed);
    table.push(id, "plan_cost", plan.transport_cost(&x0, &x1), b, seed);
    table.push(id, "independent_cost", transport_cost(&x0, &x1)?, b, seed);
    let pairs = subsample_plan(&plan, &x0, &x1, b, &mut rng)?;
    table.push(
        id,
        "subsampled_cost",
        transport_cost(&pairs.x0, &pairs.x1)?,
        b,
        seed,
    );
    let mut c = plot::Canvas::new(512, 512, plot::Bounds::around(&[&x0, &x1]));
    for (a, z) in pairs.x0.iter_rows().zip(pairs.x1.iter_rows()).take(256) {
        c.polyline(
            &[
                (a[0], a.get(1).copied().unwrap_or(0.0)),
                (z[0], z.get(1).copied().unwrap_or(0.0)),
            ],
            plot::GREY,
        );
    }
    c.scatter(&x0, plot::BLUE);
    c.scatter(&x1, plot::ORANGE);
    c.save_png(&run.file("coupling.png"))?;
    table.write(&run.file("metrics.csv"))?;
    let dir = run.finish("sinkhorn-demo", id, seed)?;
    Ok(RunOutput { dir, table })
}

/// Sets the dotted `path` (with optional `[i]` indices) in a TOML tree.
fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let bad = |why: &str| LabError::config(path, why.to_string());
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        let (key, index) = match part.find('[') {
            Some(i) if part.ends_with(']') => {
                let idx: usize = part[i + 1..part.len() - 1]
                    .parse()
                    .map_err(|_| bad("bad index"))?;
                (&part[..i], Some(idx))
            }
            _ => (*part, None),
        };
        let table = cur.as_table_mut().ok_or_else(|| bad("not a table"))?;
        if last && index.is_none() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        let next = table.get_mut(key).ok_or_else(|| bad("no such field"))?;
        cur = match index {
            Some(i) => {
                let arr = next.as_array_mut().ok_or_else(|| bad("not an array"))?;
                let slot = arr.get_mut(i).ok_or_else(|| bad("index out of range"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            None => next,
        };
    }
    Err(bad("empty path"))
}

/// Parses `text` as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// The config with `axis` set to `value`.
pub fn ablation_variant(
    cfg: &ExperimentConfig,
    axis: &str,
    value: &str,
) -> Result<ExperimentConfig> {
    let mut tree =
        toml::Value::try_from(cfg).map_err(|e| LabError::format("config", e.to_string()))?;
    set_path(&mut tree, axis, parse_value(value))?;
    let text = toml::to_string(&tree).map_err(|e| LabError::format("config", e.to_string()))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        LabError::Config { reason, .. } => LabError::config(axis, reason),
        other => other,
    })
}

/// `ablate`: one run per value of `axis` with shared seeds, then a paired
/// table. Runs with `reflow.rounds > 0` go through [`run_reflow`].
pub fn run_ablation(
    cfg: &ExperimentConfig,
    axis: &str,
    values: &[String],
    env: &Env,
) -> Result<RunOutput> {
    if values.is_empty() {
        return Err(LabError::config("values", "need at least one value"));
    }
    let variants = values
        .iter()
        .map(|v| ablation_variant(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    cfg.validate()?;
    let mut run = RunDir::create(&cfg.run_dir(&env.output_root))?;
    run.write_text("config.toml", &cfg.to_toml()?)?;
    let mut index = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| LabError::format("ablation index", e.to_string());
    index
        .write_record(["index", "axis", "value", "experiment_id"])
        .map_err(csv_err)?;
    let mut table = MetricsTable::new();
    let mut finals: Vec<Vec<(String, f64)>> = Vec::new();
    for (i, (mut v, raw)) in variants.into_iter().zip(values).enumerate() {
        v.id = format!("{}.{i}", cfg.id);
        v.output_dir = Some(run.dir().join(format!("run{i}")));
        index
            .write_record([i.to_string(), axis.to_string(), raw.clone(), v.id.clone()])
            .map_err(csv_err)?;
        let out = if v.reflow.rounds > 0 {
            run_reflow(&v, None, env)?
        } else {
            run_train(&v, env)?
        };
        let last_id = if v.reflow.rounds > 0 {
            format!("{}/round{}", v.id, v.reflow.rounds)
        } else {
            v.id.clone()
        };
        finals.push(
            out.table
                .rows()
                .iter()
                .filter(|r| r.experiment_id == last_id && !r.metric.contains('@'))
                .map(|r| (r.metric.clone(), r.value))
                .collect(),
        );
        table.extend(out.table);
    }
    let bytes = index
        .into_inner()
        .map_err(|e| LabError::format("ablation index", e.to_string()))?;
    let p = run.file("ablation.csv");
    std::fs::write(&p, bytes).at(&p)?;
    table.write(&run.file("comparison.csv"))?;
    // one normalized series per final metric, against the value index
    let mut series = Vec::new();
    if let Some(first) = finals.first() {
        for (name, _) in first {
            let ys: Vec<f64> = finals
                .iter()
                .filter_map(|f| f.iter().find(|(m, _)| m == name).map(|p| p.1))
                .collect();
            let scale = ys.iter().fold(0.0f64, |a, y| a.max(y.abs()));
            if ys.len() == finals.len() && scale > 0.0 {
                series.push(
                    ys.iter()
                        .enumerate()
                        .map(|(i, y)| (i as f64, y / scale))
                        .collect(),
                );
            }
        }
    }
    plot::series_png(&run.file("comparison.png"), &series)?;
    let dir = run.finish("ablate", &cfg.id, cfg.seed)?;
    Ok(RunOutput { dir, table })
}
