//! Experiment configuration, read from TOML.
//!
//! Every table has defaults, so a config only needs the fields it changes.
//! Unknown keys are rejected. A minimal file:
//!
//! ```toml
//! id = "ring"
//! seed = 7
//!
//! [dataset]
//! kind = "eight_gaussians"
//! radius = 2.0
//! std = 0.1
//!
//! [train]
//! steps = 2000
//! batch = 128
//! ```

use std::path::{Path, PathBuf};

use reflow_core::couplings::{ProjectionCfg, SinkhornCfg};
use reflow_core::data::{Dataset, GaussianMixture};
use reflow_core::losses::LossMap;
use reflow_core::nn::DenoiserConfig;
use reflow_core::solvers::{make_schedule, Direction, Method, ScheduleKind, SolverCfg};
use reflow_core::train::{OtFeedCfg, TrainConfig};
use reflow_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, LabError, Result};

/// Turns a core validation error into a config error at `path`.
fn at(path: &str, r: reflow_core::Result<()>) -> Result<()> {
    r.map_err(|e| LabError::config(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetSpec {
    EightGaussians {
        #[serde(default = "two")]
        radius: f64,
        #[serde(default = "tenth")]
        std: f64,
    },
    TwoGaussians {
        #[serde(default = "two")]
        offset: f64,
        #[serde(default = "half")]
        std: f64,
        #[serde(default = "half")]
        weight: f64,
    },
    Checkerboard {
        #[serde(default = "four")]
        cells: usize,
        #[serde(default = "two")]
        half_width: f64,
    },
    Mixture {
        means: Vec<Vec<f64>>,
        stds: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Headerless CSV, one point per line; relative paths resolve against
    /// the config file.
    File { path: PathBuf },
}

fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn four() -> usize {
    4
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::EightGaussians {
            radius: 2.0,
            std: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn build(&self, base: &Path) -> Result<Dataset> {
        let ds = match self {
            DatasetSpec::EightGaussians { radius, std } => Dataset::eight_gaussians(*radius, *std),
            DatasetSpec::TwoGaussians {
                offset,
                std,
                weight,
            } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(LabError::config("dataset.weight", "must lie in [0, 1]"));
                }
                Dataset::two_gaussians(*offset, *std, *weight)
            }
            DatasetSpec::Checkerboard { cells, half_width } => Dataset::Checkerboard {
                cells: *cells,
                half_width: *half_width,
            },
            DatasetSpec::Mixture {
                means,
                stds,
                weights,
            } => Dataset::Mixture(GaussianMixture {
                means: means.clone(),
                stds: stds.clone(),
                weights: weights.clone(),
            }),
            DatasetSpec::File { path } => Dataset::Points {
                points: read_points(&base.join(path))?,
            },
        };
        at("dataset", ds.validate())?;
        Ok(ds)
    }
}

/// Reads a headerless numeric CSV into a matrix.
pub fn read_points(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| LabError::format("points file", format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut cols = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| LabError::format("points file", e.to_string()))?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(LabError::format(
                "points file",
                format!("line {} has {} fields", i + 1, rec.len()),
            ));
        }
        for f in rec.iter() {
            data.push(
                f.parse::<f64>()
                    .map_err(|e| LabError::format("points file", format!("line {}: {e}", i + 1)))?,
            );
        }
    }
    let cols = cols.unwrap_or(0);
    if cols == 0 {
        return Err(LabError::format("points file", "no data"));
    }
    Ok(Tensor::matrix(data.len() / cols, cols, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    Independent,
    MinibatchOt,
}

/// How the first (teacher) model pairs data with noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingSpec {
    pub kind: CouplingKind,
    pub b_coupling: usize,
    pub sinkhorn: SinkhornCfg,
    pub warm_start: bool,
}

impl Default for CouplingSpec {
    fn default() -> Self {
        CouplingSpec {
            kind: CouplingKind::Independent,
            b_coupling: 512,
            sinkhorn: SinkhornCfg::default(),
            warm_start: true,
        }
    }
}

impl CouplingSpec {
    pub fn ot_feed(&self) -> OtFeedCfg {
        OtFeedCfg {
            b_coupling: self.b_coupling,
            sinkhorn: self.sinkhorn,
            warm_start: self.warm_start,
        }
    }
}

/// Serializable form of [`SolverCfg`]; the grid is rebuilt from the kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub method: Method,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub final_euler: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            method: Method::Heun,
            schedule: ScheduleKind::Uniform,
            steps: 32,
            final_euler: false,
        }
    }
}

impl SolverSpec {
    pub fn build(&self, direction: Direction) -> reflow_core::Result<SolverCfg> {
        let s = make_schedule(self.schedule, self.steps)?;
        Ok(SolverCfg::new(self.method, s, direction)?.with_final_euler(self.final_euler))
    }

    /// Short label such as `heun-uniform-32`.
    pub fn label(&self) -> String {
        let m = match self.method {
            Method::Euler => "euler".to_string(),
            Method::Heun => "heun".to_string(),
            Method::Dpm { r } => format!("dpm{r}"),
        };
        let s = match self.schedule {
            ScheduleKind::Uniform => "uniform".to_string(),
            ScheduleKind::Sigmoid { kappa } => format!("sigmoid{kappa}"),
            ScheduleKind::Edm { .. } => "edm".to_string(),
        };
        let fe = if self.final_euler { "-fe" } else { "" };
        format!("{m}-{s}-{}{fe}", self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflowSpec {
    pub rounds: usize,
    pub n_pairs: usize,
    pub n_forward: usize,
    pub rho: f64,
    pub projection: Option<ProjectionCfg>,
    pub projection_reference: usize,
    pub init_from_teacher: bool,
    /// Solver that simulates the teacher.
    pub solver: SolverSpec,
    /// Student training; `None` reuses the teacher's settings.
    pub train: Option<TrainConfig>,
    /// Rows per parallel generation chunk. Results do not depend on it.
    pub chunk: usize,
}

impl Default for ReflowSpec {
    fn default() -> Self {
        ReflowSpec {
            rounds: 1,
            n_pairs: 20_000,
            n_forward: 0,
            rho: 0.0,
            projection: None,
            projection_reference: 2000,
            init_from_teacher: true,
            solver: SolverSpec {
                method: Method::Heun,
                schedule: ScheduleKind::Uniform,
                steps: 64,
                final_euler: false,
            },
            train: None,
            chunk: 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    EnergyDistance,
    SlicedWasserstein,
    Straightness,
    TransportCost,
    Nfe,
    TerminalDeviation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub solvers: Vec<SolverSpec>,
    pub metrics: Vec<MetricKind>,
    /// Generated samples per metric evaluation.
    pub n_samples: usize,
    /// Fresh data points for distribution metrics.
    pub n_reference: usize,
    /// Heun steps of the reference solve inside straightness.
    pub straightness_fine_n: usize,
    pub sw_projections: usize,
    /// Training steps between intermediate evaluations; 0 evaluates only at
    /// the end.
    pub every: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            solvers: vec![SolverSpec::default()],
            metrics: vec![
                MetricKind::EnergyDistance,
                MetricKind::Straightness,
                MetricKind::TransportCost,
                MetricKind::Nfe,
            ],
            n_samples: 2000,
            n_reference: 2000,
            straightness_fine_n: 128,
            sw_projections: 64,
            every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub seed: u64,
    /// Run directory, relative to the output root unless absolute.
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub coupling: CouplingSpec,
    pub reflow: ReflowSpec,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: "experiment".into(),
            seed: 0,
            output_dir: None,
            dataset: DatasetSpec::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            coupling: CouplingSpec::default(),
            reflow: ReflowSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "<root>".into());
            LabError::config(path, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let DatasetSpec::File { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(LabError::config(
                "id",
                "use letters, digits, '-', '_' or '.'",
            ));
        }
        at("model", self.model.validate())?;
        validate_train("train", &self.train, self.model.dim)?;
        if self.coupling.kind == CouplingKind::MinibatchOt {
            at("coupling.sinkhorn", self.coupling.sinkhorn.validate())?;
            if self.coupling.b_coupling == 0 {
                return Err(LabError::config("coupling.b_coupling", "must be positive"));
            }
        }
        let r = &self.reflow;
        if !(0.0..=1.0).contains(&r.rho) {
            return Err(LabError::config("reflow.rho", "must lie in [0, 1]"));
        }
        if r.rho > 0.0 && r.n_forward == 0 {
            return Err(LabError::config(
                "reflow.n_forward",
                "must be positive when rho > 0",
            ));
        }
        if r.rounds > 0 && r.n_pairs == 0 {
            return Err(LabError::config("reflow.n_pairs", "must be positive"));
        }
        if r.chunk == 0 {
            return Err(LabError::config("reflow.chunk", "must be positive"));
        }
        if let Some(p) = &r.projection {
            at("reflow.projection", p.validate())?;
        }
        at(
            "reflow.solver",
            r.solver.build(Direction::Backward).map(drop),
        )?;
        if let Some(t) = &r.train {
            validate_train("reflow.train", t, self.model.dim)?;
        }
        for (i, s) in self.eval.solvers.iter().enumerate() {
            at(
                &format!("eval.solvers[{i}]"),
                s.build(Direction::Backward).map(drop),
            )?;
        }
        let e = &self.eval;
        if e.n_samples < 2 || e.n_reference < 2 {
            return Err(LabError::config(
                "eval.n_samples",
                "need at least 2 samples and 2 reference points",
            ));
        }
        if e.metrics.contains(&MetricKind::Straightness) && e.straightness_fine_n < 32 {
            return Err(LabError::config(
                "eval.straightness_fine_n",
                "need at least 32",
            ));
        }
        if e.metrics.contains(&MetricKind::SlicedWasserstein) && e.sw_projections == 0 {
            return Err(LabError::config("eval.sw_projections", "must be positive"));
        }
        Ok(())
    }

    pub fn student_train(&self) -> &TrainConfig {
        self.reflow.train.as_ref().unwrap_or(&self.train)
    }

    /// Resolves the run directory against `root`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.id),
        }
    }
}

fn validate_train(path: &str, t: &TrainConfig, dim: usize) -> Result<()> {
    at(&format!("{path}.time_dist"), t.time_dist.validate())?;
    at(&format!("{path}.adam"), t.adam.validate())?;
    at(path, t.validate())?;
    at(
        &format!("{path}.loss"),
        t.loss.build(dim).map(|_: LossMap| ()),
    )
}
