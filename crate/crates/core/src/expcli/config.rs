use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_synth::{NoiseKind, NoiseModel, TeacherSpec};
use crate::diagnostics::DiagnosticsConfig;
use crate::error::{Error, Result};
use crate::grad::Engine;
use crate::kernel::KernelKind;
use crate::model::ModelConfig;
use crate::ntk_regression::Layout;
use crate::rng::derive_seed;
use crate::scaling_law::StageParams;
use crate::training::TrainConfig;

/// Every knob of an experiment. Missing sections take their defaults; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSection>,
    #[serde(default)]
    pub grad_check: GradCheckSection,
    #[serde(default)]
    pub ntk: NtkSection,
    #[serde(default)]
    pub risk: RiskSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub width: usize,
    pub dim: usize,
    pub seq_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 1, width: 64, dim: 3, seq_len: 3, epsilon: None, omega: None, kappa: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub n_layers: usize,
    pub width: usize,
    pub omega: f64,
    pub c_lower: f64,
    pub c_upper: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self { n_layers: 1, width: 32, omega: 1.0, c_lower: -10.0, c_upper: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub xi: f64,
    pub kind: NoiseKind,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { xi: 0.1, kind: NoiseKind::TruncatedGaussian }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Step size; chosen from the initial kernel when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Flow time; `steps * eta` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub steps: usize,
    pub batch_fraction: f64,
    pub engine: Engine,
    pub probe_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit_kernel: Option<KernelKind>,
    /// Halvings of `eta` allowed after a divergence.
    pub max_halvings: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            eta: None,
            horizon: None,
            steps: 200,
            batch_fraction: 1.0,
            engine: Engine::Exact,
            probe_every: 10,
            audit_kernel: None,
            max_halvings: 0,
        }
    }
}

/// Axes of a scaling sweep. An absent axis takes the single base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<Vec<f64>>,
    /// Fresh draws per cell for the risk estimate.
    pub n_eval: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { width: None, n: None, horizon: None, n_eval: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    pub xi: f64,
    pub seq_len: f64,
    pub dim: f64,
    pub data_size: f64,
    pub alpha: f64,
    pub loss0: f64,
    pub c_const: f64,
    /// Explicit compute grid; otherwise `points` log-spaced values in
    /// `[compute_min, compute_max]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compute: Option<Vec<f64>>,
    pub compute_min: f64,
    pub compute_max: f64,
    pub points: usize,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            xi: 1.0,
            seq_len: 4.0,
            dim: 2.0,
            data_size: 10.0,
            alpha: 1.0,
            loss0: 1.0,
            c_const: 1.0,
            compute: None,
            compute_min: 1e3,
            compute_max: 1e12,
            points: 28,
        }
    }
}

impl ScalingSection {
    pub fn params(&self) -> StageParams {
        StageParams {
            xi: self.xi,
            seq_len: self.seq_len,
            dim: self.dim,
            alpha: self.alpha,
            loss0: self.loss0,
            c_const: self.c_const,
        }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        if let Some(c) = &self.compute {
            if c.is_empty() {
                return Err(Error::Config("scaling.compute is empty".into()));
            }
            return Ok(c.clone());
        }
        if !(self.compute_min > 0.0 && self.compute_max > self.compute_min && self.points >= 2) {
            return Err(Error::Config("scaling grid needs 0 < compute_min < compute_max and points >= 2".into()));
        }
        let ratio = self.compute_max / self.compute_min;
        Ok((0..self.points)
            .map(|i| self.compute_min * ratio.powf(i as f64 / (self.points - 1) as f64))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// CSV with `compute` and `risk` columns, relative to the config file.
    pub input: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub coords_per_block: usize,
    pub h: f64,
    pub tolerance: f64,
    pub kink_radius: f64,
    /// Multiplies the analytic gradient before comparison. Used to confirm
    /// that the battery notices a wrong gradient.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt_scale: Option<f64>,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self { coords_per_block: 64, h: 1e-5, tolerance: 1e-4, kink_radius: 1e-4, corrupt_scale: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkSection {
    pub n_eval: usize,
    pub layout: Layout,
    /// Also train the finite-width student and compare it with the predictor.
    pub train_student: bool,
}

impl Default for NtkSection {
    fn default() -> Self {
        Self { n_eval: 16, layout: Layout::Pooled, train_student: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSection {
    /// Fresh draws for the held-out risk; zero skips the estimate.
    pub n_eval: usize,
}

/// Purpose tags for derived seeds.
pub mod tags {
    pub const MODEL: &str = "model";
    pub const TEACHER: &str = "teacher";
    pub const DATA: &str = "data";
    pub const BATCH: &str = "batch";
    pub const RISK: &str = "risk";
    pub const HELDOUT: &str = "heldout";
    pub const COORDS: &str = "coords";
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the config snapshot embedded in a run manifest
    /// when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: super::manifest::RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad manifest: {e}")))?;
            let cfg: Self = serde_json::from_value(manifest.config).map_err(|e| Error::Config(e.to_string()))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.n_layers == 0 || m.width == 0 || m.dim == 0 || m.seq_len == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.teacher.n_layers == 0 || self.teacher.width == 0 {
            return Err(Error::Config("teacher sizes must be positive".into()));
        }
        if self.data.n == 0 {
            return Err(Error::Config("data.n must be positive".into()));
        }
        if !(self.noise.xi >= 0.0) {
            return Err(Error::Config("noise.xi must be non-negative".into()));
        }
        if self.diagnostics.slack < 1.0 {
            return Err(Error::Config("diagnostics.slack must be >= 1".into()));
        }
        self.model_config(self.model.width, 0).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn seed_for(&self, tag: &str, index: u64) -> u64 {
        derive_seed(self.seed, tag, index)
    }

    pub fn model_config(&self, width: usize, index: u64) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::new(m.n_layers, width, m.dim, m.seq_len).with_seed(self.seed_for(tags::MODEL, index));
        if let Some(e) = m.epsilon {
            c = c.with_epsilon(e);
        }
        if let Some(o) = m.omega {
            c = c.with_omega(o);
        }
        if let Some(k) = m.kappa {
            c = c.with_kappa(k);
        }
        c
    }

    pub fn teacher_spec(&self) -> TeacherSpec {
        let t = &self.teacher;
        let arch = ModelConfig::new(t.n_layers, t.width, self.model.dim, self.model.seq_len).with_omega(t.omega);
        TeacherSpec { architecture: arch, seed: self.seed_for(tags::TEACHER, 0), c_lower: t.c_lower, c_upper: t.c_upper }
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel::new(self.noise.xi, self.noise.kind)
    }

    /// Training settings once `eta` is known.
    pub fn train_config(&self, eta: f64, horizon: Option<f64>, index: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            eta,
            horizon: horizon.or(t.horizon).unwrap_or(t.steps as f64 * eta),
            batch_fraction: t.batch_fraction,
            engine: t.engine,
            probe_every: t.probe_every,
            batch_seed: self.seed_for(tags::BATCH, index),
            audit_kernel: t.audit_kernel,
        }
    }
}
