//! Experiment configuration: a single JSON file with explicit defaults,
//! strict schema validation, and CLI overrides for seed/output/threads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dfm_core::diffusion::DiffusionSchedule;
use dfm_core::error::{DfmError, Result};
use dfm_core::sampler::SamplerMode;
use dfm_core::score_net::TimeFeatures;
use dfm_core::trainer::LossWeighting;

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_sample_sizes() -> Vec<usize> {
    vec![16, 32, 64, 128, 256]
}

fn default_repetitions() -> usize {
    3
}

fn default_missing_threshold() -> f64 {
    0.05
}

fn default_winsor_level() -> f64 {
    0.025
}

fn default_window() -> usize {
    120
}

fn default_update_every() -> usize {
    20
}

fn default_eta() -> f64 {
    3.0
}

fn default_cost_bp() -> f64 {
    20.0
}

fn default_generated() -> usize {
    4096
}

fn default_d() -> usize {
    64
}

fn default_k() -> usize {
    4
}

fn default_epochs() -> usize {
    150
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    1e-2
}

fn default_n_steps() -> usize {
    200
}

fn default_m() -> usize {
    4096
}

fn one() -> usize {
    1
}

fn tenth() -> f64 {
    0.1
}

/// Ground-truth model parameters for synthetic modes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Seed of the ground-truth generator (fixed across repetitions).
    #[serde(default)]
    pub model_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: default_d(),
            k: default_k(),
            model_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_terminal: f64,
    pub t_early: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t_terminal: 5.0,
            t_early: 0.05,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.t_terminal, self.t_early)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Upper bound of the variance-like parameters; `None` uses the squared
    /// residual-deviation bound of the generating model when available,
    /// else 1.0.
    #[serde(default)]
    pub c_max: Option<f64>,
    #[serde(default)]
    pub time_features: TimeFeatures,
    /// Optional L2 clip radius on the latent MLP output.
    #[serde(default)]
    pub clip_radius: Option<f64>,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            hidden: default_hidden(),
            c_max: None,
            time_features: TimeFeatures::default(),
            clip_radius: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "beta1_default")]
    pub beta1: f64,
    #[serde(default = "beta2_default")]
    pub beta2: f64,
    #[serde(default = "adam_eps_default")]
    pub adam_eps: f64,
    #[serde(default = "one")]
    pub m_noise: usize,
    #[serde(default)]
    pub weighting: LossWeighting,
    #[serde(default)]
    pub patience: usize,
    #[serde(default = "tenth")]
    pub heldout_fraction: f64,
}

fn beta1_default() -> f64 {
    0.9
}

fn beta2_default() -> f64 {
    0.999
}

fn adam_eps_default() -> f64 {
    1e-8
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            beta1: beta1_default(),
            beta2: beta2_default(),
            adam_eps: adam_eps_default(),
            m_noise: 1,
            weighting: LossWeighting::Uniform,
            patience: 0,
            heldout_fraction: 0.1,
        }
    }
}

impl TrainSection {
    pub fn build(&self, seed: u64) -> dfm_core::trainer::TrainConfig {
        dfm_core::trainer::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            m_noise: self.m_noise,
            weighting: self.weighting,
            seed,
            patience: self.patience,
            heldout_fraction: self.heldout_fraction,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub mode: SamplerMode,
    #[serde(default = "default_m")]
    pub m: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            n_steps: default_n_steps(),
            mode: SamplerMode::default(),
            m: default_m(),
        }
    }
}

/// Which score drives the generative arm of the synthetic study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudyArm {
    /// Exact Gaussian score; isolates sampler and estimation error.
    Oracle,
    /// Score network trained on the simulated panel.
    #[default]
    Trained,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    #[serde(default = "default_sample_sizes")]
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub arm: StudyArm,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            sample_sizes: default_sample_sizes(),
            repetitions: default_repetitions(),
            arm: StudyArm::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    #[serde(default = "default_missing_threshold")]
    pub missing_threshold: f64,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub winsorize: bool,
    #[serde(default = "default_winsor_level")]
    pub winsor_level: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            missing_threshold: default_missing_threshold(),
            standardize: false,
            winsorize: false,
            winsor_level: default_winsor_level(),
        }
    }
}

/// Identifier of one portfolio construction rule from the method matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Ew,
    Vw,
    RealEmpRealEmp,
    RealBsRealEmp,
    RealOlseRealEmp,
    RealEmpRealLw,
    RealBsRealLw,
    RealOlseRealLw,
    DiffEmpDiffEmp,
    DiffBsDiffEmp,
    DiffOlseDiffEmp,
    DiffEmpDiffLw,
    DiffBsDiffLw,
    DiffOlseDiffLw,
    RealEmpDiffEmp,
    DiffEmpRealEmp,
}

impl MethodId {
    /// Table label of the method.
    pub fn label(self) -> &'static str {
        match self {
            MethodId::Ew => "EW",
            MethodId::Vw => "VW",
            MethodId::RealEmpRealEmp => "Real Emp+Real Emp",
            MethodId::RealBsRealEmp => "Real BS+Real Emp",
            MethodId::RealOlseRealEmp => "Real OLSE+Real Emp",
            MethodId::RealEmpRealLw => "Real Emp+Real LW",
            MethodId::RealBsRealLw => "Real BS+Real LW",
            MethodId::RealOlseRealLw => "Real OLSE+Real LW",
            MethodId::DiffEmpDiffEmp => "Diff Emp+Diff Emp",
            MethodId::DiffBsDiffEmp => "Diff BS+Diff Emp",
            MethodId::DiffOlseDiffEmp => "Diff OLSE+Diff Emp",
            MethodId::DiffEmpDiffLw => "Diff Emp+Diff LW",
            MethodId::DiffBsDiffLw => "Diff BS+Diff LW",
            MethodId::DiffOlseDiffLw => "Diff OLSE+Diff LW",
            MethodId::RealEmpDiffEmp => "Real Emp+Diff Emp",
            MethodId::DiffEmpRealEmp => "Diff Emp+Real Emp",
        }
    }

    /// File-name-safe identifier.
    pub fn slug(self) -> String {
        self.label()
            .to_ascii_lowercase()
            .replace(['+', ' '], "_")
    }

    pub fn uses_generated_data(self) -> bool {
        !matches!(
            self,
            MethodId::Ew
                | MethodId::Vw
                | MethodId::RealEmpRealEmp
                | MethodId::RealBsRealEmp
                | MethodId::RealOlseRealEmp
                | MethodId::RealEmpRealLw
                | MethodId::RealBsRealLw
                | MethodId::RealOlseRealLw
        )
    }

    pub fn all() -> Vec<MethodId> {
        vec![
            MethodId::Ew,
            MethodId::Vw,
            MethodId::RealEmpRealEmp,
            MethodId::RealBsRealEmp,
            MethodId::RealOlseRealEmp,
            MethodId::RealEmpRealLw,
            MethodId::RealBsRealLw,
            MethodId::RealOlseRealLw,
            MethodId::DiffEmpDiffEmp,
            MethodId::DiffBsDiffEmp,
            MethodId::DiffOlseDiffEmp,
            MethodId::DiffEmpDiffLw,
            MethodId::DiffBsDiffLw,
            MethodId::DiffOlseDiffLw,
            MethodId::RealEmpDiffEmp,
            MethodId::DiffEmpRealEmp,
        ]
    }
}

fn default_methods() -> Vec<MethodId> {
    MethodId::all()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodId>,
    /// Rolling estimation window length in rows.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Rows between target-weight updates.
    #[serde(default = "default_update_every")]
    pub update_every: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_cost_bp")]
    pub cost_bp: f64,
    #[serde(default)]
    pub constraint: dfm_core::portfolio::Constraint,
    #[serde(default)]
    pub annualize: bool,
    /// Re-run preprocessing inside each window instead of once at ingest.
    #[serde(default)]
    pub reselect_per_window: bool,
    /// Generated rows per window for the Diff arms.
    #[serde(default = "default_generated")]
    pub generated_samples: usize,
}

impl Default for PortfolioSection {
    fn default() -> Self {
        PortfolioSection {
            methods: default_methods(),
            window: default_window(),
            update_every: default_update_every(),
            eta: default_eta(),
            cost_bp: default_cost_bp(),
            constraint: dfm_core::portfolio::Constraint::InfNorm(0.05),
            annualize: false,
            reselect_per_window: false,
            generated_samples: default_generated(),
        }
    }
}

/// The whole experiment configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub study: StudySection,
    pub preprocess: PreprocessSection,
    pub portfolio: PortfolioSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        if self.model.k == 0 || self.model.k >= self.model.d {
            return Err(DfmError::InvalidInput(format!(
                "model requires 1 <= k < d, got k={}, d={}",
                self.model.k, self.model.d
            )));
        }
        if self.study.sample_sizes.iter().any(|&n| n < 2) {
            return Err(DfmError::InvalidInput(
                "study sample sizes must be >= 2".into(),
            ));
        }
        if self.study.repetitions == 0 {
            return Err(DfmError::InvalidInput(
                "study repetitions must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.preprocess.missing_threshold) {
            return Err(DfmError::InvalidInput(
                "missing_threshold must be in [0, 1)".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.preprocess.winsor_level) {
            return Err(DfmError::InvalidInput(
                "winsor_level must be in [0, 0.5)".into(),
            ));
        }
        if self.portfolio.window < 2 || self.portfolio.update_every == 0 {
            return Err(DfmError::InvalidInput(
                "portfolio window must be >= 2 and update_every >= 1".into(),
            ));
        }
        if self.portfolio.methods.is_empty() {
            return Err(DfmError::InvalidInput(
                "portfolio.methods must not be empty".into(),
            ));
        }
        if self.sampler.n_steps < 2 || self.sampler.m == 0 {
            return Err(DfmError::InvalidInput(
                "sampler needs n_steps >= 2 and m >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Canonical JSON used by `print-config`.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// JSON used for the manifest's config hash: the output directory is
    /// not part of the experiment identity.
    pub fn hash_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        serde_json::to_string_pretty(&c).expect("config serializes")
    }
}
