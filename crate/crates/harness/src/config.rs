//! Experiment configuration, read from TOML. Unknown keys are errors.

use std::path::{Path, PathBuf};

use kdqat_core::diagnostics::DiagnosticsConfig;
use kdqat_core::kd::{Term, UnifiedMode};
use kdqat_core::{EncoderConfig, KdConfig, Preset, QuantSpec};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};
use crate::task::TaskConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f32,
    /// Fraction of all steps spent warming up linearly from 0.
    pub warmup: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            warmup: 0.1,
            epochs: 8,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.warmup)
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!("[{what}] has out-of-range optimizer settings")))
        }
    }
}

/// Checkpoints consumed by `qat`, `diagnose` and `hessian`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Leading dev examples analysed.
    pub examples: usize,
    /// Also write the attention maps of the first example.
    pub emit_maps: bool,
    pub metrics: DiagnosticsConfig,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            examples: 64,
            emit_maps: false,
            metrics: DiagnosticsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianObjective {
    /// Supervised loss of the full-precision teacher.
    Teacher,
    /// Distillation loss of the quantized student, in its latent weights.
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianConfig {
    pub objective: HessianObjective,
    pub seeds: Vec<u64>,
    /// Leading train examples the loss averages over.
    pub examples: usize,
}

impl Default for HessianConfig {
    fn default() -> Self {
        HessianConfig {
            objective: HessianObjective::Student,
            seeds: vec![0, 1, 2, 3, 4],
            examples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub modes: Vec<UnifiedMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: vec![0, 1, 2, 3, 4],
            modes: vec![UnifiedMode::Sm1, UnifiedMode::Sm2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seeds: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Standard deviation of the teacher's random initialization.
    pub init_std: f32,
    /// Continue from the run directory's last saved training state.
    pub resume: bool,
    pub model: EncoderConfig,
    pub task: TaskConfig,
    pub teacher: OptimConfig,
    pub qat: OptimConfig,
    /// QAT reads only the first this-many training examples; 0 means all.
    pub qat_examples: usize,
    pub quant: QuantSpec,
    pub kd: KdConfig,
    pub paths: Paths,
    pub diagnose: DiagnoseConfig,
    pub hessian: HessianConfig,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        ExperimentConfig {
            seed: 0,
            init_std: 0.05,
            resume: false,
            model: EncoderConfig {
                layers: 4,
                hidden: 32,
                heads: 4,
                ffn: 64,
                vocab: task.vocab,
                max_len: task.seq_len,
                classes: task.head_width(),
                ..EncoderConfig::default()
            },
            task,
            teacher: OptimConfig {
                lr: 5e-3,
                epochs: 20,
                ..OptimConfig::default()
            },
            qat: OptimConfig {
                lr: 5e-4,
                epochs: 8,
                batch_size: 16,
                ..OptimConfig::default()
            },
            qat_examples: 128,
            quant: QuantSpec::default(),
            kd: Preset::Baseline.config(),
            paths: Paths::default(),
            diagnose: DiagnoseConfig::default(),
            hessian: HessianConfig::default(),
            sweep: SweepConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.task.check_model(&self.model)?;
        self.teacher.validate("teacher")?;
        self.qat.validate("qat")?;
        self.quant.validate()?;
        self.kd.validate(self.model.layers)?;
        self.diagnose.metrics.validate(self.task.seq_len)?;
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(HarnessError::Config(format!("init_std {} is invalid", self.init_std)));
        }
        if self.kd.has(Term::HardLabel) && self.task.is_regression() != (self.model.classes == 1) {
            return Err(HarnessError::Config("hard-label term does not fit the task head".into()));
        }
        Ok(())
    }
}

/// Switches the attention-side objective to `preset`, keeping layer
/// selection, τ, γ and weights from `kd`.
pub fn apply_preset(kd: &mut KdConfig, preset: Preset) {
    let p = preset.config();
    kd.terms.retain(|t| !matches!(t, Term::Score | Term::Map | Term::Output | Term::MhaOnly));
    for t in p.terms {
        if !kd.terms.contains(&t) {
            kd.terms.push(t);
        }
    }
    kd.unified = p.unified;
}
