//! Run configuration: JSON file schema, defaults, and flag overrides.
//!
//! Precedence is flags > file > defaults. The fully resolved configuration
//! is what gets hashed into every artifact's metadata stamp, so two runs
//! with the same effective settings are byte-identical no matter how those
//! settings were spelled.

use gdl_core::ablation::{default_arms, AblationArm};
use gdl_core::extraction::MaskRule;
use gdl_core::maze::MazeSpec;
use gdl_core::student_mdlm::{ConditionSource, ExtractionMode, LossWeighting, NoiseMode};
use gdl_core::{GdlError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_corpus_cap() -> usize {
    gdl_core::maze::DEFAULT_CORPUS_CAP
}

fn default_nfe() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}

fn default_eval_samples() -> usize {
    100
}

fn default_sample_count() -> usize {
    10
}

/// Teacher selection: an exact lookup table over the corpus, or a small
/// causal transformer trained on it (required by the `mtp` command, whose
/// heads read transformer hidden states).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TeacherSection {
    Tabular {
        #[serde(default)]
        epsilon: f64,
        /// Context truncation: `null` = full history, `k` = last k tokens.
        #[serde(default)]
        markov_order: Option<usize>,
    },
    Neural {
        #[serde(default = "d16")]
        d_model: usize,
        #[serde(default = "one")]
        n_layers: usize,
        #[serde(default = "two")]
        n_heads: usize,
        #[serde(default = "default_epochs")]
        epochs: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_lr")]
        lr: f64,
    },
}

fn d16() -> usize {
    16
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    3e-4
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection::Tabular {
            epsilon: 0.0,
            markov_order: None,
        }
    }
}

/// Denoising-student layout and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weighting: LossWeighting,
    pub mask_rule: MaskRule,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            epochs: 200,
            batch_size: 256,
            lr: 3e-4,
            weighting: LossWeighting::Unit,
            mask_rule: MaskRule::Independent,
        }
    }
}

/// Sizes and significance for the posterior property suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub trials: usize,
    pub significance: f64,
    pub joint_samples: usize,
    pub tv_samples: usize,
    pub calibration_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            trials: 100_000,
            significance: 0.001,
            joint_samples: 520_000,
            tv_samples: 1_000_000,
            calibration_samples: 1_000_000,
        }
    }
}

/// Multi-token-prediction head training and acceptance evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtpSection {
    pub n_heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub trials: usize,
    pub max_prompt: usize,
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for MtpSection {
    fn default() -> Self {
        MtpSection {
            n_heads: 3,
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            trials: 512,
            max_prompt: 8,
            epsilon: 0.1,
            delta: 1.0,
        }
    }
}

/// Arm list and seed set for the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub arms: Vec<AblationArm>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            arms: default_arms(),
            seeds: vec![0],
        }
    }
}

/// The complete run configuration. Every field has a default, so `{}` is a
/// valid config file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Path to a maze JSON file; `null` uses the reference maze.
    pub maze_spec: Option<PathBuf>,
    pub corpus_cap: usize,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub condition: ConditionSource,
    pub extraction: ExtractionMode,
    pub nfe: Vec<usize>,
    pub eval_samples: usize,
    pub sample_count: usize,
    pub verify: VerifySection,
    pub mtp: MtpSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: default_out(),
            maze_spec: None,
            corpus_cap: default_corpus_cap(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            condition: ConditionSource::inference_gumbel(),
            extraction: ExtractionMode::Parallel,
            nfe: default_nfe(),
            eval_samples: default_eval_samples(),
            sample_count: default_sample_count(),
            verify: VerifySection::default(),
            mtp: MtpSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// Flag values that override the file and defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub nfe: Option<Vec<usize>>,
    pub mode: Option<NoiseMode>,
    pub extraction: Option<ExtractionMode>,
}

/// A fully resolved run: merged config, loaded maze, and the canonical JSON
/// value whose hash stamps every artifact.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: RunConfig,
    pub maze: MazeSpec,
    pub config_value: serde_json::Value,
}

impl Resolved {
    pub fn out(&self) -> &Path {
        &self.cfg.out
    }
}

fn config_err(msg: String) -> GdlError {
    GdlError::Config(msg)
}

/// Loads the config file (if any), applies flag overrides, loads the maze
/// spec, and validates what can be validated up front.
pub fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> Result<Resolved> {
    let mut cfg = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };

    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out = out.clone();
    }
    if let Some(nfe) = &overrides.nfe {
        cfg.nfe = nfe.clone();
    }
    if let Some(mode) = overrides.mode {
        cfg.condition.mode = mode;
    }
    if let Some(extraction) = overrides.extraction {
        cfg.extraction = extraction;
    }

    if cfg.nfe.is_empty() {
        return Err(config_err("nfe list is empty".into()));
    }
    if cfg.nfe.contains(&0) {
        return Err(config_err("nfe values must be >= 1".into()));
    }
    cfg.condition
        .validate()
        .map_err(|e| config_err(format!("condition source: {e}")))?;

    let maze = match &cfg.maze_spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                config_err(format!("cannot read maze spec {}: {e}", path.display()))
            })?;
            serde_json::from_str::<MazeSpec>(&text)
                .map_err(|e| config_err(format!("invalid maze spec {}: {e}", path.display())))?
        }
        None => MazeSpec::default(),
    };

    let config_value = serde_json::to_value(&cfg).expect("config serializes");
    Ok(Resolved {
        cfg,
        maze,
        config_value,
    })
}
