//! Experiment arms probing what the conditioning signal must look like:
//! substitute the noise distribution (Gumbel vs CDF-matched Gaussian vs
//! uniform vs none) and the extraction route (fresh parallel posterior noise
//! vs a fixed offline sequentially-sampled dataset), train one student per
//! arm under identical seeds, data order, and architecture, and compare
//! maze success rates across network-evaluation budgets.

use crate::error::GdlError;
use crate::gumbel::{sample_gumbel, GumbelVector};
use crate::io::CsvWriter;
use crate::maze::{self, MazeCorpus, MazeSpec};
use crate::nn::{ArchConfig, TrainConfig};
use crate::rng::substream;
use crate::student_mdlm::{
    ancestral_sample, train_student, transform_noise, ConditionSource, ExtractionMode, Freshness,
    MdlmStudent, NoiseMode, SamplerConfig, StudentTrainConfig,
};
use crate::teacher::{ContextOrder, TabularTeacher};
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Draws one noise vector of width `v` from the requested source. The
/// Gaussian and uniform sources are monotone CDF-matched transforms of a
/// single underlying Gumbel draw, so all three carry the same rank
/// information.
pub fn make_noise(mode: NoiseMode, v: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if v == 0 {
        return Err(GdlError::Config(
            "noise vectors need at least one coordinate".into(),
        ));
    }
    if mode == NoiseMode::None {
        return Err(GdlError::Config(
            "the unconditioned mode draws no noise".into(),
        ));
    }
    let xi: GumbelVector = sample_gumbel(rng, v);
    Ok(transform_noise(mode, xi.values()))
}

/// One experiment arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub mode: NoiseMode,
    #[serde(default)]
    pub extraction: ExtractionMode,
}

impl AblationArm {
    pub fn new(name: &str, mode: NoiseMode, extraction: ExtractionMode) -> AblationArm {
        AblationArm {
            name: name.to_string(),
            mode,
            extraction,
        }
    }
}

/// The standard four-arm comparison: conditioned (parallel extraction),
/// Gaussian- and uniform-transformed conditioning, and the unconditioned
/// baseline.
pub fn default_arms() -> Vec<AblationArm> {
    vec![
        AblationArm::new("gumbel", NoiseMode::Gumbel, ExtractionMode::Parallel),
        AblationArm::new("gaussian", NoiseMode::Gaussian, ExtractionMode::Parallel),
        AblationArm::new("uniform", NoiseMode::Uniform, ExtractionMode::Parallel),
        AblationArm::new("none", NoiseMode::None, ExtractionMode::Parallel),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub arms: Vec<AblationArm>,
    pub nfe_list: Vec<usize>,
    /// One full train-and-evaluate repetition per seed.
    pub seeds: Vec<u64>,
    pub eval_samples: usize,
    pub maze: MazeSpec,
    pub corpus_cap: usize,
    /// Seed of the corpus subsample, shared by every arm and seed.
    pub corpus_seed: u64,
    /// Student layout; the vocabulary and context length must match the maze.
    pub student_arch: ArchConfig,
    /// Optimizer settings; the per-arm seed overrides `optim.seed`.
    pub optim: TrainConfig,
    /// Inference-time calibration temperature.
    pub tau: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let maze = MazeSpec::default();
        let student_arch = ArchConfig::denoiser(maze::VOCAB, maze.padded_len(), 64, 2, 4);
        AblationConfig {
            arms: default_arms(),
            nfe_list: vec![1, 2, 4, 8, 16],
            seeds: vec![0],
            eval_samples: 100,
            maze,
            corpus_cap: maze::DEFAULT_CORPUS_CAP,
            corpus_seed: 0,
            student_arch,
            optim: TrainConfig::default(),
            tau: 0.85,
        }
    }
}

/// One line of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub noise_mode: NoiseMode,
    pub extraction_mode: ExtractionMode,
    pub nfe: usize,
    pub success_rate: f64,
    pub seed: u64,
}

/// Fraction of `n_samples` generated sequences that parse as valid
/// target-reaching maze paths. Samples run concurrently on independent
/// noise streams keyed by sample index, so paired comparisons across
/// sampler settings reuse the same streams.
pub fn maze_success_rate(
    student: &MdlmStudent,
    spec: &MazeSpec,
    source: &ConditionSource,
    sampler: &SamplerConfig,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    use rayon::prelude::*;
    if n_samples == 0 {
        return Err(GdlError::Config(
            "evaluation needs at least one sample".into(),
        ));
    }
    let samples: Vec<Vec<usize>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, "eval-sample", &[i as u64]);
            ancestral_sample(student, spec.padded_len(), source, sampler, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(maze::eval_success(spec, &samples))
}

/// Trains one student per (seed, arm) and evaluates it at every requested
/// budget. Within a seed all arms share the corpus, the teacher, the
/// initial weights, and the data order; the arms differ only in their noise
/// mode and extraction route. Arms run sequentially; rerunning the same
/// config yields an identical report.
pub fn run_ablation(cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    if cfg.arms.is_empty() {
        return Err(GdlError::Config("at least one arm is required".into()));
    }
    if cfg.nfe_list.is_empty() {
        return Err(GdlError::Config(
            "at least one evaluation budget is required".into(),
        ));
    }
    if cfg.seeds.is_empty() {
        return Err(GdlError::Config("at least one seed is required".into()));
    }
    if cfg.student_arch.vocab != maze::VOCAB {
        return Err(GdlError::Config(format!(
            "student vocabulary {} does not match the maze vocabulary {}",
            cfg.student_arch.vocab,
            maze::VOCAB
        )));
    }
    if cfg.student_arch.n_positions < cfg.maze.padded_len() {
        return Err(GdlError::Config(format!(
            "student context {} is shorter than the padded maze length {}",
            cfg.student_arch.n_positions,
            cfg.maze.padded_len()
        )));
    }

    let corpus = MazeCorpus::build(&cfg.maze, cfg.corpus_cap, cfg.corpus_seed)?.sequences;
    let teacher = TabularTeacher::from_corpus(&corpus, maze::VOCAB, ContextOrder::Full, 0.0)?;

    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for arm in &cfg.arms {
            let train_cfg = StudentTrainConfig {
                optim: TrainConfig {
                    seed,
                    ..cfg.optim.clone()
                },
                mode: arm.mode,
                extraction: arm.extraction,
                ..StudentTrainConfig::default()
            };
            let (student, _) = train_student(&teacher, &corpus, &cfg.student_arch, &train_cfg)?;
            let source = ConditionSource {
                mode: arm.mode,
                tau: cfg.tau,
                freshness: Freshness::PerSequenceFixed,
            };
            for &nfe in &cfg.nfe_list {
                let success = maze_success_rate(
                    &student,
                    &cfg.maze,
                    &source,
                    &SamplerConfig::with_nfe(nfe),
                    cfg.eval_samples,
                    seed,
                )?;
                rows.push(AblationRow {
                    arm: arm.name.clone(),
                    noise_mode: arm.mode,
                    extraction_mode: arm.extraction,
                    nfe,
                    success_rate: success,
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

fn mode_label(mode: NoiseMode) -> &'static str {
    match mode {
        NoiseMode::Gumbel => "gumbel",
        NoiseMode::Gaussian => "gaussian",
        NoiseMode::Uniform => "uniform",
        NoiseMode::None => "none",
    }
}

fn extraction_label(mode: ExtractionMode) -> &'static str {
    match mode {
        ExtractionMode::Parallel => "parallel",
        ExtractionMode::SequentialOffline => "sequential",
    }
}

/// Renders the report as CSV with a fixed column order.
pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut csv = CsvWriter::new(out);
    csv.row(&[
        "arm",
        "noise_mode",
        "extraction_mode",
        "nfe",
        "success_rate",
        "seed",
    ])?;
    for r in rows {
        csv.row(&[
            r.arm.clone(),
            mode_label(r.noise_mode).to_string(),
            extraction_label(r.extraction_mode).to_string(),
            r.nfe.to_string(),
            crate::io::fmt_f64(r.success_rate),
            r.seed.to_string(),
        ])?;
    }
    Ok(())
}
