//! Implementations of the seven subcommands.
//!
//! Every command writes its artifacts under the resolved output directory,
//! each with a `.meta.json` sidecar stamping `{seed, config hash, format
//! version}`. All outputs are deterministic for a fixed resolved config; the
//! one exception is the training logs' wall-clock column, which records real
//! timing and is documented as exempt from the byte-identity guarantee.

use crate::config::{Resolved, TeacherSection};
use gdl_core::ablation::{run_ablation, write_ablation_csv, AblationConfig, AblationRow};
use gdl_core::extraction::{dump_pairs, parallel_extract};
use gdl_core::harness::{run_suite, suite_passes, write_property_csv, SuiteConfig};
use gdl_core::io::{json_usize_array, ArtifactMeta, CsvWriter};
use gdl_core::maze::{self, is_valid_path, MazeCorpus};
use gdl_core::nn::checkpoint::Checkpoint;
use gdl_core::nn::{ArchConfig, TrainConfig, TrainLogRow};
use gdl_core::rng::{substream, NoiseStreams};
use gdl_core::student_mdlm::{
    ancestral_sample, train_student, ExtractionMode, MdlmStudent, NoiseMode, SamplerConfig,
    StudentTrainConfig,
};
use gdl_core::student_mtp::{
    evaluate_acceptance, train_heads, AcceptanceStats, MtpEvalConfig, MtpTrainConfig,
    TypicalAcceptParams,
};
use gdl_core::teacher::{
    neural_teacher_train, ContextOrder, NeuralTeacher, TabularTeacher, TokenSequence,
};
use gdl_core::{GdlError, Result};
use std::io::BufRead;
use std::path::PathBuf;

fn config_err(msg: String) -> GdlError {
    GdlError::Config(msg)
}

pub fn mode_label(mode: NoiseMode) -> &'static str {
    match mode {
        NoiseMode::Gumbel => "gumbel",
        NoiseMode::Gaussian => "gaussian",
        NoiseMode::Uniform => "uniform",
        NoiseMode::None => "none",
    }
}

fn fmt_f64(x: f64) -> String {
    gdl_core::io::fmt_f64(x)
}

/// Writes one artifact and its metadata sidecar.
fn write_artifact(resolved: &Resolved, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let dir = resolved.out();
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, bytes)?;
    let meta = ArtifactMeta::new(resolved.cfg.seed, &resolved.config_value);
    gdl_core::io::write_meta_sidecar(&path, &meta)?;
    Ok(path)
}

/// Saves a checkpoint and its metadata sidecar.
fn write_checkpoint(resolved: &Resolved, name: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
    let dir = resolved.out();
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    ckpt.save(&path)?;
    let meta = ArtifactMeta::new(resolved.cfg.seed, &resolved.config_value);
    gdl_core::io::write_meta_sidecar(&path, &meta)?;
    Ok(path)
}

/// Renders a training log with the spec'd columns. `wall_ms` is measured
/// wall-clock time, exempt from byte-identity.
fn train_log_csv(log: &[TrainLogRow]) -> Result<Vec<u8>> {
    let mut csv = CsvWriter::new(Vec::new());
    csv.row(&["epoch", "step", "loss", "lr", "wall_ms"])?;
    for row in log {
        csv.row(&[
            row.epoch.to_string(),
            row.step.to_string(),
            fmt_f64(row.loss),
            fmt_f64(row.lr),
            row.wall_ms.to_string(),
        ])?;
    }
    Ok(csv.into_inner())
}

fn load_corpus(resolved: &Resolved) -> Result<Vec<TokenSequence>> {
    let path = resolved.out().join("corpus.ndjson");
    let file = std::fs::File::open(&path).map_err(|e| {
        config_err(format!(
            "cannot open corpus {} (run gen-data first): {e}",
            path.display()
        ))
    })?;
    let mut corpus = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<usize> = serde_json::from_str(&line)
            .map_err(|e| config_err(format!("corrupt corpus line {:?}: {e}", line)))?;
        corpus.push(tokens);
    }
    if corpus.is_empty() {
        return Err(GdlError::EmptyCorpus);
    }
    Ok(corpus)
}

fn load_student(resolved: &Resolved) -> Result<MdlmStudent> {
    let path = resolved.out().join("student.ckpt");
    if !path.exists() {
        return Err(config_err(format!(
            "no student checkpoint at {} (run train first)",
            path.display()
        )));
    }
    MdlmStudent::from_checkpoint(&Checkpoint::load(&path)?)
}

fn load_backbone(resolved: &Resolved) -> Result<NeuralTeacher> {
    let path = resolved.out().join("teacher.ckpt");
    if !path.exists() {
        return Err(config_err(format!(
            "no backbone checkpoint at {} (train with a neural teacher first)",
            path.display()
        )));
    }
    NeuralTeacher::from_checkpoint(&Checkpoint::load(&path)?)
}

fn tabular_from_config(resolved: &Resolved, corpus: &[TokenSequence]) -> Result<TabularTeacher> {
    let (epsilon, order) = match &resolved.cfg.teacher {
        TeacherSection::Tabular {
            epsilon,
            markov_order,
        } => (
            *epsilon,
            markov_order.map_or(ContextOrder::Full, ContextOrder::Markov),
        ),
        TeacherSection::Neural { .. } => (0.0, ContextOrder::Full),
    };
    TabularTeacher::from_corpus(corpus, maze::VOCAB, order, epsilon)
}

/// The exact scorer for evaluation: a zero-smoothing full-context table,
/// regardless of what teacher the student trained against.
fn exact_scorer(corpus: &[TokenSequence]) -> Result<TabularTeacher> {
    TabularTeacher::from_corpus(corpus, maze::VOCAB, ContextOrder::Full, 0.0)
}

// ---------------------------------------------------------------------------
// verify-posterior

pub fn cmd_verify_posterior(
    resolved: &Resolved,
    trials_flag: Option<usize>,
    inject_bug: bool,
) -> Result<()> {
    let trials = trials_flag.unwrap_or(resolved.cfg.verify.trials);
    if trials < 10_000 {
        return Err(config_err(format!(
            "verify-posterior needs at least 10000 trials, got {trials}"
        )));
    }
    let v = &resolved.cfg.verify;
    let suite = SuiteConfig {
        seed: resolved.cfg.seed,
        argmax_trials: trials,
        ks_samples: trials,
        marginal_vocab: vec![2, 3, 5],
        joint_samples: v.joint_samples,
        tv_samples: v.tv_samples,
        calibration_samples: v.calibration_samples,
        significance: v.significance,
        corrupt: inject_bug,
    };
    let rows = run_suite(&suite)?;
    let mut bytes = Vec::new();
    write_property_csv(&rows, &mut bytes)?;
    let path = write_artifact(resolved, "properties.csv", &bytes)?;

    for row in &rows {
        println!(
            "{} {} V={} n={} statistic={:.6e} threshold={:.6e}",
            if row.pass { "PASS" } else { "FAIL" },
            row.property,
            row.vocab,
            row.n,
            row.statistic,
            row.threshold
        );
    }
    println!("report: {}", path.display());
    if suite_passes(&rows) {
        Ok(())
    } else {
        Err(GdlError::PropertyFailure(
            "posterior property suite failed; see report".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// gen-data

pub fn cmd_gen_data(resolved: &Resolved) -> Result<()> {
    let cfg = &resolved.cfg;
    let corpus = MazeCorpus::build(&resolved.maze, cfg.corpus_cap, cfg.seed)?;

    let mut corpus_bytes = Vec::new();
    for seq in &corpus.sequences {
        corpus_bytes.extend_from_slice(json_usize_array(seq).as_bytes());
        corpus_bytes.push(b'\n');
    }
    let corpus_path = write_artifact(resolved, "corpus.ndjson", &corpus_bytes)?;
    println!(
        "corpus: {} sequences -> {}",
        corpus.sequences.len(),
        corpus_path.display()
    );

    let teacher = tabular_from_config(resolved, &corpus.sequences)?;
    let mut teacher_bytes = Vec::new();
    teacher.to_ndjson(&mut teacher_bytes)?;
    let teacher_path = write_artifact(resolved, "teacher.ndjson", &teacher_bytes)?;
    println!(
        "teacher table: {} contexts -> {}",
        teacher.n_contexts(),
        teacher_path.display()
    );

    if cfg.extraction == ExtractionMode::SequentialOffline {
        let pairs: Vec<(TokenSequence, _)> = corpus
            .sequences
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                let streams = NoiseStreams::new(cfg.seed, i as u64);
                parallel_extract(&teacher, seq, &streams).map(|noise| (seq.clone(), noise))
            })
            .collect::<Result<_>>()?;
        let mut noise_bytes = Vec::new();
        dump_pairs(&mut noise_bytes, &pairs)?;
        let noise_path = write_artifact(resolved, "noise.ndjson", &noise_bytes)?;
        println!(
            "offline noise: {} pairs -> {}",
            pairs.len(),
            noise_path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(resolved: &Resolved) -> Result<()> {
    let cfg = &resolved.cfg;
    let corpus = load_corpus(resolved)?;
    let padded = resolved.maze.padded_len();

    let student_arch = ArchConfig::denoiser(
        maze::VOCAB,
        padded,
        cfg.student.d_model,
        cfg.student.n_layers,
        cfg.student.n_heads,
    );
    let train_cfg = StudentTrainConfig {
        optim: TrainConfig {
            epochs: cfg.student.epochs,
            batch_size: cfg.student.batch_size,
            lr: cfg.student.lr,
            lr_floor: None,
            seed: cfg.seed,
        },
        mode: cfg.condition.mode,
        weighting: cfg.student.weighting,
        mask_rule: cfg.student.mask_rule,
        extraction: cfg.extraction,
    };

    let (student, log) = match &cfg.teacher {
        TeacherSection::Tabular { .. } => {
            let teacher = tabular_from_config(resolved, &corpus)?;
            train_student(&teacher, &corpus, &student_arch, &train_cfg)?
        }
        TeacherSection::Neural {
            d_model,
            n_layers,
            n_heads,
            epochs,
            batch_size,
            lr,
        } => {
            let teacher_arch =
                ArchConfig::causal_lm(maze::VOCAB, padded, *d_model, *n_layers, *n_heads);
            let teacher_train = TrainConfig {
                epochs: *epochs,
                batch_size: *batch_size,
                lr: *lr,
                lr_floor: None,
                seed: cfg.seed,
            };
            let (teacher, teacher_log) =
                neural_teacher_train(&corpus, &teacher_arch, &teacher_train)?;
            let ckpt_path =
                write_checkpoint(resolved, "teacher.ckpt", &teacher.to_checkpoint(None))?;
            write_artifact(resolved, "teacher_train.csv", &train_log_csv(&teacher_log)?)?;
            println!(
                "teacher: final loss {:.4} -> {}",
                teacher_log.last().map(|r| r.loss).unwrap_or(f64::NAN),
                ckpt_path.display()
            );
            train_student(&teacher, &corpus, &student_arch, &train_cfg)?
        }
    };

    let ckpt_path = write_checkpoint(resolved, "student.ckpt", &student.to_checkpoint(None))?;
    write_artifact(resolved, "train.csv", &train_log_csv(&log)?)?;
    println!(
        "student: {} epochs, final loss {:.4} -> {}",
        cfg.student.epochs,
        log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

pub fn cmd_sample(resolved: &Resolved) -> Result<()> {
    let cfg = &resolved.cfg;
    let student = load_student(resolved)?;
    let len = resolved.maze.padded_len();
    let label = mode_label(cfg.condition.mode);

    let mut bytes = Vec::new();
    let mut valid_count = 0usize;
    let mut total = 0usize;
    for &nfe in &cfg.nfe {
        let sampler = SamplerConfig::with_nfe(nfe);
        for i in 0..cfg.sample_count {
            let mut rng = substream(cfg.seed, "sample", &[nfe as u64, i as u64]);
            let tokens = ancestral_sample(&student, len, &cfg.condition, &sampler, &mut rng)?;
            let valid = is_valid_path(&resolved.maze, &tokens);
            valid_count += valid as usize;
            total += 1;
            bytes.extend_from_slice(
                format!(
                    "{{\"tokens\":{},\"valid\":{},\"nfe\":{},\"mode\":\"{}\"}}\n",
                    json_usize_array(&tokens),
                    valid,
                    nfe,
                    label
                )
                .as_bytes(),
            );
        }
    }
    let path = write_artifact(resolved, "samples.ndjson", &bytes)?;
    println!(
        "samples: {valid_count}/{total} valid across nfe {:?} -> {}",
        cfg.nfe,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(resolved: &Resolved) -> Result<()> {
    let cfg = &resolved.cfg;
    let student = load_student(resolved)?;
    let corpus = load_corpus(resolved)?;
    let scorer = exact_scorer(&corpus)?;
    let len = resolved.maze.padded_len();

    let mut csv = CsvWriter::new(Vec::new());
    csv.row(&[
        "nfe",
        "samples",
        "success_rate",
        "mean_teacher_nll",
        "zero_prob_samples",
        "seed",
    ])?;
    for &nfe in &cfg.nfe {
        let sampler = SamplerConfig::with_nfe(nfe);
        let mut samples = Vec::with_capacity(cfg.eval_samples);
        for i in 0..cfg.eval_samples {
            // Same noise streams as the ablation evaluator, so rates agree
            // across commands for equal (config, seed).
            let mut rng = substream(cfg.seed, "eval-sample", &[i as u64]);
            samples.push(ancestral_sample(
                &student,
                len,
                &cfg.condition,
                &sampler,
                &mut rng,
            )?);
        }
        let success = maze::eval_success(&resolved.maze, &samples);

        let mut nll_sum = 0.0;
        let mut scored = 0usize;
        let mut zero_prob = 0usize;
        for sample in &samples {
            match teacher_nll(&scorer, sample) {
                Some(nll) => {
                    nll_sum += nll;
                    scored += 1;
                }
                None => zero_prob += 1,
            }
        }
        let mean_nll = if scored > 0 {
            fmt_f64(nll_sum / scored as f64)
        } else {
            String::new()
        };
        println!(
            "nfe {nfe}: success {:.3}, mean teacher NLL {} over {scored} samples ({zero_prob} off-support)",
            success,
            if mean_nll.is_empty() { "n/a" } else { &mean_nll }
        );
        csv.row(&[
            nfe.to_string(),
            cfg.eval_samples.to_string(),
            fmt_f64(success),
            mean_nll,
            zero_prob.to_string(),
            cfg.seed.to_string(),
        ])?;
    }
    let path = write_artifact(resolved, "eval.csv", &csv.into_inner())?;
    println!("eval table: {}", path.display());
    Ok(())
}

/// Total negative log-likelihood of a sequence under the exact table, or
/// `None` if any transition has zero probability there.
fn teacher_nll(scorer: &TabularTeacher, tokens: &[usize]) -> Option<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len() {
        let p = scorer.probs(&tokens[..i]);
        let pi = *p.get(tokens[i])?;
        if pi <= 0.0 {
            return None;
        }
        total -= pi.ln();
    }
    Some(total)
}

// ---------------------------------------------------------------------------
// mtp

pub fn cmd_mtp(resolved: &Resolved) -> Result<()> {
    let cfg = &resolved.cfg;
    if cfg.mtp.trials < 500 {
        return Err(config_err(format!(
            "mtp acceptance evaluation needs at least 500 trials, got {}",
            cfg.mtp.trials
        )));
    }
    let backbone = load_backbone(resolved)?;
    let corpus = load_corpus(resolved)?;

    let mut csv = CsvWriter::new(Vec::new());
    csv.row(&["arm", "head_index", "conditional_rate", "trials"])?;
    let mut summaries = Vec::new();
    for (arm, conditioned) in [("baseline", false), ("conditioned", true)] {
        let train_cfg = MtpTrainConfig {
            optim: TrainConfig {
                epochs: cfg.mtp.epochs,
                batch_size: cfg.mtp.batch_size,
                lr: cfg.mtp.lr,
                lr_floor: None,
                seed: cfg.seed,
            },
            conditioned,
            n_heads: cfg.mtp.n_heads,
        };
        let (heads, _) = train_heads(&backbone, &corpus, &train_cfg)?;
        write_checkpoint(
            resolved,
            &format!("mtp_{arm}.ckpt"),
            &heads.to_checkpoint(None),
        )?;

        let eval_cfg = MtpEvalConfig {
            trials: cfg.mtp.trials,
            max_prompt: cfg.mtp.max_prompt,
            accept: TypicalAcceptParams {
                epsilon: cfg.mtp.epsilon,
                delta: cfg.mtp.delta,
            },
            tau: cfg.condition.tau,
            conditioned,
            seed: cfg.seed,
        };
        let stats = evaluate_acceptance(&backbone, &heads, &corpus, &eval_cfg)?;
        append_acceptance_rows(&mut csv, arm, &stats)?;
        println!(
            "{arm}: rates {:?} mean accepted length {:.3} over {} trials",
            stats
                .conditional_rates()
                .iter()
                .map(|r| (r * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            stats.mean_accepted_len,
            stats.trials
        );
        summaries.push((arm, stats));
    }
    let path = write_artifact(resolved, "mtp.csv", &csv.into_inner())?;
    println!("acceptance table: {}", path.display());

    let base_len = summaries[0].1.mean_accepted_len;
    let cond_len = summaries[1].1.mean_accepted_len;
    println!(
        "accepted length: baseline {base_len:.3} vs conditioned {cond_len:.3} ({:+.1}%)",
        (cond_len / base_len - 1.0) * 100.0
    );
    Ok(())
}

fn append_acceptance_rows(
    csv: &mut CsvWriter<Vec<u8>>,
    arm: &str,
    stats: &AcceptanceStats,
) -> Result<()> {
    for (head, rate) in stats.conditional_rates().iter().enumerate() {
        csv.row(&[
            arm.to_string(),
            head.to_string(),
            fmt_f64(*rate),
            stats.trials.to_string(),
        ])?;
    }
    csv.row(&[
        arm.to_string(),
        "accepted_length".to_string(),
        fmt_f64(stats.mean_accepted_len),
        stats.trials.to_string(),
    ])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

fn ablation_config(resolved: &Resolved) -> AblationConfig {
    let cfg = &resolved.cfg;
    AblationConfig {
        arms: cfg.ablation.arms.clone(),
        nfe_list: cfg.nfe.clone(),
        seeds: cfg.ablation.seeds.clone(),
        eval_samples: cfg.eval_samples,
        maze: resolved.maze.clone(),
        corpus_cap: cfg.corpus_cap,
        corpus_seed: cfg.seed,
        student_arch: ArchConfig::denoiser(
            maze::VOCAB,
            resolved.maze.padded_len(),
            cfg.student.d_model,
            cfg.student.n_layers,
            cfg.student.n_heads,
        ),
        optim: TrainConfig {
            epochs: cfg.student.epochs,
            batch_size: cfg.student.batch_size,
            lr: cfg.student.lr,
            lr_floor: None,
            seed: cfg.seed,
        },
        tau: cfg.condition.tau,
    }
}

pub fn cmd_ablate(resolved: &Resolved, parallel_arms: bool) -> Result<()> {
    let rows = if parallel_arms {
        run_arms_as_processes(resolved)?
    } else {
        run_ablation(&ablation_config(resolved))?
    };

    let mut bytes = Vec::new();
    write_ablation_csv(&rows, &mut bytes)?;
    let path = write_artifact(resolved, "ablation.csv", &bytes)?;

    // Rows as NDJSON too, so a parallel-arms parent can merge child results
    // without reparsing CSV.
    let mut nd = Vec::new();
    for row in &rows {
        serde_json::to_writer(&mut nd, row)?;
        nd.push(b'\n');
    }
    write_artifact(resolved, "ablation_rows.ndjson", &nd)?;

    for row in &rows {
        println!(
            "seed {} arm {} nfe {}: success {:.3}",
            row.seed, row.arm, row.nfe, row.success_rate
        );
    }
    println!("ablation table: {}", path.display());
    Ok(())
}

/// Runs each arm in its own OS process (no shared state), then merges the
/// per-arm reports into the same row order the sequential path produces.
fn run_arms_as_processes(resolved: &Resolved) -> Result<Vec<AblationRow>> {
    let arms = &resolved.cfg.ablation.arms;
    if arms.is_empty() {
        return Err(config_err("at least one arm is required".into()));
    }
    let exe = std::env::current_exe()?;
    let base = resolved.out().to_path_buf();
    std::fs::create_dir_all(&base)?;

    let mut children = Vec::new();
    for (i, arm) in arms.iter().enumerate() {
        let child_out = base.join(format!("arm-{}", arm.name));
        std::fs::create_dir_all(&child_out)?;
        let mut child_cfg = resolved.cfg.clone();
        child_cfg.ablation.arms = vec![arm.clone()];
        child_cfg.out = child_out.clone();
        let cfg_path = child_out.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&child_cfg)?)?;

        let child = std::process::Command::new(&exe)
            .arg("ablate")
            .arg("--config")
            .arg(&cfg_path)
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()?;
        children.push((i, arm.name.clone(), child_out, child));
    }

    let mut per_arm: Vec<Vec<AblationRow>> = vec![Vec::new(); arms.len()];
    for (i, name, child_out, child) in children {
        let output = child.wait_with_output()?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(match output.status.code() {
                Some(2) => config_err(format!("arm {name} failed: {stderr}")),
                Some(3) => GdlError::Divergence(format!("arm {name} diverged: {stderr}")),
                _ => GdlError::PropertyFailure(format!("arm {name} failed: {stderr}")),
            });
        }
        let rows_path = child_out.join("ablation_rows.ndjson");
        let text = std::fs::read_to_string(&rows_path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            per_arm[i].push(serde_json::from_str(line)?);
        }
    }

    // Sequential order is seed-major, then arm, then budget.
    let mut merged = Vec::new();
    for &seed in &resolved.cfg.ablation.seeds {
        for arm_rows in &per_arm {
            for row in arm_rows.iter().filter(|r| r.seed == seed) {
                merged.push(row.clone());
            }
        }
    }
    Ok(merged)
}
