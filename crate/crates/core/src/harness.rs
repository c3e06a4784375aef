//! The statistical property suite: machine-checkable evidence that the
//! posterior noise extraction does what it claims.
//!
//! Five properties are measured, each reported as one or more CSV rows:
//!
//! - **argmax-satisfaction** — extracted noise reproduces the conditioned
//!   token exactly, with a strictly positive dominance margin (zero
//!   tolerance, per vocabulary size 2 through 8);
//! - **marginal-gumbel-ks** — under the unconditional process (sample a
//!   token, then extract), every pooled noise coordinate is marginally
//!   standard Gumbel (one-sample KS per coordinate);
//! - **joint-law** — for fixed logits, the winning perturbed value has the
//!   same per-class law whether the noise came first (prior-then-argmax) or
//!   the token did (sample-then-posterior) (two-sample KS per class);
//! - **gumbel-max-tv** — token frequencies from Gumbel-Max sampling match
//!   the softmax within a total-variation budget;
//! - **calibration-variance** — noise scaled by tau = 0.85 has variance
//!   0.85^2 * pi^2 / 6.
//!
//! The `corrupt` switch swaps in a deliberately wrong posterior formula (a
//! `log p_k` shift on the losing coordinates) as a test of the tests: the
//! argmax property still passes — the corruption only widens margins — but
//! the marginal law breaks, and the suite must catch it.

use crate::error::GdlError;
use crate::gumbel::{
    gumbel_cdf, gumbel_draw, posterior_gumbel, posterior_gumbel_from_aux, sample_categorical,
    sample_gumbel, GumbelVector, LogitVector, ProbVector,
};
use crate::io::{fmt_f64, CsvWriter};
use crate::rng::substream;
use crate::stats::{ks_critical_value, ks_test_cdf, ks_test_two_sample, tv_distance};
use crate::vecmath::logaddexp;
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Switchboard for the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Total argmax-satisfaction trials, spread over vocabularies 2..=8.
    pub argmax_trials: usize,
    /// Marginal-law draws per vocabulary (each contributes one value to
    /// every coordinate's pool).
    pub ks_samples: usize,
    /// Vocabularies checked for marginal preservation.
    pub marginal_vocab: Vec<usize>,
    /// Draws per process for the joint-law comparison.
    pub joint_samples: usize,
    /// Draws for the Gumbel-Max total-variation check.
    pub tv_samples: usize,
    /// Draws for the calibration-variance check.
    pub calibration_samples: usize,
    /// Two-sided significance for every KS decision.
    pub significance: f64,
    /// Evaluate the deliberately wrong posterior formula instead.
    pub corrupt: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            argmax_trials: 100_000,
            ks_samples: 100_000,
            marginal_vocab: vec![2, 3, 5],
            joint_samples: 520_000,
            tv_samples: 1_000_000,
            calibration_samples: 1_000_000,
            significance: 0.001,
            corrupt: false,
        }
    }
}

/// One measured property instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyRow {
    pub property: String,
    pub vocab: usize,
    pub n: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// True iff every row passed.
pub fn suite_passes(rows: &[PropertyRow]) -> bool {
    rows.iter().all(|r| r.pass)
}

/// The deliberately broken posterior: losing coordinates computed as
/// `-log(exp(-zeta_k)/p_k + exp(-zeta_0))`, a `log p_k` shift off the
/// correct value. The winner is untouched, so the argmax constraint still
/// holds (losers only sink lower) — only the marginal law gives it away.
fn corrupt_posterior(probs: &ProbVector, x: usize, rng: &mut impl Rng) -> Result<GumbelVector> {
    let zeta0 = gumbel_draw(rng);
    let zetas: Vec<f64> = (0..probs.len()).map(|_| gumbel_draw(rng)).collect();
    let correct = posterior_gumbel_from_aux(probs, x, zeta0, &zetas)?;
    let xi: Vec<f64> = probs
        .iter()
        .zip(zetas.iter())
        .enumerate()
        .map(|(k, (&p, &z))| {
            if k == x {
                correct.values()[x]
            } else {
                -logaddexp(-z - p.ln(), -zeta0)
            }
        })
        .collect();
    GumbelVector::new(xi)
}

fn draw_posterior(
    corrupt: bool,
    probs: &ProbVector,
    x: usize,
    rng: &mut impl Rng,
) -> Result<GumbelVector> {
    if corrupt {
        corrupt_posterior(probs, x, rng)
    } else {
        posterior_gumbel(probs, x, rng)
    }
}

/// Random logits with per-trial scale variation, exercising both flat and
/// highly peaked distributions.
fn random_logits(v: usize, rng: &mut ChaCha8Rng) -> LogitVector {
    let scale: f64 = 0.5 + 3.5 * rng.random::<f64>();
    let normal = Normal::new(0.0, scale).expect("valid scale");
    LogitVector::new((0..v).map(|_| normal.sample(rng)).collect()).expect("finite draws")
}

/// One unconditional-process extraction: sample a token from random logits,
/// then extract posterior noise for it.
fn unconditional_draw(
    corrupt: bool,
    v: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ProbVector, usize, GumbelVector)> {
    let logits = random_logits(v, rng);
    let probs = ProbVector::from_logits(&logits);
    let (x, _) = sample_categorical(&logits, rng);
    let xi = draw_posterior(corrupt, &probs, x, rng)?;
    Ok((probs, x, xi))
}

pub fn argmax_rows(cfg: &SuiteConfig) -> Result<Vec<PropertyRow>> {
    let per_vocab = cfg.argmax_trials.div_ceil(7).max(1);
    (2usize..=8)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&v| {
            let outcomes: Vec<Result<f64>> = (0..per_vocab)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = substream(cfg.seed, "argmax", &[v as u64, trial as u64]);
                    let (probs, x, xi) = unconditional_draw(cfg.corrupt, v, &mut rng)?;
                    // Strict dominance margin of the conditioned token in
                    // log-probability space.
                    let perturbed: Vec<f64> = probs
                        .iter()
                        .zip(xi.values())
                        .map(|(&p, &n)| p.ln() + n)
                        .collect();
                    let top = perturbed[x];
                    let runner_up = perturbed
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != x)
                        .map(|(_, &s)| s)
                        .fold(f64::NEG_INFINITY, f64::max);
                    Ok(top - runner_up)
                })
                .collect();
            let mut min_margin = f64::INFINITY;
            for outcome in outcomes {
                min_margin = min_margin.min(outcome?);
            }
            Ok(PropertyRow {
                property: "argmax-satisfaction".to_string(),
                vocab: v,
                n: per_vocab,
                statistic: min_margin,
                threshold: 0.0,
                pass: min_margin > 0.0,
            })
        })
        .collect()
}

pub fn marginal_rows(cfg: &SuiteConfig) -> Result<Vec<PropertyRow>> {
    cfg.marginal_vocab
        .par_iter()
        .map(|&v| {
            if v == 0 {
                return Err(GdlError::Config(
                    "marginal check needs vocabulary >= 1".into(),
                ));
            }
            let draws: Vec<Result<Vec<f64>>> = (0..cfg.ks_samples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = substream(cfg.seed, "marginal", &[v as u64, i as u64]);
                    let (_, _, xi) = unconditional_draw(cfg.corrupt, v, &mut rng)?;
                    Ok(xi.values().to_vec())
                })
                .collect();
            let mut pools: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.ks_samples); v];
            for draw in draws {
                for (k, value) in draw?.into_iter().enumerate() {
                    pools[k].push(value);
                }
            }
            let mut worst_d: f64 = 0.0;
            let mut all_pass = true;
            for pool in &pools {
                let res = ks_test_cdf(pool, gumbel_cdf);
                worst_d = worst_d.max(res.statistic);
                all_pass &= res.passes(cfg.significance);
            }
            Ok(PropertyRow {
                property: "marginal-gumbel-ks".to_string(),
                vocab: v,
                n: cfg.ks_samples,
                statistic: worst_d,
                threshold: ks_critical_value(cfg.significance, cfg.ks_samples as f64),
                pass: all_pass,
            })
        })
        .collect()
}

/// Fixed three-way distribution for the joint-law comparison.
const JOINT_PROBS: [f64; 3] = [0.5, 0.3, 0.2];

pub fn joint_rows(cfg: &SuiteConfig) -> Result<Vec<PropertyRow>> {
    let logits = LogitVector::new(JOINT_PROBS.iter().map(|p| p.ln()).collect())?;
    let probs = ProbVector::new(JOINT_PROBS.to_vec())?;

    // Process A: noise first, then the argmax decides the class.
    let prior: Vec<(usize, f64)> = (0..cfg.joint_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, "joint-prior", &[i as u64]);
            let xi = sample_gumbel(&mut rng, 3);
            let perturbed: Vec<f64> = logits
                .values()
                .iter()
                .zip(xi.values())
                .map(|(&l, &n)| l + n)
                .collect();
            let x = crate::vecmath::argmax(&perturbed);
            (x, perturbed[x])
        })
        .collect();

    // Process B: the class is sampled first, then noise is extracted for it.
    let posterior: Vec<Result<(usize, f64)>> = (0..cfg.joint_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, "joint-posterior", &[i as u64]);
            let (x, _) = sample_categorical(&logits, &mut rng);
            let xi = draw_posterior(cfg.corrupt, &probs, x, &mut rng)?;
            let m = logits
                .values()
                .iter()
                .zip(xi.values())
                .map(|(&l, &n)| l + n)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((x, m))
        })
        .collect();

    let mut by_class_a: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for (x, m) in prior {
        by_class_a[x].push(m);
    }
    let mut by_class_b: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for item in posterior {
        let (x, m) = item?;
        by_class_b[x].push(m);
    }

    let mut rows = Vec::new();
    for class in 0..3 {
        let (a, b) = (&by_class_a[class], &by_class_b[class]);
        if a.is_empty() || b.is_empty() {
            return Err(GdlError::PropertyFailure(format!(
                "joint-law class {class} received no samples"
            )));
        }
        let res = ks_test_two_sample(a, b);
        rows.push(PropertyRow {
            property: format!("joint-law-class{class}"),
            vocab: 3,
            n: a.len().min(b.len()),
            statistic: res.statistic,
            threshold: ks_critical_value(cfg.significance, res.effective_n),
            pass: res.passes(cfg.significance),
        });
    }
    Ok(rows)
}

/// Work-chunk size for the bulk Monte Carlo properties; the substream is
/// keyed by chunk index, so results are independent of thread count.
const MC_CHUNK: usize = 4096;

pub fn tv_row(cfg: &SuiteConfig) -> Result<PropertyRow> {
    let v = 5usize;
    let logits = {
        let mut rng = substream(cfg.seed, "tv-logits", &[]);
        random_logits(v, &mut rng)
    };
    let probs = ProbVector::from_logits(&logits);
    let n_chunks = cfg.tv_samples.div_ceil(MC_CHUNK);
    let counts = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = substream(cfg.seed, "tv", &[chunk as u64]);
            let lo = chunk * MC_CHUNK;
            let hi = (lo + MC_CHUNK).min(cfg.tv_samples);
            let mut local = vec![0u64; v];
            for _ in lo..hi {
                let (x, _) = sample_categorical(&logits, &mut rng);
                local[x] += 1;
            }
            local
        })
        .reduce(
            || vec![0u64; v],
            |mut acc, local| {
                for (a, b) in acc.iter_mut().zip(local.iter()) {
                    *a += b;
                }
                acc
            },
        );
    let tv = tv_distance(&counts, probs.values());
    Ok(PropertyRow {
        property: "gumbel-max-tv".to_string(),
        vocab: v,
        n: cfg.tv_samples,
        statistic: tv,
        threshold: 0.01,
        pass: tv < 0.01,
    })
}

/// Target variance of tau-scaled noise at tau = 0.85:
/// `0.85^2 * pi^2 / 6`.
pub const CALIBRATED_VARIANCE: f64 = 1.188_464_863_297_843_4;
const CALIBRATION_TAU: f64 = 0.85;

pub fn calibration_row(cfg: &SuiteConfig) -> Result<PropertyRow> {
    let n_chunks = cfg.calibration_samples.div_ceil(MC_CHUNK);
    let partials: Vec<(f64, f64, usize)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = substream(cfg.seed, "calibrate", &[chunk as u64]);
            let lo = chunk * MC_CHUNK;
            let hi = (lo + MC_CHUNK).min(cfg.calibration_samples);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in lo..hi {
                let x = CALIBRATION_TAU * gumbel_draw(&mut rng);
                sum += x;
                sumsq += x * x;
            }
            (sum, sumsq, hi - lo)
        })
        .collect();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut count = 0usize;
    for (s, sq, c) in partials {
        sum += s;
        sumsq += sq;
        count += c;
    }
    let n = count as f64;
    let var = (sumsq - sum * sum / n) / (n - 1.0);
    let err = (var - CALIBRATED_VARIANCE).abs();
    Ok(PropertyRow {
        property: "calibration-variance".to_string(),
        vocab: 1,
        n: count,
        statistic: err,
        threshold: 0.02,
        pass: err <= 0.02,
    })
}

/// Runs every property and returns the report rows in a fixed order.
/// Deterministic for a fixed config regardless of thread count.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<PropertyRow>> {
    if !(cfg.significance > 0.0 && cfg.significance < 1.0) {
        return Err(GdlError::Config(format!(
            "significance {} outside (0, 1)",
            cfg.significance
        )));
    }
    if cfg.argmax_trials == 0
        || cfg.ks_samples == 0
        || cfg.joint_samples == 0
        || cfg.tv_samples == 0
        || cfg.calibration_samples == 0
    {
        return Err(GdlError::Config(
            "every property needs at least one sample".into(),
        ));
    }
    let mut rows = argmax_rows(cfg)?;
    rows.extend(marginal_rows(cfg)?);
    rows.extend(joint_rows(cfg)?);
    rows.push(tv_row(cfg)?);
    rows.push(calibration_row(cfg)?);
    Ok(rows)
}

/// Renders the report as CSV with a fixed column order.
pub fn write_property_csv<W: std::io::Write>(rows: &[PropertyRow], out: W) -> Result<()> {
    let mut csv = CsvWriter::new(out);
    csv.row(&["property", "vocab", "n", "statistic", "threshold", "pass"])?;
    for r in rows {
        csv.row(&[
            r.property.clone(),
            r.vocab.to_string(),
            r.n.to_string(),
            fmt_f64(r.statistic),
            fmt_f64(r.threshold),
            r.pass.to_string(),
        ])?;
    }
    Ok(())
}
