//! Gumbel-Max sampling and posterior noise extraction.
//!
//! The Gumbel-Max trick samples a categorical variable with logits `l` as
//! `argmax_k (l_k + xi_k)` where each `xi_k` is standard Gumbel noise,
//! `xi = -log(-log u)` for uniform `u`. This module provides the forward
//! direction (`sample_categorical`) and the reverse one (`posterior_gumbel`):
//! given a distribution `p` and an outcome `x` already sampled from it, draw
//! a noise vector distributed exactly as if it had produced `x` via the
//! argmax. Running the two in either order yields the same joint law over
//! `(x, xi)`, which is what lets a teacher's sampling randomness be recovered
//! after the fact and replayed or handed to a student.
//!
//! All math is `f64`; uniform draws are clamped away from 0 and 1 so every
//! noise value is finite.

use crate::error::GdlError;
use crate::vecmath::{argmax, logaddexp, softmax};
use crate::Result;
use rand::Rng;

/// Lower clamp for uniform draws; keeps `-log(-log u)` finite.
pub const UNIFORM_LO: f64 = 1e-300;
/// Upper clamp for uniform draws; keeps `-log u` nonzero.
pub const UNIFORM_HI: f64 = 1.0 - 1e-16;

/// A vector of Gumbel noise values, one per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelVector(Vec<f64>);

/// A vector of unnormalized log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

/// A simplex-normalized conditioning signal derived from a [`GumbelVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(Vec<f64>);

macro_rules! impl_vector_common {
    ($name:ident) => {
        impl $name {
            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl AsRef<[f64]> for $name {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

impl_vector_common!(GumbelVector);
impl_vector_common!(LogitVector);
impl_vector_common!(ProbVector);
impl_vector_common!(ConditionVector);

fn require_finite(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(GdlError::Config(format!("{what} must be non-empty")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(GdlError::Config(format!(
            "{what} contains non-finite value {v}"
        )));
    }
    Ok(())
}

impl GumbelVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        require_finite(&values, "gumbel vector")?;
        Ok(Self(values))
    }
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        require_finite(&values, "logit vector")?;
        Ok(Self(values))
    }
}

impl ProbVector {
    /// Tolerance on the simplex constraint.
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(GdlError::InvalidProbability("empty vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GdlError::InvalidProbability(format!(
                "entry {v} outside [0, 1]"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(GdlError::InvalidProbability(format!(
                "sum {sum} deviates from 1 by more than {}",
                Self::SUM_TOLERANCE
            )));
        }
        Ok(Self(values))
    }

    /// Softmax of a logit vector.
    pub fn from_logits(logits: &LogitVector) -> Self {
        Self(softmax(logits.values()))
    }

    /// Elementwise natural log; zero entries map to `-inf`.
    pub fn ln(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.ln()).collect()
    }
}

impl ConditionVector {
    pub fn values_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A positive scale factor applied to noise vectors. Training uses 1.0;
/// sampling sharpens slightly with 0.85.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(GdlError::Config(format!(
                "temperature must be positive and finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    /// Training-time scale: noise passed through unchanged.
    pub fn unit() -> Self {
        Self(1.0)
    }

    /// Default sampling-time scale.
    pub fn inference_default() -> Self {
        Self(0.85)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::unit()
    }
}

/// One standard Gumbel draw: `-log(-log u)` with `u` clamped inside
/// `[1e-300, 1 - 1e-16]`, so the result always lands in roughly
/// `[-6.55, 36.85]`.
pub fn gumbel_draw(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(UNIFORM_LO, UNIFORM_HI);
    -(-u.ln()).ln()
}

/// `v` i.i.d. standard Gumbel draws.
pub fn sample_gumbel(rng: &mut impl Rng, v: usize) -> GumbelVector {
    GumbelVector((0..v).map(|_| gumbel_draw(rng)).collect())
}

/// Standard Gumbel CDF `F(t) = exp(-exp(-t))`.
pub fn gumbel_cdf(t: f64) -> f64 {
    (-(-t).exp()).exp()
}

/// `argmax_k (l_k + xi_k)`, ties broken toward the lowest index.
pub fn gumbel_max(logits: &LogitVector, noise: &GumbelVector) -> Result<usize> {
    if logits.len() != noise.len() {
        return Err(GdlError::LengthMismatch {
            expected: logits.len(),
            got: noise.len(),
        });
    }
    let scores: Vec<f64> = logits
        .iter()
        .zip(noise.iter())
        .map(|(l, x)| l + x)
        .collect();
    Ok(argmax(&scores))
}

/// Samples a category via the Gumbel-Max trick, returning both the outcome
/// and the noise that produced it. The marginal law of the outcome is
/// `softmax(logits)`.
pub fn sample_categorical(logits: &LogitVector, rng: &mut impl Rng) -> (usize, GumbelVector) {
    let noise = sample_gumbel(rng, logits.len());
    let token = gumbel_max(logits, &noise).expect("noise drawn at logits' length");
    (token, noise)
}

/// Posterior noise extraction: given `probs` and an outcome `x ~ probs`,
/// draws `xi` such that `argmax_k (log p_k + xi_k) = x` always, and such that
/// `(x, xi)` has the same joint law as Gumbel-Max sampling run forward.
///
/// Construction, from auxiliary standard Gumbels `zeta_0` and `zeta_1..V`:
///
/// ```text
/// xi_x = zeta_0 - log p_x                                  (winning entry)
/// xi_k = -log( exp(-zeta_k) + p_k * exp(-zeta_0) )         (all others)
/// ```
///
/// The losing entries are evaluated as `-logaddexp(-zeta_k, log p_k - zeta_0)`
/// so that extreme probabilities cannot overflow, and `p_k = 0` cleanly
/// degenerates to `xi_k = zeta_k`. Note the placement of `p_k`: the variant
/// `-log(exp(-zeta_k)/p_k + exp(-zeta_0))`, which differs by a `log p_k`
/// shift, also satisfies the argmax constraint but its coordinates are no
/// longer marginally standard Gumbel — the statistical suite in
/// [`crate::harness`] tells the two apart.
pub fn posterior_gumbel(probs: &ProbVector, x: usize, rng: &mut impl Rng) -> Result<GumbelVector> {
    let zeta0 = gumbel_draw(rng);
    let zetas: Vec<f64> = (0..probs.len()).map(|_| gumbel_draw(rng)).collect();
    posterior_gumbel_from_aux(probs, x, zeta0, &zetas)
}

/// Deterministic core of [`posterior_gumbel`], taking the auxiliary Gumbel
/// draws explicitly. Exposed so hand-computed cases and corrupted variants
/// can be evaluated directly.
pub fn posterior_gumbel_from_aux(
    probs: &ProbVector,
    x: usize,
    zeta0: f64,
    zetas: &[f64],
) -> Result<GumbelVector> {
    if zetas.len() != probs.len() {
        return Err(GdlError::LengthMismatch {
            expected: probs.len(),
            got: zetas.len(),
        });
    }
    if x >= probs.len() {
        return Err(GdlError::Config(format!(
            "conditioned index {x} out of range for vocabulary {}",
            probs.len()
        )));
    }
    let px = probs[x];
    if px <= 0.0 {
        return Err(GdlError::ZeroProbability { token: x });
    }
    let mut xi: Vec<f64> = probs
        .iter()
        .zip(zetas.iter())
        .map(|(&p, &z)| -logaddexp(-z, p.ln() - zeta0))
        .collect();
    xi[x] = zeta0 - px.ln();
    GumbelVector::new(xi)
}

/// Scales every noise entry by the temperature: `xi -> tau * xi`.
pub fn calibrate(noise: &GumbelVector, tau: Temperature) -> GumbelVector {
    GumbelVector(noise.iter().map(|x| tau.value() * x).collect())
}

/// Softmax-normalizes a noise vector into a conditioning signal. Monotone,
/// so the argmax index survives.
pub fn normalize_condition(noise: &GumbelVector) -> ConditionVector {
    ConditionVector(softmax(noise.values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::vecmath::{mean, variance};

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    const GUMBEL_VAR: f64 = 1.644_934_066_848_226_4; // pi^2 / 6

    #[test]
    fn gumbel_quantiles_match_closed_form() {
        // -log(-log u) at u = 1/2 and u = 1/e.
        let at_half = -(-0.5f64.ln()).ln();
        assert!((at_half - 0.366_512_920_581_664_35).abs() < 1e-15);
        let at_inv_e = -(-(-1.0f64).exp().ln()).ln();
        assert!(at_inv_e.abs() < 1e-12);
    }

    #[test]
    fn gumbel_cdf_frozen_values() {
        assert!((gumbel_cdf(0.0) - 0.367_879_441_171_442_33).abs() < 1e-15);
        assert!((gumbel_cdf(50.0) - 1.0).abs() < 1e-12);
        assert!((gumbel_cdf(0.366_512_920_581_664_35) - 0.5).abs() < 1e-6);
        assert!(gumbel_cdf(-6.6) < 1e-300 + 1e-12);
    }

    #[test]
    fn gumbel_cdf_inverts_the_sampler() {
        // F(-log(-log u)) = u for u away from the clamp boundaries.
        for i in 1..1000 {
            let u = i as f64 / 1000.0;
            let xi = -(-u.ln()).ln();
            assert!(
                (gumbel_cdf(xi) - u).abs() < 1e-9,
                "round trip failed at u = {u}"
            );
        }
    }

    #[test]
    fn sample_gumbel_moments_match_theory() {
        let mut rng = substream(11, "gumbel-moments", &[]);
        let draws: Vec<f64> = (0..1_000_000).map(|_| gumbel_draw(&mut rng)).collect();
        let m = mean(&draws);
        let v = variance(&draws);
        assert!(
            (m - EULER_GAMMA).abs() < 0.005,
            "mean {m} vs Euler-Mascheroni {EULER_GAMMA}"
        );
        assert!(
            (v - GUMBEL_VAR).abs() < 0.02,
            "variance {v} vs {GUMBEL_VAR}"
        );
        assert!(draws.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn gumbel_max_breaks_ties_toward_lowest_index() {
        let l = LogitVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        let noise = GumbelVector::new(vec![0.5, 0.5, 0.2]).unwrap();
        assert_eq!(gumbel_max(&l, &noise).unwrap(), 0);
    }

    #[test]
    fn gumbel_max_rejects_length_mismatch() {
        let l = LogitVector::new(vec![1.0, 2.0]).unwrap();
        let noise = GumbelVector::new(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            gumbel_max(&l, &noise),
            Err(GdlError::LengthMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn sample_categorical_tracks_softmax_frequencies() {
        let logits = LogitVector::new(vec![3.0f64.ln(), 0.0]).unwrap();
        let mut rng = substream(12, "categorical-freq", &[]);
        let n = 40_000;
        let hits = (0..n)
            .filter(|_| sample_categorical(&logits, &mut rng).0 == 0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "frequency {freq} vs 0.75");
    }

    #[test]
    fn posterior_hand_example_two_categories() {
        // p = (1/2, 1/2), x = 0, zeta_0 = zeta_1 = zeta_2 = 0:
        //   xi_0 = 0 - log(1/2) = log 2
        //   xi_1 = -log(e^0 + 1/2 * e^0) = -log(3/2)
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let xi = posterior_gumbel_from_aux(&p, 0, 0.0, &[0.0, 0.0]).unwrap();
        assert!((xi[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((xi[1] + 1.5_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn posterior_single_category_returns_zeta0() {
        let p = ProbVector::new(vec![1.0]).unwrap();
        let xi = posterior_gumbel_from_aux(&p, 0, 0.7, &[9.9]).unwrap();
        assert_eq!(xi.values(), &[0.7]);
    }

    #[test]
    fn posterior_rejects_zero_probability_outcome() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let mut rng = substream(13, "posterior-zero", &[]);
        assert!(matches!(
            posterior_gumbel(&p, 1, &mut rng),
            Err(GdlError::ZeroProbability { token: 1 })
        ));
    }

    #[test]
    fn posterior_zero_probability_loser_gets_fresh_gumbel() {
        // p_k = 0 reduces the losing formula to xi_k = zeta_k.
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let xi = posterior_gumbel_from_aux(&p, 0, 0.3, &[0.0, 1.25]).unwrap();
        assert!((xi[1] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn posterior_always_places_argmax_on_outcome() {
        let mut rng = substream(14, "posterior-argmax", &[]);
        for trial in 0..10_000 {
            let v = 2 + (trial % 7);
            let logits =
                LogitVector::new((0..v).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect())
                    .unwrap();
            let probs = ProbVector::from_logits(&logits);
            let (x, _) = sample_categorical(&logits, &mut rng);
            let xi = posterior_gumbel(&probs, x, &mut rng).unwrap();
            let log_p = LogitVector::new(probs.ln()).unwrap();
            let winner = gumbel_max(&log_p, &xi).unwrap();
            assert_eq!(winner, x, "argmax moved off the conditioned outcome");
            // Strict dominance of the winning score.
            let win_score = log_p[x] + xi[x];
            for k in 0..v {
                if k != x {
                    assert!(
                        win_score > log_p[k] + xi[k],
                        "non-strict margin at trial {trial}"
                    );
                }
            }
        }
    }

    #[test]
    fn posterior_survives_extreme_probabilities() {
        // A winner at probability 1e-12 must neither overflow nor lose.
        let tiny = 1e-12;
        let p = ProbVector::new(vec![1.0 - tiny, tiny]).unwrap();
        let mut rng = substream(15, "posterior-extreme", &[]);
        for _ in 0..1000 {
            let xi = posterior_gumbel(&p, 1, &mut rng).unwrap();
            assert!(xi.iter().all(|v| v.is_finite()));
            let log_p = LogitVector::new(p.ln()).unwrap();
            assert_eq!(gumbel_max(&log_p, &xi).unwrap(), 1);
        }
    }

    #[test]
    fn calibrate_at_unit_temperature_is_bitwise_identity() {
        let xi = GumbelVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(calibrate(&xi, Temperature::unit()), xi);
        let half = Temperature::new(0.5).unwrap();
        assert_eq!(calibrate(&xi, half).values(), &[0.5, 1.0, 1.5]);
    }

    #[test]
    fn calibrated_variance_shrinks_by_tau_squared() {
        let mut rng = substream(16, "calibrate-var", &[]);
        let tau = Temperature::inference_default();
        let draws: Vec<f64> = (0..100_000)
            .map(|_| tau.value() * gumbel_draw(&mut rng))
            .collect();
        let expected = 0.85 * 0.85 * GUMBEL_VAR;
        assert!(
            (variance(&draws) - expected).abs() < 0.05,
            "variance {} vs {expected}",
            variance(&draws)
        );
    }

    #[test]
    fn temperature_rejects_nonpositive_values() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert!(Temperature::new(f64::INFINITY).is_err());
    }

    #[test]
    fn normalize_condition_hand_values_and_argmax() {
        let xi = GumbelVector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(normalize_condition(&xi).values(), &[0.5, 0.5]);

        let xi = GumbelVector::new(vec![0.0, 3.0f64.ln()]).unwrap();
        let c = normalize_condition(&xi);
        assert!((c[0] - 0.25).abs() < 1e-15);
        assert!((c[1] - 0.75).abs() < 1e-15);

        let mut rng = substream(17, "normalize-argmax", &[]);
        for _ in 0..1000 {
            let xi = sample_gumbel(&mut rng, 6);
            let c = normalize_condition(&xi);
            assert_eq!(
                crate::vecmath::argmax(c.values()),
                crate::vecmath::argmax(xi.values())
            );
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prob_vector_validates_simplex() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.25; 4]).is_ok());
    }
}
