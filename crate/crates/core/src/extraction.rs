//! Noise extraction: recovering per-position Gumbel vectors that explain a
//! teacher's samples, and packaging them as training triplets.
//!
//! Two extraction modes produce the same joint law:
//!
//! * **Sequential** — sample the teacher position by position via perturbed
//!   argmax and keep the noise that was drawn anyway.
//! * **Parallel** — given a finished sequence, run one whole-sequence teacher
//!   pass and draw each position's noise from the posterior of noise given
//!   the realized token. Each position uses its own counter-derived RNG
//!   stream, so results are independent of evaluation order and thread
//!   count.
//!
//! Replaying extracted noise through the teacher's perturbed argmax
//! reconstructs the original sequence exactly — the crate's central
//! consistency identity, enforced in tests and in the acceptance suite.

use crate::error::GdlError;
use crate::gumbel::{gumbel_max, posterior_gumbel, sample_categorical, GumbelVector, ProbVector};
use crate::rng::NoiseStreams;
use crate::teacher::{TeacherModel, TokenSequence, EOS};
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Per-position noise aligned with a [`TokenSequence`].
pub type GumbelSequence = Vec<GumbelVector>;

/// Samples a sequence from the teacher and keeps the noise that produced it.
/// Stops after emitting EOS or on reaching `max_len` tokens.
pub fn sequential_extract<T, R>(
    teacher: &T,
    max_len: usize,
    rng: &mut R,
) -> (TokenSequence, GumbelSequence)
where
    T: TeacherModel + ?Sized,
    R: Rng,
{
    assert!(max_len >= 1);
    let mut x = Vec::new();
    let mut noise = Vec::new();
    while x.len() < max_len {
        let (tok, xi) = sample_categorical(&teacher.logits(&x), rng);
        x.push(tok);
        noise.push(xi);
        if tok == EOS {
            break;
        }
    }
    (x, noise)
}

/// Like [`sequential_extract`] but always runs to exactly `len` positions,
/// sampling through and past EOS — for fixed-length training pairs.
pub fn sequential_extract_to_len<T, R>(
    teacher: &T,
    len: usize,
    rng: &mut R,
) -> (TokenSequence, GumbelSequence)
where
    T: TeacherModel + ?Sized,
    R: Rng,
{
    assert!(len >= 1);
    let mut x = Vec::with_capacity(len);
    let mut noise = Vec::with_capacity(len);
    for _ in 0..len {
        let (tok, xi) = sample_categorical(&teacher.logits(&x), rng);
        x.push(tok);
        noise.push(xi);
    }
    (x, noise)
}

/// Draws posterior noise for every position of an existing sequence from one
/// whole-sequence teacher pass. Position `i` uses the stream
/// `streams.position(i)`, so the result is identical whether positions are
/// processed in order, in reverse, or across threads.
///
/// Fails with [`GdlError::ExtractionAt`] if some position's realized token
/// has zero probability under the teacher — such a sequence cannot have been
/// sampled from it.
pub fn parallel_extract<T>(
    teacher: &T,
    x: &[usize],
    streams: &NoiseStreams,
) -> Result<GumbelSequence>
where
    T: TeacherModel + ?Sized,
{
    let rows = teacher.forward_sequence(x);
    debug_assert_eq!(rows.len(), x.len());
    x.iter()
        .enumerate()
        .map(|(i, &tok)| {
            let probs = ProbVector::from_logits(&rows[i]);
            let mut rng = streams.position(i);
            posterior_gumbel(&probs, tok, &mut rng).map_err(|e| GdlError::ExtractionAt {
                position: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Feeds noise back through the teacher's perturbed argmax, one position at
/// a time. For noise produced by either extraction mode on this teacher, the
/// result equals the original sequence exactly.
pub fn replay<T>(teacher: &T, noise: &[GumbelVector]) -> Result<TokenSequence>
where
    T: TeacherModel + ?Sized,
{
    let mut x = Vec::with_capacity(noise.len());
    for xi in noise {
        let tok = gumbel_max(&teacher.logits(&x), xi)?;
        x.push(tok);
    }
    Ok(x)
}

/// How a training example chooses which positions to mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRule {
    /// Each position masked independently with probability `t`.
    Independent,
    /// The sequence is cut into contiguous blocks of `size` positions; each
    /// block is masked as a whole with probability `t`.
    Blocks { size: usize },
}

/// One denoising training example: a partially masked context, the original
/// tokens at the masked positions, and (optionally) the extracted noise
/// there.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationTriplet {
    /// The sequence with masked positions replaced by the mask sentinel
    /// (token id = vocabulary size).
    pub context: TokenSequence,
    /// Masked indices, ascending.
    pub masked: Vec<usize>,
    /// Original tokens at `masked`, aligned.
    pub targets: Vec<usize>,
    /// Extracted noise at `masked`, aligned; `None` trains an unconditioned
    /// denoiser.
    pub noise: Option<Vec<GumbelVector>>,
    /// The mask level this example was drawn at.
    pub t: f64,
}

impl DistillationTriplet {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }
}

fn draw_mask<R: Rng>(len: usize, t: f64, rule: MaskRule, rng: &mut R) -> Vec<bool> {
    match rule {
        MaskRule::Independent => (0..len).map(|_| rng.random::<f64>() < t).collect(),
        MaskRule::Blocks { size } => {
            let mut mask = vec![false; len];
            for block in 0..len / size {
                if rng.random::<f64>() < t {
                    mask[block * size..(block + 1) * size].fill(true);
                }
            }
            mask
        }
    }
}

/// Builds one training triplet: draws `t ~ Uniform(0, 1]`, masks positions
/// per `rule`, and resamples both `t` and the mask until at least one
/// position is masked (an all-visible example carries no training signal).
///
/// Note the conditioning on a nonempty mask biases the average masked
/// fraction above 1/2: for independent masking of `L` positions it is
/// `(L + 1) / (2L)`, noticeable at small `L` and vanishing as `L` grows.
pub fn make_triplet<R: Rng>(
    x: &[usize],
    noise: Option<&GumbelSequence>,
    vocab: usize,
    rule: MaskRule,
    rng: &mut R,
) -> Result<DistillationTriplet> {
    loop {
        // random() is uniform on [0, 1); reflect to (0, 1] so t = 0 (which
        // would loop forever) is impossible and t = 1 is attainable.
        let t = 1.0 - rng.random::<f64>();
        let mask = draw_mask_checked(x.len(), t, rule, rng)?;
        if mask.iter().any(|&m| m) {
            return build_triplet(x, noise, vocab, &mask, t);
        }
    }
}

impl MaskRule {
    fn validate(&self, len: usize) -> Result<()> {
        if let MaskRule::Blocks { size } = *self {
            if size == 0 || !len.is_multiple_of(size) {
                return Err(GdlError::Config(format!(
                    "block size {size} does not evenly divide sequence length {len}"
                )));
            }
        }
        Ok(())
    }
}

fn draw_mask_checked<R: Rng>(len: usize, t: f64, rule: MaskRule, rng: &mut R) -> Result<Vec<bool>> {
    rule.validate(len)?;
    Ok(draw_mask(len, t, rule, rng))
}

/// Deterministic-`t` variant for callers that control the mask level
/// explicitly.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn make_triplet_with_t<R: Rng>(
    x: &[usize],
    noise: Option<&GumbelSequence>,
    vocab: usize,
    rule: MaskRule,
    t: f64,
    rng: &mut R,
) -> Result<DistillationTriplet> {
    loop {
        let mask = draw_mask_checked(x.len(), t, rule, rng)?;
        if mask.iter().any(|&m| m) {
            return build_triplet(x, noise, vocab, &mask, t);
        }
    }
}

fn build_triplet(
    x: &[usize],
    noise: Option<&GumbelSequence>,
    vocab: usize,
    mask: &[bool],
    t: f64,
) -> Result<DistillationTriplet> {
    if x.is_empty() {
        return Err(GdlError::Config("cannot mask an empty sequence".into()));
    }
    if let Some(&bad) = x.iter().find(|&&tok| tok >= vocab) {
        return Err(GdlError::Config(format!(
            "token {bad} outside vocabulary of size {vocab}"
        )));
    }
    if let Some(n) = noise {
        if n.len() != x.len() {
            return Err(GdlError::LengthMismatch {
                expected: x.len(),
                got: n.len(),
            });
        }
    }
    let mask_token = vocab;
    let mut context = x.to_vec();
    let mut masked = Vec::new();
    let mut targets = Vec::new();
    let mut kept_noise = noise.map(|_| Vec::new());
    for (i, &m) in mask.iter().enumerate() {
        if m {
            context[i] = mask_token;
            masked.push(i);
            targets.push(x[i]);
            if let (Some(kept), Some(all)) = (kept_noise.as_mut(), noise) {
                kept.push(all[i].clone());
            }
        }
    }
    Ok(DistillationTriplet {
        context,
        masked,
        targets,
        noise: kept_noise,
        t,
    })
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    tokens: Vec<usize>,
    noise: Vec<Vec<f64>>,
}

/// Writes (sequence, noise) pairs as NDJSON with exact float formatting.
/// Equal inputs give byte-identical dumps.
pub fn dump_pairs<W: Write>(w: &mut W, pairs: &[(TokenSequence, GumbelSequence)]) -> Result<()> {
    for (tokens, noise) in pairs {
        let mut noise_json = String::from("[");
        for (i, xi) in noise.iter().enumerate() {
            if i > 0 {
                noise_json.push(',');
            }
            noise_json.push_str(&crate::io::json_f64_array(xi));
        }
        noise_json.push(']');
        writeln!(
            w,
            "{{\"tokens\":{},\"noise\":{}}}",
            crate::io::json_usize_array(tokens),
            noise_json
        )?;
    }
    Ok(())
}

/// Reads pairs written by [`dump_pairs`], recovering every float bit-exactly.
pub fn load_pairs<R: BufRead>(r: R) -> Result<Vec<(TokenSequence, GumbelSequence)>> {
    let mut pairs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PairRow = serde_json::from_str(&line)?;
        if row.noise.len() != row.tokens.len() {
            return Err(GdlError::LengthMismatch {
                expected: row.tokens.len(),
                got: row.noise.len(),
            });
        }
        let noise = row
            .noise
            .into_iter()
            .map(GumbelVector::new)
            .collect::<Result<GumbelSequence>>()?;
        pairs.push((row.tokens, noise));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gumbel::gumbel_draw;
    use crate::maze::{self, MazeSpec, TOKEN_RIGHT, TOKEN_UP};
    use crate::rng::substream;
    use crate::teacher::{ContextOrder, TabularTeacher, BOS};
    use crate::vecmath::{mean, variance};

    const EULER_MASCHERONI: f64 = 0.5772156649015329;

    fn maze_teacher(cap: usize, seed: u64) -> (MazeSpec, Vec<TokenSequence>, TabularTeacher) {
        let spec = MazeSpec::default();
        let corpus = maze::MazeCorpus::build(&spec, cap, seed).unwrap().sequences;
        let teacher =
            TabularTeacher::from_corpus(&corpus, maze::VOCAB, ContextOrder::Full, 0.0).unwrap();
        (spec, corpus, teacher)
    }

    #[test]
    fn replay_reconstructs_sequentially_extracted_sequences() {
        let (spec, _, teacher) = maze_teacher(400, 21);
        let mut rng = substream(21, "seq-replay", &[]);
        for _ in 0..200 {
            let (x, noise) = sequential_extract(&teacher, spec.padded_len(), &mut rng);
            assert_eq!(replay(&teacher, &noise).unwrap(), x);
        }
    }

    #[test]
    fn replay_reconstructs_parallel_extracted_sequences() {
        let (_, corpus, teacher) = maze_teacher(400, 22);
        for (idx, x) in corpus.iter().enumerate() {
            let streams = NoiseStreams::new(22, idx as u64);
            let noise = parallel_extract(&teacher, x, &streams).unwrap();
            assert_eq!(noise.len(), x.len());
            assert_eq!(
                &replay(&teacher, &noise).unwrap(),
                x,
                "replay broke on sequence {idx}"
            );
        }
    }

    #[test]
    fn parallel_extraction_is_position_order_independent() {
        let (_, corpus, teacher) = maze_teacher(50, 23);
        let x = &corpus[7];
        let streams = NoiseStreams::new(23, 7);
        let forward_order = parallel_extract(&teacher, x, &streams).unwrap();
        // Recompute each position in reverse order from the same streams.
        let rows = teacher.forward_sequence(x);
        for i in (0..x.len()).rev() {
            let probs = ProbVector::from_logits(&rows[i]);
            let mut rng = streams.position(i);
            let xi = posterior_gumbel(&probs, x[i], &mut rng).unwrap();
            for (a, b) in xi.iter().zip(forward_order[i].iter()) {
                assert_eq!(
                    a.to_bits(),
                    b.to_bits(),
                    "position {i} depends on evaluation order"
                );
            }
        }
    }

    #[test]
    fn deterministic_chain_leaves_noise_unconditioned() {
        // A teacher whose every conditional is a point mass: the posterior
        // winner coordinate is plain standard Gumbel (the argmax constraint
        // is vacuous), so pooled winner noise shows standard moments.
        let spec = MazeSpec::default();
        let paths = maze::enumerate_paths(&spec).unwrap();
        let corpus = vec![maze::tokenize_path(&spec, &paths[0])];
        let teacher =
            TabularTeacher::from_corpus(&corpus, maze::VOCAB, ContextOrder::Full, 0.0).unwrap();
        let x = &corpus[0];
        let mut winners = Vec::new();
        for rep in 0..2000 {
            let streams = NoiseStreams::new(24, rep);
            let noise = parallel_extract(&teacher, x, &streams).unwrap();
            for (i, xi) in noise.iter().enumerate() {
                winners.push(xi[x[i]]);
            }
        }
        let m = mean(&winners);
        let v = variance(&winners);
        assert!((m - EULER_MASCHERONI).abs() < 0.05, "winner mean {m}");
        assert!(
            (v - std::f64::consts::PI.powi(2) / 6.0).abs() < 0.1,
            "winner variance {v}"
        );
    }

    #[test]
    fn single_token_unit_vocabulary_noise_is_the_root_draw() {
        let teacher = TabularTeacher::from_corpus(&[vec![0]], 1, ContextOrder::Full, 0.0).unwrap();
        let streams = NoiseStreams::new(25, 0);
        let noise = parallel_extract(&teacher, &[0], &streams).unwrap();
        assert_eq!(noise.len(), 1);
        assert_eq!(noise[0].len(), 1);
        // With certain probability the winner's noise is the root Gumbel
        // draw itself — the first draw from this position's stream.
        let mut rng = streams.position(0);
        let zeta0 = gumbel_draw(&mut rng);
        assert_eq!(noise[0][0].to_bits(), zeta0.to_bits());
    }

    #[test]
    fn impossible_token_fails_with_position_context() {
        let spec = MazeSpec::default();
        let paths = maze::enumerate_paths(&spec).unwrap();
        let corpus = vec![maze::tokenize_path(&spec, &paths[0])];
        let teacher =
            TabularTeacher::from_corpus(&corpus, maze::VOCAB, ContextOrder::Full, 0.0).unwrap();
        // After BOS the corpus only ever moves right; UP has probability 0.
        let bogus = vec![BOS, TOKEN_UP, TOKEN_RIGHT];
        let streams = NoiseStreams::new(26, 0);
        match parallel_extract(&teacher, &bogus, &streams) {
            Err(GdlError::ExtractionAt {
                position: 1,
                source,
            }) => match *source {
                GdlError::ZeroProbability { token } => assert_eq!(token, TOKEN_UP),
                other => panic!("unexpected inner error {other:?}"),
            },
            other => panic!("expected extraction failure at position 1, got {other:?}"),
        }
    }

    #[test]
    fn full_mask_level_masks_everything() {
        let x: Vec<usize> = (0..12).map(|i| i % 5).collect();
        let mut rng = substream(27, "full-mask", &[]);
        let triplet =
            make_triplet_with_t(&x, None, 5, MaskRule::Independent, 1.0, &mut rng).unwrap();
        assert_eq!(triplet.masked, (0..12).collect::<Vec<_>>());
        assert_eq!(triplet.targets, x);
        assert!(
            triplet.context.iter().all(|&t| t == 5),
            "every position shows the sentinel"
        );
    }

    #[test]
    fn masked_fraction_matches_nonempty_conditioning_bias() {
        // E[|I|] / L over accepted triplets is (L + 1) / (2L): exactly
        // 13/24 at L = 12, and within a hair of 1/2 by L = 512.
        for (len, expected) in [(12usize, 13.0 / 24.0), (512, 513.0 / 1024.0)] {
            let x: Vec<usize> = vec![1; len];
            let mut rng = substream(28, "mask-fraction", &[len as u64]);
            let mut masked_total = 0usize;
            let trials = 20_000;
            for _ in 0..trials {
                let triplet = make_triplet(&x, None, 3, MaskRule::Independent, &mut rng).unwrap();
                assert!(!triplet.masked.is_empty());
                masked_total += triplet.masked.len();
            }
            let fraction = masked_total as f64 / (trials * len) as f64;
            assert!(
                (fraction - expected).abs() < 0.01,
                "L = {len}: masked fraction {fraction}, expected {expected}"
            );
        }
        assert!(
            (513.0 / 1024.0f64 - 0.5).abs() < 0.01,
            "large-L bias sits inside the 0.5 tolerance"
        );
    }

    #[test]
    fn block_masking_masks_whole_blocks_only() {
        let x: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let mut rng = substream(29, "block-mask", &[]);
        for _ in 0..500 {
            let triplet =
                make_triplet(&x, None, 4, MaskRule::Blocks { size: 4 }, &mut rng).unwrap();
            for block in 0..3 {
                let in_block = (0..4)
                    .filter(|j| triplet.masked.contains(&(block * 4 + j)))
                    .count();
                assert!(
                    in_block == 0 || in_block == 4,
                    "block {block} partially masked"
                );
            }
        }
        // One block spanning everything: the only nonempty mask is all-on.
        let triplet = make_triplet(&x, None, 4, MaskRule::Blocks { size: 12 }, &mut rng).unwrap();
        assert_eq!(triplet.masked.len(), 12);
        // A size that does not tile the sequence is a configuration error.
        assert!(matches!(
            make_triplet(&x, None, 4, MaskRule::Blocks { size: 5 }, &mut rng),
            Err(GdlError::Config(_))
        ));
    }

    #[test]
    fn triplet_carries_noise_only_at_masked_positions() {
        let (_, corpus, teacher) = maze_teacher(30, 30);
        let x = &corpus[3];
        let streams = NoiseStreams::new(30, 3);
        let noise = parallel_extract(&teacher, x, &streams).unwrap();
        let mut rng = substream(30, "triplet-noise", &[]);
        let triplet = make_triplet(
            x,
            Some(&noise),
            maze::VOCAB,
            MaskRule::Independent,
            &mut rng,
        )
        .unwrap();
        let kept = triplet.noise.as_ref().unwrap();
        assert_eq!(kept.len(), triplet.masked.len());
        for (slot, &i) in triplet.masked.iter().enumerate() {
            for (a, b) in kept[slot].iter().zip(noise[i].iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(triplet.targets[slot], x[i]);
            assert_eq!(triplet.context[i], maze::VOCAB);
        }
        for (i, &tok) in triplet.context.iter().enumerate() {
            if !triplet.masked.contains(&i) {
                assert_eq!(tok, x[i], "unmasked context must carry the original token");
            }
        }
    }

    #[test]
    fn mismatched_noise_length_is_rejected() {
        let x = vec![0, 1, 2];
        let noise: GumbelSequence = vec![GumbelVector::new(vec![0.1, 0.2, 0.3]).unwrap(); 2];
        let mut rng = substream(31, "triplet-mismatch", &[]);
        assert!(matches!(
            make_triplet(&x, Some(&noise), 3, MaskRule::Independent, &mut rng),
            Err(GdlError::LengthMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn pair_dump_round_trips_bit_exactly() {
        let (spec, _, teacher) = maze_teacher(50, 32);
        let mut rng = substream(32, "dump-pairs", &[]);
        let pairs: Vec<(TokenSequence, GumbelSequence)> = (0..20)
            .map(|_| sequential_extract_to_len(&teacher, spec.padded_len(), &mut rng))
            .collect();
        let mut bytes = Vec::new();
        dump_pairs(&mut bytes, &pairs).unwrap();
        let mut bytes2 = Vec::new();
        dump_pairs(&mut bytes2, &pairs).unwrap();
        assert_eq!(bytes, bytes2);

        let loaded = load_pairs(bytes.as_slice()).unwrap();
        assert_eq!(loaded.len(), pairs.len());
        for ((tx, nx), (ty, ny)) in pairs.iter().zip(loaded.iter()) {
            assert_eq!(tx, ty);
            for (a, b) in nx.iter().zip(ny.iter()) {
                for (p, q) in a.iter().zip(b.iter()) {
                    assert_eq!(p.to_bits(), q.to_bits(), "noise drifted through NDJSON");
                }
            }
        }
    }

    #[test]
    fn fixed_length_extraction_continues_past_eos() {
        let (spec, _, teacher) = maze_teacher(100, 33);
        let mut rng = substream(33, "to-len", &[]);
        let (x, noise) = sequential_extract_to_len(&teacher, spec.padded_len(), &mut rng);
        assert_eq!(x.len(), spec.padded_len());
        assert_eq!(noise.len(), spec.padded_len());
        // The corpus pads with EOS, so the exact table keeps emitting EOS.
        let first_eos = x.iter().position(|&t| t == EOS).unwrap();
        assert!(x[first_eos..].iter().all(|&t| t == EOS));
    }
}
