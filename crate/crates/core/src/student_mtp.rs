//! Multi-token-prediction heads over a frozen backbone, with optional noise
//! conditioning, plus typical-acceptance speculative decoding.
//!
//! Head 0 is the backbone's own output head and is never trained. Each
//! trained head `k >= 1` predicts the token `k` steps beyond the backbone's
//! next-token target from the same hidden state: with `u = h +
//! proj(condition)`, its logits are `(SiLU(u @ w1) + u) @ w2`. Initializing
//! `w1 = proj = 0` and `w2` as a copy of the backbone's head makes every
//! head's initial prediction bit-identical to the backbone's.
//!
//! Speculative decoding proposes a block of `1 + k` greedy tokens (head 0
//! plus each trained head), then verifies them left to right against the
//! backbone's true conditionals with the typical-acceptance rule; a proposal
//! is only verified if every earlier proposal in the block was accepted.

use crate::error::GdlError;
use crate::extraction::parallel_extract;
use crate::gumbel::{gumbel_draw, ProbVector};
use crate::nn::{
    self,
    adam::{adam_step, AdamConfig, AdamState},
    checkpoint::{pack, unpack_into, Checkpoint},
    ParamSet, Tensor, TrainConfig, TrainLogRow,
};
use crate::rng::{mix_seed, substream, NoiseStreams};
use crate::teacher::{NeuralTeacher, TeacherModel, TokenSequence};
use crate::vecmath::{argmax, entropy, softmax};
use crate::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// A backbone usable for multi-token prediction: a frozen language model
/// that exposes the hidden states feeding its output head.
pub trait MtpBackbone: TeacherModel {
    fn hidden_dim(&self) -> usize;
    /// One hidden row per input position; row `t` is the state that the
    /// output head turns into logits for the token at `t + 1`.
    fn hidden_states(&self, tokens: &[usize]) -> Vec<Vec<f64>>;
    /// The output head, `[d_model, vocab]`.
    fn output_weights(&self) -> &Tensor;
}

impl MtpBackbone for NeuralTeacher {
    fn hidden_dim(&self) -> usize {
        self.arch.d_model
    }

    fn hidden_states(&self, tokens: &[usize]) -> Vec<Vec<f64>> {
        self.hidden_states(tokens)
    }

    fn output_weights(&self) -> &Tensor {
        &self.params.w_out
    }
}

/// Weights of one trained head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[d_model, d_model]`.
    pub w1: Tensor,
    /// `[d_model, vocab]`.
    pub w2: Tensor,
    /// Condition projection, `[vocab, d_model]`.
    pub p_cond: Tensor,
}

/// Head 0 (a frozen copy of the backbone's output head) plus the trained
/// heads for offsets `1..=heads.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtpHeads {
    pub d_model: usize,
    pub vocab: usize,
    /// Frozen copy of the backbone head; defines head 0. Its gradient is
    /// never computed, so optimizer steps leave it bit-identical.
    pub w_head0: Tensor,
    pub heads: Vec<HeadParams>,
    pub seed: u64,
}

pub const MTP_CHECKPOINT_KIND: &str = "mtp-heads";

impl MtpHeads {
    /// Heads aligned with the backbone: `w2` copies the backbone's output
    /// head while `w1` and the condition projection start at zero, so every
    /// head initially reproduces the backbone's logits bit for bit.
    pub fn init(
        backbone: &(impl MtpBackbone + ?Sized),
        n_heads: usize,
        seed: u64,
    ) -> Result<MtpHeads> {
        if n_heads == 0 {
            return Err(GdlError::Config(
                "at least one trained head is required".into(),
            ));
        }
        let d = backbone.hidden_dim();
        let v = backbone.vocab_size();
        let w_out = backbone.output_weights();
        if w_out.shape != [d, v] {
            return Err(GdlError::Config(format!(
                "backbone output head has shape {:?}, expected [{d}, {v}]",
                w_out.shape
            )));
        }
        Ok(MtpHeads {
            d_model: d,
            vocab: v,
            w_head0: w_out.clone(),
            heads: (0..n_heads)
                .map(|_| HeadParams {
                    w1: Tensor::zeros(&[d, d]),
                    w2: w_out.clone(),
                    p_cond: Tensor::zeros(&[v, d]),
                })
                .collect(),
            seed,
        })
    }

    /// Total proposal block length: head 0 plus the trained heads.
    pub fn block_len(&self) -> usize {
        1 + self.heads.len()
    }

    pub fn zeros_like(&self) -> MtpHeads {
        MtpHeads {
            d_model: self.d_model,
            vocab: self.vocab,
            w_head0: Tensor::zeros(&self.w_head0.shape),
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    w1: Tensor::zeros(&h.w1.shape),
                    w2: Tensor::zeros(&h.w2.shape),
                    p_cond: Tensor::zeros(&h.p_cond.shape),
                })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn accumulate(&mut self, other: &MtpHeads) {
        self.w_head0.add_assign(&other.w_head0);
        for (a, b) in self.heads.iter_mut().zip(other.heads.iter()) {
            a.w1.add_assign(&b.w1);
            a.w2.add_assign(&b.w2);
            a.p_cond.add_assign(&b.p_cond);
        }
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        let arch = serde_json::json!({
            "d_model": self.d_model,
            "vocab": self.vocab,
            "n_heads": self.heads.len(),
        });
        pack(MTP_CHECKPOINT_KIND, self.seed, arch, self, adam)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<MtpHeads> {
        if ckpt.kind != MTP_CHECKPOINT_KIND {
            return Err(GdlError::CheckpointFormat(format!(
                "expected a {MTP_CHECKPOINT_KIND} checkpoint, found {}",
                ckpt.kind
            )));
        }
        let field = |name: &str| -> Result<usize> {
            ckpt.arch
                .get(name)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| GdlError::CheckpointFormat(format!("missing field {name}")))
        };
        let (d, v, n) = (field("d_model")?, field("vocab")?, field("n_heads")?);
        let mut heads = MtpHeads {
            d_model: d,
            vocab: v,
            w_head0: Tensor::zeros(&[d, v]),
            heads: (0..n)
                .map(|_| HeadParams {
                    w1: Tensor::zeros(&[d, d]),
                    w2: Tensor::zeros(&[d, v]),
                    p_cond: Tensor::zeros(&[v, d]),
                })
                .collect(),
            seed: ckpt.seed,
        };
        unpack_into(ckpt, &mut heads)?;
        Ok(heads)
    }
}

impl ParamSet for MtpHeads {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["w_head0".to_string()];
        for k in 1..=self.heads.len() {
            names.push(format!("head{k}.w1"));
            names.push(format!("head{k}.w2"));
            names.push(format!("head{k}.p_cond"));
        }
        names
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        if name == "w_head0" {
            return Some(&self.w_head0);
        }
        let (head, field) = name.strip_prefix("head")?.split_once('.')?;
        let k: usize = head.parse().ok()?;
        let h = self.heads.get(k.checked_sub(1)?)?;
        match field {
            "w1" => Some(&h.w1),
            "w2" => Some(&h.w2),
            "p_cond" => Some(&h.p_cond),
            _ => None,
        }
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == "w_head0" {
            return Some(&mut self.w_head0);
        }
        let (head, field) = name.strip_prefix("head")?.split_once('.')?;
        let k: usize = head.parse().ok()?;
        let h = self.heads.get_mut(k.checked_sub(1)?)?;
        match field {
            "w1" => Some(&mut h.w1),
            "w2" => Some(&mut h.w2),
            "p_cond" => Some(&mut h.p_cond),
            _ => None,
        }
    }
}

/// Logits of head `index` (0 = the frozen backbone head) from hidden state
/// `h` and an optional simplex condition vector.
fn head_logits(heads: &MtpHeads, index: usize, h: &[f64], condition: Option<&[f64]>) -> Vec<f64> {
    if index == 0 {
        return nn::linear(h, &heads.w_head0);
    }
    let head = &heads.heads[index - 1];
    let mut u = h.to_vec();
    if let Some(c) = condition {
        debug_assert_eq!(c.len(), heads.vocab);
        for (k, &ck) in c.iter().enumerate() {
            for (ui, w) in u.iter_mut().zip(head.p_cond.row(k).iter()) {
                *ui += ck * w;
            }
        }
    }
    let a = nn::linear(&u, &head.w1);
    let z: Vec<f64> = a
        .iter()
        .zip(u.iter())
        .map(|(&ai, &ui)| nn::silu(ai) + ui)
        .collect();
    nn::linear(&z, &head.w2)
}

/// All heads' logits from one hidden state: `[0]` is the backbone head,
/// `[k]` the trained head for offset `k`. `conditions` carries one optional
/// simplex vector per trained head.
pub fn heads_forward(
    heads: &MtpHeads,
    h: &[f64],
    conditions: &[Option<Vec<f64>>],
) -> Result<Vec<Vec<f64>>> {
    if h.len() != heads.d_model {
        return Err(GdlError::LengthMismatch {
            expected: heads.d_model,
            got: h.len(),
        });
    }
    if conditions.len() != heads.heads.len() {
        return Err(GdlError::LengthMismatch {
            expected: heads.heads.len(),
            got: conditions.len(),
        });
    }
    for c in conditions.iter().flatten() {
        if c.len() != heads.vocab {
            return Err(GdlError::LengthMismatch {
                expected: heads.vocab,
                got: c.len(),
            });
        }
    }
    let mut out = vec![head_logits(heads, 0, h, None)];
    for (k, cond) in conditions.iter().enumerate() {
        out.push(head_logits(heads, k + 1, h, cond.as_deref()));
    }
    Ok(out)
}

/// One training example for a trained head: a frozen hidden state, the head
/// it feeds, the token that head should predict, and an optional condition.
#[derive(Debug, Clone)]
pub struct HeadExample {
    pub hidden: Vec<f64>,
    /// 1-based trained-head index (= prediction offset beyond next-token).
    pub head: usize,
    pub target: usize,
    /// Simplex condition vector (softmax of the noise at the target).
    pub condition: Option<Vec<f64>>,
}

/// Mean cross-entropy of the trained heads over a fixed example set. Pure.
pub fn mtp_loss(heads: &MtpHeads, examples: &[HeadExample]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|ex| {
            let logits = head_logits(heads, ex.head, &ex.hidden, ex.condition.as_deref());
            nn::softmax_cross_entropy(&logits, ex.target).0
        })
        .sum();
    total / examples.len() as f64
}

/// Loss and gradients for [`mtp_loss`]. The hidden states are inputs, not
/// parameters, so nothing flows back into the backbone.
pub fn mtp_grads(heads: &MtpHeads, examples: &[HeadExample]) -> (f64, MtpHeads) {
    let mut grads = heads.zeros_like();
    let scale = 1.0 / examples.len() as f64;
    let mut total = 0.0;
    for ex in examples {
        let head = &heads.heads[ex.head - 1];
        let mut u = ex.hidden.clone();
        if let Some(c) = &ex.condition {
            for (k, &ck) in c.iter().enumerate() {
                for (ui, w) in u.iter_mut().zip(head.p_cond.row(k).iter()) {
                    *ui += ck * w;
                }
            }
        }
        let a = nn::linear(&u, &head.w1);
        let z: Vec<f64> = a
            .iter()
            .zip(u.iter())
            .map(|(&ai, &ui)| nn::silu(ai) + ui)
            .collect();
        let logits = nn::linear(&z, &head.w2);
        let (loss, mut d_logits) = nn::softmax_cross_entropy(&logits, ex.target);
        total += loss;
        for d in d_logits.iter_mut() {
            *d *= scale;
        }

        let g = &mut grads.heads[ex.head - 1];
        nn::linear_dw(&z, &d_logits, &mut g.w2);
        let d_z = nn::linear_dx(&head.w2, &d_logits);
        let d_a: Vec<f64> = d_z
            .iter()
            .zip(a.iter())
            .map(|(&dz, &ai)| dz * nn::silu_grad(ai))
            .collect();
        nn::linear_dw(&u, &d_a, &mut g.w1);
        let mut d_u = nn::linear_dx(&head.w1, &d_a);
        for (du, &dz) in d_u.iter_mut().zip(d_z.iter()) {
            *du += dz; // residual branch
        }
        if let Some(c) = &ex.condition {
            for (k, &ck) in c.iter().enumerate() {
                for (gp, &du) in g.p_cond.row_mut(k).iter_mut().zip(d_u.iter()) {
                    *gp += ck * du;
                }
            }
        }
    }
    (total * scale, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtpTrainConfig {
    pub optim: TrainConfig,
    /// Condition each head on extracted noise at its target position.
    pub conditioned: bool,
    pub n_heads: usize,
}

impl Default for MtpTrainConfig {
    fn default() -> Self {
        MtpTrainConfig {
            optim: TrainConfig::default(),
            conditioned: true,
            n_heads: 3,
        }
    }
}

/// Builds the per-sequence training examples for all trained heads.
pub fn sequence_examples(
    hidden: &[Vec<f64>],
    seq: &[usize],
    n_heads: usize,
    noise: Option<&[crate::gumbel::GumbelVector]>,
) -> Vec<HeadExample> {
    let len = seq.len();
    let mut examples = Vec::new();
    for k in 1..=n_heads {
        for (t, hid) in hidden.iter().enumerate().take(len.saturating_sub(k + 1)) {
            let target_pos = t + 1 + k;
            examples.push(HeadExample {
                hidden: hid.clone(),
                head: k,
                target: seq[target_pos],
                condition: noise.map(|n| softmax(n[target_pos].values())),
            });
        }
    }
    examples
}

/// Trains the heads against a frozen backbone by cross-entropy at offsets
/// `1..=n_heads`. In the conditioned arm each example also sees the softmax
/// of the posterior noise extracted at its target position (one
/// whole-sequence extraction per sequence per epoch); the baseline arm sees
/// no conditioning signal. The backbone is never mutated. Single-threaded
/// and bit-reproducible for equal (config, seed).
pub fn train_heads(
    backbone: &(impl MtpBackbone + ?Sized),
    corpus: &[TokenSequence],
    cfg: &MtpTrainConfig,
) -> Result<(MtpHeads, Vec<TrainLogRow>)> {
    if corpus.is_empty() {
        return Err(GdlError::EmptyCorpus);
    }
    if cfg.optim.epochs == 0 || cfg.optim.batch_size == 0 {
        return Err(GdlError::Config(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let min_len = cfg.n_heads + 2; // at least one example for the deepest head
    for seq in corpus {
        if seq.len() < min_len {
            return Err(GdlError::Config(format!(
                "sequence of length {} has no target for offset {}",
                seq.len(),
                cfg.n_heads
            )));
        }
    }
    let mut heads = MtpHeads::init(backbone, cfg.n_heads, cfg.optim.seed)?;

    // The backbone is frozen, so its hidden states never change; compute
    // them once.
    let hiddens: Vec<Vec<Vec<f64>>> = corpus
        .iter()
        .map(|seq| backbone.hidden_states(seq))
        .collect();

    let mut adam = AdamState::new();
    let mut adam_cfg = AdamConfig::with_lr(cfg.optim.lr);
    let mut log = Vec::new();
    let started = Instant::now();
    let batches_per_epoch = corpus.len().div_ceil(cfg.optim.batch_size);
    let total_steps = cfg.optim.epochs * batches_per_epoch;
    let mut indices: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 0..cfg.optim.epochs {
        let mut shuffle_rng = substream(cfg.optim.seed, "mtp-shuffle", &[epoch as u64]);
        indices.shuffle(&mut shuffle_rng);
        let extract_seed = mix_seed(cfg.optim.seed, "mtp-extract", &[epoch as u64]);

        for (step, chunk) in indices.chunks(cfg.optim.batch_size).enumerate() {
            let mut examples = Vec::new();
            for &idx in chunk {
                let noise = if cfg.conditioned {
                    let streams = NoiseStreams::new(extract_seed, idx as u64);
                    Some(parallel_extract(backbone, &corpus[idx], &streams)?)
                } else {
                    None
                };
                examples.extend(sequence_examples(
                    &hiddens[idx],
                    &corpus[idx],
                    cfg.n_heads,
                    noise.as_deref(),
                ));
            }
            let (loss, grads) = mtp_grads(&heads, &examples);
            if !loss.is_finite() {
                return Err(GdlError::Divergence(format!(
                    "head loss became non-finite at epoch {epoch}, step {step}"
                )));
            }
            adam_cfg.lr = crate::nn::lr_schedule(
                &cfg.optim,
                epoch * batches_per_epoch + step,
                total_steps,
            );
            adam_step(&mut heads, &grads, &mut adam, &adam_cfg);
            log.push(TrainLogRow {
                epoch,
                step,
                loss,
                lr: adam_cfg.lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    Ok((heads, log))
}

/// Mean cross-entropy per trained head over a fixed, seeded evaluation set;
/// index `k - 1` holds offset `k`.
pub fn per_head_losses(
    backbone: &(impl MtpBackbone + ?Sized),
    heads: &MtpHeads,
    corpus: &[TokenSequence],
    conditioned: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = heads.heads.len();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (idx, seq) in corpus.iter().enumerate() {
        let hidden = backbone.hidden_states(seq);
        let noise = if conditioned {
            let streams = NoiseStreams::new(mix_seed(seed, "head-eval", &[]), idx as u64);
            Some(parallel_extract(backbone, seq, &streams)?)
        } else {
            None
        };
        for ex in sequence_examples(&hidden, seq, n, noise.as_deref()) {
            let logits = head_logits(heads, ex.head, &ex.hidden, ex.condition.as_deref());
            sums[ex.head - 1] += nn::softmax_cross_entropy(&logits, ex.target).0;
            counts[ex.head - 1] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| s / c as f64)
        .collect())
}

/// The typical-acceptance rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypicalAcceptParams {
    /// Hard probability threshold.
    pub epsilon: f64,
    /// Entropy-scale coefficient.
    pub delta: f64,
}

impl Default for TypicalAcceptParams {
    fn default() -> Self {
        TypicalAcceptParams {
            epsilon: 0.1,
            delta: 1.0,
        }
    }
}

impl TypicalAcceptParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GdlError::Config(format!(
                "epsilon {} outside (0, 1)",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(GdlError::Config(format!(
                "delta {} must be positive",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Accepts `token` iff its probability exceeds `min(epsilon,
/// delta * exp(-H(p)))` — lenient where the verifier itself is uncertain,
/// strict where it is confident.
pub fn typical_accept(p: &ProbVector, token: usize, params: &TypicalAcceptParams) -> bool {
    let h = entropy(p.values());
    p.values()[token] > params.epsilon.min(params.delta * (-h).exp())
}

/// Aggregated speculative-decoding statistics. `attempts[k]` counts trials
/// in which head `k`'s proposal was verified (all earlier proposals
/// accepted); `accepts[k]` counts those that passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub trials: usize,
    pub attempts: Vec<usize>,
    pub accepts: Vec<usize>,
    pub mean_accepted_len: f64,
}

impl AcceptanceStats {
    /// Per-head conditional acceptance rate (0 where a head was never
    /// verified).
    pub fn conditional_rates(&self) -> Vec<f64> {
        self.attempts
            .iter()
            .zip(self.accepts.iter())
            .map(|(&a, &acc)| if a == 0 { 0.0 } else { acc as f64 / a as f64 })
            .collect()
    }

    /// Mean accepted length recomputed from the conditional rates:
    /// `sum_k prod_{j<=k} rate_j`.
    pub fn accepted_length_from_rates(&self) -> f64 {
        let rates = self.conditional_rates();
        let mut total = 0.0;
        let mut through = 1.0;
        for r in rates {
            through *= r;
            total += through;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtpEvalConfig {
    pub trials: usize,
    /// Prompt lengths are drawn uniformly from `1..=max_prompt`; the caller
    /// must keep `max_prompt + block length` within the backbone's context.
    pub max_prompt: usize,
    pub accept: TypicalAcceptParams,
    /// Calibration temperature for the fresh prior noise conditioning the
    /// heads; ignored in the unconditioned arm.
    pub tau: f64,
    pub conditioned: bool,
    pub seed: u64,
}

impl Default for MtpEvalConfig {
    fn default() -> Self {
        MtpEvalConfig {
            trials: 500,
            max_prompt: 8,
            accept: TypicalAcceptParams::default(),
            tau: 0.85,
            conditioned: true,
            seed: 0,
        }
    }
}

/// Runs speculative-decoding trials: each takes a corpus prefix as prompt,
/// proposes a block greedily from the heads (conditioned on fresh prior
/// noise in the conditioned arm), and verifies it left to right against the
/// backbone's exact conditionals under typical acceptance, stopping at the
/// first rejection. Trials run concurrently on independent noise streams.
pub fn evaluate_acceptance(
    backbone: &(impl MtpBackbone + Sync + ?Sized),
    heads: &MtpHeads,
    prompts: &[TokenSequence],
    cfg: &MtpEvalConfig,
) -> Result<AcceptanceStats> {
    use rayon::prelude::*;
    if cfg.trials == 0 {
        return Err(GdlError::Config("at least one trial is required".into()));
    }
    if prompts.is_empty() {
        return Err(GdlError::EmptyCorpus);
    }
    cfg.accept.validate()?;
    if !(cfg.tau.is_finite() && cfg.tau > 0.0) {
        return Err(GdlError::Config(format!(
            "calibration temperature {} must be positive",
            cfg.tau
        )));
    }
    let block = heads.block_len();
    let vocab = heads.vocab;

    let per_trial: Vec<Result<Vec<bool>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = substream(cfg.seed, "mtp-trial", &[trial as u64]);
            let seq = &prompts[rng.random_range(0..prompts.len())];
            let longest = cfg.max_prompt.min(seq.len().saturating_sub(1)).max(1);
            let m = rng.random_range(1..=longest);
            let prompt = &seq[..m];

            let conditions: Vec<Option<Vec<f64>>> = (0..heads.heads.len())
                .map(|_| {
                    if cfg.conditioned {
                        let xi: Vec<f64> = (0..vocab)
                            .map(|_| cfg.tau * gumbel_draw(&mut rng))
                            .collect();
                        Some(softmax(&xi))
                    } else {
                        None
                    }
                })
                .collect();

            let hidden = backbone.hidden_states(prompt);
            let all_logits =
                heads_forward(heads, hidden.last().expect("nonempty prompt"), &conditions)?;
            let proposals: Vec<usize> = all_logits.iter().map(|l| argmax(l)).collect();

            // One causal pass over prompt + block yields every conditional
            // needed for verification.
            let mut full = prompt.to_vec();
            full.extend_from_slice(&proposals);
            let verify = backbone.forward_sequence(&full);
            let mut accepted = vec![false; block];
            for (j, &token) in proposals.iter().enumerate() {
                let p = ProbVector::from_logits(&verify[m + j]);
                if typical_accept(&p, token, &cfg.accept) {
                    accepted[j] = true;
                } else {
                    break;
                }
            }
            Ok(accepted)
        })
        .collect();

    let mut attempts = vec![0usize; block];
    let mut accepts = vec![0usize; block];
    let mut total_len = 0usize;
    for trial in per_trial {
        let accepted = trial?;
        for (k, &ok) in accepted.iter().enumerate() {
            attempts[k] += 1;
            if ok {
                accepts[k] += 1;
                total_len += 1;
            } else {
                break;
            }
        }
    }
    Ok(AcceptanceStats {
        trials: cfg.trials,
        attempts,
        accepts,
        mean_accepted_len: total_len as f64 / cfg.trials as f64,
    })
}
