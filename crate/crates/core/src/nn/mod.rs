//! A small pre-norm transformer with hand-written forward and backward
//! passes, entirely in `f64`.
//!
//! There is no autograd: every layer caches what its backward pass needs, and
//! [`backward`] walks the caches in reverse, producing exact analytic
//! gradients that the checker in [`gradcheck`] verifies against central
//! differences. Attention accumulates per query position over keys in index
//! order, so in causal mode the outputs at a position are bit-identical
//! whether the model sees the prefix alone or the full sequence — the
//! property that lets an autoregressive teacher answer prefix queries from a
//! single whole-sequence pass.
//!
//! Architecture: learned token and absolute position embeddings, pre-norm
//! blocks (LayerNorm, multi-head attention, LayerNorm, SiLU MLP at 4x width),
//! a final LayerNorm, and a zero-initialized output projection — so a fresh
//! model emits exactly uniform logits and its cross-entropy starts at
//! `ln(vocab)`.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;

use crate::error::GdlError;
use crate::Result;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// LayerNorm variance epsilon.
const LN_EPS: f64 = 1e-5;

/// Standard deviation for weight and embedding initialization.
pub const INIT_STD: f64 = 0.02;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let normal = Normal::new(0.0, std).expect("valid normal parameters");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// Shape of a transformer instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Output vocabulary (logit width).
    pub vocab: usize,
    /// Embedding-table rows; `vocab + 1` when a mask sentinel is embedded.
    pub input_vocab: usize,
    /// Maximum sequence length (position-embedding rows).
    pub n_positions: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Causal attention when true, full bidirectional otherwise.
    pub causal: bool,
}

impl ArchConfig {
    /// A causal language model: embeds exactly the output vocabulary.
    pub fn causal_lm(
        vocab: usize,
        n_positions: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
    ) -> Self {
        ArchConfig {
            vocab,
            input_vocab: vocab,
            n_positions,
            d_model,
            n_layers,
            n_heads,
            causal: true,
        }
    }

    /// A bidirectional denoiser: one extra embedding row for the mask
    /// sentinel, whose id is `vocab`.
    pub fn denoiser(
        vocab: usize,
        n_positions: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
    ) -> Self {
        ArchConfig {
            vocab,
            input_vocab: vocab + 1,
            n_positions,
            d_model,
            n_layers,
            n_heads,
            causal: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// The mask sentinel id, when the embedding table has a row for one.
    pub fn mask_token(&self) -> Option<usize> {
        (self.input_vocab > self.vocab).then_some(self.vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.n_positions == 0
        {
            return Err(GdlError::Config(
                "architecture dimensions must be positive".into(),
            ));
        }
        if self.input_vocab < self.vocab {
            return Err(GdlError::Config(format!(
                "input vocabulary {} smaller than output vocabulary {}",
                self.input_vocab, self.vocab
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(GdlError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-block weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc1: Tensor,
    pub w_fc2: Tensor,
}

/// Full parameter set of one transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub w_out: Tensor,
}

/// Named access to every tensor of a parameter set; the basis for the
/// optimizer, the checkpoint codec, and the gradient checker.
pub trait ParamSet {
    fn tensor_names(&self) -> Vec<String>;
    fn tensor(&self, name: &str) -> Option<&Tensor>;
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

const BLOCK_FIELDS: [&str; 10] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_fc1", "w_fc2",
];

impl BlockParams {
    fn field(&self, name: &str) -> Option<&Tensor> {
        match name {
            "ln1_gain" => Some(&self.ln1_gain),
            "ln1_bias" => Some(&self.ln1_bias),
            "w_q" => Some(&self.w_q),
            "w_k" => Some(&self.w_k),
            "w_v" => Some(&self.w_v),
            "w_o" => Some(&self.w_o),
            "ln2_gain" => Some(&self.ln2_gain),
            "ln2_bias" => Some(&self.ln2_bias),
            "w_fc1" => Some(&self.w_fc1),
            "w_fc2" => Some(&self.w_fc2),
            _ => None,
        }
    }

    fn field_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "ln1_gain" => Some(&mut self.ln1_gain),
            "ln1_bias" => Some(&mut self.ln1_bias),
            "w_q" => Some(&mut self.w_q),
            "w_k" => Some(&mut self.w_k),
            "w_v" => Some(&mut self.w_v),
            "w_o" => Some(&mut self.w_o),
            "ln2_gain" => Some(&mut self.ln2_gain),
            "ln2_bias" => Some(&mut self.ln2_bias),
            "w_fc1" => Some(&mut self.w_fc1),
            "w_fc2" => Some(&mut self.w_fc2),
            _ => None,
        }
    }
}

impl ParamSet for Params {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.blocks.len() {
            for field in BLOCK_FIELDS {
                names.push(format!("block{i}.{field}"));
            }
        }
        names.push("ln_f_gain".to_string());
        names.push("ln_f_bias".to_string());
        names.push("w_out".to_string());
        names
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        if let Some(rest) = name.strip_prefix("block") {
            let (idx, field) = rest.split_once('.')?;
            return self.blocks.get(idx.parse::<usize>().ok()?)?.field(field);
        }
        match name {
            "tok_emb" => Some(&self.tok_emb),
            "pos_emb" => Some(&self.pos_emb),
            "ln_f_gain" => Some(&self.ln_f_gain),
            "ln_f_bias" => Some(&self.ln_f_bias),
            "w_out" => Some(&self.w_out),
            _ => None,
        }
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("block") {
            let (idx, field) = rest.split_once('.')?;
            return self
                .blocks
                .get_mut(idx.parse::<usize>().ok()?)?
                .field_mut(field);
        }
        match name {
            "tok_emb" => Some(&mut self.tok_emb),
            "pos_emb" => Some(&mut self.pos_emb),
            "ln_f_gain" => Some(&mut self.ln_f_gain),
            "ln_f_bias" => Some(&mut self.ln_f_bias),
            "w_out" => Some(&mut self.w_out),
            _ => None,
        }
    }
}

impl Params {
    /// Fresh initialization: weights and embeddings `N(0, 0.02^2)`, LayerNorm
    /// gains 1 and biases 0, output projection all zeros.
    pub fn init(cfg: &ArchConfig, rng: &mut impl Rng) -> Params {
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: Tensor::randn(&[d, d], INIT_STD, rng),
                w_k: Tensor::randn(&[d, d], INIT_STD, rng),
                w_v: Tensor::randn(&[d, d], INIT_STD, rng),
                w_o: Tensor::randn(&[d, d], INIT_STD, rng),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_fc1: Tensor::randn(&[d, 4 * d], INIT_STD, rng),
                w_fc2: Tensor::randn(&[4 * d, d], INIT_STD, rng),
            })
            .collect();
        Params {
            tok_emb: Tensor::randn(&[cfg.input_vocab, d], INIT_STD, rng),
            pos_emb: Tensor::randn(&[cfg.n_positions, d], INIT_STD, rng),
            blocks,
            ln_f_gain: Tensor::full(&[d], 1.0),
            ln_f_bias: Tensor::zeros(&[d]),
            w_out: Tensor::zeros(&[d, cfg.vocab]),
        }
    }

    /// Zero tensors of the same shapes; the gradient accumulator.
    pub fn zeros_like(&self) -> Params {
        Params {
            tok_emb: Tensor::zeros(&self.tok_emb.shape),
            pos_emb: Tensor::zeros(&self.pos_emb.shape),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gain: Tensor::zeros(&b.ln1_gain.shape),
                    ln1_bias: Tensor::zeros(&b.ln1_bias.shape),
                    w_q: Tensor::zeros(&b.w_q.shape),
                    w_k: Tensor::zeros(&b.w_k.shape),
                    w_v: Tensor::zeros(&b.w_v.shape),
                    w_o: Tensor::zeros(&b.w_o.shape),
                    ln2_gain: Tensor::zeros(&b.ln2_gain.shape),
                    ln2_bias: Tensor::zeros(&b.ln2_bias.shape),
                    w_fc1: Tensor::zeros(&b.w_fc1.shape),
                    w_fc2: Tensor::zeros(&b.w_fc2.shape),
                })
                .collect(),
            ln_f_gain: Tensor::zeros(&self.ln_f_gain.shape),
            ln_f_bias: Tensor::zeros(&self.ln_f_bias.shape),
            w_out: Tensor::zeros(&self.w_out.shape),
        }
    }

    /// Elementwise accumulation of another gradient set.
    pub fn accumulate(&mut self, other: &Params) {
        self.tok_emb.add_assign(&other.tok_emb);
        self.pos_emb.add_assign(&other.pos_emb);
        for (b, o) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            b.ln1_gain.add_assign(&o.ln1_gain);
            b.ln1_bias.add_assign(&o.ln1_bias);
            b.w_q.add_assign(&o.w_q);
            b.w_k.add_assign(&o.w_k);
            b.w_v.add_assign(&o.w_v);
            b.w_o.add_assign(&o.w_o);
            b.ln2_gain.add_assign(&o.ln2_gain);
            b.ln2_bias.add_assign(&o.ln2_bias);
            b.w_fc1.add_assign(&o.w_fc1);
            b.w_fc2.add_assign(&o.w_fc2);
        }
        self.ln_f_gain.add_assign(&other.ln_f_gain);
        self.ln_f_bias.add_assign(&other.ln_f_bias);
        self.w_out.add_assign(&other.w_out);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `y = x^T W` for row-major `W: [in, out]`.
pub(crate) fn linear(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), n_in);
    let mut y = vec![0.0; n_out];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w.data[i * n_out..(i + 1) * n_out];
        for (yj, wj) in y.iter_mut().zip(row.iter()) {
            *yj += xi * wj;
        }
    }
    y
}

/// Gradient w.r.t. the input of [`linear`].
pub(crate) fn linear_dx(w: &Tensor, dy: &[f64]) -> Vec<f64> {
    let (n_in, n_out) = (w.shape[0], w.shape[1]);
    let mut dx = vec![0.0; n_in];
    for (row, dx_i) in w.data.chunks_exact(n_out).zip(dx.iter_mut()) {
        *dx_i = row.iter().zip(dy.iter()).map(|(w, d)| w * d).sum();
    }
    dx
}

/// Accumulates the weight gradient of [`linear`] into `dw`.
pub(crate) fn linear_dw(x: &[f64], dy: &[f64], dw: &mut Tensor) {
    let n_out = dw.shape[1];
    for (i, &xi) in x.iter().enumerate() {
        let row = &mut dw.data[i * n_out..(i + 1) * n_out];
        for (r, d) in row.iter_mut().zip(dy.iter()) {
            *r += xi * d;
        }
    }
}

struct NormCache {
    /// Normalized inputs before gain/bias, per position.
    xhat: Vec<Vec<f64>>,
    /// Reciprocal standard deviation per position.
    rstd: Vec<f64>,
}

fn layer_norm_forward(x: &[f64], gain: &Tensor, bias: &Tensor) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let out = xhat
        .iter()
        .zip(gain.data.iter().zip(bias.data.iter()))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    (out, xhat, rstd)
}

/// LayerNorm backward for one position. Returns the input gradient and
/// accumulates gain/bias gradients.
fn layer_norm_backward(
    d_out: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &Tensor,
    d_gain: &mut Tensor,
    d_bias: &mut Tensor,
) -> Vec<f64> {
    let d = d_out.len() as f64;
    let mut d_xhat = vec![0.0; d_out.len()];
    for (i, &g) in gain.data.iter().enumerate() {
        d_xhat[i] = d_out[i] * g;
        d_gain.data[i] += d_out[i] * xhat[i];
        d_bias.data[i] += d_out[i];
    }
    let mean_dxhat = d_xhat.iter().sum::<f64>() / d;
    let mean_dxhat_xhat = d_xhat
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / d;
    d_xhat
        .iter()
        .zip(xhat.iter())
        .map(|(dxh, xh)| rstd * (dxh - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}

struct BlockCache {
    ln1: NormCache,
    u1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Attention weights per position, flattened `[head * len + key]`.
    att: Vec<Vec<f64>>,
    /// Concatenated per-head mixes before the output projection.
    mix: Vec<Vec<f64>>,
    ln2: NormCache,
    u2: Vec<Vec<f64>>,
    fc1_pre: Vec<Vec<f64>>,
    fc1_act: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Forward {
    /// Input embeddings before position embeddings were added.
    pub inputs: Vec<Vec<f64>>,
    /// Token ids when the model embedded tokens itself.
    pub tokens: Option<Vec<usize>>,
    blocks: Vec<BlockCache>,
    ln_f: NormCache,
    /// Final-LayerNorm outputs, one row per position.
    pub hidden: Vec<Vec<f64>>,
    /// Output logits, one row per position.
    pub logits: Vec<Vec<f64>>,
}

/// Runs the transformer on caller-built input embeddings (position
/// embeddings are added internally).
pub fn forward_embedded(params: &Params, cfg: &ArchConfig, inputs: Vec<Vec<f64>>) -> Forward {
    let len = inputs.len();
    assert!(
        len > 0 && len <= cfg.n_positions,
        "sequence length {len} outside [1, {}]",
        cfg.n_positions
    );
    let d = cfg.d_model;
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();

    let mut x: Vec<Vec<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            debug_assert_eq!(row.len(), d);
            row.iter()
                .zip(params.pos_emb.row(i).iter())
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for bp in &params.blocks {
        let mut ln1 = NormCache {
            xhat: Vec::with_capacity(len),
            rstd: Vec::with_capacity(len),
        };
        let mut u1 = Vec::with_capacity(len);
        for row in &x {
            let (out, xhat, rstd) = layer_norm_forward(row, &bp.ln1_gain, &bp.ln1_bias);
            u1.push(out);
            ln1.xhat.push(xhat);
            ln1.rstd.push(rstd);
        }
        let q: Vec<Vec<f64>> = u1.iter().map(|u| linear(u, &bp.w_q)).collect();
        let k: Vec<Vec<f64>> = u1.iter().map(|u| linear(u, &bp.w_k)).collect();
        let v: Vec<Vec<f64>> = u1.iter().map(|u| linear(u, &bp.w_v)).collect();

        let mut att = vec![vec![0.0; n_heads * len]; len];
        let mut mix = vec![vec![0.0; d]; len];
        for t in 0..len {
            let limit = if cfg.causal { t + 1 } else { len };
            for h in 0..n_heads {
                let qh = &q[t][h * hd..(h + 1) * hd];
                // Scores over keys 0..limit in index order.
                let mut scores = Vec::with_capacity(limit);
                let mut max_score = f64::NEG_INFINITY;
                for ks in k.iter().take(limit) {
                    let kh = &ks[h * hd..(h + 1) * hd];
                    let z = qh.iter().zip(kh.iter()).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_hd;
                    max_score = max_score.max(z);
                    scores.push(z);
                }
                let mut denom = 0.0;
                for z in scores.iter_mut() {
                    *z = (*z - max_score).exp();
                    denom += *z;
                }
                for (s, e) in scores.iter().enumerate() {
                    let a = e / denom;
                    att[t][h * len + s] = a;
                    let vh = &v[s][h * hd..(h + 1) * hd];
                    for (m, vv) in mix[t][h * hd..(h + 1) * hd].iter_mut().zip(vh.iter()) {
                        *m += a * vv;
                    }
                }
            }
        }

        let mut x_mid = Vec::with_capacity(len);
        for t in 0..len {
            let proj = linear(&mix[t], &bp.w_o);
            x_mid.push(
                x[t].iter()
                    .zip(proj.iter())
                    .map(|(a, b)| a + b)
                    .collect::<Vec<f64>>(),
            );
        }

        let mut ln2 = NormCache {
            xhat: Vec::with_capacity(len),
            rstd: Vec::with_capacity(len),
        };
        let mut u2 = Vec::with_capacity(len);
        for row in &x_mid {
            let (out, xhat, rstd) = layer_norm_forward(row, &bp.ln2_gain, &bp.ln2_bias);
            u2.push(out);
            ln2.xhat.push(xhat);
            ln2.rstd.push(rstd);
        }
        let fc1_pre: Vec<Vec<f64>> = u2.iter().map(|u| linear(u, &bp.w_fc1)).collect();
        let fc1_act: Vec<Vec<f64>> = fc1_pre
            .iter()
            .map(|row| row.iter().map(|&a| silu(a)).collect())
            .collect();
        let mut x_out = Vec::with_capacity(len);
        for t in 0..len {
            let m = linear(&fc1_act[t], &bp.w_fc2);
            x_out.push(
                x_mid[t]
                    .iter()
                    .zip(m.iter())
                    .map(|(a, b)| a + b)
                    .collect::<Vec<f64>>(),
            );
        }

        blocks.push(BlockCache {
            ln1,
            u1,
            q,
            k,
            v,
            att,
            mix,
            ln2,
            u2,
            fc1_pre,
            fc1_act,
        });
        x = x_out;
    }

    let mut ln_f = NormCache {
        xhat: Vec::with_capacity(len),
        rstd: Vec::with_capacity(len),
    };
    let mut hidden = Vec::with_capacity(len);
    for row in &x {
        let (out, xhat, rstd) = layer_norm_forward(row, &params.ln_f_gain, &params.ln_f_bias);
        hidden.push(out);
        ln_f.xhat.push(xhat);
        ln_f.rstd.push(rstd);
    }
    let logits: Vec<Vec<f64>> = hidden.iter().map(|h| linear(h, &params.w_out)).collect();

    Forward {
        inputs,
        tokens: None,
        blocks,
        ln_f,
        hidden,
        logits,
    }
}

/// Runs the transformer on a token sequence via the embedding table.
pub fn forward_tokens(params: &Params, cfg: &ArchConfig, tokens: &[usize]) -> Forward {
    let inputs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            assert!(
                t < cfg.input_vocab,
                "token {t} outside input vocabulary {}",
                cfg.input_vocab
            );
            params.tok_emb.row(t).to_vec()
        })
        .collect();
    let mut fwd = forward_embedded(params, cfg, inputs);
    fwd.tokens = Some(tokens.to_vec());
    fwd
}

/// Exact backward pass. `d_logits` is the loss gradient at every position's
/// logits. Returns parameter gradients and the gradient w.r.t. the input
/// embeddings (pre-position-add). When the forward pass embedded tokens
/// itself, the token-embedding gradient is also routed into `tok_emb`.
pub fn backward(
    params: &Params,
    cfg: &ArchConfig,
    fwd: &Forward,
    d_logits: &[Vec<f64>],
) -> (Params, Vec<Vec<f64>>) {
    let len = fwd.logits.len();
    assert_eq!(d_logits.len(), len);
    let d = cfg.d_model;
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
    let mut grads = params.zeros_like();

    // Head and final norm.
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; len];
    for t in 0..len {
        linear_dw(&fwd.hidden[t], &d_logits[t], &mut grads.w_out);
        let d_hidden = linear_dx(&params.w_out, &d_logits[t]);
        dx[t] = layer_norm_backward(
            &d_hidden,
            &fwd.ln_f.xhat[t],
            fwd.ln_f.rstd[t],
            &params.ln_f_gain,
            &mut grads.ln_f_gain,
            &mut grads.ln_f_bias,
        );
    }

    for (bi, bp) in params.blocks.iter().enumerate().rev() {
        let cache = &fwd.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // MLP path: x_out = x_mid + silu(u2 W1) W2.
        let mut dx_mid: Vec<Vec<f64>> = dx.clone();
        for t in 0..len {
            let d_out = &dx[t];
            let mut d_act = linear_dx(&bp.w_fc2, d_out);
            linear_dw(&cache.fc1_act[t], d_out, &mut gb.w_fc2);
            for (da, &pre) in d_act.iter_mut().zip(cache.fc1_pre[t].iter()) {
                *da *= silu_grad(pre);
            }
            let d_u2 = linear_dx(&bp.w_fc1, &d_act);
            linear_dw(&cache.u2[t], &d_act, &mut gb.w_fc1);
            let d_mid = layer_norm_backward(
                &d_u2,
                &cache.ln2.xhat[t],
                cache.ln2.rstd[t],
                &bp.ln2_gain,
                &mut gb.ln2_gain,
                &mut gb.ln2_bias,
            );
            for (a, b) in dx_mid[t].iter_mut().zip(d_mid.iter()) {
                *a += b;
            }
        }

        // Attention path: x_mid = x_in + mix W_o.
        let mut dq = vec![vec![0.0; d]; len];
        let mut dk = vec![vec![0.0; d]; len];
        let mut dv = vec![vec![0.0; d]; len];
        for t in 0..len {
            let d_mix = linear_dx(&bp.w_o, &dx_mid[t]);
            linear_dw(&cache.mix[t], &dx_mid[t], &mut gb.w_o);
            let limit = if cfg.causal { t + 1 } else { len };
            for h in 0..n_heads {
                let d_mix_h = &d_mix[h * hd..(h + 1) * hd];
                // Softmax backward over this query's attention row.
                let att_row = &cache.att[t][h * len..h * len + limit];
                let mut d_att = vec![0.0; limit];
                for (s, da) in d_att.iter_mut().enumerate() {
                    let vh = &cache.v[s][h * hd..(h + 1) * hd];
                    *da = d_mix_h.iter().zip(vh.iter()).map(|(a, b)| a * b).sum();
                }
                let weighted: f64 = att_row.iter().zip(d_att.iter()).map(|(a, b)| a * b).sum();
                for s in 0..limit {
                    let dz = att_row[s] * (d_att[s] - weighted);
                    let kh = &cache.k[s][h * hd..(h + 1) * hd];
                    let qh = &cache.q[t][h * hd..(h + 1) * hd];
                    for i in 0..hd {
                        dq[t][h * hd + i] += dz * kh[i] * inv_sqrt_hd;
                        dk[s][h * hd + i] += dz * qh[i] * inv_sqrt_hd;
                        dv[s][h * hd + i] += att_row[s] * d_mix_h[i];
                    }
                }
            }
        }

        let mut dx_in = dx_mid;
        for t in 0..len {
            let mut d_u1 = linear_dx(&bp.w_q, &dq[t]);
            linear_dw(&cache.u1[t], &dq[t], &mut gb.w_q);
            let d_u1_k = linear_dx(&bp.w_k, &dk[t]);
            linear_dw(&cache.u1[t], &dk[t], &mut gb.w_k);
            let d_u1_v = linear_dx(&bp.w_v, &dv[t]);
            linear_dw(&cache.u1[t], &dv[t], &mut gb.w_v);
            for i in 0..d {
                d_u1[i] += d_u1_k[i] + d_u1_v[i];
            }
            let d_in = layer_norm_backward(
                &d_u1,
                &cache.ln1.xhat[t],
                cache.ln1.rstd[t],
                &bp.ln1_gain,
                &mut gb.ln1_gain,
                &mut gb.ln1_bias,
            );
            for (a, b) in dx_in[t].iter_mut().zip(d_in.iter()) {
                *a += b;
            }
        }
        dx = dx_in;
    }

    // Position embeddings; token embeddings when tokens were embedded here.
    for (t, dxt) in dx.iter().enumerate().take(len) {
        for (g, v) in grads.pos_emb.row_mut(t).iter_mut().zip(dxt.iter()) {
            *g += v;
        }
    }
    if let Some(tokens) = &fwd.tokens {
        for (t, &tok) in tokens.iter().enumerate() {
            for (g, v) in grads.tok_emb.row_mut(tok).iter_mut().zip(dx[t].iter()) {
                *g += v;
            }
        }
    }
    (grads, dx)
}

/// Cross-entropy of one logit row against a target class. Returns the loss
/// and its gradient w.r.t. the logits (unscaled: caller applies weights and
/// batch normalization).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    debug_assert!(target < logits.len());
    let lse = crate::vecmath::logsumexp(logits);
    let loss = lse - logits[target];
    let mut d: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    d[target] -= 1.0;
    (loss, d)
}

/// Optimization hyperparameters shared by every training loop in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate of a half-cosine decay over the whole run.
    /// `None` keeps the rate constant at `lr`.
    #[serde(default)]
    pub lr_floor: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            lr: 3e-4,
            lr_floor: None,
            seed: 0,
        }
    }
}

/// The learning rate for `global_step` of `total_steps`: constant at
/// `cfg.lr` without a floor, otherwise a half-cosine from `cfg.lr` (first
/// step) down to `cfg.lr_floor` (last step).
pub fn lr_schedule(cfg: &TrainConfig, global_step: usize, total_steps: usize) -> f64 {
    match cfg.lr_floor {
        None => cfg.lr,
        Some(floor) => {
            let horizon = total_steps.saturating_sub(1).max(1) as f64;
            let t = (global_step as f64 / horizon).clamp(0.0, 1.0);
            floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// One row of a training log.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Fixed chunk width for parallel batch evaluation. Per-chunk gradients are
/// reduced in chunk order, so results do not depend on thread count.
pub const GRAD_CHUNK: usize = 8;

/// A cross-entropy loss this large is unambiguous divergence: even a
/// wrong-by-construction model scores about `ln(vocab)` nats, so anything
/// past this bound means the optimizer blew up (LayerNorm keeps activations
/// finite long after training is lost, so a finiteness check alone is not
/// enough).
pub const DIVERGENCE_LOSS_LIMIT: f64 = 1e6;

/// Next-token cross-entropy over a batch of sequences: position `i` is
/// predicted from the logits at position `i - 1`. Returns the mean loss.
pub fn lm_batch_loss(params: &Params, cfg: &ArchConfig, batch: &[&[usize]]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in batch {
        let fwd = forward_tokens(params, cfg, seq);
        for i in 1..seq.len() {
            let (loss, _) = softmax_cross_entropy(&fwd.logits[i - 1], seq[i]);
            total += loss;
            count += 1;
        }
    }
    total / count as f64
}

/// Loss and parameter gradients for [`lm_batch_loss`], evaluated in fixed
/// chunks in parallel and reduced deterministically.
pub fn lm_batch_grads(params: &Params, cfg: &ArchConfig, batch: &[&[usize]]) -> (f64, Params) {
    use rayon::prelude::*;
    let count: usize = batch.iter().map(|s| s.len() - 1).sum();
    let scale = 1.0 / count as f64;
    let partials: Vec<(f64, Params)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = params.zeros_like();
            let mut loss_sum = 0.0;
            for seq in chunk {
                let fwd = forward_tokens(params, cfg, seq);
                let mut d_logits = vec![vec![0.0; cfg.vocab]; seq.len()];
                for i in 1..seq.len() {
                    let (loss, mut d) = softmax_cross_entropy(&fwd.logits[i - 1], seq[i]);
                    loss_sum += loss;
                    for v in d.iter_mut() {
                        *v *= scale;
                    }
                    d_logits[i - 1] = d;
                }
                let (g, _) = backward(params, cfg, &fwd, &d_logits);
                grads.accumulate(&g);
            }
            (loss_sum, grads)
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (loss_sum, g) in &partials {
        total += loss_sum;
        grads.accumulate(g);
    }
    (total * scale, grads)
}
