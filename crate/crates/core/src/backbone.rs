//! The shared, frozen models: a patch-image transformer encoder and a small
//! causal transformer decoder, their synthetic pretraining, and the
//! checkpoint format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Target, Var};
use crate::error::{Error, Result};
use crate::lora::{project, BoundLoraSet, Dropout, Projection, INIT_STD};
use crate::optim::{cosine_lr, Adam, OptimizerKind};
use crate::tasks::{Dataset, Input, Level, Split};
use crate::tensor::{derive_seed, seeded_rng, SeededRng, Tensor};
use crate::vocab::{TokenSequence, EOS_ID, PAD_ID};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub n_layers_v: usize,
    pub n_layers_t: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 8,
            d_v: 128,
            d_t: 64,
            n_layers_v: 2,
            n_layers_t: 2,
            n_heads: 4,
            max_seq_len: 32,
            vocab_size: 0,
            ffn_mult: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_v % self.n_heads != 0 || self.d_t % self.n_heads != 0 {
            return bad(format!(
                "d_v {} and d_t {} must be divisible by n_heads {}",
                self.d_v, self.d_t, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must include PAD and EOS".into());
        }
        if self.max_seq_len < 2 || self.ffn_mult == 0 {
            return bad("max_seq_len >= 2 and ffn_mult >= 1 required".into());
        }
        Ok(())
    }

    /// `max_seq_len >= longest prompt + longest label + 2`.
    pub fn check_capacity(&self, longest_prompt: usize, longest_label: usize) -> Result<()> {
        if self.max_seq_len < longest_prompt + longest_label + 2 {
            return Err(Error::Config(format!(
                "max_seq_len {} cannot hold a {longest_prompt}-token prompt, a {longest_label}-word label, \
                 the visual token and EOS",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * CHANNELS
    }
}

/// Sinusoidal positional encodings for positions `0..len`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, width);
    for pos in 0..len {
        for i in (0..width).step_by(2) {
            let freq = 1.0 / 10_000f64.powf(i as f64 / width as f64);
            pe.set(pos, i, (pos as f64 * freq).sin());
            if i + 1 < width {
                pe.set(pos, i + 1, (pos as f64 * freq).cos());
            }
        }
    }
    pe
}

fn tiled_positions(batch: usize, seq_len: usize, width: usize) -> Tensor {
    let pe = positional_encoding(seq_len, width);
    let mut out = Tensor::zeros(batch * seq_len, width);
    for b in 0..batch {
        for t in 0..seq_len {
            out.row_mut(b * seq_len + t).copy_from_slice(pe.row(t));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in×out`
    pub w: Tensor,
    /// `1×out`
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        Linear::with_std(input, output, INIT_STD, rng)
    }

    pub fn with_std(input: usize, output: usize, std: f64, rng: &mut SeededRng) -> Self {
        Linear {
            w: Tensor::randn(input, output, std, rng),
            b: Tensor::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Tensor::zeros(input, output),
            b: Tensor::zeros(1, output),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> LinearVars {
        let w = g.leaf(self.w.clone(), trainable);
        let b = g.leaf(self.b.clone(), trainable);
        vars.extend([w, b]);
        LinearVars { w, b }
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.w);
        g.add_bias(y, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    gamma: Var,
    beta: Var,
}

impl Norm {
    fn new(width: usize) -> Self {
        Norm {
            gamma: Tensor::filled(1, width, 1.0),
            beta: Tensor::zeros(1, width),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> NormVars {
        let gamma = g.leaf(self.gamma.clone(), trainable);
        let beta = g.leaf(self.beta.clone(), trainable);
        vars.extend([gamma, beta]);
        NormVars { gamma, beta }
    }
}

impl NormVars {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gamma, self.beta)
    }
}

/// Pre-norm transformer block. The attention projections `wq`, `wk`, `wv`
/// are the LoRA targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Linear,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

pub struct BlockVars {
    ln1: NormVars,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: LinearVars,
    ln2: NormVars,
    ff1: LinearVars,
    ff2: LinearVars,
}

impl Block {
    fn new(width: usize, ffn_mult: usize, rng: &mut SeededRng) -> Self {
        Block {
            ln1: Norm::new(width),
            wq: Tensor::randn(width, width, INIT_STD, rng),
            wk: Tensor::randn(width, width, INIT_STD, rng),
            wv: Tensor::randn(width, width, INIT_STD, rng),
            wo: Linear::new(width, width, rng),
            ln2: Norm::new(width),
            ff1: Linear::new(width, width * ffn_mult, rng),
            ff2: Linear::new(width * ffn_mult, width, rng),
        }
    }

    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ln1.named(&format!("{prefix}.ln1"), out);
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        self.wo.named(&format!("{prefix}.wo"), out);
        self.ln2.named(&format!("{prefix}.ln2"), out);
        self.ff1.named(&format!("{prefix}.ff1"), out);
        self.ff2.named(&format!("{prefix}.ff2"), out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.ln1.params_mut(out);
        out.push(&mut self.wq);
        out.push(&mut self.wk);
        out.push(&mut self.wv);
        self.wo.params_mut(out);
        self.ln2.params_mut(out);
        self.ff1.params_mut(out);
        self.ff2.params_mut(out);
    }

    fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> BlockVars {
        let ln1 = self.ln1.bind(g, trainable, vars);
        let wq = g.leaf(self.wq.clone(), trainable);
        let wk = g.leaf(self.wk.clone(), trainable);
        let wv = g.leaf(self.wv.clone(), trainable);
        vars.extend([wq, wk, wv]);
        let wo = self.wo.bind(g, trainable, vars);
        let ln2 = self.ln2.bind(g, trainable, vars);
        let ff1 = self.ff1.bind(g, trainable, vars);
        let ff2 = self.ff2.bind(g, trainable, vars);
        BlockVars {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            ff1,
            ff2,
        }
    }
}

pub(crate) struct BlockShape {
    heads: usize,
    seq_len: usize,
    causal: bool,
}

impl BlockVars {
    fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        shape: &BlockShape,
        lora: Option<(&BoundLoraSet, usize)>,
        dropout: &mut Dropout,
    ) -> Var {
        let adapter = |p| lora.and_then(|(set, layer)| set.get(layer, p));
        let h = self.ln1.forward(g, x);
        let q = project(g, h, self.wq, adapter(Projection::Q), dropout);
        let k = project(g, h, self.wk, adapter(Projection::K), dropout);
        let v = project(g, h, self.wv, adapter(Projection::V), dropout);
        let a = g.attention(q, k, v, shape.heads, shape.seq_len, shape.causal);
        let o = self.wo.forward(g, a);
        let x = g.add(x, o);
        let h = self.ln2.forward(g, x);
        let f = self.ff1.forward(g, h);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f);
        g.add(x, f)
    }
}

// ---------------------------------------------------------------------------
// Encoder / decoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
}

pub struct EncoderVars {
    patch_embed: LinearVars,
    blocks: Vec<BlockVars>,
    ln_f: NormVars,
    vars: Vec<Var>,
}

impl Encoder {
    fn new(cfg: &BackboneConfig, rng: &mut SeededRng) -> Self {
        Encoder {
            // fan-in scale keeps content on par with the unit positional code
            patch_embed: Linear::with_std(cfg.patch_dim(), cfg.d_v, (cfg.patch_dim() as f64).powf(-0.5), rng),
            blocks: (0..cfg.n_layers_v)
                .map(|_| Block::new(cfg.d_v, cfg.ffn_mult, rng))
                .collect(),
            ln_f: Norm::new(cfg.d_v),
        }
    }

    fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.patch_embed.named("encoder.patch_embed", out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("encoder.blocks.{i}"), out);
        }
        self.ln_f.named("encoder.ln_f", out);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.patch_embed.params_mut(&mut out);
        for b in &mut self.blocks {
            b.params_mut(&mut out);
        }
        self.ln_f.params_mut(&mut out);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let mut vars = Vec::new();
        let patch_embed = self.patch_embed.bind(g, trainable, &mut vars);
        let blocks = self.blocks.iter().map(|b| b.bind(g, trainable, &mut vars)).collect();
        let ln_f = self.ln_f.bind(g, trainable, &mut vars);
        EncoderVars {
            patch_embed,
            blocks,
            ln_f,
            vars,
        }
    }
}

/// Splits images (`H·W·3`, row-major, channel-interleaved) into a
/// `(batch·n_patches) × patch_dim` matrix of raster-ordered patches.
pub fn patchify(cfg: &BackboneConfig, images: &[&[f64]]) -> Result<Tensor> {
    let (side, p) = (cfg.image_size, cfg.patch_size);
    let per_side = side / p;
    let mut out = Tensor::zeros(images.len() * cfg.n_patches(), cfg.patch_dim());
    for (b, img) in images.iter().enumerate() {
        if img.len() != cfg.image_len() {
            return Err(Error::Dimension(format!(
                "image has {} values, expected {side}x{side}x{CHANNELS}",
                img.len()
            )));
        }
        for py in 0..per_side {
            for px in 0..per_side {
                let row = out.row_mut(b * cfg.n_patches() + py * per_side + px);
                let mut k = 0;
                for dy in 0..p {
                    let y = py * p + dy;
                    let start = (y * side + px * p) * CHANNELS;
                    row[k..k + p * CHANNELS].copy_from_slice(&img[start..start + p * CHANNELS]);
                    k += p * CHANNELS;
                }
            }
        }
    }
    Ok(out)
}

impl EncoderVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Mean-pooled final patch states, one `d_v` row per image.
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &BackboneConfig,
        images: &[&[f64]],
        lora: Option<&BoundLoraSet>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::InvalidInput("no images".into()));
        }
        let patches = g.constant(patchify(cfg, images)?);
        let x = self.patch_embed.forward(g, patches);
        let pos = g.constant(tiled_positions(images.len(), cfg.n_patches(), cfg.d_v));
        let mut x = g.add(x, pos);
        let shape = BlockShape {
            heads: cfg.n_heads,
            seq_len: cfg.n_patches(),
            causal: false,
        };
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(g, x, &shape, lora.map(|l| (l, i)), dropout);
        }
        let x = self.ln_f.forward(g, x);
        Ok(g.mean_groups(x, cfg.n_patches()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    /// `vocab×d_t`
    pub tok_embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    /// `d_t×vocab`
    pub lm_head: Tensor,
}

pub struct DecoderVars {
    tok_embed: Var,
    blocks: Vec<BlockVars>,
    ln_f: NormVars,
    lm_head: Var,
    vars: Vec<Var>,
}

impl Decoder {
    fn new(cfg: &BackboneConfig, rng: &mut SeededRng) -> Self {
        Decoder {
            // unit scale so pooled prompt states are not dominated by position
            tok_embed: Tensor::randn(cfg.vocab_size, cfg.d_t, 1.0, rng),
            blocks: (0..cfg.n_layers_t)
                .map(|_| Block::new(cfg.d_t, cfg.ffn_mult, rng))
                .collect(),
            ln_f: Norm::new(cfg.d_t),
            lm_head: Tensor::randn(cfg.d_t, cfg.vocab_size, INIT_STD, rng),
        }
    }

    fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("decoder.tok_embed".into(), &self.tok_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("decoder.blocks.{i}"), out);
        }
        self.ln_f.named("decoder.ln_f", out);
        out.push(("decoder.lm_head".into(), &self.lm_head));
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed];
        for b in &mut self.blocks {
            b.params_mut(&mut out);
        }
        self.ln_f.params_mut(&mut out);
        out.push(&mut self.lm_head);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DecoderVars {
        let mut vars = Vec::new();
        let tok_embed = g.leaf(self.tok_embed.clone(), trainable);
        vars.push(tok_embed);
        let blocks = self.blocks.iter().map(|b| b.bind(g, trainable, &mut vars)).collect();
        let ln_f = self.ln_f.bind(g, trainable, &mut vars);
        let lm_head = g.leaf(self.lm_head.clone(), trainable);
        vars.push(lm_head);
        DecoderVars {
            tok_embed,
            blocks,
            ln_f,
            lm_head,
            vars,
        }
    }
}

/// Token sequences sharing one prefix row each, for teacher-forced LM loss.
#[derive(Clone, Debug, Default)]
pub struct LmBatch {
    /// Token ids after the prefix position, per example (unpadded).
    pub inputs: Vec<Vec<usize>>,
    /// `(position, token)` supervision per example; position 0 is the prefix.
    pub targets: Vec<Vec<(usize, usize)>>,
}

impl DecoderVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn embed_tokens(&self, g: &mut Graph, ids: Vec<usize>) -> Var {
        g.gather(self.tok_embed, ids)
    }

    /// Final (normed) hidden states for `batch` stacked sequences of `seq_len` input vectors.
    pub fn hidden(
        &self,
        g: &mut Graph,
        cfg: &BackboneConfig,
        input: Var,
        seq_len: usize,
        lora: Option<&BoundLoraSet>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        if seq_len == 0 {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        if seq_len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq_len,
                max: cfg.max_seq_len,
            });
        }
        let (rows, width) = g.value(input).shape();
        if width != cfg.d_t || rows % seq_len != 0 {
            return Err(Error::Dimension(format!(
                "decoder input is {rows}x{width}, expected a multiple of {seq_len} rows of width {}",
                cfg.d_t
            )));
        }
        let pos = g.constant(tiled_positions(rows / seq_len, seq_len, cfg.d_t));
        let mut x = g.add(input, pos);
        let shape = BlockShape {
            heads: cfg.n_heads,
            seq_len,
            causal: true,
        };
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(g, x, &shape, lora.map(|l| (l, i)), dropout);
        }
        Ok(self.ln_f.forward(g, x))
    }

    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Var {
        g.matmul(hidden, self.lm_head)
    }

    /// `[prefix_b, emb(inputs_b)…]` right-padded with PAD to a common length.
    pub fn assemble_inputs(&self, g: &mut Graph, prefix: Var, inputs: &[Vec<usize>]) -> (Var, usize) {
        let seq_len = 1 + inputs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(inputs.len() * (seq_len - 1));
        for seq in inputs {
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat_n(PAD_ID, seq_len - 1 - seq.len()));
        }
        let tail = self.embed_tokens(g, ids);
        (g.assemble(prefix, tail, seq_len), seq_len)
    }

    /// Mean over examples of the per-example mean token cross-entropy.
    /// Causal masking makes the trailing PAD positions inert.
    pub fn lm_loss(
        &self,
        g: &mut Graph,
        cfg: &BackboneConfig,
        prefix: Var,
        batch: &LmBatch,
        lora: Option<&BoundLoraSet>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let n = batch.inputs.len();
        if n == 0 || batch.targets.len() != n {
            return Err(Error::InvalidInput("LM batch needs one target list per example".into()));
        }
        let (input, seq_len) = self.assemble_inputs(g, prefix, &batch.inputs);
        let hidden = self.hidden(g, cfg, input, seq_len, lora, dropout)?;
        let logits = self.logits(g, hidden);
        let mut targets = Vec::new();
        for (b, ts) in batch.targets.iter().enumerate() {
            if ts.is_empty() {
                return Err(Error::InvalidInput("example without targets".into()));
            }
            let w = 1.0 / (ts.len() * n) as f64;
            for &(pos, tok) in ts {
                if pos >= seq_len {
                    return Err(Error::InvalidInput(format!("target position {pos} beyond sequence")));
                }
                targets.push(Target {
                    row: b * seq_len + pos,
                    class: tok,
                    weight: w,
                });
            }
        }
        Ok(g.cross_entropy(logits, targets))
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneBundle {
    config: BackboneConfig,
    seed: u64,
    encoder: Encoder,
    decoder: Decoder,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: BackboneConfig,
    seed: u64,
    frozen: bool,
    checksum: String,
    matrices: Vec<MatrixEntry>,
}

/// SHA-256 over `(name, shape, f32 bytes)` of each named tensor, in order.
pub fn checksum_named(params: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        h.update(t.to_f32_le_bytes());
    }
    hex::encode(h.finalize())
}

impl BackboneBundle {
    /// Seeded random initialisation (Gaussian std 0.02, unit norms).
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut enc_rng = seeded_rng(derive_seed(seed, "encoder"));
        let mut dec_rng = seeded_rng(derive_seed(seed, "decoder"));
        Ok(BackboneBundle {
            encoder: Encoder::new(&config, &mut enc_rng),
            decoder: Decoder::new(&config, &mut dec_rng),
            config,
            seed,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// An unfrozen copy, for the full-finetuning baseline.
    pub fn unfrozen_copy(&self) -> Self {
        let mut b = self.clone();
        b.frozen = false;
        b
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidInput("backbone is frozen".into()));
        }
        Ok(())
    }

    pub fn encoder_mut(&mut self) -> Result<&mut Encoder> {
        self.ensure_mutable()?;
        Ok(&mut self.encoder)
    }

    pub fn decoder_mut(&mut self) -> Result<&mut Decoder> {
        self.ensure_mutable()?;
        Ok(&mut self.decoder)
    }

    /// All parameters, encoder first; refused on a frozen bundle.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        self.ensure_mutable()?;
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        Ok(out)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.named(&mut out);
        self.decoder.named(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bytes of all weight blobs in a checkpoint.
    pub fn serialized_bytes(&self) -> usize {
        self.param_count() * 4
    }

    pub fn checksum(&self) -> String {
        checksum_named(&self.named_params())
    }

    /// Unadapted, evaluation-mode visual embeddings (`images.len() × d_v`).
    pub fn encode_images(&self, images: &[&[f64]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let ev = self.encoder.bind(&mut g, false);
        let out = ev.forward(&mut g, &self.config, images, None, &mut Dropout::eval())?;
        Ok(g.value(out).clone())
    }

    pub fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[image])?.into_vec())
    }

    /// Mean of the final decoder states over the prompt tokens (no visual token).
    pub fn embed_prompt(&self, prompt: &TokenSequence) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        if prompt.ids.contains(&EOS_ID) {
            return Err(Error::InvalidInput("prompt contains EOS".into()));
        }
        if let Some(&bad) = prompt.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
        }
        let mut g = Graph::new();
        let dv = self.decoder.bind(&mut g, false);
        let input = dv.embed_tokens(&mut g, prompt.ids.clone());
        let hidden = dv.hidden(&mut g, &self.config, input, prompt.len(), None, &mut Dropout::eval())?;
        let pooled = g.mean_groups(hidden, prompt.len());
        Ok(g.value(pooled).clone().into_vec())
    }

    /// Next-token logits after a sequence of `d_t` input vectors.
    pub fn decode_step(&self, states: &Tensor, lora: Option<&crate::lora::LoraSet>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let dv = self.decoder.bind(&mut g, false);
        let bound = lora.map(|l| l.bind(&mut g, false));
        let input = g.constant(states.clone());
        let hidden = dv.hidden(&mut g, &self.config, input, states.rows(), bound.as_ref(), &mut Dropout::eval())?;
        let logits = dv.logits(&mut g, hidden);
        Ok(g.value(logits).row(states.rows() - 1).to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let named = self.named_params();
        let mut matrices = Vec::with_capacity(named.len());
        for (name, t) in &named {
            let path = dir.join(name);
            fs::write(&path, t.to_f32_le_bytes()).map_err(|e| Error::io(&path, e))?;
            matrices.push(MatrixEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            });
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            seed: self.seed,
            frozen: self.frozen,
            checksum: checksum_named(&named),
            matrices,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut bundle = BackboneBundle::init(manifest.config.clone(), manifest.seed)?;
        {
            let names: Vec<(String, (usize, usize))> = bundle
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.shape()))
                .collect();
            if names.len() != manifest.matrices.len() {
                return Err(Error::InvalidData(format!(
                    "checkpoint lists {} matrices, architecture has {}",
                    manifest.matrices.len(),
                    names.len()
                )));
            }
            let mut loaded = Vec::with_capacity(names.len());
            for ((name, shape), entry) in names.iter().zip(&manifest.matrices) {
                if name != &entry.name || *shape != (entry.rows, entry.cols) {
                    return Err(Error::InvalidData(format!(
                        "checkpoint entry {} {}x{} does not match {name} {shape:?}",
                        entry.name, entry.rows, entry.cols
                    )));
                }
                let blob = dir.join(&entry.name);
                if !blob.is_file() {
                    return Err(Error::MissingFile(blob));
                }
                let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
                loaded.push(Tensor::from_f32_le_bytes(entry.rows, entry.cols, &bytes)?);
            }
            let mut params = bundle.encoder.params_mut();
            params.extend(bundle.decoder.params_mut());
            for (p, t) in params.into_iter().zip(loaded) {
                *p = t;
            }
        }
        bundle.frozen = manifest.frozen;
        let found = bundle.checksum();
        if found != manifest.checksum {
            return Err(Error::Compatibility {
                expected: manifest.checksum,
                found,
            });
        }
        Ok(bundle)
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder_epochs: usize,
    pub decoder_epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    /// Share of decoder examples whose visual slot is left empty. Those must
    /// be answered from the prompt alone, so prompt states learn to carry
    /// the task identity that retrieval reads.
    pub hint_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder_epochs: 40,
            decoder_epochs: 600,
            batch_size: 32,
            encoder_lr: 1e-3,
            decoder_lr: 3e-3,
            hint_dropout: 0.3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if !(self.encoder_lr > 0.0 && self.decoder_lr > 0.0) {
            return Err(Error::Config("pretrain learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.hint_dropout) {
            return Err(Error::Config(format!("hint_dropout {} outside [0, 1)", self.hint_dropout)));
        }
        Ok(())
    }
}

/// Supervised image tasks for the encoder plus `(prompt, label+EOS)` text
/// pairs for the decoder.
#[derive(Clone, Debug, Default)]
pub struct PretrainCorpus {
    pub image_tasks: Vec<Dataset>,
    pub texts: Vec<(TokenSequence, TokenSequence)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainTrace {
    pub encoder_loss: Vec<f64>,
    pub decoder_loss: Vec<f64>,
    pub warnings: Vec<String>,
}

fn warn_if_not_decreasing(name: &str, losses: &[f64], warnings: &mut Vec<String>) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        if losses.len() > 1 && last >= first {
            let msg = format!("{name} pretraining loss did not decrease ({first:.4} -> {last:.4})");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
}

/// Trains the encoder (through a throwaway linear head) on the corpus image
/// tasks and the decoder on next-token prediction over the text pairs, then
/// returns the frozen bundle.
const COSINE_HEAD_SCALE: f64 = 4.0;

pub fn pretrain_backbones(
    config: BackboneConfig,
    corpus: &PretrainCorpus,
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<(BackboneBundle, PretrainTrace)> {
    let mut bundle = BackboneBundle::init(config, seed)?;
    let mut trace = PretrainTrace::default();
    let mut rng = seeded_rng(derive_seed(seed, "pretrain"));
    pcfg.validate()?;
    pretrain_encoder(&mut bundle, corpus, pcfg, &mut rng, &mut trace)?;
    pretrain_decoder(&mut bundle, corpus, pcfg, &mut rng, &mut trace)?;
    warn_if_not_decreasing("encoder", &trace.encoder_loss, &mut trace.warnings);
    warn_if_not_decreasing("decoder", &trace.decoder_loss, &mut trace.warnings);
    Ok((bundle.freeze(), trace))
}

fn pretrain_encoder(
    bundle: &mut BackboneBundle,
    corpus: &PretrainCorpus,
    pcfg: &PretrainConfig,
    rng: &mut SeededRng,
    trace: &mut PretrainTrace,
) -> Result<()> {
    if pcfg.encoder_epochs == 0 || corpus.image_tasks.is_empty() {
        return Ok(());
    }
    // (image, class across all tasks, task index)
    let mut samples: Vec<(Vec<f64>, usize, usize)> = Vec::new();
    let mut offset = 0;
    for (t, ds) in corpus.image_tasks.iter().enumerate() {
        if ds.spec.level != Level::Patch {
            return Err(Error::InvalidData(format!(
                "pretraining task {} must be patch-level",
                ds.spec.task_id
            )));
        }
        for item in ds.split(Split::Train) {
            let Input::Patch(img) = &item.input else { continue };
            let class = ds.spec.label_index(&item.label).expect("validated label");
            samples.push((img.to_unit(), offset + class, t));
        }
        offset += ds.spec.labels.len();
    }
    if samples.is_empty() {
        return Err(Error::InvalidData("pretraining corpus has no training images".into()));
    }
    let cfg = bundle.config.clone();
    // Two cosine-softmax heads: one over classes, one over tasks. Both
    // separate by angle, which is what cosine retrieval over pooled
    // embeddings relies on; the task head keeps a task's classes in one
    // angular cluster instead of spreading them as far as foreign tasks.
    let mut head = Tensor::randn(offset, cfg.d_v, 1.0, rng);
    let mut task_head = Tensor::randn(corpus.image_tasks.len(), cfg.d_v, 1.0, rng);
    let kind = OptimizerKind::AdamW { weight_decay: 0.01 };
    let mut opt = {
        let mut ps = bundle.encoder.params_mut();
        ps.push(&mut head);
        ps.push(&mut task_head);
        Adam::new(kind, &ps)
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..pcfg.encoder_epochs {
        order.shuffle(rng);
        let lr = cosine_lr(pcfg.encoder_lr, epoch, pcfg.encoder_epochs);
        let mut total = 0.0;
        for chunk in order.chunks(pcfg.batch_size) {
            let mut g = Graph::new();
            let ev = bundle.encoder.bind(&mut g, true);
            let hv = g.param(head.clone());
            let tv = g.param(task_head.clone());
            let images: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].0.as_slice()).collect();
            let emb = ev.forward(&mut g, &cfg, &images, None, &mut Dropout::eval())?;
            let emb = g.normalize_rows(emb);
            let w = 1.0 / chunk.len() as f64;
            let cosine_ce = |g: &mut Graph, head: Var, class: fn(&(Vec<f64>, usize, usize)) -> usize| {
                let hn = g.normalize_rows(head);
                let ht = g.transpose(hn);
                let cos = g.matmul(emb, ht);
                let logits = g.scale(cos, COSINE_HEAD_SCALE);
                let targets = chunk
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| Target {
                        row: r,
                        class: class(&samples[i]),
                        weight: w,
                    })
                    .collect();
                g.cross_entropy(logits, targets)
            };
            let class_loss = cosine_ce(&mut g, hv, |s| s.1);
            let task_loss = cosine_ce(&mut g, tv, |s| s.2);
            let loss = g.add(class_loss, task_loss);
            total += g.scalar(loss) * chunk.len() as f64;
            let mut grads = g.backward(loss);
            let gs: Vec<Tensor> = ev
                .vars()
                .iter()
                .chain([&hv, &tv])
                .map(|&v| grads.take(&g, v))
                .collect();
            let mut ps = bundle.encoder.params_mut();
            ps.push(&mut head);
            ps.push(&mut task_head);
            opt.step(&mut ps, &gs, lr);
        }
        let mean = total / samples.len() as f64;
        log::debug!("encoder pretrain epoch {epoch}: loss {mean:.4}");
        trace.encoder_loss.push(mean);
    }
    Ok(())
}

fn pretrain_decoder(
    bundle: &mut BackboneBundle,
    corpus: &PretrainCorpus,
    pcfg: &PretrainConfig,
    rng: &mut SeededRng,
    trace: &mut PretrainTrace,
) -> Result<()> {
    if pcfg.decoder_epochs == 0 || corpus.texts.is_empty() {
        return Ok(());
    }
    let cfg = bundle.config.clone();
    // Position 0 is the visual slot. It holds a weighted mean of the label's
    // word embeddings, so the decoder learns to read the answer from that
    // slot, which is where the projector later writes. Weights halve per word:
    // labels sharing a suffix ("... differentiated cancer") must still get
    // well-separated hints.
    let mut examples = Vec::with_capacity(corpus.texts.len());
    for (prompt, label) in &corpus.texts {
        let full: Vec<usize> = prompt.ids.iter().chain(&label.ids).copied().collect();
        if full.len() + 1 > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: full.len() + 1,
                max: cfg.max_seq_len,
            });
        }
        let inputs = full[..full.len() - 1].to_vec();
        let targets: Vec<(usize, usize)> = full.iter().enumerate().map(|(p, &t)| (p, t)).collect();
        let words: Vec<usize> = label.ids.iter().copied().filter(|&t| t != EOS_ID).collect();
        examples.push((inputs, targets, words));
    }
    let mut opt = Adam::new(OptimizerKind::AdamW { weight_decay: 0.01 }, &bundle.decoder.params_mut());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..pcfg.decoder_epochs {
        order.shuffle(rng);
        let lr = cosine_lr(pcfg.decoder_lr, epoch, pcfg.decoder_epochs);
        let mut total = 0.0;
        for chunk in order.chunks(pcfg.batch_size) {
            let mut g = Graph::new();
            let dv = bundle.decoder.bind(&mut g, true);
            let batch = LmBatch {
                inputs: chunk.iter().map(|&i| examples[i].0.clone()).collect(),
                targets: chunk.iter().map(|&i| examples[i].1.clone()).collect(),
            };
            let mut hint = Tensor::zeros(chunk.len(), cfg.d_t);
            for (r, &i) in chunk.iter().enumerate() {
                if rng.random_bool(pcfg.hint_dropout) {
                    continue;
                }
                let words = &examples[i].2;
                let norm: f64 = (0..words.len()).map(|j| 0.5f64.powi(j as i32)).sum();
                for (j, &w) in words.iter().enumerate() {
                    let weight = 0.5f64.powi(j as i32) / norm;
                    for (h, e) in hint.row_mut(r).iter_mut().zip(bundle.decoder.tok_embed.row(w)) {
                        *h += weight * e;
                    }
                }
            }
            let prefix = g.constant(hint);
            let loss = dv.lm_loss(&mut g, &cfg, prefix, &batch, None, &mut Dropout::eval())?;
            total += g.scalar(loss) * chunk.len() as f64;
            let mut grads = g.backward(loss);
            let gs: Vec<Tensor> = dv.vars().iter().map(|&v| grads.take(&g, v)).collect();
            opt.step(&mut bundle.decoder.params_mut(), &gs, lr);
        }
        let mean = total / examples.len() as f64;
        log::debug!("decoder pretrain epoch {epoch}: loss {mean:.4}");
        trace.decoder_loss.push(mean);
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lora::{Component, LoraConfig, LoraSet};

    pub(crate) fn tiny_config(vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 8,
            d_v: 16,
            d_t: 16,
            n_layers_v: 1,
            n_layers_t: 2,
            n_heads: 2,
            max_seq_len: 12,
            vocab_size,
            ffn_mult: 2,
        }
    }

    fn image(cfg: &BackboneConfig, seed: u64) -> Vec<f64> {
        let t = Tensor::randn(1, cfg.image_len(), 0.3, &mut seeded_rng(seed));
        t.data().iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(10);
        assert!(c.validate().is_ok());
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_config(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(tiny_config(10).check_capacity(8, 3).is_err());
        assert!(tiny_config(10).check_capacity(7, 3).is_ok());
    }

    #[test]
    fn encoder_is_deterministic_and_shaped() {
        let cfg = tiny_config(10);
        let b = BackboneBundle::init(cfg.clone(), 1).unwrap();
        let img = image(&cfg, 2);
        let e1 = b.encode_image(&img).unwrap();
        assert_eq!(e1.len(), cfg.d_v);
        assert_eq!(e1, b.encode_image(&img).unwrap());
        assert!(e1.iter().all(|v| v.is_finite()));
        let mut other = img.clone();
        other[0] = 1.0 - other[0];
        assert_ne!(e1, b.encode_image(&other).unwrap());
        assert!(matches!(b.encode_image(&img[1..]), Err(Error::Dimension(_))));
    }

    #[test]
    fn prompt_embedding_contracts() {
        let cfg = tiny_config(10);
        let b = BackboneBundle::init(cfg.clone(), 1).unwrap();
        let one = b.embed_prompt(&TokenSequence { ids: vec![4] }).unwrap();
        assert_eq!(one.len(), cfg.d_t);
        // mean of one state equals that state
        let mut g = Graph::new();
        let dv = b.decoder.bind(&mut g, false);
        let input = dv.embed_tokens(&mut g, vec![4]);
        let h = dv.hidden(&mut g, &cfg, input, 1, None, &mut Dropout::eval()).unwrap();
        assert_eq!(g.value(h).data(), one.as_slice());
        let ab = b.embed_prompt(&TokenSequence { ids: vec![4, 5] }).unwrap();
        let ba = b.embed_prompt(&TokenSequence { ids: vec![5, 4] }).unwrap();
        assert_ne!(ab, ba);
        assert!(b.embed_prompt(&TokenSequence { ids: vec![] }).is_err());
        assert!(b.embed_prompt(&TokenSequence { ids: vec![4, EOS_ID] }).is_err());
    }

    #[test]
    fn decoding_is_causal_and_bounded() {
        let cfg = tiny_config(10);
        let b = BackboneBundle::init(cfg.clone(), 3).unwrap();
        let mut rng = seeded_rng(4);
        let states = Tensor::randn(6, cfg.d_t, 1.0, &mut rng);
        let logits = b.decode_step(&states, None).unwrap();
        assert_eq!(logits.len(), cfg.vocab_size);
        let prefix = Tensor::from_vec(4, cfg.d_t, states.data()[..4 * cfg.d_t].to_vec()).unwrap();
        let mut g = Graph::new();
        let dv = b.decoder.bind(&mut g, false);
        let full_in = g.constant(states.clone());
        let full = dv.hidden(&mut g, &cfg, full_in, 6, None, &mut Dropout::eval()).unwrap();
        let part_in = g.constant(prefix.clone());
        let part = dv.hidden(&mut g, &cfg, part_in, 4, None, &mut Dropout::eval()).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(full).row(r), g.value(part).row(r));
        }
        assert_eq!(b.decode_step(&prefix, None).unwrap(), {
            let l = dv.logits(&mut g, part);
            g.value(l).row(3).to_vec()
        });
        let long = Tensor::zeros(cfg.max_seq_len + 1, cfg.d_t);
        assert!(matches!(b.decode_step(&long, None), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn zero_head_gives_uniform_cross_entropy() {
        let cfg = tiny_config(10);
        let mut b = BackboneBundle::init(cfg.clone(), 3).unwrap();
        b.decoder_mut().unwrap().lm_head = Tensor::zeros(cfg.d_t, cfg.vocab_size);
        let mut g = Graph::new();
        let dv = b.decoder.bind(&mut g, false);
        let prefix = g.constant(Tensor::zeros(1, cfg.d_t));
        let batch = LmBatch {
            inputs: vec![vec![3, 4]],
            targets: vec![vec![(1, 4), (2, EOS_ID)]],
        };
        let loss = dv.lm_loss(&mut g, &cfg, prefix, &batch, None, &mut Dropout::eval()).unwrap();
        assert!((g.scalar(loss) - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn freezing_is_idempotent_and_guards_mutation() {
        let b = BackboneBundle::init(tiny_config(10), 1).unwrap();
        let once = b.clone().freeze();
        assert_eq!(once.clone().freeze(), once);
        let mut frozen = once;
        assert!(frozen.params_mut().is_err());
        assert!(frozen.unfrozen_copy().params_mut().is_ok());
    }

    #[test]
    fn gradients_flow_through_frozen_layers_to_lora() {
        let cfg = tiny_config(10);
        let b = BackboneBundle::init(cfg.clone(), 5).unwrap();
        let mut lora = LoraSet::for_component(Component::Encoder, 1, cfg.d_v, &LoraConfig { rank: 2, alpha: 4.0, dropout_p: 0.0 }, 1).unwrap();
        let mut rng = seeded_rng(8);
        for a in &mut lora.adapters {
            a.b = Tensor::randn(a.b.rows(), a.b.cols(), 0.1, &mut rng);
        }
        let img = image(&cfg, 3);
        let mut g = Graph::new();
        let ev = b.encoder.bind(&mut g, false);
        let lv = lora.bind(&mut g, true);
        let emb = ev.forward(&mut g, &cfg, &[&img], Some(&lv), &mut Dropout::eval()).unwrap();
        let w = g.constant(Tensor::randn(1, cfg.d_v, 1.0, &mut rng));
        let prod = g.cosine_rows(w, emb);
        let loss = g.sum(prod);
        let mut grads = g.backward(loss);
        for &v in lv.vars() {
            assert!(grads.take(&g, v).max_abs() > 0.0);
        }
        for &v in ev.vars() {
            assert!(grads.get(v).is_none(), "frozen weights must not receive gradients");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let b = BackboneBundle::init(tiny_config(10), 9).unwrap().freeze();
        b.save(dir.path()).unwrap();
        let loaded = BackboneBundle::load(dir.path()).unwrap();
        assert_eq!(loaded, b);
        assert_eq!(loaded.checksum(), b.checksum());
        let blob = dir.path().join("decoder.lm_head");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(BackboneBundle::load(dir.path()), Err(Error::Compatibility { .. })));
    }

    #[test]
    fn zero_epoch_pretraining_returns_initialisation() {
        let cfg = tiny_config(10);
        let pcfg = PretrainConfig {
            encoder_epochs: 0,
            decoder_epochs: 0,
            ..PretrainConfig::default()
        };
        let (b, trace) = pretrain_backbones(cfg.clone(), &PretrainCorpus::default(), &pcfg, 4).unwrap();
        assert!(b.is_frozen());
        assert_eq!(b.named_params(), BackboneBundle::init(cfg, 4).unwrap().named_params());
        assert!(trace.encoder_loss.is_empty());
    }

    #[test]
    fn decoder_pretraining_is_deterministic_and_learns() {
        let cfg = tiny_config(10);
        let corpus = PretrainCorpus {
            image_tasks: vec![],
            texts: vec![
                (TokenSequence { ids: vec![2, 3, 4] }, TokenSequence { ids: vec![5, EOS_ID] }),
                (TokenSequence { ids: vec![2, 6, 4] }, TokenSequence { ids: vec![7, 8, EOS_ID] }),
            ],
        };
        let pcfg = PretrainConfig {
            encoder_epochs: 0,
            decoder_epochs: 40,
            ..PretrainConfig::default()
        };
        let (a, ta) = pretrain_backbones(cfg.clone(), &corpus, &pcfg, 1).unwrap();
        let (b, _) = pretrain_backbones(cfg, &corpus, &pcfg, 1).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(ta.decoder_loss.last().unwrap() < ta.decoder_loss.first().unwrap());
        assert!(ta.warnings.is_empty());
    }
}
