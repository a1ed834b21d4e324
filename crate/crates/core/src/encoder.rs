//! Joint two-frame encoder.
//!
//! The bi-temporal pair is treated as a two-frame video: both frames are cut
//! into `s×s` patches, linearly embedded, tagged with a spatial position and
//! a frame embedding, and then attend to each other jointly in every block.
//! The base weights are frozen; only the LoRA adapters on the last block's
//! query/key/value projections (and the projector after the encoder) train.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskguide::{DownsampleMode, MaskMode};
use crate::nn::{Attention, FeedForward, Linear, Norm, QkvOverride};
use crate::numerics::{randn, Binder, ParamId, Params, Tape, Tensor, Var};
use crate::raster::{BinaryMask, Raster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side `H = W` in pixels.
    pub image_size: usize,
    /// Patch stride `s`.
    pub patch_size: usize,
    /// Encoder feature width `c`.
    pub channels: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub vocab_size: usize,
    /// Longest decoder input, BOS included.
    pub max_len: usize,
    pub lora_rank: usize,
    /// Defaults to the rank (scale 1).
    pub lora_alpha: Option<f64>,
    pub mask_mode: MaskMode,
    pub downsample: DownsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            channels: 64,
            encoder_blocks: 2,
            heads: 4,
            decoder_layers: 2,
            decoder_width: 64,
            vocab_size: 64,
            max_len: 24,
            lora_rank: 4,
            lora_alpha: None,
            mask_mode: MaskMode::Zero,
            downsample: DownsampleMode::Nearest,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image size {} is not a multiple of patch size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0
            || !self.channels.is_multiple_of(self.heads)
            || !self.decoder_width.is_multiple_of(self.heads)
        {
            return fail(format!(
                "widths {} and {} must both be divisible by {} heads",
                self.channels, self.decoder_width, self.heads
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.channels {
            return fail(format!("lora rank {} must lie in 1..={}", self.lora_rank, self.channels));
        }
        if self.vocab_size < 4 {
            return fail(format!("vocabulary of {} cannot hold the reserved ids", self.vocab_size));
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if self.decoder_layers == 0 {
            return fail("decoder needs at least one layer".into());
        }
        Ok(())
    }

    /// Token grid side `h = w = H / s`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64) / self.lora_rank as f64
    }
}

/// Two co-registered images, optionally with a change mask and captions.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalPair {
    pub image_a: Raster,
    pub image_b: Raster,
    pub mask: Option<BinaryMask>,
    pub captions: Vec<String>,
}

impl BiTemporalPair {
    pub fn new(image_a: Raster, image_b: Raster) -> Result<Self> {
        if (image_a.height, image_a.width) != (image_b.height, image_b.width) {
            return Err(Error::Dimension(format!(
                "frames are {}x{} and {}x{}",
                image_a.height, image_a.width, image_b.height, image_b.width
            )));
        }
        Ok(BiTemporalPair { image_a, image_b, mask: None, captions: Vec::new() })
    }

    pub fn with_mask(mut self, mask: BinaryMask) -> Result<Self> {
        if (mask.height, mask.width) != (self.image_a.height, self.image_a.width) {
            return Err(Error::Dimension(format!(
                "mask is {}x{} but images are {}x{}",
                mask.height, mask.width, self.image_a.height, self.image_a.width
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    First,
    Second,
}

/// Per-frame token sequence of length `h·w`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub frame: Frame,
}

/// Trainable low-rank delta for one frozen `c×c` weight.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
    pub target: String,
}

/// `W + scale·A·B` as a fresh tensor.
pub fn apply_lora(w: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let (rows, cols) = w.dims2()?;
    let (ar, rank) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    if rank > rows.min(cols) {
        return Err(Error::Config(format!("lora rank {rank} exceeds width {}", rows.min(cols))));
    }
    if ar != rows || br != rank || bc != cols {
        return Err(Error::Dimension(format!(
            "adapter {:?}·{:?} does not fit weight {:?}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let delta = a.matmul(b)?;
    let data = w.data().iter().zip(delta.data()).map(|(x, d)| x + scale * d).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Tape form of [`apply_lora`]: gradients reach `A` and `B` only.
pub fn apply_lora_var(tape: &mut Tape, binder: &mut Binder, w: Var, adapter: &LoraAdapter) -> Result<Var> {
    let a = binder.var(tape, adapter.a);
    let b = binder.var(tape, adapter.b);
    let delta = tape.matmul(a, b)?;
    let delta = tape.scale(delta, adapter.scale);
    tape.add(w, delta)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    mlp: FeedForward,
}

/// Adapters for the last block's query, key and value projections.
#[derive(Clone, Debug)]
pub struct QkvAdapters {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    grid: usize,
    patch_size: usize,
    patch: Linear,
    pos: ParamId,
    frame: ParamId,
    blocks: Vec<Block>,
    lora: Option<QkvAdapters>,
}

impl Encoder {
    /// Registers `encoder.*` (frozen) and `lora.*` (trainable) weights.
    pub fn init(params: &mut Params, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let patch = Linear::init(params, rng, "encoder.patch", cfg.patch_dim(), c, false);
        let pos = params.insert("encoder.pos", randn(rng, &[cfg.tokens_per_frame(), c], 1.0), false);
        let frame = params.insert("encoder.frame", randn(rng, &[2, c], 1.0), false);
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                Block {
                    ln1: Norm::init(params, &format!("{p}.ln1"), c, false),
                    attn: Attention::init(params, rng, &format!("{p}.attn"), c, cfg.heads, false),
                    ln2: Norm::init(params, &format!("{p}.ln2"), c, false),
                    mlp: FeedForward::init(params, rng, &format!("{p}.mlp"), c, 4 * c, false),
                }
            })
            .collect();
        let lora = cfg.encoder_blocks.checked_sub(1).map(|last| {
            let r = cfg.lora_rank;
            let mut adapter = |which: &str| {
                let name = format!("lora.{last}.{which}");
                let a = randn(rng, &[c, r], 1.0 / (c as f64).sqrt());
                LoraAdapter {
                    a: params.insert(format!("{name}.A"), a, true),
                    b: params.insert(format!("{name}.B"), Tensor::zeros(&[r, c]), true),
                    scale: cfg.lora_scale(),
                    target: format!("encoder.blocks.{last}.attn.{which}.W"),
                }
            };
            QkvAdapters { q: adapter("q"), k: adapter("k"), v: adapter("v") }
        });
        Encoder { grid: cfg.grid(), patch_size: cfg.patch_size, patch, pos, frame, blocks, lora }
    }

    pub fn adapters(&self) -> Option<&QkvAdapters> {
        self.lora.as_ref()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid * self.grid
    }

    /// Cuts both frames into patch vectors: rows are frame-1 patches in
    /// row-major grid order followed by frame-2 patches; each row lists the
    /// patch's pixels row-major with RGB innermost.
    pub fn patch_matrix(&self, pair: &BiTemporalPair) -> Result<Tensor> {
        let side = self.grid * self.patch_size;
        for img in [&pair.image_a, &pair.image_b] {
            if img.height != side || img.width != side {
                return Err(Error::Config(format!(
                    "model expects {side}x{side} images, got {}x{}",
                    img.height, img.width
                )));
            }
        }
        let s = self.patch_size;
        let mut data = Vec::with_capacity(2 * side * side * 3);
        for img in [&pair.image_a, &pair.image_b] {
            for gi in 0..self.grid {
                for gj in 0..self.grid {
                    for dy in 0..s {
                        let start = ((gi * s + dy) * side + gj * s) * 3;
                        data.extend_from_slice(&img.data[start..start + s * 3]);
                    }
                }
            }
        }
        Tensor::new(vec![2 * self.tokens_per_frame(), s * s * 3], data)
    }

    /// Patch embedding plus position and frame embeddings: `2hw × c`.
    pub fn patchify(&self, tape: &mut Tape, binder: &mut Binder, patches: &Tensor) -> Result<Var> {
        let hw = self.tokens_per_frame();
        if patches.dims2()?.0 != 2 * hw {
            return Err(Error::Config(format!("expected {} patches, got {:?}", 2 * hw, patches.shape())));
        }
        let x = tape.constant(patches.clone());
        let emb = self.patch.forward(tape, binder, x)?;
        let pos = binder.var(tape, self.pos);
        let pos_idx: Vec<usize> = (0..2 * hw).map(|i| i % hw).collect();
        let pos_rows = tape.select_rows(pos, &pos_idx)?;
        let frame = binder.var(tape, self.frame);
        let frame_idx: Vec<usize> = (0..2 * hw).map(|i| i / hw).collect();
        let frame_rows = tape.select_rows(frame, &frame_idx)?;
        let x = tape.add(emb, pos_rows)?;
        tape.add(x, frame_rows)
    }

    /// Runs blocks `from..` over a `2hw × c` token sequence.
    pub fn run_blocks(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: Var,
        from: usize,
        use_lora: bool,
    ) -> Result<Var> {
        let n = tape.value(tokens).dims2()?.0;
        if n != 2 * self.tokens_per_frame() {
            return Err(Error::Dimension(format!("encoder expects {} tokens, got {n}", 2 * self.tokens_per_frame())));
        }
        let last = self.blocks.len().saturating_sub(1);
        let mut x = tokens;
        for (i, block) in self.blocks.iter().enumerate().skip(from) {
            let overrides = match (&self.lora, use_lora && i == last) {
                (Some(ad), true) => {
                    let mut merged = |lin: &Linear, adapter: &LoraAdapter| {
                        let w = binder.var(tape, lin.w);
                        apply_lora_var(tape, binder, w, adapter)
                    };
                    QkvOverride {
                        q: Some(merged(&block.attn.q, &ad.q)?),
                        k: Some(merged(&block.attn.k, &ad.k)?),
                        v: Some(merged(&block.attn.v, &ad.v)?),
                    }
                }
                _ => QkvOverride::default(),
            };
            let h = block.ln1.forward(tape, binder, x)?;
            let h = block.attn.forward(tape, binder, h, h, false, overrides)?;
            x = tape.add(x, h)?;
            let h = block.ln2.forward(tape, binder, x)?;
            let h = block.mlp.forward(tape, binder, h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// Full encoder: returns the joint `2hw × c` output (`[F₁; F₂]`).
    pub fn encode(&self, tape: &mut Tape, binder: &mut Binder, patches: &Tensor, use_lora: bool) -> Result<Var> {
        let x = self.patchify(tape, binder, patches)?;
        self.run_blocks(tape, binder, x, 0, use_lora)
    }

    /// Output of every block before the last. None of it depends on a
    /// trainable weight, so training can compute it once per pair.
    pub fn frozen_prefix(&self, params: &Params, patches: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let x = self.patchify(&mut tape, &mut binder, patches)?;
        let upto = self.blocks.len().saturating_sub(1);
        let mut x = x;
        if upto > 0 {
            let sub = Encoder { blocks: self.blocks[..upto].to_vec(), lora: None, ..self.clone() };
            x = sub.run_blocks(&mut tape, &mut binder, x, 0, false)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Index of the first block not covered by [`Encoder::frozen_prefix`].
    pub fn trainable_from(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }

    /// Splits the joint output into `F₁` and `F₂` grids.
    pub fn split_frames(&self, joint: &Tensor) -> Result<(TokenGrid, TokenGrid)> {
        let (n, c) = joint.dims2()?;
        let hw = self.tokens_per_frame();
        if n != 2 * hw {
            return Err(Error::Dimension(format!("{n} tokens cannot split into two frames of {hw}")));
        }
        let half = hw * c;
        let f1 = Tensor::new(vec![hw, c], joint.data()[..half].to_vec())?;
        let f2 = Tensor::new(vec![hw, c], joint.data()[half..].to_vec())?;
        Ok((TokenGrid { tokens: f1, frame: Frame::First }, TokenGrid { tokens: f2, frame: Frame::Second }))
    }
}

/// Per-token affine map from encoder width into decoder width.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    pub linear: Linear,
}

impl Projector {
    pub fn init(params: &mut Params, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        Projector { linear: Linear::init(params, rng, "projector", cfg.channels, cfg.decoder_width, true) }
    }

    pub fn project(&self, tape: &mut Tape, binder: &mut Binder, tokens: Var) -> Result<Var> {
        self.linear.forward(tape, binder, tokens)
    }
}
