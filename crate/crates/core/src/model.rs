//! End-to-end captioner: encoder → projector → mask filter → decoder.

use std::path::Path;

use crate::decoder::{caption_loss, Decoder, TokenSequence, EOS};
use crate::encoder::{BiTemporalPair, Encoder, ModelConfig, Projector, TokenGrid};
use crate::error::{Error, Result};
use crate::maskguide::{downsample, filter_memory, ChangeMask, CoarseMask};
use crate::numerics::{checkpoint, rng_stream, Binder, Params, Tape, Tensor, Var};

/// Where the encoder pass starts from.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    /// Raw patch matrix; runs the whole encoder.
    Patches(&'a Tensor),
    /// Cached output of the frozen blocks; runs only the last block.
    Prefix(&'a Tensor),
    /// Already-encoded `[F₁; F₂]`; skips the encoder.
    Encoded(&'a Tensor),
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: Params,
    encoder: Encoder,
    projector: Projector,
    decoder: Decoder,
}

impl CaptionModel {
    /// Fresh weights drawn from independent streams of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let encoder = Encoder::init(&mut params, &mut rng_stream(seed, "init.encoder"), &config);
        let projector = Projector::init(&mut params, &mut rng_stream(seed, "init.projector"), &config);
        let decoder = Decoder::init(&mut params, &mut rng_stream(seed, "init.decoder"), &config);
        Ok(CaptionModel { config, params, encoder, projector, decoder })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn patches(&self, pair: &BiTemporalPair) -> Result<Tensor> {
        self.encoder.patch_matrix(pair)
    }

    pub fn frozen_prefix(&self, patches: &Tensor) -> Result<Tensor> {
        self.encoder.frozen_prefix(&self.params, patches)
    }

    /// Reduces a full-resolution mask to the token grid, or accepts a mask
    /// that is already at grid resolution unchanged. `None` means no
    /// guidance (all ones).
    pub fn coarse_mask(&self, mask: Option<&ChangeMask>) -> Result<CoarseMask> {
        let g = self.config.grid();
        let Some(mask) = mask else { return Ok(CoarseMask::ones(g)) };
        if (mask.height, mask.width) == (g, g) {
            return Ok(CoarseMask::new(mask.clone()));
        }
        let side = self.config.image_size;
        if (mask.height, mask.width) != (side, side) {
            return Err(Error::Dimension(format!(
                "mask is {}x{}; expected {side}x{side} or {g}x{g}",
                mask.height, mask.width
            )));
        }
        downsample(mask, g, g, self.config.downsample)
    }

    /// Joint encoder output `[F₁; F₂]` (before projection).
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        input: EncoderInput,
        use_lora: bool,
    ) -> Result<Var> {
        match input {
            EncoderInput::Patches(p) => self.encoder.encode(tape, binder, p, use_lora),
            EncoderInput::Prefix(p) => {
                let x = tape.constant(p.clone());
                self.encoder.run_blocks(tape, binder, x, self.encoder.trainable_from(), use_lora)
            }
            EncoderInput::Encoded(e) => Ok(tape.constant(e.clone())),
        }
    }

    /// Projects, splits and filters the encoder output into decoder memory.
    pub fn memory_on_tape(&self, tape: &mut Tape, binder: &mut Binder, encoded: Var, mask: &CoarseMask) -> Result<Var> {
        let hw = self.config.tokens_per_frame();
        let projected = self.projector.project(tape, binder, encoded)?;
        let first: Vec<usize> = (0..hw).collect();
        let second: Vec<usize> = (hw..2 * hw).collect();
        let f1 = tape.select_rows(projected, &first)?;
        let f2 = tape.select_rows(projected, &second)?;
        filter_memory(tape, f1, f2, mask, self.config.mask_mode)
    }

    /// Decoder logits for `ids` given the pair; `use_lora = false` runs the
    /// adapter-free encoder.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        input: EncoderInput,
        mask: &CoarseMask,
        ids: &[usize],
        use_lora: bool,
    ) -> Result<Var> {
        let encoded = self.encode_on_tape(tape, binder, input, use_lora)?;
        let memory = self.memory_on_tape(tape, binder, encoded, mask)?;
        self.decoder.forward(tape, binder, ids, memory)
    }

    /// Teacher-forced loss for one caption.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        input: EncoderInput,
        mask: &CoarseMask,
        caption: &TokenSequence,
    ) -> Result<Var> {
        let (inputs, targets) = caption.shifted();
        let logits = self.logits_on_tape(tape, binder, input, mask, &inputs, true)?;
        caption_loss(tape, logits, &targets)
    }

    pub fn logits(&self, input: EncoderInput, mask: &CoarseMask, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = self.logits_on_tape(&mut tape, &mut binder, input, mask, ids, true)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-time `(F₁, F₂)`.
    pub fn encode_pair(&self, pair: &BiTemporalPair) -> Result<(TokenGrid, TokenGrid)> {
        let patches = self.patches(pair)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let joint = self.encoder.encode(&mut tape, &mut binder, &patches, true)?;
        self.encoder.split_frames(tape.value(joint))
    }

    fn memory(&self, input: EncoderInput, mask: &CoarseMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let encoded = self.encode_on_tape(&mut tape, &mut binder, input, true)?;
        let mem = self.memory_on_tape(&mut tape, &mut binder, encoded, mask)?;
        Ok(tape.value(mem).clone())
    }

    /// Greedy decoding from BOS: appends the arg-max token (smallest id on
    /// ties) until EOS or `max_len` ids.
    pub fn greedy_decode(&self, input: EncoderInput, mask: &CoarseMask) -> Result<TokenSequence> {
        let memory = self.memory(input, mask)?;
        let mut cache = self.decoder.start(&self.params, &memory)?;
        let mut ids = vec![crate::decoder::BOS];
        loop {
            let logits = self.decoder.step(&self.params, &mut cache, ids[ids.len() - 1])?;
            let next = argmax(logits.data());
            ids.push(next);
            if next == EOS || ids.len() >= self.config.max_len {
                break;
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn caption_pair(&self, pair: &BiTemporalPair, mask: &CoarseMask) -> Result<TokenSequence> {
        let patches = self.patches(pair)?;
        self.greedy_decode(EncoderInput::Patches(&patches), mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params.to_named())
    }

    /// Builds the architecture from `config` and fills it from `path`.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = CaptionModel::new(config, 0)?;
        let tensors = checkpoint::load(path)?;
        model.params.load_from(&tensors)?;
        Ok(model)
    }
}

/// Index of the largest value; the earliest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
