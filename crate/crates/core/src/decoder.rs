//! Causal transformer caption decoder with cross-attention over the
//! filtered visual memory.

use rand::Rng;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, Linear, Norm, QkvOverride};
use crate::numerics::{randn, Binder, ParamId, Params, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Caption as vocabulary ids: `BOS w… EOS PAD…`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Wraps word ids as `BOS words EOS`.
    pub fn from_words(words: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(words);
        ids.push(EOS);
        TokenSequence { ids }
    }

    /// Ids strictly between BOS and the first EOS (or PAD).
    pub fn words(&self) -> &[usize] {
        let start = usize::from(self.ids.first() == Some(&BOS));
        let end = self.ids[start..].iter().position(|&t| t == EOS || t == PAD).map_or(self.ids.len(), |p| p + start);
        &self.ids[start..end]
    }

    pub fn is_terminated(&self) -> bool {
        self.ids.contains(&EOS)
    }

    /// Teacher-forcing split: decoder inputs and the next-token targets,
    /// with PAD targets excluded.
    pub fn shifted(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let n = self.ids.len().saturating_sub(1);
        let inputs = self.ids[..n].to_vec();
        let targets = self.ids[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
        (inputs, targets)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

/// Projected keys and values of the memory and of every position decoded
/// so far, one entry per layer.
#[derive(Clone, Debug)]
pub struct DecodeCache {
    cross: Vec<(Tensor, Tensor)>,
    past: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl DecodeCache {
    /// Number of positions already fed through the decoder.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<Layer>,
    norm: Norm,
    head: Linear,
    vocab: usize,
    max_len: usize,
}

impl Decoder {
    pub fn init(params: &mut Params, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.decoder_width;
        let std = 1.0 / (d as f64).sqrt();
        let tok = params.insert("embed.tok", randn(rng, &[cfg.vocab_size, d], std), true);
        let pos = params.insert("embed.pos", randn(rng, &[cfg.max_len, d], std), true);
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                Layer {
                    ln_self: Norm::init(params, &format!("{p}.ln_self"), d, true),
                    self_attn: Attention::init(params, rng, &format!("{p}.self"), d, cfg.heads, true),
                    ln_cross: Norm::init(params, &format!("{p}.ln_cross"), d, true),
                    cross_attn: Attention::init(params, rng, &format!("{p}.cross"), d, cfg.heads, true),
                    ln_ff: Norm::init(params, &format!("{p}.ln_ff"), d, true),
                    ff: FeedForward::init(params, rng, &format!("{p}.ff"), d, 4 * d, true),
                }
            })
            .collect();
        let norm = Norm::init(params, "decoder.norm", d, true);
        let head = Linear::init(params, rng, "head", d, cfg.vocab_size, true);
        Decoder { tok, pos, layers, norm, head, vocab: cfg.vocab_size, max_len: cfg.max_len }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// `f_emb(t) + E_pos` for the given input ids.
    pub fn embed(&self, tape: &mut Tape, binder: &mut Binder, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.max_len {
            return Err(Error::Contract(format!("decoder input of length {} outside 1..={}", ids.len(), self.max_len)));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::Vocabulary { id, size: self.vocab });
        }
        let tok = binder.var(tape, self.tok);
        let rows = tape.select_rows(tok, ids)?;
        let pos = binder.var(tape, self.pos);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos_rows = tape.select_rows(pos, &positions)?;
        tape.add(rows, pos_rows)
    }

    /// Per-position vocabulary logits, `T × K`.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, ids: &[usize], memory: Var) -> Result<Var> {
        let mut x = self.embed(tape, binder, ids)?;
        let width = tape.value(x).dims2()?.1;
        let mem_width = tape.value(memory).dims2()?.1;
        if mem_width != width {
            return Err(Error::Dimension(format!("memory width {mem_width}, decoder width {width}")));
        }
        for layer in &self.layers {
            let h = layer.ln_self.forward(tape, binder, x)?;
            let h = layer.self_attn.forward(tape, binder, h, h, true, QkvOverride::default())?;
            x = tape.add(x, h)?;
            let h = layer.ln_cross.forward(tape, binder, x)?;
            let h = layer.cross_attn.forward(tape, binder, h, memory, false, QkvOverride::default())?;
            x = tape.add(x, h)?;
            let h = layer.ln_ff.forward(tape, binder, x)?;
            let h = layer.ff.forward(tape, binder, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.norm.forward(tape, binder, x)?;
        self.head.forward(tape, binder, x)
    }
}

impl Decoder {
    /// Projects `memory` once for incremental decoding.
    pub fn start(&self, params: &Params, memory: &Tensor) -> Result<DecodeCache> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let width = params.value(self.tok).dims2()?.1;
        let mem_width = memory.dims2()?.1;
        if mem_width != width {
            return Err(Error::Dimension(format!("memory width {mem_width}, decoder width {width}")));
        }
        let mem = tape.constant(memory.clone());
        let mut cross = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (k, v) = layer.cross_attn.keys_values(&mut tape, &mut binder, mem)?;
            cross.push((tape.value(k).clone(), tape.value(v).clone()));
        }
        Ok(DecodeCache { cross, past: vec![None; self.layers.len()], len: 0 })
    }

    /// Logits (`1 × K`) for `id` placed at the next position. Every kernel is
    /// row-independent, so this equals the last row of [`Decoder::forward`]
    /// over the whole prefix bit for bit.
    pub fn step(&self, params: &Params, cache: &mut DecodeCache, id: usize) -> Result<Tensor> {
        let pos = cache.len;
        if pos >= self.max_len {
            return Err(Error::Contract(format!("decoder input of length {} outside 1..={}", pos + 1, self.max_len)));
        }
        if id >= self.vocab {
            return Err(Error::Vocabulary { id, size: self.vocab });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let tok = binder.var(&mut tape, self.tok);
        let row = tape.select_rows(tok, &[id])?;
        let table = binder.var(&mut tape, self.pos);
        let pos_row = tape.select_rows(table, &[pos])?;
        let mut x = tape.add(row, pos_row)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let h = layer.ln_self.forward(&mut tape, &mut binder, x)?;
            let q = layer.self_attn.q.forward(&mut tape, &mut binder, h)?;
            let (k, v) = layer.self_attn.keys_values(&mut tape, &mut binder, h)?;
            let (k, v) = match &cache.past[i] {
                Some((pk, pv)) => {
                    let (pk, pv) = (tape.constant(pk.clone()), tape.constant(pv.clone()));
                    (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
                }
                None => (k, v),
            };
            cache.past[i] = Some((tape.value(k).clone(), tape.value(v).clone()));
            let h = layer.self_attn.attend(&mut tape, &mut binder, q, k, v, false)?;
            x = tape.add(x, h)?;
            let h = layer.ln_cross.forward(&mut tape, &mut binder, x)?;
            let q = layer.cross_attn.q.forward(&mut tape, &mut binder, h)?;
            let (ck, cv) = &cache.cross[i];
            let (ck, cv) = (tape.constant(ck.clone()), tape.constant(cv.clone()));
            let h = layer.cross_attn.attend(&mut tape, &mut binder, q, ck, cv, false)?;
            x = tape.add(x, h)?;
            let h = layer.ln_ff.forward(&mut tape, &mut binder, x)?;
            let h = layer.ff.forward(&mut tape, &mut binder, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.norm.forward(&mut tape, &mut binder, x)?;
        let out = self.head.forward(&mut tape, &mut binder, x)?;
        cache.len += 1;
        Ok(tape.value(out).clone())
    }
}

/// Mean cross-entropy over non-PAD targets.
pub fn caption_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    if targets.iter().all(Option::is_none) {
        return Err(Error::Contract("reference is all padding".into()));
    }
    tape.cross_entropy(logits, targets)
}
