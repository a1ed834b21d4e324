//! Exact (bitwise) structural contracts of the captioning pipeline.

use mvcc_core::data::{generate, GenerateOptions, Vocabulary};
use mvcc_core::decoder::BOS;
use mvcc_core::encoder::ModelConfig;
use mvcc_core::maskguide::{CoarseMask, MaskMode};
use mvcc_core::model::{argmax, CaptionModel, EncoderInput};
use mvcc_core::numerics::{randn, rng_stream, AdamConfig, Binder, Tape, Tensor};
use mvcc_core::raster::BinaryMask;
use mvcc_core::train::{fit_steps, prepare, RunConfig};
use nalgebra::DMatrix;
use rand::Rng;

pub type Check = Result<(), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn toy_config(vocab_size: usize, mask_mode: MaskMode) -> ModelConfig {
    ModelConfig { vocab_size, mask_mode, ..ModelConfig::default() }
}

fn random_ids(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend((1..len).map(|_| rng.random_range(3..vocab)));
    ids
}

/// Perturbing encoder output rows at mask-zero positions (both frames)
/// leaves the logits bit-identical; perturbing a kept row does not.
pub fn masked_token_invariance(trials: usize, mode: MaskMode, seed: u64) -> Check {
    let cfg = toy_config(20, mode);
    let model = CaptionModel::new(cfg.clone(), seed).map_err(err)?;
    let mut rng = rng_stream(seed, "contract.masked");
    let (g, hw, c) = (cfg.grid(), cfg.tokens_per_frame(), cfg.channels);
    for trial in 0..trials {
        let mut bits: Vec<u8> = (0..hw).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let keep = rng.random_range(0..hw);
        bits[keep] = 1;
        let mask = CoarseMask::new(BinaryMask::new(g, g, bits.clone()).map_err(err)?);
        let encoded = randn(&mut rng, &[2 * hw, c], 1.0);
        let ids = random_ids(&mut rng, 6, cfg.vocab_size);
        let base = model.logits(EncoderInput::Encoded(&encoded), &mask, &ids).map_err(err)?;

        let mut perturbed = encoded.clone();
        for (i, &b) in bits.iter().enumerate() {
            if b == 0 {
                for row in [i, hw + i] {
                    for j in 0..c {
                        perturbed.data_mut()[row * c + j] += rng.random_range(-50.0..50.0);
                    }
                }
            }
        }
        let after = model.logits(EncoderInput::Encoded(&perturbed), &mask, &ids).map_err(err)?;
        if !base.bit_eq(&after) {
            return Err(format!("{mode:?} trial {trial}: logits moved by {:e}", base.max_abs_diff(&after)));
        }

        let mut kept = encoded.clone();
        kept.data_mut()[keep * c] += 1.0;
        let moved = model.logits(EncoderInput::Encoded(&kept), &mask, &ids).map_err(err)?;
        if base.bit_eq(&moved) {
            return Err(format!("{mode:?} trial {trial}: a kept token had no effect"));
        }
    }
    Ok(())
}

/// Every substitution at every position `t` of a length-8 input leaves
/// logit rows `< t` bit-identical and changes row `t`.
pub fn causal_no_leakage(seed: u64) -> Check {
    let cfg = toy_config(24, MaskMode::Zero);
    let model = CaptionModel::new(cfg.clone(), seed).map_err(err)?;
    let mut rng = rng_stream(seed, "contract.causal");
    let hw = cfg.tokens_per_frame();
    let encoded = randn(&mut rng, &[2 * hw, cfg.channels], 1.0);
    let mask = CoarseMask::ones(cfg.grid());
    let ids = random_ids(&mut rng, 8, cfg.vocab_size);
    let base = model.logits(EncoderInput::Encoded(&encoded), &mask, &ids).map_err(err)?;
    let k = cfg.vocab_size;
    for t in 0..ids.len() {
        for v in (0..k).filter(|&v| v != ids[t]) {
            let mut alt = ids.clone();
            alt[t] = v;
            let out = model.logits(EncoderInput::Encoded(&encoded), &mask, &alt).map_err(err)?;
            if !bitwise(&base.data()[..t * k], &out.data()[..t * k]) {
                return Err(format!("token {v} at position {t} changed an earlier row"));
            }
            if bitwise(&base.data()[t * k..(t + 1) * k], &out.data()[t * k..(t + 1) * k]) {
                return Err(format!("token {v} at position {t} did not reach its own row"));
            }
        }
    }
    Ok(())
}

fn bitwise(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Logits of every prefix equal the matching rows of the full sequence.
pub fn teacher_forcing_consistency(seed: u64) -> Check {
    let cfg = toy_config(24, MaskMode::Zero);
    let model = CaptionModel::new(cfg.clone(), seed).map_err(err)?;
    let mut rng = rng_stream(seed, "contract.prefix");
    let encoded = randn(&mut rng, &[2 * cfg.tokens_per_frame(), cfg.channels], 1.0);
    let mask = CoarseMask::ones(cfg.grid());
    let ids = random_ids(&mut rng, 10, cfg.vocab_size);
    let full = model.logits(EncoderInput::Encoded(&encoded), &mask, &ids).map_err(err)?;
    for len in 1..ids.len() {
        let part = model.logits(EncoderInput::Encoded(&encoded), &mask, &ids[..len]).map_err(err)?;
        if !bitwise(part.data(), &full.data()[..part.numel()]) {
            return Err(format!("prefix of length {len} disagrees with the full sequence"));
        }
    }
    Ok(())
}

/// Feeding a greedy decode back through the full forward pass gives, at
/// every position, an argmax equal to the next decoded token.
pub fn greedy_round_trip(seed: u64) -> Check {
    let cfg = toy_config(24, MaskMode::Zero);
    let model = CaptionModel::new(cfg.clone(), seed).map_err(err)?;
    let mut rng = rng_stream(seed, "contract.greedy");
    let encoded = randn(&mut rng, &[2 * cfg.tokens_per_frame(), cfg.channels], 1.0);
    let mask = CoarseMask::ones(cfg.grid());
    let seq = model.greedy_decode(EncoderInput::Encoded(&encoded), &mask).map_err(err)?;
    let n = seq.ids.len();
    let logits = model.logits(EncoderInput::Encoded(&encoded), &mask, &seq.ids[..n - 1]).map_err(err)?;
    for t in 0..n - 1 {
        let best = argmax(logits.row(t));
        if best != seq.ids[t + 1] {
            return Err(format!("position {t}: forward argmax {best}, decoded {}", seq.ids[t + 1]));
        }
    }
    Ok(())
}

/// With an all-ones mask, perturbing any one of four memory rows changes
/// the logits at every position.
pub fn memory_reaches_every_position(seed: u64) -> Check {
    let cfg = ModelConfig { image_size: 32, patch_size: 16, ..toy_config(24, MaskMode::Zero) };
    let model = CaptionModel::new(cfg.clone(), seed).map_err(err)?;
    let mut rng = rng_stream(seed, "contract.memory");
    let memory = randn(&mut rng, &[4, cfg.decoder_width], 1.0);
    let ids = random_ids(&mut rng, 6, cfg.vocab_size);
    let run = |mem: &Tensor| -> Result<Tensor, String> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let m = tape.constant(mem.clone());
        let out = model.decoder().forward(&mut tape, &mut binder, &ids, m).map_err(err)?;
        Ok(tape.value(out).clone())
    };
    let base = run(&memory)?;
    let k = cfg.vocab_size;
    for r in 0..4 {
        let mut m = memory.clone();
        for j in 0..cfg.decoder_width {
            m.data_mut()[r * cfg.decoder_width + j] += 0.5;
        }
        let out = run(&m)?;
        for t in 0..ids.len() {
            if bitwise(&base.data()[t * k..(t + 1) * k], &out.data()[t * k..(t + 1) * k]) {
                return Err(format!("memory row {r} does not reach position {t}"));
            }
        }
    }
    Ok(())
}

/// Zero-initialised adapters reproduce the adapter-free pipeline bit for bit.
pub fn lora_zero_init_identity(seed: u64) -> Check {
    let cfg = toy_config(24, MaskMode::Zero);
    let model = CaptionModel::new(cfg.clone(), seed).map_err(err)?;
    let mut rng = rng_stream(seed, "contract.lora");
    let patches = randn(&mut rng, &[2 * cfg.tokens_per_frame(), cfg.patch_dim()], 1.0);
    let mask = CoarseMask::ones(cfg.grid());
    let ids = random_ids(&mut rng, 7, cfg.vocab_size);
    let logits = |use_lora: bool| -> Result<Tensor, String> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let out = model
            .logits_on_tape(&mut tape, &mut binder, EncoderInput::Patches(&patches), &mask, &ids, use_lora)
            .map_err(err)?;
        Ok(tape.value(out).clone())
    };
    let (with, without) = (logits(true)?, logits(false)?);
    if !with.bit_eq(&without) {
        return Err(format!("adapters at init moved logits by {:e}", with.max_abs_diff(&without)));
    }
    Ok(())
}

/// Trains for `steps` Adam steps; every frozen weight must be unchanged
/// bit for bit and each adapter product must have rank ≤ r.
pub fn lora_training_contracts(steps: usize, seed: u64) -> Check {
    let data = generate(&GenerateOptions::new(8, seed));
    let caps: Vec<&str> = data.iter().flat_map(|i| i.pair.captions.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&caps, 1).map_err(err)?;
    let cfg = toy_config(vocab.len(), MaskMode::Zero);
    let mut model = CaptionModel::new(cfg.clone(), seed).map_err(err)?;
    let initial = model.params.clone();
    let items = prepare(&model, &vocab, &data, &RunConfig::default()).map_err(err)?;
    fit_steps(&mut model, &items, steps, AdamConfig { lr: 1e-3, ..AdamConfig::default() }).map_err(err)?;
    let mut frozen = 0;
    for i in 0..model.params.len() {
        if model.params.is_trainable(i) {
            continue;
        }
        frozen += 1;
        if !model.params.tensor(i).bit_eq(initial.tensor(i)) {
            return Err(format!("frozen weight {} changed", model.params.name(i)));
        }
    }
    if frozen == 0 {
        return Err("no frozen weights found".into());
    }
    let adapters = model.encoder().adapters().ok_or("model has no adapters")?;
    for ad in [&adapters.q, &adapters.k, &adapters.v] {
        let a = model.params.value(ad.a);
        let b = model.params.value(ad.b);
        if b.data().iter().all(|&v| v == 0.0) {
            return Err(format!("adapter for {} never trained", ad.target));
        }
        let ab = a.matmul(b).map_err(err)?;
        let sv = singular_values(&ab);
        if sv.iter().skip(cfg.lora_rank).any(|&s| s >= 1e-10) {
            return Err(format!(
                "{}: singular values beyond rank {}: {:?}",
                ad.target,
                cfg.lora_rank,
                &sv[cfg.lora_rank..]
            ));
        }
    }
    Ok(())
}

/// Descending singular values, computed by nalgebra.
pub fn singular_values(t: &Tensor) -> Vec<f64> {
    let (r, c) = t.dims2().expect("matrix");
    let m = DMatrix::from_row_slice(r, c, t.data());
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
