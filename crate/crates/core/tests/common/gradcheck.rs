//! Central finite differences against tape gradients.

use mvcc_core::decoder::TokenSequence;
use mvcc_core::encoder::{apply_lora_var, LoraAdapter, ModelConfig, Projector};
use mvcc_core::maskguide::CoarseMask;
use mvcc_core::maskguide::MaskMode;
use mvcc_core::model::{CaptionModel, EncoderInput};
use mvcc_core::nn::{Attention, FeedForward, Linear, Norm};
use mvcc_core::numerics::{randn, rng_stream, Binder, ParamId, Params, Tape, Tensor, Var};
use mvcc_core::raster::BinaryMask;
use mvcc_core::Result;
use rand::Rng;

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Differentiable scalar built from `params`. Non-scalar outputs are
/// reduced against a fixed random probe so every output element matters.
fn scalar_loss<'p, F>(params: &'p Params, f: &F, probe_seed: u64) -> Result<(Tape, Binder<'p>, Var)>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(params).with_all_grads();
    let out = f(&mut tape, &mut binder)?;
    let value = tape.value(out);
    if value.numel() == 1 {
        let loss = if value.is_scalar() { out } else { tape.sum(out) };
        return Ok((tape, binder, loss));
    }
    let probe = randn(&mut rng_stream(probe_seed, "gradcheck.probe"), value.shape(), 1.0);
    let p = tape.constant(probe);
    let weighted = tape.mul(out, p)?;
    let loss = tape.sum(weighted);
    Ok((tape, binder, loss))
}

/// Compares every gradient entry (or `sample` random entries per tensor)
/// of every parameter against central differences.
pub fn check<F>(name: &str, params: &Params, f: F, sample: Option<usize>, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    check_with_eps(name, params, f, sample, seed, EPS)
}

pub fn check_with_eps<F>(
    name: &str,
    params: &Params,
    f: F,
    sample: Option<usize>,
    seed: u64,
    eps: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let (mut tape, binder, loss) = scalar_loss(params, &f, seed)?;
    tape.backward(loss)?;
    let grads = binder.grads(&tape);
    let mut pick = rng_stream(seed, "gradcheck.sample");
    let mut report = GradReport { name: name.to_string(), max_rel: 0.0, worst: String::new(), checked: 0 };
    let mut work = params.clone();
    for (i, grad) in grads.iter().enumerate() {
        let numel = params.tensor(i).numel();
        let zeros = Tensor::zeros(params.tensor(i).shape());
        let grad = grad.as_ref().unwrap_or(&zeros);
        let entries: Vec<usize> = match sample {
            Some(k) if k < numel => (0..k).map(|_| pick.random_range(0..numel)).collect(),
            _ => (0..numel).collect(),
        };
        for j in entries {
            let orig = work.tensor(i).data()[j];
            work.tensor_mut(i).data_mut()[j] = orig + eps;
            let plus = eval(&work, &f, seed)?;
            work.tensor_mut(i).data_mut()[j] = orig - eps;
            let minus = eval(&work, &f, seed)?;
            work.tensor_mut(i).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let r = rel_err(grad.data()[j], numeric);
            report.checked += 1;
            if r > report.max_rel || !r.is_finite() {
                report.max_rel = if r.is_finite() { r } else { f64::INFINITY };
                report.worst = format!("{}[{j}]: tape {:e} vs numeric {:e}", params.name(i), grad.data()[j], numeric);
            }
        }
    }
    Ok(report)
}

fn eval<F>(params: &Params, f: &F, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let (tape, _, loss) = scalar_loss(params, f, seed)?;
    Ok(tape.value(loss).data()[0])
}

pub fn inputs(rng: &mut impl Rng, shapes: &[&[usize]], std: f64) -> (Params, Vec<ParamId>) {
    let mut p = Params::new();
    let ids = shapes.iter().enumerate().map(|(i, s)| p.insert(format!("in{i}"), randn(rng, s, std), true)).collect();
    (p, ids)
}

pub fn bind(tape: &mut Tape, binder: &mut Binder, ids: &[ParamId]) -> Vec<Var> {
    ids.iter().map(|&id| binder.var(tape, id)).collect()
}

/// One report per tape operation, on inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = rng_stream(seed, "gradcheck.ops");
    let mut out = Vec::new();
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let cases: Vec<(&str, Vec<&[usize]>, Build)> = vec![
        ("matmul", vec![&[3, 4], &[4, 5]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row_bias", vec![&[3, 4], &[4]], Box::new(|t, v| t.add_row_bias(v[0], v[1]))),
        ("scale", vec![&[3, 4]], Box::new(|t, v| Ok(t.scale(v[0], -0.7)))),
        ("transpose", vec![&[3, 5]], Box::new(|t, v| t.transpose(v[0]))),
        ("select_rows", vec![&[5, 3]], Box::new(|t, v| t.select_rows(v[0], &[4, 0, 4, 2]))),
        ("concat_rows", vec![&[2, 3], &[3, 3]], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("slice_cols", vec![&[3, 6]], Box::new(|t, v| t.slice_cols(v[0], 2, 3))),
        ("concat_cols", vec![&[3, 2], &[3, 4]], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("mask_rows", vec![&[4, 3]], Box::new(|t, v| t.mask_rows(v[0], &[true, false, true, false]))),
        ("softmax", vec![&[4, 5]], Box::new(|t, v| t.softmax(v[0], false))),
        ("softmax_causal", vec![&[4, 4]], Box::new(|t, v| t.softmax(v[0], true))),
        ("layer_norm", vec![&[3, 6], &[6], &[6]], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("gelu", vec![&[3, 4]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("cross_entropy", vec![&[4, 6]], Box::new(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)]))),
        ("sum", vec![&[3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
    ];
    for (name, shapes, build) in cases {
        let std = if name == "gelu" { 2.0 } else { 1.0 };
        let (params, ids) = inputs(&mut rng, &shapes, std);
        out.push(check(
            name,
            &params,
            |t, b| {
                let v = bind(t, b, &ids);
                build(t, &v)
            },
            None,
            seed,
        )?);
    }

    let mut params = Params::new();
    let x = params.insert("x", randn(&mut rng, &[5, 8], 1.0), true);
    let mem = params.insert("mem", randn(&mut rng, &[3, 8], 1.0), true);
    let lin = Linear::init(&mut params, &mut rng, "lin", 8, 6, true);
    let norm = Norm::init(&mut params, "norm", 8, true);
    let att = Attention::init(&mut params, &mut rng, "att", 8, 2, true);
    let ffn = FeedForward::init(&mut params, &mut rng, "ffn", 8, 16, true);
    for (i, name) in ["norm.g", "norm.b", "lin.b"].iter().enumerate() {
        let id = params.id(name).expect("registered");
        let shape = params.value(id).shape().to_vec();
        *params.value_mut(id) = randn(&mut rng_stream(seed, &format!("gradcheck.bias{i}")), &shape, 0.5);
    }
    out.push(check(
        "linear",
        &params,
        |t, b| {
            let v = b.var(t, x);
            lin.forward(t, b, v)
        },
        None,
        seed,
    )?);
    out.push(check(
        "norm",
        &params,
        |t, b| {
            let v = b.var(t, x);
            norm.forward(t, b, v)
        },
        None,
        seed,
    )?);
    out.push(check(
        "feed_forward",
        &params,
        |t, b| {
            let v = b.var(t, x);
            ffn.forward(t, b, v)
        },
        None,
        seed,
    )?);
    for causal in [false, true] {
        let name = if causal { "self_attention_causal" } else { "self_attention" };
        out.push(check(
            name,
            &params,
            |t, b| {
                let v = b.var(t, x);
                att.forward(t, b, v, v, causal, Default::default())
            },
            None,
            seed,
        )?);
    }
    out.push(check(
        "cross_attention",
        &params,
        |t, b| {
            let q = b.var(t, x);
            let kv = b.var(t, mem);
            att.forward(t, b, q, kv, false, Default::default())
        },
        None,
        seed,
    )?);

    let w = params.insert("lora.W", randn(&mut rng, &[8, 8], 0.5), true);
    let a = params.insert("lora.A", randn(&mut rng, &[8, 3], 0.5), true);
    let bb = params.insert("lora.B", randn(&mut rng, &[3, 8], 0.5), true);
    let adapter = LoraAdapter { a, b: bb, scale: 0.75, target: "lora.W".into() };
    out.push(check(
        "lora",
        &params,
        |t, b| {
            let wv = b.var(t, w);
            let merged = apply_lora_var(t, b, wv, &adapter)?;
            let v = b.var(t, x);
            t.matmul(v, merged)
        },
        None,
        seed,
    )?);

    let cfg = ModelConfig { channels: 8, decoder_width: 6, heads: 2, ..ModelConfig::default() };
    let mut pp = Params::new();
    let proj = Projector::init(&mut pp, &mut rng, &cfg);
    let toks = pp.insert("tokens", randn(&mut rng, &[4, 8], 1.0), true);
    for i in 0..pp.len() {
        let noise = randn(&mut rng, pp.tensor(i).shape(), 0.2);
        pp.tensor_mut(i).data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    out.push(check(
        "projector",
        &pp,
        |t, b| {
            let v = b.var(t, toks);
            proj.project(t, b, v)
        },
        None,
        seed,
    )?);
    Ok(out)
}

/// Small configuration that keeps a full-model check to a few seconds.
pub fn tiny_config(mask_mode: MaskMode) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        channels: 8,
        encoder_blocks: 2,
        heads: 2,
        decoder_layers: 1,
        decoder_width: 8,
        vocab_size: 7,
        max_len: 6,
        lora_rank: 2,
        mask_mode,
        ..ModelConfig::default()
    }
}

/// Model with every parameter (LoRA B, norms, biases included) moved off
/// its initial value so no gradient is trivially zero.
pub fn scrambled_model(cfg: ModelConfig, seed: u64) -> CaptionModel {
    let mut model = CaptionModel::new(cfg, seed).expect("valid config");
    let mut rng = rng_stream(seed, "gradcheck.scramble");
    for i in 0..model.params.len() {
        let t = model.params.tensor_mut(i);
        let noise = randn(&mut rng, t.shape(), 0.3);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(w, n)| *w += n);
    }
    model
}

/// Loss of the whole pipeline, patches to caption, against all parameters.
pub fn composite(seed: u64, mode: MaskMode, sample: Option<usize>) -> Result<GradReport> {
    let cfg = tiny_config(mode);
    let model = scrambled_model(cfg.clone(), seed);
    let mut rng = rng_stream(seed, "gradcheck.composite");
    let grid = cfg.grid();
    let patches = randn(&mut rng, &[2 * cfg.tokens_per_frame(), cfg.patch_dim()], 0.5);
    let mut bits: Vec<u8> = (0..grid * grid).map(|_| u8::from(rng.random_bool(0.6))).collect();
    bits[0] = 1;
    let mask = CoarseMask::new(BinaryMask::new(grid, grid, bits)?);
    let caption = TokenSequence::from_words(&[4, 6, 3, 5]);
    let name = format!("composite_{mode:?}").to_lowercase();
    let model_ref = &model;
    check(
        &name,
        &model.params,
        |t, b| model_ref.loss_on_tape(t, b, EncoderInput::Patches(&patches), &mask, &caption),
        sample,
        seed,
    )
}
