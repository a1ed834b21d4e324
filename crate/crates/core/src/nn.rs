//! Parameterized building blocks shared by the encoder and decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{randn, Binder, ParamId, Params, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        params: &mut Params,
        rng: &mut impl Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = params.insert(format!("{prefix}.W"), randn(rng, &[fan_in, fan_out], std), trainable);
        let b = params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]), trainable);
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.var(tape, self.w);
        self.forward_with(tape, binder, x, w)
    }

    /// Affine map with an externally supplied weight (e.g. a LoRA-merged one).
    pub fn forward_with(&self, tape: &mut Tape, binder: &mut Binder, x: Var, w: Var) -> Result<Var> {
        let b = binder.var(tape, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row_bias(xw, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init(params: &mut Params, prefix: &str, width: usize, trainable: bool) -> Self {
        let gain = params.insert(format!("{prefix}.g"), Tensor::full(&[width], 1.0), trainable);
        let bias = params.insert(format!("{prefix}.b"), Tensor::zeros(&[width]), trainable);
        Norm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let g = binder.var(tape, self.gain);
        let b = binder.var(tape, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Weights substituted for the q/k/v projections, e.g. after LoRA merging.
#[derive(Clone, Copy, Debug, Default)]
pub struct QkvOverride {
    pub q: Option<Var>,
    pub k: Option<Var>,
    pub v: Option<Var>,
}

impl Attention {
    pub fn init(
        params: &mut Params,
        rng: &mut impl Rng,
        prefix: &str,
        width: usize,
        heads: usize,
        trainable: bool,
    ) -> Self {
        Attention {
            q: Linear::init(params, rng, &format!("{prefix}.q"), width, width, trainable),
            k: Linear::init(params, rng, &format!("{prefix}.k"), width, width, trainable),
            v: Linear::init(params, rng, &format!("{prefix}.v"), width, width, trainable),
            o: Linear::init(params, rng, &format!("{prefix}.o"), width, width, trainable),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `keys_values`. With
    /// `causal`, query row `t` sees key rows `0..=t` only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        queries: Var,
        keys_values: Var,
        causal: bool,
        overrides: QkvOverride,
    ) -> Result<Var> {
        let project = |tape: &mut Tape, binder: &mut Binder, lin: &Linear, x: Var, w: Option<Var>| match w {
            Some(w) => lin.forward_with(tape, binder, x, w),
            None => lin.forward(tape, binder, x),
        };
        let q = project(tape, binder, &self.q, queries, overrides.q)?;
        let k = project(tape, binder, &self.k, keys_values, overrides.k)?;
        let v = project(tape, binder, &self.v, keys_values, overrides.v)?;
        self.attend(tape, binder, q, k, v, causal)
    }

    /// Key and value projections of `x`, for reuse across decoding steps.
    pub fn keys_values(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(tape, binder, x)?, self.v.forward(tape, binder, x)?))
    }

    /// Attention of already projected queries over projected keys and
    /// values, followed by the output projection.
    pub fn attend(&self, tape: &mut Tape, binder: &mut Binder, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let width = tape.value(q).dims2()?.1;
        if width % self.heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {} heads", self.heads)));
        }
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax(scores, causal)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(tape, binder, merged)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn init(
        params: &mut Params,
        rng: &mut impl Rng,
        prefix: &str,
        width: usize,
        hidden: usize,
        trainable: bool,
    ) -> Self {
        FeedForward {
            fc1: Linear::init(params, rng, &format!("{prefix}.fc1"), width, hidden, trainable),
            fc2: Linear::init(params, rng, &format!("{prefix}.fc2"), hidden, width, trainable),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, binder, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, binder, h)
    }
}
