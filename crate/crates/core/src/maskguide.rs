//! Change-mask guidance: bring a pixel mask down to token resolution and use
//! it to silence or remove the tokens of unchanged regions before decoding.

use serde::{Deserialize, Serialize};

use crate::encoder::{BiTemporalPair, TokenGrid};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::raster::BinaryMask;

/// Full-resolution change mask.
pub type ChangeMask = BinaryMask;

/// Token-resolution mask, `h×w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoarseMask(BinaryMask);

impl CoarseMask {
    pub fn new(mask: BinaryMask) -> Self {
        CoarseMask(mask)
    }

    pub fn ones(grid: usize) -> Self {
        CoarseMask(BinaryMask::ones(grid, grid))
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }

    pub fn as_mask(&self) -> &BinaryMask {
        &self.0
    }

    /// Row-major flattening, one entry per token of a frame.
    pub fn flattened(&self) -> &[u8] {
        &self.0.data
    }

    pub fn count_ones(&self) -> usize {
        self.0.count_ones()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Multiply unchanged tokens by zero; sequence length is kept.
    #[default]
    Zero,
    /// Remove unchanged tokens from the memory.
    Drop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleMode {
    /// Sample the pixel at each cell's center.
    #[default]
    Nearest,
    /// A cell is changed if any of its pixels is.
    Any,
}

fn cell_size(mask: &ChangeMask, h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || !mask.height.is_multiple_of(h) || !mask.width.is_multiple_of(w) {
        return Err(Error::Dimension(format!("{}x{} mask cannot be reduced to {h}x{w}", mask.height, mask.width)));
    }
    Ok((mask.height / h, mask.width / w))
}

/// `out(i,j) = mask(⌊(i+½)·s⌋, ⌊(j+½)·s⌋)`.
pub fn downsample_nearest(mask: &ChangeMask, h: usize, w: usize) -> Result<CoarseMask> {
    let (sy, sx) = cell_size(mask, h, w)?;
    let mut out = BinaryMask::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            // (i + 0.5) * s, floored, in integer arithmetic
            let r = (2 * i + 1) * sy / 2;
            let c = (2 * j + 1) * sx / 2;
            out.set(i, j, mask.get(r, c) == 1);
        }
    }
    Ok(CoarseMask(out))
}

/// Block maximum: a cell is 1 iff any pixel in it is 1.
pub fn downsample_any(mask: &ChangeMask, h: usize, w: usize) -> Result<CoarseMask> {
    let (sy, sx) = cell_size(mask, h, w)?;
    let mut out = BinaryMask::zeros(h, w);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) == 1 {
                out.set(r / sy, c / sx, true);
            }
        }
    }
    Ok(CoarseMask(out))
}

pub fn downsample(mask: &ChangeMask, h: usize, w: usize, mode: DownsampleMode) -> Result<CoarseMask> {
    match mode {
        DownsampleMode::Nearest => downsample_nearest(mask, h, w),
        DownsampleMode::Any => downsample_any(mask, h, w),
    }
}

/// Builds the decoder memory `[F̃₁ ⊙ m ; F̃₂ ⊙ m]` on the tape.
///
/// In zero mode masked rows become exact `+0.0`, so their pre-mask values
/// cannot influence anything downstream. In drop mode they are removed.
pub fn filter_memory(tape: &mut Tape, f1: Var, f2: Var, mask: &CoarseMask, mode: MaskMode) -> Result<Var> {
    let m = mask.flattened();
    for f in [f1, f2] {
        let rows = tape.value(f).dims2()?.0;
        if rows != m.len() {
            return Err(Error::Dimension(format!("mask covers {} tokens, frame has {rows}", m.len())));
        }
    }
    let hw = m.len();
    match mode {
        MaskMode::Zero => {
            let joint = tape.concat_rows(&[f1, f2])?;
            let keep: Vec<bool> = m.iter().chain(m).map(|&v| v == 1).collect();
            if keep.iter().all(|&k| k) {
                return Ok(joint);
            }
            tape.mask_rows(joint, &keep)
        }
        MaskMode::Drop => {
            let kept: Vec<usize> = (0..hw).filter(|&k| m[k] == 1).collect();
            if kept.is_empty() {
                return Err(Error::DegenerateMemory("drop mode with an all-zero change mask".into()));
            }
            let joint = tape.concat_rows(&[f1, f2])?;
            if kept.len() == hw {
                return Ok(joint);
            }
            let indices: Vec<usize> = kept.iter().copied().chain(kept.iter().map(|k| k + hw)).collect();
            tape.select_rows(joint, &indices)
        }
    }
}

/// Value-level form of [`filter_memory`].
pub fn filter_tokens(f1: &TokenGrid, f2: &TokenGrid, mask: &CoarseMask, mode: MaskMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(f1.tokens.clone());
    let b = tape.constant(f2.tokens.clone());
    let out = filter_memory(&mut tape, a, b, mask, mode)?;
    Ok(tape.value(out).clone())
}

/// Differencing stand-in for a trained change detector: mean absolute
/// channel difference above `threshold`, minus 4-connected blobs smaller
/// than `min_blob` pixels.
pub fn diff_cd_baseline(pair: &BiTemporalPair, threshold: f64, min_blob: usize) -> ChangeMask {
    let (h, w) = (pair.image_a.height, pair.image_a.width);
    let mut mask = BinaryMask::zeros(h, w);
    for (i, (a, b)) in pair.image_a.data.chunks(3).zip(pair.image_b.data.chunks(3)).enumerate() {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0;
        mask.data[i] = u8::from(diff > threshold);
    }
    remove_small_blobs(&mut mask, min_blob);
    mask
}

fn remove_small_blobs(mask: &mut BinaryMask, min_blob: usize) {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || seen[start] {
            continue;
        }
        let mut blob = vec![start];
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data[q] == 1 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                    blob.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if blob.len() < min_blob {
            for p in blob {
                mask.data[p] = 0;
            }
        }
    }
}

/// Intersection over union of two same-sized masks; 1 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x == 1 && **y == 1).count();
    let union = a.data.iter().zip(&b.data).filter(|(x, y)| **x == 1 || **y == 1).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
