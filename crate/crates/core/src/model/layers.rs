//! Network layers, written as graph builders over [`Tape`].

use super::ModelVars;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Additive mask value for disallowed attention pairs; large enough to zero
/// the softmax weight, small enough to stay finite in f32.
const ATTN_MASK_NEG: f64 = -1e4;

/// Smoothing inside complex-modulus computations so gradients stay finite at
/// the origin.
const MODULUS_EPS: f64 = 1e-12;

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Zero-pads a `(C, H, W)` stack on the high ends so H and W become
/// multiples of `patch`, then maps each non-overlapping patch through one
/// affine transform to a `(H', W', D)` token grid.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    patch: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("patch_embed expects (C, H, W), got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (hp, wp) = (div_ceil(h, patch) * patch, div_ceil(w, patch) * patch);
    let (ht, wt) = (hp / patch, wp / patch);
    let d = tape.shape(weight)[1];

    let padded_h = tape.pad_axis(x, 1, hp - h)?;
    let padded = tape.pad_axis(padded_h, 2, wp - w)?;
    let split = tape.reshape(padded, &[c, ht, patch, wt, patch])?;
    let grouped = tape.permute(split, &[1, 3, 2, 4, 0])?; // (ht, wt, p, p, c)
    let flat = tape.reshape(grouped, &[ht * wt, patch * patch * c])?;
    let proj = tape.matmul(flat, weight)?;
    let biased = tape.add(proj, bias)?;
    tape.reshape(biased, &[ht, wt, d])
}

/// Inverse of [`patch_embed`]: maps each token to a `patch x patch x K`
/// block, tiles the padded canvas, and crops back to `(K, out_h, out_w)`.
pub fn patch_recover<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    patch: usize,
    out_channels: usize,
    out_h: usize,
    out_w: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("patch_recover expects (H', W', D), got {shape:?}")));
    }
    let (ht, wt) = (shape[0], shape[1]);
    if ht != div_ceil(out_h, patch) || wt != div_ceil(out_w, patch) {
        return Err(Error::Shape(format!(
            "token grid {ht}x{wt} inconsistent with output {out_h}x{out_w} at patch {patch}"
        )));
    }
    let flat = tape.reshape(tokens, &[ht * wt, shape[2]])?;
    let proj = tape.matmul(flat, weight)?;
    let biased = tape.add(proj, bias)?;
    let blocks = tape.reshape(biased, &[ht, wt, patch, patch, out_channels])?;
    let tiled = tape.permute(blocks, &[4, 0, 2, 1, 3])?; // (K, ht, p, wt, p)
    let canvas = tape.reshape(tiled, &[out_channels, ht * patch, wt * patch])?;
    let crop_h = tape.slice_axis(canvas, 1, 0, out_h)?;
    tape.slice_axis(crop_h, 2, 0, out_w)
}

/// Two-layer feed-forward with GELU, hidden size 4D.
pub struct MlpVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl MlpVars {
    pub fn from_store(vars: &ModelVars, prefix: &str) -> Result<MlpVars> {
        Ok(MlpVars {
            fc1_w: vars.get(&format!("{prefix}.mlp.fc1.weight"))?,
            fc1_b: vars.get(&format!("{prefix}.mlp.fc1.bias"))?,
            fc2_w: vars.get(&format!("{prefix}.mlp.fc2.weight"))?,
            fc2_b: vars.get(&format!("{prefix}.mlp.fc2.bias"))?,
        })
    }
}

pub fn mlp<T: Real>(tape: &mut Tape<T>, x: Var, p: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, p.fc1_w)?;
    let h = tape.add(h, p.fc1_b)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, p.fc2_w)?;
    tape.add(out, p.fc2_b)
}

/// Weights of the block-diagonal frequency-domain mixer.
pub struct MixVars {
    pub w1_re: Var,
    pub w1_im: Var,
    pub b1_re: Var,
    pub b1_im: Var,
    pub w2_re: Var,
    pub w2_im: Var,
    pub b2_re: Var,
    pub b2_im: Var,
    pub act_bias: Var,
}

impl MixVars {
    pub fn from_store(vars: &ModelVars, prefix: &str) -> Result<MixVars> {
        Ok(MixVars {
            w1_re: vars.get(&format!("{prefix}.mix.w1.re"))?,
            w1_im: vars.get(&format!("{prefix}.mix.w1.im"))?,
            b1_re: vars.get(&format!("{prefix}.mix.b1.re"))?,
            b1_im: vars.get(&format!("{prefix}.mix.b1.im"))?,
            w2_re: vars.get(&format!("{prefix}.mix.w2.re"))?,
            w2_im: vars.get(&format!("{prefix}.mix.w2.im"))?,
            b2_re: vars.get(&format!("{prefix}.mix.b2.re"))?,
            b2_im: vars.get(&format!("{prefix}.mix.b2.im"))?,
            act_bias: vars.get(&format!("{prefix}.mix.act_bias"))?,
        })
    }
}

/// Complex batched product `(re, im) x (w_re, w_im)` plus complex bias.
fn complex_block_affine<T: Real>(
    tape: &mut Tape<T>,
    re: Var,
    im: Var,
    w_re: Var,
    w_im: Var,
    b_re: Var,
    b_im: Var,
) -> Result<(Var, Var)> {
    let rr = tape.matmul(re, w_re)?;
    let ii = tape.matmul(im, w_im)?;
    let ri = tape.matmul(re, w_im)?;
    let ir = tape.matmul(im, w_re)?;
    let out_re = tape.sub(rr, ii)?;
    let out_im = tape.add(ri, ir)?;
    let nb = tape.shape(b_re)[0];
    let bs = tape.shape(b_re)[1];
    let b_re3 = tape.reshape(b_re, &[nb, 1, bs])?;
    let b_im3 = tape.reshape(b_im, &[nb, 1, bs])?;
    Ok((tape.add(out_re, b_re3)?, tape.add(out_im, b_im3)?))
}

/// Multiplies a complex tensor by a real gate derived from its modulus.
/// `offset` is added to the modulus before the ReLU: a learned bias gives the
/// complex ReLU, a negative constant gives soft-shrinkage. Phase is
/// preserved, so the gate commutes with the diagonal action of translations
/// in frequency space.
fn modulus_gate<T: Real>(
    tape: &mut Tape<T>,
    re: Var,
    im: Var,
    offset: Option<Var>,
    offset_scalar: T,
) -> Result<(Var, Var)> {
    let re2 = tape.mul(re, re)?;
    let im2 = tape.mul(im, im)?;
    let sum = tape.add(re2, im2)?;
    let sum = tape.add_scalar(sum, T::fd(MODULUS_EPS));
    let m = tape.sqrt(sum);
    let shifted = match offset {
        Some(b) => {
            let nb = tape.shape(b)[0];
            let bs = tape.shape(b)[1];
            let b3 = tape.reshape(b, &[nb, 1, bs])?;
            tape.add(m, b3)?
        }
        None => tape.add_scalar(m, offset_scalar),
    };
    let active = tape.relu(shifted);
    let inv_m = tape.recip(m);
    let gate = tape.mul(active, inv_m)?;
    Ok((tape.mul(re, gate)?, tape.mul(im, gate)?))
}

/// Frequency-domain token mixing: FFT over the token grid, a per-frequency
/// block-diagonal two-layer complex MLP (complex-ReLU between), modulus
/// soft-shrinkage, inverse FFT. The imaginary residue of the inverse
/// transform is discarded.
pub fn spectral_mix<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &MixVars,
    n_blocks: usize,
    sparsity: f64,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    if d % n_blocks != 0 {
        return Err(Error::Shape(format!("channels {d} not divisible by {n_blocks} blocks")));
    }
    let bs = d / n_blocks;

    let (re, im) = tape.fft2(x)?;
    let to_blocks = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let r = tape.reshape(v, &[h, w, n_blocks, bs])?;
        let p = tape.permute(r, &[2, 0, 1, 3])?;
        tape.reshape(p, &[n_blocks, h * w, bs])
    };
    let from_blocks = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let r = tape.reshape(v, &[n_blocks, h, w, bs])?;
        let p = tape.permute(r, &[1, 2, 0, 3])?;
        tape.reshape(p, &[h, w, d])
    };

    let re_b = to_blocks(tape, re)?;
    let im_b = to_blocks(tape, im)?;
    let (z_re, z_im) =
        complex_block_affine(tape, re_b, im_b, p.w1_re, p.w1_im, p.b1_re, p.b1_im)?;
    let (a_re, a_im) = modulus_gate(tape, z_re, z_im, Some(p.act_bias), T::zero())?;
    let (y_re, y_im) =
        complex_block_affine(tape, a_re, a_im, p.w2_re, p.w2_im, p.b2_re, p.b2_im)?;
    let (s_re, s_im) = modulus_gate(tape, y_re, y_im, None, T::fd(-sparsity))?;

    let out_re = from_blocks(tape, s_re)?;
    let out_im = from_blocks(tape, s_im)?;
    tape.ifft2(out_re, out_im)
}

/// Parameter handles of one spectral-mixing transformer layer.
pub struct AfnoLayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub mix: MixVars,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp: MlpVars,
}

impl AfnoLayerVars {
    pub fn from_store(vars: &ModelVars, prefix: &str) -> Result<AfnoLayerVars> {
        Ok(AfnoLayerVars {
            ln1_g: vars.get(&format!("{prefix}.ln1.gamma"))?,
            ln1_b: vars.get(&format!("{prefix}.ln1.beta"))?,
            mix: MixVars::from_store(vars, prefix)?,
            ln2_g: vars.get(&format!("{prefix}.ln2.gamma"))?,
            ln2_b: vars.get(&format!("{prefix}.ln2.beta"))?,
            mlp: MlpVars::from_store(vars, prefix)?,
        })
    }
}

/// `y = x + SpectralMix(LN(x)); out = y + MLP(LN(y))`.
pub fn afno_layer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AfnoLayerVars,
    n_blocks: usize,
    sparsity: f64,
) -> Result<Var> {
    let ln1 = tape.layer_norm(x, p.ln1_g, p.ln1_b)?;
    let mixed = spectral_mix(tape, ln1, &p.mix, n_blocks, sparsity)?;
    let y = tape.add(x, mixed)?;
    let ln2 = tape.layer_norm(y, p.ln2_g, p.ln2_b)?;
    let ff = mlp(tape, ln2, &p.mlp)?;
    tape.add(y, ff)
}

/// Splits `(Hp, Wp, D)` (both divisible by `m`) into `(n_windows, m*m, D)`.
pub fn window_partition<T: Real>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (hp, wp, d) = (shape[0], shape[1], shape[2]);
    if hp % m != 0 || wp % m != 0 {
        return Err(Error::Shape(format!("{hp}x{wp} token grid not divisible by window {m}")));
    }
    let split = tape.reshape(x, &[hp / m, m, wp / m, m, d])?;
    let grouped = tape.permute(split, &[0, 2, 1, 3, 4])?;
    tape.reshape(grouped, &[(hp / m) * (wp / m), m * m, d])
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Real>(
    tape: &mut Tape<T>,
    windows: Var,
    m: usize,
    hp: usize,
    wp: usize,
) -> Result<Var> {
    let d = tape.shape(windows)[2];
    let split = tape.reshape(windows, &[hp / m, wp / m, m, m, d])?;
    let grouped = tape.permute(split, &[0, 2, 1, 3, 4])?;
    tape.reshape(grouped, &[hp, wp, d])
}

/// Relative-position bias lookup indices for an `m x m` window: entry
/// `a*m² + b` addresses the table row for token offset (a - b).
pub fn rel_pos_index(m: usize) -> Arc<Vec<usize>> {
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m * m * m * m);
    for a in 0..m * m {
        let (ia, ja) = (a / m, a % m);
        for b in 0..m * m {
            let (ib, jb) = (b / m, b % m);
            let di = ia + m - 1 - ib;
            let dj = ja + m - 1 - jb;
            idx.push(di * span + dj);
        }
    }
    Arc::new(idx)
}

/// Additive attention mask for cyclically shifted windows on an `hp x wp`
/// padded grid: token pairs originating from different pre-shift regions get
/// a large negative score. A zero shift on an axis produces no masking from
/// that axis.
pub fn shift_attention_mask<T: Real>(
    hp: usize,
    wp: usize,
    m: usize,
    s_h: usize,
    s_w: usize,
) -> ArrayD<T> {
    let band = |i: usize, n: usize, s: usize| -> usize {
        if i < n - m {
            0
        } else if i < n - s {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / m, wp / m);
    let n_windows = nh * nw;
    let mut labels = vec![0usize; n_windows * m * m];
    for i in 0..hp {
        for j in 0..wp {
            let win = (i / m) * nw + (j / m);
            let pos = (i % m) * m + (j % m);
            labels[win * m * m + pos] = 3 * band(i, hp, s_h) + band(j, wp, s_w);
        }
    }
    let mut mask = ArrayD::<T>::zeros(IxDyn(&[n_windows, 1, m * m, m * m]));
    for w in 0..n_windows {
        for a in 0..m * m {
            for b in 0..m * m {
                if labels[w * m * m + a] != labels[w * m * m + b] {
                    mask[[w, 0, a, b]] = T::fd(ATTN_MASK_NEG);
                }
            }
        }
    }
    mask
}

/// Parameter handles of one windowed-attention transformer layer.
pub struct SwinLayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub rel_bias: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp: MlpVars,
}

impl SwinLayerVars {
    pub fn from_store(vars: &ModelVars, prefix: &str) -> Result<SwinLayerVars> {
        Ok(SwinLayerVars {
            ln1_g: vars.get(&format!("{prefix}.ln1.gamma"))?,
            ln1_b: vars.get(&format!("{prefix}.ln1.beta"))?,
            qkv_w: vars.get(&format!("{prefix}.attn.qkv.weight"))?,
            qkv_b: vars.get(&format!("{prefix}.attn.qkv.bias"))?,
            proj_w: vars.get(&format!("{prefix}.attn.proj.weight"))?,
            proj_b: vars.get(&format!("{prefix}.attn.proj.bias"))?,
            rel_bias: vars.get(&format!("{prefix}.attn.rel_bias"))?,
            ln2_g: vars.get(&format!("{prefix}.ln2.gamma"))?,
            ln2_b: vars.get(&format!("{prefix}.ln2.beta"))?,
            mlp: MlpVars::from_store(vars, prefix)?,
        })
    }
}

/// Multi-head scaled dot-product attention inside each window, with learned
/// relative-position bias per head. `windows` is `(n_windows, m², D)`.
pub fn window_attention<T: Real>(
    tape: &mut Tape<T>,
    windows: Var,
    p: &SwinLayerVars,
    m: usize,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    let (nw, tokens, d) = (shape[0], shape[1], shape[2]);
    if d % heads != 0 {
        return Err(Error::Shape(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;

    let qkv = tape.matmul(windows, p.qkv_w)?;
    let qkv = tape.add(qkv, p.qkv_b)?;
    let split = |tape: &mut Tape<T>, k: usize| -> Result<Var> {
        let part = tape.slice_axis(qkv, 2, k * d, d)?;
        let r = tape.reshape(part, &[nw, tokens, heads, dh])?;
        let t = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(t, &[nw * heads, tokens, dh])
    };
    let q = split(tape, 0)?;
    let k = split(tape, 1)?;
    let v = split(tape, 2)?;

    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::fd(1.0 / (dh as f64).sqrt()));

    let bias_rows = tape.index_select(p.rel_bias, rel_pos_index(m))?;
    let bias = tape.reshape(bias_rows, &[tokens, tokens, heads])?;
    let bias = tape.permute(bias, &[2, 0, 1])?;
    let scores4 = tape.reshape(scores, &[nw, heads, tokens, tokens])?;
    let scores4 = tape.add(scores4, bias)?;
    let scores4 = match mask {
        Some(msk) => tape.add(scores4, msk)?,
        None => scores4,
    };
    let flat = tape.reshape(scores4, &[nw * heads, tokens, tokens])?;
    let attn = tape.softmax(flat, 2)?;

    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.reshape(ctx, &[nw, heads, tokens, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[nw, tokens, d])?;
    let out = tape.matmul(ctx, p.proj_w)?;
    tape.add(out, p.proj_b)
}

/// `y = x + W-MSA(LN(x)); out = y + MLP(LN(y))` with window `m` and cyclic
/// shift `s` (0 on even layers, m/2 on odd ones). The token grid is
/// zero-padded up to window multiples and cropped after merging.
pub fn swin_layer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &SwinLayerVars,
    m: usize,
    shift: usize,
    heads: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("swin_layer expects (H, W, D), got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let (hp, wp) = (div_ceil(h, m) * m, div_ceil(w, m) * m);
    // Shifting is pointless along an axis a single window already covers.
    let s_h = if hp > m { shift } else { 0 };
    let s_w = if wp > m { shift } else { 0 };

    let ln1 = tape.layer_norm(x, p.ln1_g, p.ln1_b)?;
    let padded_h = tape.pad_axis(ln1, 0, hp - h)?;
    let padded = tape.pad_axis(padded_h, 1, wp - w)?;

    let (shifted, mask) = if s_h > 0 || s_w > 0 {
        let r0 = tape.roll(padded, 0, -(s_h as isize))?;
        let r1 = tape.roll(r0, 1, -(s_w as isize))?;
        let mask = tape.leaf(shift_attention_mask::<T>(hp, wp, m, s_h, s_w));
        (r1, Some(mask))
    } else {
        (padded, None)
    };

    let windows = window_partition(tape, shifted, m)?;
    let attended = window_attention(tape, windows, p, m, heads, mask)?;
    let merged = window_merge(tape, attended, m, hp, wp)?;

    let unshifted = if s_h > 0 || s_w > 0 {
        let r0 = tape.roll(merged, 0, s_h as isize)?;
        tape.roll(r0, 1, s_w as isize)?
    } else {
        merged
    };
    let crop_h = tape.slice_axis(unshifted, 0, 0, h)?;
    let cropped = tape.slice_axis(crop_h, 1, 0, w)?;

    let y = tape.add(x, cropped)?;
    let ln2 = tape.layer_norm(y, p.ln2_g, p.ln2_b)?;
    let ff = mlp(tape, ln2, &p.mlp)?;
    tape.add(y, ff)
}
