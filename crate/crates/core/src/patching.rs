//! Channel embedding, period-aligned patch segmentation and the
//! `[N, 2, P/2, C_m]` sub-patch layout.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch length used for a detected period: odd periods round up so the
/// patch splits into two equal halves.
pub fn patch_len_for(period: usize) -> usize {
    if period % 2 == 1 {
        period + 1
    } else {
        period
    }
}

/// Patched sequence `[N, P, C_m]` before the sub-patch split.
#[derive(Clone, Copy, Debug)]
pub struct Patches {
    pub data: Var,
    pub patch_len: usize,
    pub pad_len: usize,
}

/// One scale's embedding in the `[N, 2, P/2, C_m]` layout.
#[derive(Clone, Copy, Debug)]
pub struct PatchTensor3D {
    pub data: Var,
    /// Patch length `P` the tensor was built with.
    pub period: usize,
    pub pad_len: usize,
}

impl PatchTensor3D {
    pub fn num_patches(&self, tape: &Tape) -> usize {
        tape.shape(self.data)[0]
    }

    pub fn half(&self) -> usize {
        self.period / 2
    }
}

/// Per-timestep affine map `x · W_e + b_e`.
pub fn embed_channels(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xs, ws, bs) = (tape.shape(x), tape.shape(weight), tape.shape(bias));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
        return Err(Error::dim(
            "embed_channels",
            format!("x {xs:?}, weight {ws:?}, bias {bs:?}"),
        ));
    }
    let h = tape.matmul(x, weight)?;
    tape.add(h, bias)
}

/// Tail zero-padding to a multiple of `patch_len` followed by the
/// `[N, P, C_m]` view. No learned parameters.
pub fn split_patches(tape: &mut Tape, x: Var, patch_len: usize) -> Result<Patches> {
    if patch_len < 2 {
        return Err(Error::Config(format!("patch length {patch_len} < 2")));
    }
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 {
        return Err(Error::dim("patchify", format!("expected [L, C_m], got {xs:?}")));
    }
    let (len, width) = (xs[0], xs[1]);
    let n = len.div_ceil(patch_len);
    let pad_len = n * patch_len - len;
    let padded = if pad_len > 0 {
        let zeros = tape.constant(Tensor::zeros(&[pad_len, width]));
        tape.concat(&[x, zeros], 0)?
    } else {
        x
    };
    let data = tape.reshape(padded, &[n, patch_len, width])?;
    Ok(Patches {
        data,
        patch_len,
        pad_len,
    })
}

/// Segment `x_emb: [L, C_m]` into period-length patches.
///
/// A kernel-`P`, stride-`P` convolution summarises each patch into one
/// vector; that summary is added to every position of the raw patch so the
/// result keeps per-timestep resolution.
pub fn patchify(tape: &mut Tape, x_emb: Var, patch_len: usize, kernel: Var) -> Result<Patches> {
    let raw = split_patches(tape, x_emb, patch_len)?;
    let ks = tape.shape(kernel).to_vec();
    let shape = tape.shape(raw.data).to_vec();
    let (n, width) = (shape[0], shape[2]);
    if ks != [patch_len, width, width] {
        return Err(Error::dim(
            "patchify",
            format!("kernel {ks:?} for patch length {patch_len} and width {width}"),
        ));
    }
    let seq = tape.reshape(raw.data, &[1, n * patch_len, width])?;
    let summary = tape.conv1d(seq, kernel, patch_len, 0)?;
    let summary = tape.reshape(summary, &[n, 1, width])?;
    let data = tape.add(raw.data, summary)?;
    Ok(Patches { data, ..raw })
}

/// Split each patch into halves `[0, P/2)` and `[P/2, P)` stacked on a new
/// axis. In row-major layout this is a pure reshape.
pub fn reshape_3d(tape: &mut Tape, patches: Patches) -> Result<PatchTensor3D> {
    let p = patches.patch_len;
    if !p.is_multiple_of(2) {
        return Err(Error::Contract(format!("odd patch length {p} cannot be halved")));
    }
    let s = tape.shape(patches.data).to_vec();
    let data = tape.reshape(patches.data, &[s[0], 2, p / 2, s[2]])?;
    Ok(PatchTensor3D {
        data,
        period: p,
        pad_len: patches.pad_len,
    })
}

/// Inverse of [`reshape_3d`] and the patch split; drops the padded tail.
pub fn unpatchify(tape: &mut Tape, pt: &PatchTensor3D, len: usize) -> Result<Var> {
    let s = tape.shape(pt.data).to_vec();
    if s.len() != 4 || s[1] != 2 || s[2] * 2 != pt.period {
        return Err(Error::Contract(format!(
            "malformed patch tensor {s:?} for period {}",
            pt.period
        )));
    }
    let total = s[0] * pt.period;
    if total < pt.pad_len || total - pt.pad_len != len {
        return Err(Error::Contract(format!(
            "length {len} inconsistent with {} patches of {} minus {} padding",
            s[0], pt.period, pt.pad_len
        )));
    }
    let flat = tape.reshape(pt.data, &[total, s[3]])?;
    if pt.pad_len == 0 {
        Ok(flat)
    } else {
        tape.slice(flat, 0, 0, len)
    }
}

/// Resample a `[G, C, C]` base kernel to `taps` positions along its first
/// axis (end points aligned) and scale by `1/taps`, giving a patch-length
/// convolution kernel with a fixed parameter count.
pub fn resample_kernel(tape: &mut Tape, base: Var, taps: usize) -> Result<Var> {
    let bs = tape.shape(base).to_vec();
    if bs.len() != 3 {
        return Err(Error::dim("resample_kernel", format!("expected [G, C, C], got {bs:?}")));
    }
    let g = bs[0];
    let pos: Vec<f64> = (0..taps)
        .map(|j| {
            if taps == 1 {
                0.0
            } else {
                j as f64 * (g - 1) as f64 / (taps - 1) as f64
            }
        })
        .collect();
    let pos = tape.constant(Tensor::new(&[taps, 1, 1], pos)?);
    let k = tape.sample_linear(base, pos, 0)?;
    Ok(tape.scale(k, 1.0 / taps as f64))
}
