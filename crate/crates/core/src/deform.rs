//! Context-aware dynamic deformable convolution over one scale's
//! `[N, 2, P/2, C_m]` patch tensor.
//!
//! Each patch `n` gets a per-tap amplitude `α[n, k]` and a bounded
//! fractional sampling offset `Δ[n, k]`, both generated from pooled
//! within-patch and cross-patch context. The modulated base kernel
//! `α[n, k] · W_b[k]` is applied to the input sampled at
//! `t + k - ⌊K/2⌋ + Δ[n, k]` along the sub-patch time axis.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamStore, TwoLayer};
use crate::patching::PatchTensor3D;
use crate::tensor::Tensor;

/// Largest allowed offset magnitude for a detected period.
pub fn offset_bound(period: usize) -> usize {
    period / 4
}

/// Tape handles of one scale's deformable kernel.
#[derive(Clone, Copy, Debug)]
pub struct DeformableKernel {
    /// `W_b`: `[K_t, C_m, C_m]`.
    pub base: Var,
    pub alpha_intra: TwoLayer,
    pub alpha_inter: TwoLayer,
    /// Offset head over `concat(v_intra, v_inter)`.
    pub offset: TwoLayer,
    pub taps: usize,
}

impl DeformableKernel {
    /// Insert initial parameters for one scale under `prefix`.
    ///
    /// `W_b ~ U(-a, a)` with `a = sqrt(1 / (K_t·C_m))`; the final layers of
    /// the α and offset heads start at zero.
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, taps: usize, width: usize, hidden: usize) {
        let a = (1.0 / (taps * width) as f64).sqrt();
        store.insert(format!("{prefix}.base"), uniform(rng, &[taps, width, width], a));
        TwoLayer::init(
            store,
            rng,
            &format!("{prefix}.alpha_intra"),
            (width, hidden, taps),
            true,
        );
        TwoLayer::init(
            store,
            rng,
            &format!("{prefix}.alpha_inter"),
            (width, hidden, taps),
            true,
        );
        TwoLayer::init(store, rng, &format!("{prefix}.offset"), (2 * width, hidden, taps), true);
    }

    pub fn bind(bound: &Bound, prefix: &str, tape: &Tape) -> Result<Self> {
        let base = bound.var(&format!("{prefix}.base"))?;
        Ok(DeformableKernel {
            base,
            alpha_intra: TwoLayer::bind(bound, &format!("{prefix}.alpha_intra"))?,
            alpha_inter: TwoLayer::bind(bound, &format!("{prefix}.alpha_inter"))?,
            offset: TwoLayer::bind(bound, &format!("{prefix}.offset"))?,
            taps: tape.shape(base)[0],
        })
    }
}

/// Within-patch and cross-patch context vectors, each `[N, C_m]`.
///
/// `v_intra[n]` is the mean of patch `n`; `v_inter[n]` is the mean of the
/// other patches' means (zero when there is a single patch).
pub fn pool_context(tape: &mut Tape, pt: &PatchTensor3D) -> Result<(Var, Var)> {
    let s = tape.shape(pt.data).to_vec();
    let (n, width) = (s[0], s[3]);
    let flat = tape.reshape(pt.data, &[n, s[1] * s[2], width])?;
    let v_intra = tape.mean_axis(flat, 1)?;
    let mut others = vec![0.0; n * n];
    if n > 1 {
        let w = 1.0 / (n - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    others[i * n + j] = w;
                }
            }
        }
    }
    let avg = tape.constant(Tensor::new(&[n, n], others)?);
    let v_inter = tape.matmul(avg, v_intra)?;
    Ok((v_intra, v_inter))
}

/// `α = 1 + F_intra(v_intra) + F_inter(v_inter)`, shape `[N, K_t]`.
pub fn gen_alpha(tape: &mut Tape, v_intra: Var, v_inter: Var, kern: &DeformableKernel) -> Result<Var> {
    let a = kern.alpha_intra.forward(tape, v_intra)?;
    let b = kern.alpha_inter.forward(tape, v_inter)?;
    let s = tape.add(a, b)?;
    let one = tape.constant(Tensor::scalar(1.0));
    tape.add(s, one)
}

/// `Δ = r_t · tanh(Ψ(concat(v_intra, v_inter)))`, shape `[N, K_t]`.
pub fn gen_offsets(tape: &mut Tape, v_intra: Var, v_inter: Var, kern: &DeformableKernel, bound: usize) -> Result<Var> {
    let ctx = tape.concat(&[v_intra, v_inter], 1)?;
    let raw = kern.offset.forward(tape, ctx)?;
    let squashed = tape.tanh(raw);
    let delta = tape.scale(squashed, bound as f64);
    debug_assert!(
        tape.value(delta).data().iter().all(|d| d.abs() <= bound as f64),
        "offset exceeds bound {bound}"
    );
    Ok(delta)
}

/// Apply the modulated, offset-sampled base kernel. Output has the input's
/// shape; sampling positions are clamped to the sub-patch.
pub fn deform_conv3d(tape: &mut Tape, pt: &PatchTensor3D, base: Var, alpha: Var, delta: Var) -> Result<PatchTensor3D> {
    let s = tape.shape(pt.data).to_vec();
    let bs = tape.shape(base).to_vec();
    if s.len() != 4 || bs.len() != 3 || bs[1] != s[3] || bs[2] != s[3] {
        return Err(Error::dim("deform_conv3d", format!("input {s:?} with kernel {bs:?}")));
    }
    let (n, half, width) = (s[0], s[2], s[3]);
    let taps = bs[0];
    for (what, v) in [("alpha", alpha), ("delta", delta)] {
        if tape.shape(v) != [n, taps] {
            return Err(Error::dim(
                "deform_conv3d",
                format!("{what} {:?}, expected [{n}, {taps}]", tape.shape(v)),
            ));
        }
    }
    let centre = (taps / 2) as f64;
    let mut acc: Option<Var> = None;
    for k in 0..taps {
        let grid: Vec<f64> = (0..half).map(|t| t as f64 + k as f64 - centre).collect();
        let grid = tape.constant(Tensor::new(&[1, 1, half, 1], grid)?);
        let shift = tape.slice(delta, 1, k, 1)?;
        let shift = tape.reshape(shift, &[n, 1, 1, 1])?;
        let pos = tape.add(grid, shift)?;
        let sampled = tape.sample_linear(pt.data, pos, 2)?;
        let w = tape.slice(base, 0, k, 1)?;
        let w = tape.reshape(w, &[width, width])?;
        let proj = tape.matmul(sampled, w)?;
        let a = tape.slice(alpha, 1, k, 1)?;
        let a = tape.reshape(a, &[n, 1, 1, 1])?;
        let term = tape.mul(proj, a)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    Ok(PatchTensor3D {
        data: acc.expect("at least one tap"),
        ..*pt
    })
}
