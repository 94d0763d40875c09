//! Amplitude-weighted fusion of the per-scale representations and the
//! residual MLP forecast head.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::TwoLayer;
use crate::spectral::SpectralProfile;
use crate::tensor::Tensor;

/// Softmax-normalised spectral amplitudes, one weight per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleWeightSet {
    pub raw_amplitudes: Tensor,
    pub weights: Tensor,
}

impl ScaleWeightSet {
    pub fn from_amplitudes(amplitudes: &[f64]) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::Contract("no amplitudes to normalise".into()));
        }
        if amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite amplitude".into()));
        }
        let max = amplitudes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = amplitudes.iter().map(|a| (a - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(ScaleWeightSet {
            raw_amplitudes: Tensor::vector(amplitudes.to_vec()),
            weights: Tensor::vector(exps.into_iter().map(|e| e / total).collect()),
        })
    }

    pub fn from_profile(profile: &SpectralProfile) -> Result<Self> {
        Self::from_amplitudes(&profile.amplitudes)
    }
}

/// `Σ_i softmax(A)_i · rep_i`. The weights are constants of the window.
pub fn aggregate(tape: &mut Tape, reps: &[Var], profile: &SpectralProfile) -> Result<Var> {
    if reps.len() != profile.len() {
        return Err(Error::Contract(format!(
            "{} representations for {} scales",
            reps.len(),
            profile.len()
        )));
    }
    let w = ScaleWeightSet::from_profile(profile)?;
    let mut acc: Option<Var> = None;
    for (&rep, &wi) in reps.iter().zip(w.weights.data()) {
        let term = tape.scale(rep, wi);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty reps"))
}

/// `MLP(x_agg + x_in_emb)` mapping `[B, L, C_m]` to `[B, horizon, channels]`
/// by flattening each window.
pub fn forecast_head(
    tape: &mut Tape,
    x_agg: Var,
    x_in_emb: Var,
    head: &TwoLayer,
    horizon: usize,
    channels: usize,
) -> Result<Var> {
    if tape.shape(x_agg) != tape.shape(x_in_emb) {
        return Err(Error::dim(
            "forecast_head",
            format!("{:?} vs {:?}", tape.shape(x_agg), tape.shape(x_in_emb)),
        ));
    }
    let s = tape.shape(x_agg).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("forecast_head", format!("expected [B, L, C_m], got {s:?}")));
    }
    let z = tape.add(x_agg, x_in_emb)?;
    let flat = tape.reshape(z, &[s[0], s[1] * s[2]])?;
    let y = head.forward(tape, flat)?;
    if tape.shape(y)[1] != horizon * channels {
        return Err(Error::dim(
            "forecast_head",
            format!("head emits {:?}, need {horizon}x{channels}", tape.shape(y)),
        ));
    }
    tape.reshape(y, &[s[0], horizon, channels])
}
