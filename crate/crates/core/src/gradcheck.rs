//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{ModelConfig, ModelState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f64,
    /// Relative error bound for gradients of ordinary magnitude.
    pub relative: f64,
    /// Below this magnitude both values are compared absolutely.
    pub tiny: f64,
    pub absolute: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-4,
            relative: 1e-3,
            tiny: 1e-8,
            absolute: 1e-6,
        }
    }
}

impl Tolerance {
    /// Whether `analytic` and `numeric` agree; also returns the error measure.
    /// Analytic values below `tiny` in magnitude are compared absolutely.
    pub fn compare(&self, analytic: f64, numeric: f64) -> (bool, f64) {
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if analytic.abs() < self.tiny {
            (diff <= self.absolute, diff)
        } else {
            let rel = diff / scale;
            (rel <= self.relative, rel)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub max_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }

    fn record(&mut self, tol: &Tolerance, name: &str, index: usize, analytic: f64, numeric: f64) {
        let (ok, err) = tol.compare(analytic, numeric);
        self.checked += 1;
        self.max_error = self.max_error.max(err);
        if !ok {
            self.mismatches.push(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// Check `analytic` (one tensor per parameter, store order) against central
/// differences of `loss` evaluated on perturbed copies of `params`.
pub fn check_params(
    params: &ParamStore,
    analytic: &[Tensor],
    tol: &Tolerance,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<Report> {
    let mut report = Report::default();
    let mut work = params.clone();
    for (pi, name) in params.names().iter().enumerate() {
        for j in 0..params.tensors()[pi].numel() {
            let orig = params.tensors()[pi].data()[j];
            work.tensors_mut()[pi].data_mut()[j] = orig + tol.step;
            let up = loss(&work)?;
            work.tensors_mut()[pi].data_mut()[j] = orig - tol.step;
            let down = loss(&work)?;
            work.tensors_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * tol.step);
            report.record(tol, name, j, analytic[pi].data()[j], numeric);
        }
    }
    Ok(report)
}

/// Gradient check of a tape function of several inputs. The scalar probed is
/// `Σ out ⊙ w` for fixed pseudo-random weights `w`.
pub fn check_function(
    inputs: &[Tensor],
    tol: &Tolerance,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Report> {
    let probe = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(out).to_vec();
        let n = tape.value(out).numel();
        let w = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(0.5..1.5)).collect())?;
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("input{i}"), t.clone());
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = probe(&mut tape, bound.vars())?;
    tape.backward(loss)?;
    let analytic = bound.grads(&tape);
    check_params(&store, &analytic, tol, |ps| {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let l = probe(&mut tape, bound.vars())?;
        Ok(tape.value(l).item())
    })
}

/// Give every all-zero parameter tensor (biases and the zero-initialised
/// head outputs) small random values, so a check exercises every path away
/// from the initialisation identities.
pub fn randomize_zero_params(state: &mut ModelState, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in state.params.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Whole-model check: every parameter's MSE-loss gradient on a random batch.
pub fn check_model(config: &ModelConfig, batch: usize, seed: u64, tol: &Tolerance) -> Result<Report> {
    let mut state = ModelState::new(config.clone())?;
    randomize_zero_params(&mut state, seed ^ 0x5eed, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[batch, config.lookback, config.channels]);
    let y = random_tensor(&mut rng, &[batch, config.horizon, config.channels]);
    let (_, grads) = state.loss_and_grads(&x, &y)?;
    check_params(&state.params, &grads, tol, |ps| {
        let probe = ModelState {
            config: state.config.clone(),
            params: ps.clone(),
        };
        probe.loss_value(&x, &y)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_switches_to_absolute_for_tiny_values() {
        let t = Tolerance::default();
        assert!(t.compare(1e-9, 5e-7).0);
        assert!(!t.compare(1e-9, 5e-6).0);
        assert!(t.compare(1.0, 1.0005).0);
        assert!(!t.compare(1.0, 1.01).0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let wrong = vec![Tensor::vector(vec![2.0, 5.0])];
        let r = check_params(&store, &wrong, &Tolerance::default(), |ps| {
            Ok(ps.get("w").unwrap().data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert_eq!(r.checked, 2);
        assert_eq!(r.mismatches.len(), 1);
        assert_eq!(r.mismatches[0].index, 1);
    }
}
