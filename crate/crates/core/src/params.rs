//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Register every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

/// `U(-bound, bound)` initialisation.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("valid init shape")
}

/// Handles of an affine → ReLU → affine block.
#[derive(Clone, Copy, Debug)]
pub struct TwoLayer {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TwoLayer {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(TwoLayer {
            w1: bound.var(&format!("{prefix}.w1"))?,
            b1: bound.var(&format!("{prefix}.b1"))?,
            w2: bound.var(&format!("{prefix}.w2"))?,
            b2: bound.var(&format!("{prefix}.b2"))?,
        })
    }

    /// Insert initial parameters under `prefix`. The output layer is zeroed
    /// when `zero_out` is set so the block starts as a constant-zero map.
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dims: (usize, usize, usize), zero_out: bool) {
        let (input, hidden, output) = dims;
        store.insert(
            format!("{prefix}.w1"),
            uniform(rng, &[input, hidden], (1.0 / input as f64).sqrt()),
        );
        store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let w2 = if zero_out {
            Tensor::zeros(&[hidden, output])
        } else {
            uniform(rng, &[hidden, output], (1.0 / hidden as f64).sqrt())
        };
        store.insert(format!("{prefix}.w2"), w2);
        store.insert(format!("{prefix}.b2"), Tensor::zeros(&[output]));
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.relu(h);
        let y = tape.matmul(h, self.w2)?;
        tape.add(y, self.b2)
    }
}
