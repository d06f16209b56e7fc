//! Differentiable building blocks with hand-written reverse passes.
//!
//! Everything is batched: activations are `(rows × features)` matrices, and a
//! sequence of `T` steps over a batch of `B` is stored time-major as a
//! `(T·B × features)` matrix whose step `t` occupies rows `t·B..(t+1)·B`.
//! Teacher-forced sequences are evaluated layer by layer so that the
//! non-recurrent products become single large matrix multiplications; only
//! the hidden-to-hidden products run step by step.

mod gru;
mod linear;
mod loss;
mod rnn;

pub use gru::{GruCell, GruTape};
pub use linear::{relu, relu_backward, Linear};
pub use loss::{gaussian_nll, NllTerms};
pub use rnn::{
    GaussianHead, GaussianPrediction, GaussianRnn, GruStack, RnnTape, SequenceOutput, StackState,
    LOG_SIGMA_MAX, LOG_SIGMA_MIN,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Visitor over named parameter tensors in a fixed canonical order. The same
/// order is used for gradients, the optimiser state and checkpoints.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
}

/// One entry of a flat parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn layout<P: Parameters + ?Sized>(p: &P, prefix: &str) -> Vec<LayoutEntry> {
    let mut out = Vec::new();
    let mut offset = 0;
    p.visit(prefix, &mut |name, shape, data| {
        out.push(LayoutEntry { name, shape: shape.to_vec(), offset });
        offset += data.len();
    });
    out
}

pub fn num_params<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, data| n += data.len());
    n
}

pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(num_params(p));
    p.visit("", &mut |_, _, data| out.extend_from_slice(data));
    out
}

pub fn assign_flat<P: Parameters + ?Sized>(p: &mut P, flat: &[f64]) -> Result<()> {
    let n = num_params(p);
    if flat.len() != n {
        return Err(Error::shape("flat parameter vector", n, flat.len()));
    }
    let mut at = 0;
    p.visit_mut(&mut |data| {
        data.copy_from_slice(&flat[at..at + data.len()]);
        at += data.len();
    });
    Ok(())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored contiguously")
}

pub(crate) fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

/// Uniform `±√(1/fan_in)` initialisation used by every layer.
pub(crate) fn uniform_init<R: rand::Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> ndarray::Array2<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    ndarray::Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}
