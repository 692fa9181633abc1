//! Dense linear algebra, dense layers with hand-derived backpropagation,
//! first-order optimizers, seeded initialization and a finite-difference
//! gradient verifier.
//!
//! Every trainable structure in the crate implements [`Parameters`]; its
//! gradient is a value of the same type, so optimizers and the gradient
//! checker work on any model without knowing its layout.

pub mod gradcheck;
pub mod init;
pub mod layer;
pub mod matrix;
pub mod optim;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use init::{derive_seed, init_matrix, seeded_rng, InitScheme, SeededRng};
pub use layer::{sigmoid, Activation, DenseCache, DenseLayer, Mlp};
pub use matrix::{axpy, dot, l2_norm, Matrix};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};

/// Flat views over the trainable tensors of a structure, always in the same order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Sets every parameter to zero.
pub fn zero<P: Parameters + ?Sized>(p: &mut P) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// A copy of `p` with every parameter zeroed; used as a gradient accumulator.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut g = p.clone();
    zero(&mut g);
    g
}

/// `acc += scale * other`, tensor by tensor.
pub fn add_scaled<P: Parameters + ?Sized>(acc: &mut P, other: &P, scale: f64) {
    for (a, o) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        axpy(scale, o, a);
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter().flat_map(|t| t.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|t| t.tensors_mut()).collect()
    }
}

impl Parameters for Matrix {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.values()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.values_mut()]
    }
}

impl Parameters for Vec<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}
