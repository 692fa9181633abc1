use serde::{Deserialize, Serialize};

use super::matrix::{axpy, Matrix};
use super::Parameters;
use crate::error::{Error, Result};

/// Pre-activations are clamped to this magnitude before any exponentiation.
pub const EXP_CLAMP: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.clamp(-EXP_CLAMP, EXP_CLAMP).tanh(),
        }
    }

    /// Derivative at pre-activation `pre`, given `out = apply(pre)`.
    pub fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid | Activation::Tanh if pre.abs() > EXP_CLAMP => 0.0,
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Tanh => 1.0 - out * out,
        }
    }

    /// Whether `apply(0) == 0` and `apply(-x) == -apply(x)`.
    pub fn is_odd(self) -> bool {
        matches!(self, Activation::Identity | Activation::Tanh)
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-EXP_CLAMP, EXP_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `activation(W·x + b)`, with `W` stored out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Values retained by [`DenseLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub output: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("DenseLayer bias", weight.rows(), bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        if input.len() != self.inputs() {
            return Err(Error::shape(
                format!("dense forward ({}x{} layer)", self.outputs(), self.inputs()),
                format!("input of length {}", self.inputs()),
                format!("length {}", input.len()),
            ));
        }
        let mut pre = self.weight.matvec(input)?;
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let output: Vec<f64> = pre.iter().map(|&p| self.activation.apply(p)).collect();
        Ok((
            output.clone(),
            DenseCache {
                input: input.to_vec(),
                pre,
                output,
            },
        ))
    }

    /// Forward pass without retaining a cache.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Backpropagates `upstream` (∂L/∂output), accumulating parameter gradients
    /// into `grads` (a layer of identical shape) and returning ∂L/∂input.
    pub fn backward_into(
        &self,
        cache: &DenseCache,
        upstream: &[f64],
        grads: &mut DenseLayer,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if upstream.len() != self.outputs() {
            return Err(Error::shape(
                "dense backward upstream gradient",
                self.outputs(),
                upstream.len(),
            ));
        }
        if grads.weight.shape() != self.weight.shape() {
            return Err(Error::shape(
                "dense backward gradient accumulator",
                format!("{:?}", self.weight.shape()),
                format!("{:?}", grads.weight.shape()),
            ));
        }
        let delta: Vec<f64> = upstream
            .iter()
            .zip(cache.pre.iter().zip(&cache.output))
            .map(|(&g, (&p, &o))| g * self.activation.derivative(p, o))
            .collect();
        for (o, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(d, &cache.input, grads.weight.row_mut(o));
            }
            grads.bias[o] += d;
        }
        self.weight.matvec_transposed(&delta)
    }

    /// Returns `(∂L/∂input, parameter gradients)` for a single upstream gradient.
    pub fn backward(&self, cache: &DenseCache, upstream: &[f64]) -> Result<(Vec<f64>, DenseLayer)> {
        let mut grads = DenseLayer::zeros(self.inputs(), self.outputs(), self.activation);
        let input_grad = self.backward_into(cache, upstream, &mut grads)?;
        Ok((input_grad, grads))
    }

    fn check_cache(&self, cache: &DenseCache) -> Result<()> {
        if cache.input.len() != self.inputs()
            || cache.pre.len() != self.outputs()
            || cache.output.len() != self.outputs()
        {
            return Err(Error::Usage(format!(
                "cache does not belong to this {}x{} layer (input {}, pre {})",
                self.outputs(),
                self.inputs(),
                cache.input.len(),
                cache.pre.len()
            )));
        }
        Ok(())
    }
}

impl Parameters for DenseLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.values(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.values_mut(), &mut self.bias]
    }
}

/// A stack of dense layers applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    format!("MLP layer {} -> {}", i, i + 1),
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<DenseCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&x)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    pub fn backward_into(
        &self,
        caches: &[DenseCache],
        upstream: &[f64],
        grads: &mut Mlp,
    ) -> Result<Vec<f64>> {
        if caches.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "MLP backward with {} layers, {} caches, {} gradient layers",
                self.layers.len(),
                caches.len(),
                grads.layers.len()
            )));
        }
        let mut g = upstream.to_vec();
        for ((layer, cache), grad) in self
            .layers
            .iter()
            .zip(caches)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            g = layer.backward_into(cache, &g, grad)?;
        }
        Ok(g)
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}
