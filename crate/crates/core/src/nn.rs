//! Fully connected layers shared by the flow subnetworks, the condition
//! encoder and the pose critic.
//!
//! Weights live outside any graph as plain tensors. For a training step they
//! are bound to a [`Graph`] as leaves (or constants, when a network must not
//! receive gradients), which yields a [`BoundMlp`] that records its forward
//! pass. Inference can skip the tape entirely through [`Mlp::apply`].

use rand::Rng as _;

use crate::ndcore::{gemm, Graph, Tensor, TensorError, Var};
use crate::rng::Rng;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }

    fn record(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

/// `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn kaiming(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        Self { weight: Tensor::new(vec![input, output], w).expect("sized"), bias: Tensor::zeros(&[1, output]) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[1, output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = gemm(x, false, &self.weight, false)?;
        let out = self.output_dim();
        let b = self.bias.data();
        for row in y.data_mut().chunks_exact_mut(out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }
}

/// Stack of linear layers with an activation between consecutive layers and
/// none after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ...`, all He-initialized.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        let layers = dims.windows(2).map(|w| Linear::kaiming(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Multiply the last layer's weights and bias by `f`; `0` makes the
    /// network output exactly zero.
    pub fn scale_last(&mut self, f: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        if f == 0.0 {
            *last = Linear::zeros(last.input_dim(), last.output_dim());
        } else {
            last.weight = last.weight.map(|v| v * f);
            last.bias = last.bias.map(|v| v * f);
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Record the weights on `g`: as leaves if `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let mut put = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let layers = self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect();
        BoundMlp { layers, activation: self.activation }
    }

    /// Tape-free evaluation on a `[rows, in]` batch.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.layers[0].apply(x)?;
        for layer in &self.layers[1..] {
            h = h.map(|v| self.activation.eval(v));
            h = layer.apply(&h)?;
        }
        if !h.all_finite() {
            return Err(TensorError::NonFinite { op: "mlp", node: 0 });
        }
        Ok(h)
    }
}

/// An [`Mlp`] whose weights are nodes of a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = self.activation.record(g, h)?;
            }
            let xw = g.matmul(h, w)?;
            h = g.add(xw, b)?;
        }
        Ok(h)
    }

    /// Weight and bias nodes in the same order as [`Mlp::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
