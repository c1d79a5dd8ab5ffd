//! Dense multilayer perceptrons on top of the autodiff graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

/// Layer sizes plus hidden activation; the last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        MlpSpec { sizes, activation }
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("mlp has layers")
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
    pub fn init<R: Rng>(&self, prefix: &str, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let weight = Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out)).expect("weight shape");
            let bias = Tensor::from_vec(1, fan_out, draw(fan_out)).expect("bias shape");
            p.push(format!("{prefix}.{i}.weight"), weight);
            p.push(format!("{prefix}.{i}.bias"), bias);
        }
        p
    }

    /// Records the forward pass; `params` are the vars returned by [`ParamSet::bind`].
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, AutodiffError> {
        let layers = self.sizes.len() - 1;
        debug_assert_eq!(params.len(), 2 * layers);
        let mut h = x;
        for i in 0..layers {
            h = g.matmul(h, params[2 * i])?;
            h = g.add_row(h, params[2 * i + 1])?;
            if i + 1 < layers {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::LeakyRelu(slope) => g.leaky_relu(h, slope)?,
                };
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values, no gradient bookkeeping kept.
    pub fn predict(&self, params: &ParamSet, x: Tensor) -> Result<Tensor, AutodiffError> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let xv = g.leaf(x);
        let out = self.forward(&mut g, &vars, xv)?;
        Ok(g.value(out))
    }
}
