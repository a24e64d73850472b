use alloc::vec::Vec;

use rand::Rng as _;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Silu,
    Tanh,
}

/// Fully connected network; weights are stored `in × out` so a layer is `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<Tensor>,
}

/// Dropout configuration for one recorded pass.
#[derive(Clone, Copy, Debug)]
pub enum Dropout {
    Off,
    /// Inverted dropout on hidden activations, masks drawn from `seed`.
    On {
        p: f64,
        seed: u64,
    },
}

impl Mlp {
    /// `widths = [in, hidden..., out]`. Weights ~ U(±1/√fan_in), biases 0.
    pub fn new(
        widths: &[usize],
        activation: Activation,
        zero_output: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(
                "mlp widths",
                "need at least input and output, all nonzero",
            ));
        }
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        let last = widths.len() - 2;
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / math::sqrt(fan_in as f64);
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    if zero_output && l == last {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    }
                })
                .collect();
            params.push(Tensor::matrix(fan_in, fan_out, w));
            params.push(Tensor::zeros(1, fan_out));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "set_params",
                &[self.params.len()],
                &[params.len()],
            ));
        }
        for (old, new) in self.params.iter().zip(&params) {
            new.expect_shape("set_params", old.shape())?;
        }
        self.params = params;
        Ok(())
    }

    /// Records the network on `g`; returns the output and the parameter leaves
    /// in storage order.
    pub fn record(&self, g: &mut Graph, input: Var, dropout: Dropout) -> Result<(Var, Vec<Var>)> {
        let mut mask_rng = match dropout {
            Dropout::On { p, seed } if p > 0.0 => Some((p, rng::seeded(seed))),
            _ => None,
        };
        let mut h = input;
        let mut vars = Vec::with_capacity(self.params.len());
        let n_layers = self.widths.len() - 1;
        for l in 0..n_layers {
            let w = g.param(self.params[2 * l].clone());
            let b = g.param(self.params[2 * l + 1].clone());
            vars.push(w);
            vars.push(b);
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l + 1 < n_layers {
                h = match self.activation {
                    Activation::Silu => g.silu(h),
                    Activation::Tanh => g.tanh(h),
                };
                if let Some((p, r)) = mask_rng.as_mut() {
                    let keep = 1.0 / (1.0 - *p);
                    let mask: Vec<f64> = (0..g.value(h).len())
                        .map(|_| if rng::uniform(r) < *p { 0.0 } else { keep })
                        .collect();
                    h = g.mask(h, mask)?;
                }
            }
        }
        Ok((h, vars))
    }
}
