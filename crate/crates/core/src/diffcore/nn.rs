use serde::{Deserialize, Serialize};

use super::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Silu => tape.silu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fully connected stack: SiLU between hidden layers, `output` after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    output: Activation,
}

impl Mlp {
    /// Registers `prefix.{i}.weight` / `prefix.{i}.bias` for each consecutive
    /// pair in `sizes`. Weights and biases are drawn uniformly from
    /// `±sqrt(1/fan_in)` using `uniform`, which must yield values in `[0, 1)`.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        sizes: &[usize],
        output: Activation,
        uniform: &mut impl FnMut() -> f64,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| (2.0 * uniform() - 1.0) * bound).collect()
                };
                let w = Tensor::new(vec![fan_out, fan_in], draw(fan_in * fan_out))
                    .expect("layer shape");
                let b = Tensor::vector(draw(fan_out));
                Dense {
                    weight: params.add(format!("{prefix}.{i}.weight"), w),
                    bias: params.add(format!("{prefix}.{i}.bias"), b),
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Self { layers, output }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(layer.weight), tape.param(layer.bias));
            h = tape.linear(h, w, b)?;
            h = if i == last {
                self.output.apply(tape, h)?
            } else {
                tape.silu(h)?
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut ps = ParamSet::new();
        let mut state = 0.0f64;
        let mut uniform = || {
            state = (state + 0.618_033_988_75) % 1.0;
            state
        };
        let mlp = Mlp::new(&mut ps, "net", &[20, 64, 64, 4], Activation::Identity, &mut uniform);
        assert_eq!(ps.len(), 6);
        for layer in mlp.layers() {
            let bound = (1.0 / layer.fan_in as f64).sqrt();
            assert!(ps.get(layer.weight).data().iter().all(|v| v.abs() <= bound));
            assert!(ps.get(layer.bias).data().iter().all(|v| v.abs() <= bound));
        }
        assert_eq!(ps.get(mlp.layers()[0].weight).shape(), &[64, 20]);
        assert_eq!(mlp.output_size(), 4);
    }
}
