//! Small dense MLPs over the trailing axis.
//!
//! [`MlpParams`] owns the weights as plain tensors; [`MlpParams::bind`] turns
//! them into tape leaves (or constants) so a fresh tape per step can reuse the
//! same storage. `forward` applies `act(x W^T + b)` per layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::rng::StreamRng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub weight: Tensor, // [out, in]
    pub bias: Tensor,   // [out]
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<LayerSpec>,
}

impl MlpParams {
    /// Xavier-uniform initialisation for the given layer widths.
    /// `acts` must name one activation per layer.
    pub fn init(dims: &[usize], acts: &[Activation], rng: &StreamRng, label: &str) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        assert_eq!(acts.len(), dims.len() - 1, "one activation per layer");
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (i, o) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (i + o) as f64).sqrt();
            layers.push(LayerSpec {
                weight: rng.uniform_tensor(label, l as u64, &[o, i], -bound, bound),
                bias: Tensor::zeros(&[o]),
                act: acts[l],
            });
        }
        MlpParams { layers }
    }

    /// Zeroes the final layer (weight and bias): the MLP starts as the zero
    /// map, which keeps residual paths inert at initialisation.
    pub fn zero_last_layer(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.weight = Tensor::zeros(last.weight.shape());
            last.bias = Tensor::zeros(last.bias.shape());
        }
        self
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("non-empty mlp").weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").weight.shape()[0]
    }

    /// Checks that consecutive layer widths agree.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::param("mlp has no layers".to_string()));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            let (o_prev, i_next) = (pair[0].weight.shape()[0], pair[1].weight.shape()[1]);
            if o_prev != i_next {
                return Err(Error::dim(format!(
                    "mlp layer {} outputs {} but layer {} expects {}",
                    l,
                    o_prev,
                    l + 1,
                    i_next
                )));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 || layer.bias.shape() != [layer.weight.shape()[0]] {
                return Err(Error::dim(format!("mlp layer {l} weight/bias shapes disagree")));
            }
        }
        Ok(())
    }

    /// Binds the parameters onto a tape as leaves (trainable) or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                };
                (w, b, l.act)
            })
            .collect();
        BoundMlp { layers }
    }

    /// Visits every parameter tensor in the same order as [`BoundMlp::vars`].
    pub fn for_each_tensor(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("{prefix}.{i}.weight"), &l.weight);
            f(format!("{prefix}.{i}.bias"), &l.bias);
        }
    }

    /// Mutable variant of [`Self::for_each_tensor`], same traversal order.
    pub fn for_each_tensor_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.weight"), &mut l.weight);
            f(format!("{prefix}.{i}.bias"), &mut l.bias);
        }
    }

    /// Convenience forward on plain tensors (builds a throwaway tape).
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.bind(&tape, false).forward(xv)?.value())
    }
}

/// Tape-bound MLP parameters.
pub struct BoundMlp<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>, Activation)>,
}

impl<'t> BoundMlp<'t> {
    /// Applies the MLP over the trailing axis of `x`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (l, (w, b, act)) in self.layers.iter().enumerate() {
            let in_dim = w.shape()[1];
            let got = *h.shape().last().unwrap_or(&0);
            if got != in_dim {
                return Err(Error::dim(format!(
                    "mlp layer {l}: input trailing dim {got} but weight expects {in_dim} \
                     (input shape {:?}, weight shape {:?})",
                    h.shape(),
                    w.shape()
                )));
            }
            h = h.linear(*w, *b);
            h = match act {
                Activation::Identity => h,
                Activation::Relu => h.relu(),
                Activation::Sigmoid => h.sigmoid(),
            };
        }
        Ok(h)
    }

    /// All weight/bias vars in layer order, for optimisers and grad checks.
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|(w, b, _)| [*w, *b]).collect()
    }
}
