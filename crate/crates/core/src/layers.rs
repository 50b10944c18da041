//! Small dense building blocks shared across modules.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Uniform Glorot initialization for a `fan_in × fan_out` weight.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

/// Dense layer `x W + b` with parameters in a store.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
