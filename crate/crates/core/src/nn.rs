//! Dense layers and small ReLU MLPs stored on a [`ParameterTape`].

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParameterTape, SegmentId};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: SegmentId,
    pub bias: SegmentId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `+-sqrt(6 / fan_in)`, biases zero.
    pub fn new(tape: &mut ParameterTape, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_dim.max(1) as f64).sqrt();
        let weight = tape.add_segment(format!("{name}.w"), in_dim * out_dim, || rng.random_range(-bound..bound));
        let bias = tape.add_segment(format!("{name}.b"), out_dim, || 0.0);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.affine(x, self.weight, self.bias)
    }

    /// Row-vector evaluation without recording a graph.
    pub fn apply(&self, tape: &ParameterTape, x: &[f64]) -> Vec<f64> {
        let w = tape.segment_values(self.weight);
        let mut out = tape.segment_values(self.bias).to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            *o += w[j * self.in_dim..(j + 1) * self.in_dim]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        out
    }
}

/// Stack of [`Linear`] layers with ReLU between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(tape: &mut ParameterTape, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(tape, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, mut x: NodeId) -> Result<NodeId> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn segments(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}
