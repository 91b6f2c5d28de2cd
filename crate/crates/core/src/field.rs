//! Input encodings and the template NeRF mapping features (+ view direction)
//! to color and density.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{posenc_dim, posenc_row, Graph, Matrix, NodeId, ParameterTape};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};

/// Sinusoidal encoding with `bands` frequency bands, optionally windowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalEncoder {
    pub bands: usize,
    pub identity: bool,
}

impl PositionalEncoder {
    pub fn new(bands: usize, identity: bool) -> Self {
        Self { bands, identity }
    }

    pub fn dim(&self, in_dim: usize) -> usize {
        posenc_dim(in_dim, self.bands, self.identity)
    }

    /// Band weights `w_k(alpha) = (1 - cos(pi * clamp(alpha - k, 0, 1))) / 2`.
    pub fn window(&self, alpha: f64) -> Vec<f64> {
        (0..self.bands)
            .map(|k| (1.0 - (std::f64::consts::PI * (alpha - k as f64).clamp(0.0, 1.0)).cos()) / 2.0)
            .collect()
    }

    pub fn encode(&self, x: &[f64], alpha: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim(x.len())];
        posenc_row(x, &self.window(alpha), self.identity, &mut out);
        out
    }

    pub fn encode_graph(&self, g: &mut Graph, x: NodeId, alpha: f64) -> NodeId {
        g.posenc(x, &self.window(alpha), self.identity)
    }
}

pub const SH_DIM: usize = 16;

/// Real spherical harmonics up to degree 3 (16 values, Condon-Shortley
/// phase, ordering `l = 0..3`, `m = -l..l`). Non-unit input is normalised
/// and reported through the flag.
pub fn sh_encode(d: [f64; 3]) -> ([f64; SH_DIM], bool) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let flagged = (n - 1.0).abs() > 1e-6;
    let (x, y, z) = if n > 0.0 { (d[0] / n, d[1] / n, d[2] / n) } else { (0.0, 0.0, 1.0) };
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let out = [
        0.282_094_791_773_878_14,
        -0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        -0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        -1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (2.0 * zz - xx - yy),
        -1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (xx - yy),
        -0.590_043_589_926_643_5 * y * (3.0 * xx - yy),
        2.890_611_442_640_554 * x * y * z,
        -0.457_045_799_464_465_8 * y * (4.0 * zz - xx - yy),
        0.373_176_332_590_115_4 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        -0.457_045_799_464_465_8 * x * (4.0 * zz - xx - yy),
        1.445_305_721_320_277 * z * (xx - yy),
        -0.590_043_589_926_643_5 * x * (xx - 3.0 * yy),
    ];
    (out, flagged)
}

/// Shape of a template NeRF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Number of trunk layers (each ReLU).
    pub layers: usize,
    pub hidden: usize,
    pub color_hidden: usize,
    /// Index of the trunk layer whose input is the previous activation
    /// concatenated with the field input.
    #[serde(default)]
    pub skip: Option<usize>,
}

impl FieldConfig {
    pub fn neural() -> Self {
        Self {
            layers: 8,
            hidden: 256,
            color_hidden: 128,
            skip: Some(4),
        }
    }

    pub fn grid() -> Self {
        Self {
            layers: 3,
            hidden: 128,
            color_hidden: 128,
            skip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.color_hidden == 0 {
            return Err(Error::Config("field: layers and widths must be >= 1".into()));
        }
        if matches!(self.skip, Some(s) if s == 0 || s >= self.layers) {
            return Err(Error::Config("field: skip must index an inner trunk layer".into()));
        }
        Ok(())
    }
}

pub struct FieldOutput {
    /// `n x 3`, in `[0, 1]`.
    pub rgb: NodeId,
    /// `n x 1`, non-negative.
    pub sigma: NodeId,
}

/// Trunk MLP -> softplus density and a bottleneck; color branch takes the
/// bottleneck and SH-encoded direction -> one hidden layer -> sigmoid RGB.
pub struct TemplateNerf {
    config: FieldConfig,
    in_dim: usize,
    trunk: Vec<Linear>,
    sigma_head: Linear,
    bottleneck: Linear,
    color: Mlp,
}

impl TemplateNerf {
    pub fn new(config: FieldConfig, in_dim: usize, name: &str, tape: &mut ParameterTape, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let trunk = (0..config.layers)
            .map(|i| {
                let d = match i {
                    0 => in_dim,
                    _ if Some(i) == config.skip => h + in_dim,
                    _ => h,
                };
                Linear::new(tape, &format!("{name}.trunk{i}"), d, h, rng)
            })
            .collect();
        let sigma_head = Linear::new(tape, &format!("{name}.sigma"), h, 1, rng);
        let bottleneck = Linear::new(tape, &format!("{name}.bottleneck"), h, h, rng);
        let color = Mlp::new(tape, &format!("{name}.color"), &[h + SH_DIM, config.color_hidden, 3], rng);
        Ok(Self {
            config,
            in_dim,
            trunk,
            sigma_head,
            bottleneck,
            color,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn trunk_forward(&self, g: &mut Graph, v: NodeId) -> Result<(NodeId, NodeId)> {
        let cols = g.value(v).cols;
        if cols != self.in_dim {
            return Err(Error::shape("field_eval", self.in_dim, cols));
        }
        let mut h = v;
        for (i, layer) in self.trunk.iter().enumerate() {
            if Some(i) == self.config.skip {
                h = g.concat(&[h, v])?;
            }
            h = layer.forward(g, h)?;
            h = g.relu(h);
        }
        let pre = self.sigma_head.forward(g, h)?;
        Ok((h, g.softplus(pre)))
    }

    /// Density only; the color branch is not recorded.
    pub fn density(&self, g: &mut Graph, v: NodeId) -> Result<NodeId> {
        Ok(self.trunk_forward(g, v)?.1)
    }

    pub fn eval(&self, g: &mut Graph, v: NodeId, dirs: &[[f64; 3]]) -> Result<FieldOutput> {
        let rows = g.value(v).rows;
        if dirs.len() != rows {
            return Err(Error::shape("field_eval", rows, dirs.len()));
        }
        let (h, sigma) = self.trunk_forward(g, v)?;
        let b = self.bottleneck.forward(g, h)?;
        let mut sh = Vec::with_capacity(rows * SH_DIM);
        for &d in dirs {
            sh.extend_from_slice(&sh_encode(d).0);
        }
        let sh = g.input(Matrix::from_vec(rows, SH_DIM, sh)?);
        let cin = g.concat(&[b, sh])?;
        let pre = self.color.forward(g, cin)?;
        Ok(FieldOutput {
            rgb: g.sigmoid(pre),
            sigma,
        })
    }
}
