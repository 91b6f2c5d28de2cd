//! Multi-level 3D (static) and 4D (dynamic) hash-grid feature encoder.
//!
//! Every level owns one table of `H` rows. A row holds `m_s + m_d` scalars:
//! the first `m_s` are only ever addressed through the 3D spatial hash, the
//! remaining `m_d` only through the 4D space-time hash. Static and dynamic
//! lookups for the same point therefore land on unrelated rows; sharing the
//! physical row is purely a storage choice.
//!
//! Encoded layout: `[static_0, dynamic_0, static_1, dynamic_1, ...]` in
//! ascending level order, each block `m_s` resp. `m_d` wide.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParameterTape, SegmentId};
use crate::error::{Error, Result};

/// Hash multipliers for the x, y, z and t lattice coordinates.
pub const DEFAULT_PRIMES: [u64; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size: usize,
    pub static_dim: usize,
    pub dynamic_dim: usize,
    pub spatial_base: f64,
    pub spatial_scale: f64,
    pub temporal_base: f64,
    pub temporal_scale: f64,
    pub primes: [u64; 4],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 12,
            table_size: 1 << 19,
            static_dim: 2,
            dynamic_dim: 6,
            spatial_base: 8.0,
            spatial_scale: 1.45,
            temporal_base: 2.0,
            temporal_scale: 1.4,
            primes: DEFAULT_PRIMES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelResolution {
    pub spatial: usize,
    pub temporal: usize,
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hash grid: {m}")));
        if self.levels == 0 {
            return bad("levels must be >= 1");
        }
        if !self.table_size.is_power_of_two() {
            return bad("table_size must be a power of two");
        }
        if self.dynamic_dim == 0 {
            return bad("dynamic_dim must be >= 1");
        }
        if self.spatial_base < 1.0 || self.temporal_base < 1.0 {
            return bad("base resolutions must be >= 1");
        }
        if self.spatial_scale < 1.0 || self.temporal_scale < 1.0 {
            return bad("scale factors must be >= 1");
        }
        if self.primes[0] != 1 || self.primes.iter().any(|p| p % 2 == 0) {
            return bad("primes must be odd with the first equal to 1");
        }
        Ok(())
    }

    pub fn row_width(&self) -> usize {
        self.static_dim + self.dynamic_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.levels * self.row_width()
    }
}

/// Per-level `(spatial, temporal)` cell counts.
///
/// Spatial: `floor(base * scale^l)`. Temporal: `floor(base * scale^(l / 2))`,
/// i.e. the temporal factor is applied every other level.
pub fn level_resolutions(config: &HashGridConfig) -> Vec<LevelResolution> {
    (0..config.levels)
        .map(|l| LevelResolution {
            spatial: (config.spatial_base * config.spatial_scale.powi(l as i32)).floor() as usize,
            temporal: (config.temporal_base * config.temporal_scale.powi((l / 2) as i32)).floor()
                as usize,
        })
        .collect()
}

/// `(XOR_i coords[i] * primes[i]) mod table_size`, products wrapping in u64.
pub fn hash_index(coords: &[u64], table_size: usize, primes: &[u64; 4]) -> usize {
    debug_assert!(coords.len() == 3 || coords.len() == 4);
    let h = coords
        .iter()
        .zip(primes)
        .fold(0u64, |acc, (&c, &p)| acc ^ c.wrapping_mul(p));
    (h % table_size as u64) as usize
}

/// Rounds values within a few ulps of an integer onto it, so `i / res`
/// lands exactly on lattice line `i`.
pub(crate) fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 4.0 * f64::EPSILON * r.abs().max(1.0) {
        r
    } else {
        v
    }
}

/// Cell lookup along one axis: `(lower lattice index, fractional offset)`.
/// Coordinates outside `[0, 1]` are clamped; the flag reports it.
fn cell(x: f64, res: usize) -> (u64, f64, bool) {
    let clamped = !(0.0..=1.0).contains(&x);
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    let scaled = snap(x * res as f64);
    let i = (scaled.floor() as usize).min(res - 1);
    (i as u64, scaled - i as f64, clamped)
}

/// Hashed rows and interpolation weights for the 8 spatial corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners3 {
    pub rows: [usize; 8],
    pub weights: [f64; 8],
    pub clamped: bool,
}

/// Hashed rows and interpolation weights for the 16 space-time corners.
/// Corners `0..8` lie on the lower time plane, `8..16` on the upper one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners4 {
    pub rows: [usize; 16],
    pub weights: [f64; 16],
    pub clamped: bool,
    /// Lower temporal lattice index of the enclosing cell.
    pub time_cell: u64,
}

pub struct HashGridSet {
    config: HashGridConfig,
    resolutions: Vec<LevelResolution>,
    segments: Vec<SegmentId>,
    offsets: Vec<usize>,
}

impl HashGridSet {
    /// Allocates one tape segment per level, initialised uniformly in
    /// `[-1e-4, 1e-4]`.
    pub fn new(config: HashGridConfig, tape: &mut ParameterTape, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let resolutions = level_resolutions(&config);
        let len = config.table_size * config.row_width();
        let segments: Vec<_> = (0..config.levels)
            .map(|l| tape.add_segment(format!("hash.level{l}"), len, || rng.random_range(-1e-4..=1e-4)))
            .collect();
        let offsets = segments.iter().map(|&s| tape.segment(s).offset).collect();
        Ok(Self {
            config,
            resolutions,
            segments,
            offsets,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[LevelResolution] {
        &self.resolutions
    }

    pub fn segments(&self) -> &[SegmentId] {
        &self.segments
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Flat tape index of the first scalar of `row` at `level`.
    pub fn row_offset(&self, level: usize, row: usize) -> usize {
        self.offsets[level] + row * self.config.row_width()
    }

    fn reduce(&self, h: u64) -> usize {
        let t = self.config.table_size as u64;
        if t.is_power_of_two() {
            (h & (t - 1)) as usize
        } else {
            (h % t) as usize
        }
    }

    /// Spatial cell of `x` at `level`: the unreduced XOR of the three
    /// per-axis prime products for each corner, the trilinear weights and
    /// the clamp flag.
    fn spatial_cell(&self, x: [f64; 3], level: usize) -> ([u64; 8], [f64; 8], bool) {
        let res = self.resolutions[level].spatial;
        let p = &self.config.primes;
        let mut terms = [[0u64; 2]; 3];
        let mut frac = [0.0; 3];
        let mut clamped = false;
        for a in 0..3 {
            let (i, f, c) = cell(x[a], res);
            terms[a] = [i.wrapping_mul(p[a]), (i + 1).wrapping_mul(p[a])];
            frac[a] = f;
            clamped |= c;
        }
        let mut h = [0u64; 8];
        let mut w = [0.0; 8];
        for c in 0..8 {
            let (b0, b1, b2) = (c & 1, c >> 1 & 1, c >> 2 & 1);
            h[c] = terms[0][b0] ^ terms[1][b1] ^ terms[2][b2];
            let f = |b: usize, a: usize| if b == 1 { frac[a] } else { 1.0 - frac[a] };
            w[c] = f(b0, 0) * f(b1, 1) * f(b2, 2);
        }
        (h, w, clamped)
    }

    /// Temporal cell: `(lower index, per-plane prime products, fraction, clamped)`.
    fn time_cell(&self, t: f64, level: usize) -> (u64, [u64; 2], f64, bool) {
        let (i, f, c) = cell(t, self.resolutions[level].temporal);
        let p = self.config.primes[3];
        (i, [i.wrapping_mul(p), (i + 1).wrapping_mul(p)], f, c)
    }

    pub fn corners_3d(&self, x: [f64; 3], level: usize) -> Corners3 {
        let (h, weights, clamped) = self.spatial_cell(x, level);
        Corners3 {
            rows: h.map(|v| self.reduce(v)),
            weights,
            clamped,
        }
    }

    pub fn corners_4d(&self, x: [f64; 3], t: f64, level: usize) -> Corners4 {
        let (h, w, cs) = self.spatial_cell(x, level);
        let (ti, tp, tf, ct) = self.time_cell(t, level);
        let mut rows = [0; 16];
        let mut weights = [0.0; 16];
        for c in 0..16 {
            let plane = c >> 3;
            rows[c] = self.reduce(h[c & 7] ^ tp[plane]);
            weights[c] = w[c & 7] * if plane == 1 { tf } else { 1.0 - tf };
        }
        Corners4 {
            rows,
            weights,
            clamped: cs || ct,
            time_cell: ti,
        }
    }

    /// Static feature (`m_s` values) by trilinear interpolation.
    pub fn interp_3d(&self, tape: &ParameterTape, x: [f64; 3], level: usize) -> (Vec<f64>, Corners3) {
        let corners = self.corners_3d(x, level);
        let params = tape.values();
        let mut out = vec![0.0; self.config.static_dim];
        for (&row, &w) in corners.rows.iter().zip(&corners.weights) {
            let off = self.row_offset(level, row);
            for (o, p) in out.iter_mut().zip(&params[off..off + self.config.static_dim]) {
                *o += w * p;
            }
        }
        (out, corners)
    }

    /// Dynamic feature (`m_d` values) by quadrilinear interpolation.
    pub fn interp_4d(&self, tape: &ParameterTape, x: [f64; 3], t: f64, level: usize) -> (Vec<f64>, Corners4) {
        let corners = self.corners_4d(x, t, level);
        let params = tape.values();
        let (ms, md) = (self.config.static_dim, self.config.dynamic_dim);
        let mut out = vec![0.0; md];
        for (&row, &w) in corners.rows.iter().zip(&corners.weights) {
            let off = self.row_offset(level, row) + ms;
            for (o, p) in out.iter_mut().zip(&params[off..off + md]) {
                *o += w * p;
            }
        }
        (out, corners)
    }

    /// Full feature vector for one point, no graph recorded.
    pub fn encode(&self, tape: &ParameterTape, x: [f64; 3], t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_dim());
        for l in 0..self.config.levels {
            out.extend(self.interp_3d(tape, x, l).0);
            out.extend(self.interp_4d(tape, x, t, l).0);
        }
        out
    }

    /// Records the encoding of a batch of points on `graph`. Returns the
    /// `n x feature_dim` node and the number of clamped queries.
    pub fn encode_graph(&self, graph: &mut Graph, points: &[[f64; 3]], times: &[f64]) -> Result<(NodeId, usize)> {
        if points.len() != times.len() {
            return Err(Error::shape("encode", points.len(), times.len()));
        }
        let (ms, md) = (self.config.static_dim, self.config.dynamic_dim);
        let n = points.len();
        let mut clamped = 0;
        let mut blocks = Vec::with_capacity(2 * self.config.levels);
        for l in 0..self.config.levels {
            let mut st = Vec::with_capacity(if ms > 0 { n * 8 } else { 0 });
            let mut dy = Vec::with_capacity(n * 16);
            for (&x, &t) in points.iter().zip(times) {
                let (h, w, cs) = self.spatial_cell(x, l);
                let (_, tp, tf, ct) = self.time_cell(t, l);
                clamped += usize::from(cs) * usize::from(ms > 0) + usize::from(cs || ct);
                if ms > 0 {
                    for k in 0..8 {
                        st.push((self.row_offset(l, self.reduce(h[k])), w[k]));
                    }
                }
                for (plane, tw) in [(0, 1.0 - tf), (1, tf)] {
                    for k in 0..8 {
                        dy.push((self.row_offset(l, self.reduce(h[k] ^ tp[plane])) + ms, w[k] * tw));
                    }
                }
            }
            if ms > 0 {
                blocks.push(graph.gather(ms, 8, st)?);
            }
            blocks.push(graph.gather(md, 16, dy)?);
        }
        Ok((graph.concat(&blocks)?, clamped))
    }

    /// The two finest temporal levels (the last two levels, since temporal
    /// resolution never decreases with level).
    pub fn finest_temporal_levels(&self) -> Vec<usize> {
        let l = self.config.levels;
        (l.saturating_sub(2)..l).collect()
    }

    /// Tape offsets of the dynamic slices of temporally adjacent rows
    /// `(h4(corner, t_a), h4(corner, t_b))` for every spatial corner of every
    /// query at the given levels. A lattice point touched by several queries
    /// appears once per touch.
    pub fn temporal_pairs(&self, points: &[[f64; 3]], times: &[f64], levels: &[usize]) -> Vec<(usize, usize)> {
        let ms = self.config.static_dim;
        let mut pairs = Vec::with_capacity(points.len() * levels.len() * 8);
        for (&x, &t) in points.iter().zip(times) {
            for &l in levels {
                let c = self.corners_4d(x, t, l);
                for k in 0..8 {
                    pairs.push((
                        self.row_offset(l, c.rows[k]) + ms,
                        self.row_offset(l, c.rows[k + 8]) + ms,
                    ));
                }
            }
        }
        pairs
    }
}
