//! Neural representation features: a static MLP plus per-level banks of
//! keyframe MLPs whose outputs are linearly blended in time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId, ParameterTape, SegmentId};
use crate::error::{Error, Result};
use crate::field::PositionalEncoder;
use crate::nn::Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeConfig {
    /// Keyframe slot count `n_l` per level; level `l` owns `n_l + 1` MLPs.
    pub slots: Vec<usize>,
    /// Output width of every keyframe MLP.
    pub level_dim: usize,
    /// Output width of the static MLP; 0 disables static features.
    pub static_dim: usize,
    pub embed_dim: usize,
    pub x_bands: usize,
    pub z_bands: usize,
    /// Blend time embeddings instead of features for times between frames.
    pub blend_embeddings: bool,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            slots: vec![5, 20],
            level_dim: 64,
            static_dim: 128,
            embed_dim: 8,
            x_bands: 8,
            z_bands: 3,
            blend_embeddings: false,
        }
    }
}

impl KeyframeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots.is_empty() || self.slots.contains(&0) {
            return Err(Error::Config("keyframes: every level needs >= 1 slot".into()));
        }
        if self.level_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("keyframes: level_dim and embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dynamic_dim(&self) -> usize {
        self.slots.len() * self.level_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.static_dim + self.dynamic_dim()
    }
}

/// Active keyframe slot `i` and the weight `dt` of keyframe `i`
/// (`1 - dt` goes to keyframe `i + 1`). Out-of-range times are clamped;
/// the flag reports it.
pub fn keyframe_weights(t: f64, n: usize) -> (usize, f64, bool) {
    let clamped = !(0.0..=1.0).contains(&t);
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let s = crate::hashgrid::snap(t * n as f64);
    let i = (s.floor() as usize).min(n - 1);
    let dt = (i + 1) as f64 - s;
    (i, dt.clamp(0.0, 1.0), clamped)
}

/// What time code a query row uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeCode {
    /// A training frame: its embedding and its timestamp.
    Frame(usize),
    /// Between two adjacent frames; `weight_a` goes to frame `a`.
    Blend { a: usize, b: usize, weight_a: f64 },
}

impl TimeCode {
    /// Code for an arbitrary time given sorted frame timestamps. Times that
    /// coincide with a frame map to [`TimeCode::Frame`].
    pub fn at(t: f64, frame_times: &[f64]) -> Self {
        match frame_times.iter().position(|&ft| ft >= t) {
            None => TimeCode::Frame(frame_times.len() - 1),
            Some(0) => TimeCode::Frame(0),
            Some(b) if frame_times[b] == t => TimeCode::Frame(b),
            Some(b) => {
                let a = b - 1;
                let weight_a = (frame_times[b] - t) / (frame_times[b] - frame_times[a]);
                TimeCode::Blend { a, b, weight_a }
            }
        }
    }

    pub fn time(&self, frame_times: &[f64]) -> f64 {
        match *self {
            TimeCode::Frame(f) => frame_times[f],
            TimeCode::Blend { a, b, weight_a } => weight_a * frame_times[a] + (1.0 - weight_a) * frame_times[b],
        }
    }
}

pub struct NeuralFeatures {
    /// `[static, dynamic]` concatenated.
    pub full: NodeId,
    pub dynamic: NodeId,
    /// Encoded positions, reusable for further dynamic evaluations.
    pub x_encoded: NodeId,
}

pub struct KeyframeBank {
    config: KeyframeConfig,
    x_encoder: PositionalEncoder,
    z_encoder: PositionalEncoder,
    embedding: SegmentId,
    levels: Vec<Vec<Mlp>>,
    static_mlp: Option<Mlp>,
    frame_times: Vec<f64>,
}

impl KeyframeBank {
    pub fn new(config: KeyframeConfig, frame_times: Vec<f64>, tape: &mut ParameterTape, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if frame_times.is_empty() {
            return Err(Error::InvalidArgument("keyframe bank needs at least one frame".into()));
        }
        let x_encoder = PositionalEncoder::new(config.x_bands, true);
        let z_encoder = PositionalEncoder::new(config.z_bands, true);
        let embedding = tape.add_segment("time_embedding", frame_times.len() * config.embed_dim, || {
            rng.random_range(-0.1..0.1)
        });
        let in_dim = x_encoder.dim(3) + z_encoder.dim(config.embed_dim);
        let d = config.level_dim;
        let levels = config
            .slots
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                (0..=n)
                    .map(|i| Mlp::new(tape, &format!("keyframe{l}.{i}"), &[in_dim, d, d], rng))
                    .collect()
            })
            .collect();
        let static_mlp = (config.static_dim > 0).then(|| {
            let s = config.static_dim;
            Mlp::new(tape, "static", &[x_encoder.dim(3), s, s], rng)
        });
        Ok(Self {
            config,
            x_encoder,
            z_encoder,
            embedding,
            levels,
            static_mlp,
            frame_times,
        })
    }

    pub fn config(&self) -> &KeyframeConfig {
        &self.config
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn embedding(&self) -> SegmentId {
        self.embedding
    }

    pub fn keyframe_mlp(&self, level: usize, i: usize) -> &Mlp {
        &self.levels[level][i]
    }

    pub fn static_mlp(&self) -> Option<&Mlp> {
        self.static_mlp.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn encode_positions(&self, g: &mut Graph, positions: &[[f64; 3]], alpha: f64) -> Result<NodeId> {
        let flat = positions.iter().flatten().copied().collect();
        let x = g.input(Matrix::from_vec(positions.len(), 3, flat)?);
        Ok(self.x_encoder.encode_graph(g, x, alpha))
    }

    /// Embedding rows (`n x embed_dim`), each a weighted sum of frame rows.
    pub fn embeddings(&self, g: &mut Graph, rows: &[Vec<(usize, f64)>]) -> Result<NodeId> {
        let e = self.config.embed_dim;
        let off = g.tape().segment(self.embedding).offset;
        let per_row = rows.first().map_or(1, Vec::len);
        let mut entries = Vec::with_capacity(rows.len() * per_row);
        for r in rows {
            if r.len() != per_row {
                return Err(Error::shape("embeddings", per_row, r.len()));
            }
            for &(f, w) in r {
                if f >= self.frame_times.len() {
                    return Err(Error::InvalidArgument(format!("frame {f} has no embedding")));
                }
                entries.push((off + f * e, w));
            }
        }
        g.gather(e, per_row, entries)
    }

    /// Dynamic feature `[v_d1, v_d2, ...]` for encoded positions, raw
    /// embeddings and times, all row-aligned.
    pub fn dynamic_feature(&self, g: &mut Graph, x_encoded: NodeId, z: NodeId, times: &[f64]) -> Result<NodeId> {
        let z_enc = self.z_encoder.encode_graph(g, z, self.config.z_bands as f64);
        let input = g.concat(&[x_encoded, z_enc])?;
        let parts = (0..self.levels.len())
            .map(|l| self.dynamic_feature_level(g, input, times, l))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts)
    }

    /// One level of the dynamic feature from the concatenated encoded input.
    pub fn dynamic_feature_level(&self, g: &mut Graph, input: NodeId, times: &[f64], level: usize) -> Result<NodeId> {
        let rows = g.value(input).rows;
        if times.len() != rows {
            return Err(Error::shape("dynamic_feature", rows, times.len()));
        }
        let bank = &self.levels[level];
        let n = bank.len() - 1;
        let mut routes: Vec<Vec<(usize, f64)>> = vec![Vec::new(); bank.len()];
        for (r, &t) in times.iter().enumerate() {
            let (i, dt, _) = keyframe_weights(t, n);
            routes[i].push((r, dt));
            routes[i + 1].push((r, 1.0 - dt));
        }
        let mut parts = Vec::new();
        for (mlp, route) in bank.iter().zip(routes) {
            if route.is_empty() {
                continue;
            }
            let sub = g.row_gather(input, route.iter().map(|&(r, _)| r).collect())?;
            let out = mlp.forward(g, sub)?;
            parts.push((out, route));
        }
        g.scatter_blend(rows, self.config.level_dim, parts)
    }

    pub fn static_feature(&self, g: &mut Graph, x_encoded: NodeId) -> Result<Option<NodeId>> {
        self.static_mlp.as_ref().map(|m| m.forward(g, x_encoded)).transpose()
    }

    /// Full features for positions under per-row time codes. Rows with a
    /// [`TimeCode::Blend`] get the blend of the two frame features (or of
    /// the embeddings when `blend_embeddings` is set).
    pub fn features(&self, g: &mut Graph, positions: &[[f64; 3]], codes: &[TimeCode], alpha: f64) -> Result<NeuralFeatures> {
        if positions.len() != codes.len() {
            return Err(Error::shape("features", positions.len(), codes.len()));
        }
        let n = positions.len();
        let x_encoded = self.encode_positions(g, positions, alpha)?;
        let ft = &self.frame_times;
        let mut side_a = Vec::with_capacity(n);
        let mut times_a = Vec::with_capacity(n);
        let mut side_b = Vec::new();
        for (r, code) in codes.iter().enumerate() {
            match *code {
                TimeCode::Frame(f) => {
                    side_a.push(vec![(f, 1.0), (f, 0.0)]);
                    times_a.push(ft.get(f).copied().unwrap_or(0.0));
                }
                TimeCode::Blend { a, b, weight_a } => {
                    check_adjacent(a, b, ft.len())?;
                    if self.config.blend_embeddings {
                        side_a.push(vec![(a, weight_a), (b, 1.0 - weight_a)]);
                        times_a.push(code.time(ft));
                    } else {
                        side_a.push(vec![(a, 1.0), (a, 0.0)]);
                        times_a.push(ft[a]);
                        side_b.push((r, b, weight_a));
                    }
                }
            }
        }
        let z = self.embeddings(g, &side_a)?;
        let mut dynamic = self.dynamic_feature(g, x_encoded, z, &times_a)?;
        if !side_b.is_empty() {
            let rows: Vec<usize> = side_b.iter().map(|&(r, _, _)| r).collect();
            let xb = g.row_gather(x_encoded, rows.clone())?;
            let zb = self.embeddings(g, &side_b.iter().map(|&(_, b, _)| vec![(b, 1.0)]).collect::<Vec<_>>())?;
            let tb: Vec<f64> = side_b.iter().map(|&(_, b, _)| ft[b]).collect();
            let db = self.dynamic_feature(g, xb, zb, &tb)?;
            let mut wa = vec![1.0; n];
            for &(r, _, w) in &side_b {
                wa[r] = w;
            }
            let route_a = wa.iter().enumerate().map(|(r, &w)| (r, w)).collect();
            let route_b = side_b.iter().map(|&(r, _, w)| (r, 1.0 - w)).collect();
            dynamic = g.scatter_blend(n, self.config.dynamic_dim(), vec![(dynamic, route_a), (db, route_b)])?;
        }
        let full = match self.static_feature(g, x_encoded)? {
            Some(s) => g.concat(&[s, dynamic])?,
            None => dynamic,
        };
        Ok(NeuralFeatures {
            full,
            dynamic,
            x_encoded,
        })
    }

    /// Dynamic features of the same encoded positions at another frame per
    /// row (used by the adjacent-frame smoothness term).
    pub fn dynamic_at_frames(&self, g: &mut Graph, x_encoded: NodeId, frames: &[usize]) -> Result<NodeId> {
        let z = self.embeddings(g, &frames.iter().map(|&f| vec![(f, 1.0)]).collect::<Vec<_>>())?;
        let times: Vec<f64> = frames.iter().map(|&f| self.frame_times[f]).collect();
        self.dynamic_feature(g, x_encoded, z, &times)
    }
}

fn check_adjacent(a: usize, b: usize, frames: usize) -> Result<()> {
    if b != a + 1 || b >= frames {
        return Err(Error::InvalidArgument(format!(
            "time blending needs adjacent frames, got {a} and {b}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keyframe_weight_examples() {
        let (i, dt, _) = keyframe_weights(0.2, 5);
        assert_eq!(i, 1);
        assert!((dt - 1.0).abs() < 1e-12);
        let (i, dt, _) = keyframe_weights(0.3, 5);
        assert_eq!(i, 1);
        assert!((dt - 0.5).abs() < 1e-12);
        assert_eq!(keyframe_weights(1.0, 5), (4, 0.0, false));
        assert_eq!(keyframe_weights(0.0, 5), (0, 1.0, false));
        let (i, dt, flag) = keyframe_weights(1.7, 5);
        assert!(flag && i == 4 && dt == 0.0);
    }

    #[test]
    fn time_codes() {
        let ft = [0.0, 0.25, 0.5, 0.75, 1.0];
        assert_eq!(TimeCode::at(0.5, &ft), TimeCode::Frame(2));
        assert_eq!(TimeCode::at(-1.0, &ft), TimeCode::Frame(0));
        assert_eq!(TimeCode::at(2.0, &ft), TimeCode::Frame(4));
        match TimeCode::at(0.3, &ft) {
            TimeCode::Blend { a, b, weight_a } => {
                assert_eq!((a, b), (1, 2));
                assert!((weight_a - 0.8).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    fn small_config() -> KeyframeConfig {
        KeyframeConfig {
            slots: vec![2, 5],
            level_dim: 4,
            static_dim: 3,
            embed_dim: 2,
            x_bands: 2,
            z_bands: 1,
            blend_embeddings: false,
        }
    }

    fn bank(cfg: KeyframeConfig, seed: u64) -> (KeyframeBank, ParameterTape) {
        let mut tape = ParameterTape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ft = (0..6).map(|f| f as f64 / 5.0).collect();
        let b = KeyframeBank::new(cfg, ft, &mut tape, &mut rng).unwrap();
        for v in tape.values_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        (b, tape)
    }

    /// Independent evaluation of one keyframe MLP on a single input row.
    fn mlp_direct(tape: &ParameterTape, m: &Mlp, input: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = m.layers[0].apply(tape, input).into_iter().map(|v| v.max(0.0)).collect();
        m.layers[1].apply(tape, &h)
    }

    fn direct_input(b: &KeyframeBank, tape: &ParameterTape, x: [f64; 3], frame: usize) -> Vec<f64> {
        let e = b.config().embed_dim;
        let off = tape.segment(b.embedding()).offset + frame * e;
        let z = &tape.values()[off..off + e];
        let mut input = PositionalEncoder::new(b.config().x_bands, true).encode(&x, 2.0);
        input.extend(PositionalEncoder::new(b.config().z_bands, true).encode(z, 1.0));
        input
    }

    fn eval(b: &KeyframeBank, tape: &ParameterTape, x: [f64; 3], z_frame: usize, t: f64) -> Vec<f64> {
        let mut g = Graph::new(tape);
        let xe = b.encode_positions(&mut g, &[x], 2.0).unwrap();
        let z = b.embeddings(&mut g, &[vec![(z_frame, 1.0)]]).unwrap();
        let d = b.dynamic_feature(&mut g, xe, z, &[t]).unwrap();
        g.value(d).row(0).to_vec()
    }

    #[test]
    fn keyframe_time_reproduces_single_mlp() {
        let (b, tape) = bank(small_config(), 1);
        let x = [0.1, -0.4, 0.7];
        let input = direct_input(&b, &tape, x, 3);
        // t = 0.5 is keyframe 1 of level 0 (n = 2) and the slot 2/3 midpoint of level 1 (n = 5).
        let out = eval(&b, &tape, x, 3, 0.5);
        let mut g = Graph::new(&tape);
        let xi = g.input(Matrix::row_vector(input.clone()));
        let single = b.keyframe_mlp(0, 1).forward(&mut g, xi).unwrap();
        assert_eq!(out[..4], g.value(single).data[..]);
        for (a, c) in out[..4].iter().zip(mlp_direct(&tape, b.keyframe_mlp(0, 1), &input)) {
            assert!((a - c).abs() < 1e-12);
        }
        let p = mlp_direct(&tape, b.keyframe_mlp(1, 2), &input);
        let q = mlp_direct(&tape, b.keyframe_mlp(1, 3), &input);
        for j in 0..4 {
            assert!((out[4 + j] - 0.5 * (p[j] + q[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn random_time_matches_two_evaluation_oracle() {
        let (b, tape) = bank(small_config(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let t: f64 = rng.random();
            let f = rng.random_range(0..6);
            let input = direct_input(&b, &tape, x, f);
            let out = eval(&b, &tape, x, f, t);
            for (l, n) in [2usize, 5].into_iter().enumerate() {
                let i = ((t * n as f64).floor() as usize).min(n - 1);
                let dt = ((i + 1) as f64 / n as f64 - t) * n as f64;
                let p = mlp_direct(&tape, b.keyframe_mlp(l, i), &input);
                let q = mlp_direct(&tape, b.keyframe_mlp(l, i + 1), &input);
                for j in 0..4 {
                    assert!((out[4 * l + j] - (dt * p[j] + (1.0 - dt) * q[j])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn continuity_across_slot_boundaries() {
        let (b, tape) = bank(small_config(), 3);
        let x = [0.3, 0.3, -0.2];
        for k in 1..5 {
            let t = k as f64 / 5.0;
            let lo = eval(&b, &tape, x, 0, t - 1e-9);
            let hi = eval(&b, &tape, x, 0, t + 1e-9);
            for (a, c) in lo.iter().zip(&hi) {
                assert!((a - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dims_and_static_time_invariance() {
        assert_eq!(KeyframeConfig::default().dynamic_dim(), 128);
        assert_eq!(KeyframeConfig::default().feature_dim(), 256);
        let (b, tape) = bank(small_config(), 4);
        let x = [[0.2, 0.5, -0.5]];
        let mut g = Graph::new(&tape);
        let f1 = b.features(&mut g, &x, &[TimeCode::Frame(0)], 2.0).unwrap();
        let f2 = b.features(&mut g, &x, &[TimeCode::Frame(4)], 2.0).unwrap();
        assert_eq!(g.value(f1.full).cols, 11);
        assert_eq!(g.value(f1.full).row(0)[..3], g.value(f2.full).row(0)[..3]);
        // static feature equals the direct MLP
        let xe = PositionalEncoder::new(2, true).encode(&x[0], 2.0);
        let s = mlp_direct(&tape, b.static_mlp().unwrap(), &xe);
        for (a, c) in g.value(f1.full).row(0)[..3].iter().zip(&s) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (b, mut tape) = bank(small_config(), 5);
        tape.values_mut().fill(0.0);
        let mut g = Graph::new(&tape);
        let f = b.features(&mut g, &[[0.5, 0.5, 0.5]], &[TimeCode::Frame(2)], 2.0).unwrap();
        assert!(g.value(f.full).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_blending_between_frames() {
        let (b, tape) = bank(small_config(), 6);
        let x = [[0.4, -0.1, 0.2]];
        let mut g = Graph::new(&tape);
        let fa = b.features(&mut g, &x, &[TimeCode::Frame(2)], 2.0).unwrap();
        let fb = b.features(&mut g, &x, &[TimeCode::Frame(3)], 2.0).unwrap();
        let at_a = b.features(&mut g, &x, &[TimeCode::Blend { a: 2, b: 3, weight_a: 1.0 }], 2.0).unwrap();
        let mid = b.features(&mut g, &x, &[TimeCode::Blend { a: 2, b: 3, weight_a: 0.5 }], 2.0).unwrap();
        let (va, vb) = (g.value(fa.full).row(0), g.value(fb.full).row(0));
        assert_eq!(g.value(at_a.full).row(0), va);
        for ((m, a), c) in g.value(mid.full).row(0).iter().zip(va).zip(vb) {
            assert!((m - 0.5 * (a + c)).abs() < 1e-12);
            assert!(*m >= a.min(*c) - 1e-12 && *m <= a.max(*c) + 1e-12);
        }
        assert!(b
            .features(&mut g, &x, &[TimeCode::Blend { a: 1, b: 3, weight_a: 0.5 }], 2.0)
            .is_err());
    }

    #[test]
    fn gradient_reaches_only_active_mlps() {
        let (b, tape) = bank(small_config(), 7);
        let mut g = Graph::new(&tape);
        // t = 0.3: level 0 slot 0 (keyframes 0, 1), level 1 slot 1 (keyframes 1, 2).
        let f = b.features(&mut g, &[[0.1, 0.2, 0.3]], &[TimeCode::Blend { a: 1, b: 2, weight_a: 0.5 }], 2.0);
        let f = f.unwrap();
        let one = g.input(Matrix::row_vector(vec![1.0; 11]));
        let loss = g.squared_error(f.full, one, 1.0).unwrap();
        let mut grads = vec![0.0; tape.len()];
        g.backward(loss, &mut grads).unwrap();
        let touched = |m: &Mlp| m.segments().any(|s| grads[tape.segment(s).range()].iter().any(|&v| v != 0.0));
        // frames 1 and 2 have times 0.2 and 0.4
        let active: Vec<(usize, usize)> = vec![(0, 0), (0, 1), (1, 1), (1, 2)];
        for (l, n) in [2usize, 5].into_iter().enumerate() {
            for i in 0..=n {
                assert_eq!(touched(b.keyframe_mlp(l, i)), active.contains(&(l, i)), "level {l} keyframe {i}");
            }
        }
        assert!(touched(b.static_mlp().unwrap()));
        let emb = &grads[tape.segment(b.embedding()).range()];
        assert!(emb[2..6].iter().any(|&v| v != 0.0));
        assert!(emb[..2].iter().chain(&emb[6..]).all(|&v| v == 0.0));
    }
}
