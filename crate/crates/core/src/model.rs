//! Trainable dynamic radiance field: either representation plus the sampling
//! and compositing needed to render it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Graph, Matrix, NodeId, ParameterTape, RaySpan};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, TemplateNerf};
use crate::hashgrid::{HashGridConfig, HashGridSet};
use crate::imageio::Image;
use crate::render::{
    generate_rays, importance_samples, march, stratified_samples, Aabb, Camera, OccupancyConfig, OccupancyGrid, Ray,
    SamplePoint,
};
use crate::temporal::{KeyframeBank, KeyframeConfig, TimeCode};

pub const CHECKPOINT_FORMAT: &str = "tinerf-model-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Neural,
    Grid,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Neural => "neural",
            Representation::Grid => "grid",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural" => Ok(Representation::Neural),
            "grid" => Ok(Representation::Grid),
            other => Err(Error::InvalidArgument(format!(
                "unknown representation `{other}` (expected neural or grid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub representation: Representation,
    pub hash: HashGridConfig,
    pub grid_field: FieldConfig,
    pub keyframes: KeyframeConfig,
    pub neural_field: FieldConfig,
    /// Stratified samples per ray (neural path).
    pub coarse_samples: usize,
    /// Importance samples per ray (neural path).
    pub fine_samples: usize,
    /// Marching steps over `[near, far]` (grid path).
    pub march_steps: usize,
    /// Give the last neural-path sample an effectively infinite segment.
    pub terminal_delta: bool,
    pub background: [f64; 3],
    pub occupancy: OccupancyConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            representation: Representation::Grid,
            hash: HashGridConfig::default(),
            grid_field: FieldConfig::grid(),
            keyframes: KeyframeConfig::default(),
            neural_field: FieldConfig::neural(),
            coarse_samples: 64,
            fine_samples: 64,
            march_steps: 256,
            terminal_delta: true,
            background: [0.0; 3],
            occupancy: OccupancyConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self.representation {
            Representation::Grid => {
                self.hash.validate()?;
                self.grid_field.validate()?;
                if self.march_steps == 0 {
                    return Err(Error::Config("march_steps must be at least 1".into()));
                }
            }
            Representation::Neural => {
                self.keyframes.validate()?;
                self.neural_field.validate()?;
                if self.coarse_samples == 0 {
                    return Err(Error::Config("coarse_samples must be at least 1".into()));
                }
            }
        }
        if self.occupancy.enabled && self.occupancy.resolution == 0 {
            return Err(Error::Config("occupancy.resolution must be at least 1".into()));
        }
        Ok(())
    }
}

enum Kind {
    Grid {
        grid: HashGridSet,
        field: TemplateNerf,
    },
    Neural {
        bank: KeyframeBank,
        coarse: TemplateNerf,
        fine: TemplateNerf,
    },
}

/// Graph nodes produced by rendering one batch of rays.
#[derive(Debug, Clone)]
pub struct RenderedBatch {
    /// `rays x 3` final colors (fine network on the neural path).
    pub rgb: NodeId,
    /// Coarse-network colors (neural path only).
    pub coarse_rgb: Option<NodeId>,
    /// Smoothness term for this batch when requested and defined.
    pub smooth: Option<NodeId>,
    /// Field evaluations recorded for the batch.
    pub samples: usize,
    /// Queries that fell outside the unit domain and were clamped.
    pub clamped: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    config: ModelConfig,
    aabb: Aabb,
    frame_times: Vec<f64>,
    alpha: f64,
    occupancy_live: bool,
    iteration: usize,
}

pub struct Model {
    config: ModelConfig,
    aabb: Aabb,
    frame_times: Vec<f64>,
    tape: ParameterTape,
    kind: Kind,
    occupancy: Option<OccupancyGrid>,
    /// Whether marching consults the occupancy grid.
    pub occupancy_live: bool,
    /// Positional-encoding window (neural path).
    pub alpha: f64,
    /// Training iterations applied so far.
    pub iteration: usize,
}

struct Sampled {
    positions: Vec<[f64; 3]>,
    dirs: Vec<[f64; 3]>,
    times: Vec<f64>,
    codes: Vec<TimeCode>,
    spans: Vec<RaySpan>,
    deltas: Vec<f64>,
}

impl Sampled {
    fn with_capacity(n: usize, rays: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            dirs: Vec::with_capacity(n),
            times: Vec::with_capacity(n),
            codes: Vec::with_capacity(n),
            spans: Vec::with_capacity(rays),
            deltas: Vec::with_capacity(n),
        }
    }

    fn push_ray(&mut self, ray: &Ray, samples: &[SamplePoint]) {
        let start = self.positions.len();
        for s in samples {
            self.positions.push(ray.at(s.u));
            self.dirs.push(ray.dir);
            self.times.push(ray.time);
            self.codes.push(ray.code);
            self.deltas.push(s.delta);
        }
        self.spans.push(RaySpan {
            start,
            len: samples.len(),
        });
    }
}

impl Model {
    pub fn new(config: ModelConfig, aabb: Aabb, frame_times: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        if frame_times.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one frame time".into()));
        }
        if (0..3).any(|a| !(aabb.min[a] < aabb.max[a])) {
            return Err(Error::InvalidArgument(format!("degenerate scene box {aabb:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = ParameterTape::new();
        let (kind, occupancy) = match config.representation {
            Representation::Grid => {
                let grid = HashGridSet::new(config.hash.clone(), &mut tape, &mut rng)?;
                let field = TemplateNerf::new(config.grid_field.clone(), grid.feature_dim(), "field", &mut tape, &mut rng)?;
                let occ = &config.occupancy;
                let occupancy = occ
                    .enabled
                    .then(|| OccupancyGrid::new(occ.resolution, aabb, occ.decay, occ.threshold));
                (Kind::Grid { grid, field }, occupancy)
            }
            Representation::Neural => {
                let bank = KeyframeBank::new(config.keyframes.clone(), frame_times.clone(), &mut tape, &mut rng)?;
                let dim = bank.feature_dim();
                let coarse = TemplateNerf::new(config.neural_field.clone(), dim, "coarse", &mut tape, &mut rng)?;
                let fine = TemplateNerf::new(config.neural_field.clone(), dim, "fine", &mut tape, &mut rng)?;
                (Kind::Neural { bank, coarse, fine }, None)
            }
        };
        Ok(Self {
            config,
            aabb,
            frame_times,
            tape,
            kind,
            occupancy,
            occupancy_live: false,
            alpha: 0.0,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn representation(&self) -> Representation {
        self.config.representation
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn tape(&self) -> &ParameterTape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut ParameterTape {
        &mut self.tape
    }

    pub fn hash_grid(&self) -> Option<&HashGridSet> {
        match &self.kind {
            Kind::Grid { grid, .. } => Some(grid),
            Kind::Neural { .. } => None,
        }
    }

    pub fn keyframe_bank(&self) -> Option<&KeyframeBank> {
        match &self.kind {
            Kind::Neural { bank, .. } => Some(bank),
            Kind::Grid { .. } => None,
        }
    }

    pub fn occupancy(&self) -> Option<&OccupancyGrid> {
        self.occupancy.as_ref()
    }

    pub fn occupancy_mut(&mut self) -> Option<&mut OccupancyGrid> {
        self.occupancy.as_mut()
    }

    /// Time code of an arbitrary time under this model's frame timestamps.
    pub fn time_code(&self, t: f64) -> TimeCode {
        TimeCode::at(t, &self.frame_times)
    }

    /// World position to hash-grid coordinates in the unit cube.
    fn grid_coords(&self, x: [f64; 3]) -> [f64; 3] {
        self.aabb.normalize(x)
    }

    /// World position to positional-encoding input in `[-1, 1]^3`.
    fn bank_coords(&self, x: [f64; 3]) -> [f64; 3] {
        self.aabb.normalize(x).map(|v| 2.0 * v - 1.0)
    }

    /// Records the rendering of `rays` on `g`. `rng` drives sample jitter;
    /// `None` places every sample at its bin center. With `smooth` set the
    /// smoothness term of the batch is recorded as well.
    pub fn render_rays(&self, g: &mut Graph, rays: &[Ray], rng: Option<&mut dyn RngCore>, smooth: bool) -> Result<RenderedBatch> {
        if rays.is_empty() {
            return Err(Error::InvalidArgument("empty ray batch".into()));
        }
        let mut rng = rng;
        let mut jitter = move || match rng.as_deref_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        match &self.kind {
            Kind::Grid { grid, field } => self.render_grid(g, grid, field, rays, &mut jitter, smooth),
            Kind::Neural { bank, coarse, fine } => self.render_neural(g, bank, coarse, fine, rays, &mut jitter, smooth),
        }
    }

    fn render_grid(
        &self,
        g: &mut Graph,
        grid: &HashGridSet,
        field: &TemplateNerf,
        rays: &[Ray],
        jitter: &mut impl FnMut() -> f64,
        smooth: bool,
    ) -> Result<RenderedBatch> {
        let occ = self.occupancy.as_ref().filter(|_| self.occupancy_live);
        let mut s = Sampled::with_capacity(rays.len() * 32, rays.len());
        for ray in rays {
            let samples = march(ray, &self.aabb, self.config.march_steps, occ, jitter());
            s.push_ray(ray, &samples);
        }
        let coords: Vec<[f64; 3]> = s.positions.iter().map(|&x| self.grid_coords(x)).collect();
        let (features, clamped) = grid.encode_graph(g, &coords, &s.times)?;
        let out = field.eval(g, features, &s.dirs)?;
        let rgb = g.composite(out.rgb, out.sigma, s.spans, s.deltas, self.config.background)?;
        let smooth = if smooth && !coords.is_empty() {
            let levels = grid.finest_temporal_levels();
            let pairs = grid.temporal_pairs(&coords, &s.times, &levels);
            let md = grid.config().dynamic_dim;
            let a = g.gather(md, 1, pairs.iter().map(|&(a, _)| (a, 1.0)).collect())?;
            let b = g.gather(md, 1, pairs.iter().map(|&(_, b)| (b, 1.0)).collect())?;
            let nf = self.frame_times.len() as f64;
            Some(g.squared_error(a, b, 1.0 / (nf * nf))?)
        } else {
            None
        };
        Ok(RenderedBatch {
            rgb,
            coarse_rgb: None,
            smooth,
            samples: coords.len(),
            clamped,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn render_neural(
        &self,
        g: &mut Graph,
        bank: &KeyframeBank,
        coarse: &TemplateNerf,
        fine: &TemplateNerf,
        rays: &[Ray],
        jitter: &mut impl FnMut() -> f64,
        smooth: bool,
    ) -> Result<RenderedBatch> {
        let (n, m, terminal) = (self.config.coarse_samples, self.config.fine_samples, self.config.terminal_delta);
        let bounds: Vec<Option<(f64, f64)>> = rays
            .iter()
            .map(|r| self.aabb.clip(r.origin, r.dir, r.near, r.far))
            .collect();
        let mut cs = Sampled::with_capacity(rays.len() * n, rays.len());
        let mut coarse_points = Vec::with_capacity(rays.len());
        for (ray, b) in rays.iter().zip(&bounds) {
            let pts = match *b {
                Some((lo, hi)) => stratified_samples(lo, hi, n, jitter, terminal),
                None => Vec::new(),
            };
            cs.push_ray(ray, &pts);
            coarse_points.push(pts);
        }
        let coords: Vec<[f64; 3]> = cs.positions.iter().map(|&x| self.bank_coords(x)).collect();
        let feats = bank.features(g, &coords, &cs.codes, self.alpha)?;
        let out = coarse.eval(g, feats.full, &cs.dirs)?;
        let coarse_rgb = g.composite(out.rgb, out.sigma, cs.spans.clone(), cs.deltas.clone(), self.config.background)?;

        let smooth_node = if smooth {
            let rows: Vec<usize> = (0..cs.codes.len())
                .filter(|&r| matches!(cs.codes[r], TimeCode::Frame(f) if f + 1 < self.frame_times.len()))
                .collect();
            if rows.is_empty() {
                None
            } else {
                let next: Vec<usize> = rows
                    .iter()
                    .map(|&r| match cs.codes[r] {
                        TimeCode::Frame(f) => f + 1,
                        TimeCode::Blend { .. } => unreachable!(),
                    })
                    .collect();
                let count = rows.len() as f64;
                let cur = g.row_gather(feats.dynamic, rows.clone())?;
                let xe = g.row_gather(feats.x_encoded, rows)?;
                let nxt = bank.dynamic_at_frames(g, xe, &next)?;
                Some(g.squared_error(cur, nxt, 1.0 / count)?)
            }
        } else {
            None
        };

        let sigma = g.value(out.sigma).data.clone();
        let mut fs = Sampled::with_capacity(rays.len() * (n + m), rays.len());
        for (r, (ray, b)) in rays.iter().zip(&bounds).enumerate() {
            let pts = match *b {
                Some((lo, hi)) if m > 0 => {
                    let span = cs.spans[r];
                    let w = weights(&coarse_points[r], &sigma[span.start..span.start + span.len]);
                    importance_samples(&coarse_points[r], &w, lo, hi, m, jitter, terminal)
                }
                _ => coarse_points[r].clone(),
            };
            fs.push_ray(ray, &pts);
        }
        let fcoords: Vec<[f64; 3]> = fs.positions.iter().map(|&x| self.bank_coords(x)).collect();
        let ffeats = bank.features(g, &fcoords, &fs.codes, self.alpha)?;
        let fout = fine.eval(g, ffeats.full, &fs.dirs)?;
        let rgb = g.composite(fout.rgb, fout.sigma, fs.spans, fs.deltas, self.config.background)?;
        Ok(RenderedBatch {
            rgb,
            coarse_rgb: Some(coarse_rgb),
            smooth: smooth_node,
            samples: coords.len() + fcoords.len(),
            clamped: 0,
        })
    }

    /// Value-only render of rays at bin centers; returns colors and the
    /// number of field evaluations.
    pub fn render_values(&self, rays: &[Ray]) -> Result<(Vec<[f64; 3]>, usize)> {
        const CHUNK: usize = 512;
        let parts: Vec<Result<(Vec<[f64; 3]>, usize)>> = rays
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new(&self.tape);
                let out = self.render_rays(&mut g, chunk, None, false)?;
                let v = g.value(out.rgb);
                Ok(((0..chunk.len()).map(|r| [v.data[3 * r], v.data[3 * r + 1], v.data[3 * r + 2]]).collect(), out.samples))
            })
            .collect();
        let mut colors = Vec::with_capacity(rays.len());
        let mut samples = 0;
        for p in parts {
            let (c, s) = p?;
            colors.extend(c);
            samples += s;
        }
        Ok((colors, samples))
    }

    /// Renders a full image at time `t`. Times between frames use blended
    /// codes on the neural path.
    pub fn render_image(&self, camera: &Camera, t: f64, near: f64, far: f64) -> Result<Image> {
        let pixels: Vec<usize> = (0..camera.pixel_count()).collect();
        let rays = generate_rays(camera, &pixels, t, self.time_code(t), near, far)?;
        let (colors, _) = self.render_values(&rays)?;
        Ok(Image::from_rgb(camera.width, camera.height, &colors))
    }

    /// Densities at world positions and times, without recording gradients.
    pub fn density_at(&self, points: &[[f64; 3]], times: &[f64]) -> Result<Vec<f64>> {
        if points.len() != times.len() {
            return Err(Error::shape("density_at", points.len(), times.len()));
        }
        const CHUNK: usize = 4096;
        let idx: Vec<usize> = (0..points.len()).step_by(CHUNK).collect();
        let parts: Vec<Result<Vec<f64>>> = idx
            .par_iter()
            .map(|&start| {
                let end = (start + CHUNK).min(points.len());
                let mut g = Graph::new(&self.tape);
                let sigma = match &self.kind {
                    Kind::Grid { grid, field } => {
                        let coords: Vec<[f64; 3]> = points[start..end].iter().map(|&x| self.grid_coords(x)).collect();
                        let (f, _) = grid.encode_graph(&mut g, &coords, &times[start..end])?;
                        field.density(&mut g, f)?
                    }
                    Kind::Neural { bank, fine, .. } => {
                        let coords: Vec<[f64; 3]> = points[start..end].iter().map(|&x| self.bank_coords(x)).collect();
                        let codes: Vec<TimeCode> = times[start..end].iter().map(|&t| self.time_code(t)).collect();
                        let f = bank.features(&mut g, &coords, &codes, self.alpha)?;
                        fine.density(&mut g, f.full)?
                    }
                };
                Ok(g.value(sigma).data.clone())
            })
            .collect();
        let mut out = Vec::with_capacity(points.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// One occupancy sweep: a jittered point and a random time per cell.
    /// No-op without an occupancy grid.
    pub fn update_occupancy(&mut self, rng: &mut impl Rng) -> Result<()> {
        let Some(occ) = self.occupancy.as_ref() else {
            return Ok(());
        };
        let (points, times) = occ.update_queries(rng);
        let sigma = self.density_at(&points, &times)?;
        if let Some(occ) = self.occupancy.as_mut() {
            occ.apply_update(&sigma);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            aabb: self.aabb,
            frame_times: self.frame_times.clone(),
            alpha: self.alpha,
            occupancy_live: self.occupancy_live,
            iteration: self.iteration,
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ck = Checkpoint::from_tape(&self.tape, json);
        if let Some(occ) = &self.occupancy {
            ck.push_array("occupancy.cache", occ.cache().to_vec());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported model format `{}`", meta.format)));
        }
        let mut model = Model::new(meta.config, meta.aabb, meta.frame_times, 0)?;
        ck.restore_into(&mut model.tape)?;
        if let Some(occ) = model.occupancy.as_mut() {
            let cache = ck
                .array("occupancy.cache")
                .ok_or_else(|| Error::Checkpoint("missing occupancy cache".into()))?;
            if cache.len() != occ.cache().len() {
                return Err(Error::Checkpoint("occupancy cache has the wrong size".into()));
            }
            occ.set_cache(cache.to_vec());
        }
        model.alpha = meta.alpha;
        model.occupancy_live = meta.occupancy_live;
        model.iteration = meta.iteration;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Compositing weights `T_k (1 - exp(-sigma_k delta_k))`.
pub fn weights(samples: &[SamplePoint], sigma: &[f64]) -> Vec<f64> {
    let mut t = 1.0;
    samples
        .iter()
        .zip(sigma)
        .map(|(s, &sg)| {
            let next = t * (-sg * s.delta).exp();
            let w = t - next;
            t = next;
            w
        })
        .collect()
}

/// Colors of a batch as a `rays x 3` matrix, for loss targets.
pub fn target_matrix(colors: &[[f64; 3]]) -> Matrix {
    Matrix {
        rows: colors.len(),
        cols: 3,
        data: colors.iter().flatten().copied().collect(),
    }
}
