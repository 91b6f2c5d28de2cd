//! Cameras, rays, depth sampling, compositing and the occupancy grid.
//!
//! Camera convention: camera-to-world poses, camera looks down its local
//! `-z` axis with `+x` right and `+y` up. Pixel `(i, j)` (column, row from
//! the top) is sampled through its center.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::TimeCode;

pub type Pose = [[f64; 4]; 4];

pub const TERMINAL_DELTA: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Camera-to-world transform.
    pub pose: Pose,
}

fn det3(m: &Pose) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rejects poses whose rotation block is not orthonormal with det +1.
pub fn validate_pose(pose: &Pose, tol: f64) -> Result<()> {
    if pose.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::SingularPose("non-finite entry".into()));
    }
    for a in 0..3 {
        for b in 0..3 {
            let dot: f64 = (0..3).map(|r| pose[r][a] * pose[r][b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            if (dot - want).abs() > tol {
                return Err(Error::SingularPose(format!("rotation columns {a},{b} not orthonormal")));
            }
        }
    }
    let d = det3(pose);
    if (d - 1.0).abs() > tol {
        return Err(Error::SingularPose(format!("rotation determinant {d}")));
    }
    Ok(())
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::InvalidArgument("camera needs positive size and focal length".into()));
        }
        validate_pose(&self.pose, 1e-6)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// World-space origin and unit direction through the center of `pixel`
    /// (row-major index).
    pub fn pixel_ray(&self, pixel: usize) -> ([f64; 3], [f64; 3]) {
        let (i, j) = ((pixel % self.width) as f64, (pixel / self.width) as f64);
        let cam = [
            (i + 0.5 - 0.5 * self.width as f64) / self.focal,
            -(j + 0.5 - 0.5 * self.height as f64) / self.focal,
            -1.0,
        ];
        let p = &self.pose;
        let mut d = [0.0; 3];
        for (r, dr) in d.iter_mut().enumerate() {
            *dr = p[r][0] * cam[0] + p[r][1] * cam[1] + p[r][2] * cam[2];
        }
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        ([p[0][3], p[1][3], p[2][3]], d.map(|v| v / n))
    }

    /// Camera at `eye` looking at `target`, `up` roughly vertical.
    pub fn look_at(width: usize, height: usize, focal: f64, eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Self {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
        };
        let norm = |a: [f64; 3]| {
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            a.map(|v| v / n)
        };
        let back = norm(sub(eye, target));
        let right = norm(cross(up, back));
        let up = cross(back, right);
        let mut pose = [[0.0; 4]; 4];
        for r in 0..3 {
            pose[r] = [right[r], up[r], back[r], eye[r]];
        }
        pose[3] = [0.0, 0.0, 0.0, 1.0];
        Self {
            width,
            height,
            focal,
            pose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    /// Maps the box to the unit cube.
    pub fn normalize(&self, x: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (x[a] - self.min[a]) / (self.max[a] - self.min[a]))
    }

    /// Slab intersection of `o + u d` restricted to `[near, far]`.
    pub fn clip(&self, o: [f64; 3], d: [f64; 3], near: f64, far: f64) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (near, far);
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (t0, t1) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
        (lo < hi).then_some((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub time: f64,
    pub code: TimeCode,
    pub pixel: usize,
}

impl Ray {
    pub fn at(&self, u: f64) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + u * self.dir[a])
    }
}

/// One ray per listed pixel at time `time` with bounds `[near, far]`.
pub fn generate_rays(camera: &Camera, pixels: &[usize], time: f64, code: TimeCode, near: f64, far: f64) -> Result<Vec<Ray>> {
    camera.validate()?;
    if !(near < far) {
        return Err(Error::InvalidArgument(format!("ray bounds need near < far, got {near} >= {far}")));
    }
    pixels
        .iter()
        .map(|&pixel| {
            if pixel >= camera.pixel_count() {
                return Err(Error::InvalidArgument(format!("pixel {pixel} outside the image")));
            }
            let (origin, dir) = camera.pixel_ray(pixel);
            Ok(Ray {
                origin,
                dir,
                near,
                far,
                time,
                code,
                pixel,
            })
        })
        .collect()
}

/// Jitter source placing every sample at its bin center.
pub fn center() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub u: f64,
    pub delta: f64,
}

/// One uniform draw per equal bin of `[near, far]`; `delta` is the bin
/// width, or [`TERMINAL_DELTA`] for the last sample when `terminal` is set.
/// `jitter` yields the in-bin offset in `[0, 1)` (use [`center`] for bin
/// centers).
pub fn stratified_samples(near: f64, far: f64, n: usize, jitter: &mut impl FnMut() -> f64, terminal: bool) -> Vec<SamplePoint> {
    let w = (far - near) / n as f64;
    let mut out: Vec<SamplePoint> = (0..n)
        .map(|i| SamplePoint {
            u: near + (i as f64 + jitter()) * w,
            delta: w,
        })
        .collect();
    if terminal {
        if let Some(last) = out.last_mut() {
            last.delta = TERMINAL_DELTA;
        }
    }
    out
}

/// Inverse-transform samples from the piecewise-constant density whose bin
/// `k` spans `edges[k]..edges[k + 1]` with weight `weights[k]`. Uses
/// stratified uniforms `(j + xi_j) / m` with `xi_j` from `jitter`.
/// Returns `None` when every weight is zero.
pub fn sample_pdf(edges: &[f64], weights: &[f64], m: usize, jitter: &mut impl FnMut() -> f64) -> Option<Vec<f64>> {
    debug_assert_eq!(edges.len(), weights.len() + 1);
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) / total;
        cdf.push(acc);
    }
    let mut out = Vec::with_capacity(m);
    let mut k = 0;
    for j in 0..m {
        let xi = jitter();
        let u = ((j as f64 + xi) / m as f64).min(cdf[weights.len()]);
        while k + 1 < weights.len() && cdf[k + 1] <= u {
            k += 1;
        }
        // Skip empty bins that share the same cdf value.
        while k + 1 < weights.len() && weights[k] <= 0.0 {
            k += 1;
        }
        let span = cdf[k + 1] - cdf[k];
        let f = if span > 0.0 { ((u - cdf[k]) / span).clamp(0.0, 1.0) } else { 0.5 };
        out.push(edges[k] + f * (edges[k + 1] - edges[k]));
    }
    Some(out)
}

/// Fine samples for a ray: importance samples drawn from the coarse
/// compositing weights, merged with the coarse depths and sorted. Deltas are
/// successive differences; the last one is [`TERMINAL_DELTA`] when
/// `terminal` is set, else the distance to `far`. All-zero weights fall
/// back to `m` fresh stratified samples.
pub fn importance_samples(
    coarse: &[SamplePoint],
    weights: &[f64],
    near: f64,
    far: f64,
    m: usize,
    jitter: &mut impl FnMut() -> f64,
    terminal: bool,
) -> Vec<SamplePoint> {
    let mut edges = Vec::with_capacity(coarse.len() + 1);
    edges.push(near);
    for w in coarse.windows(2) {
        edges.push(0.5 * (w[0].u + w[1].u));
    }
    edges.push(far);
    let extra = match sample_pdf(&edges, weights, m, jitter) {
        Some(v) => v,
        None => stratified_samples(near, far, m, jitter, false).into_iter().map(|s| s.u).collect(),
    };
    let mut us: Vec<f64> = coarse.iter().map(|s| s.u).chain(extra).collect();
    us.sort_by(f64::total_cmp);
    deltas_from_depths(&us, far, terminal)
}

pub fn deltas_from_depths(us: &[f64], far: f64, terminal: bool) -> Vec<SamplePoint> {
    (0..us.len())
        .map(|k| SamplePoint {
            u: us[k],
            delta: match us.get(k + 1) {
                Some(next) => next - us[k],
                None if terminal => TERMINAL_DELTA,
                None => (far - us[k]).max(0.0),
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composited {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

/// Value-level volume rendering of one ray, plus per-sample weights.
pub fn composite(samples: &[SamplePoint], sigma: &[f64], rgb: &[[f64; 3]], background: [f64; 3]) -> (Composited, Vec<f64>) {
    let mut t = 1.0;
    let mut out = Composited {
        rgb: [0.0; 3],
        depth: 0.0,
        opacity: 0.0,
    };
    let mut weights = Vec::with_capacity(samples.len());
    for ((s, &sg), c) in samples.iter().zip(sigma).zip(rgb) {
        let next = t * (-sg * s.delta).exp();
        let w = t - next;
        for ch in 0..3 {
            out.rgb[ch] += w * c[ch];
        }
        out.depth += w * s.u;
        out.opacity += w;
        weights.push(w);
        t = next;
    }
    for ch in 0..3 {
        out.rgb[ch] += t * background[ch];
    }
    (out, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccupancyConfig {
    pub enabled: bool,
    pub resolution: usize,
    pub decay: f64,
    pub threshold: f64,
    /// Iterations between full-grid updates.
    pub interval: usize,
    /// Iterations before culling starts (the grid reports every cell
    /// occupied until then).
    pub warmup: usize,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            resolution: 64,
            decay: 0.99,
            threshold: 1e-4,
            interval: 16,
            warmup: 256,
        }
    }
}

/// Density cache over a regular grid covering the scene box, plus the
/// derived occupancy bits. A fresh grid marks every cell occupied.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    resolution: usize,
    aabb: Aabb,
    decay: f64,
    threshold: f64,
    cache: Vec<f64>,
    bits: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(resolution: usize, aabb: Aabb, decay: f64, threshold: f64) -> Self {
        let n = resolution.pow(3);
        Self {
            resolution,
            aabb,
            decay,
            threshold,
            cache: vec![0.0; n],
            bits: vec![true; n],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cache(&self) -> &[f64] {
        &self.cache
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn set_cache(&mut self, cache: Vec<f64>) {
        assert_eq!(cache.len(), self.cache.len());
        self.cache = cache;
        self.refresh_bits();
    }

    fn refresh_bits(&mut self) {
        for (b, &c) in self.bits.iter_mut().zip(&self.cache) {
            *b = c > self.threshold;
        }
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn cell_of(&self, x: [f64; 3]) -> Option<usize> {
        if !self.aabb.contains(x) {
            return None;
        }
        let r = self.resolution;
        let n = self.aabb.normalize(x);
        let idx = n.map(|v| ((v * r as f64) as usize).min(r - 1));
        Some((idx[2] * r + idx[1]) * r + idx[0])
    }

    pub fn occupied(&self, x: [f64; 3]) -> bool {
        self.cell_of(x).is_some_and(|c| self.bits[c])
    }

    /// One jittered point per cell and a uniform random time per cell.
    pub fn update_queries(&self, rng: &mut impl Rng) -> (Vec<[f64; 3]>, Vec<f64>) {
        let r = self.resolution;
        let n = r.pow(3);
        let mut points = Vec::with_capacity(n);
        let mut times = Vec::with_capacity(n);
        let size: [f64; 3] = std::array::from_fn(|a| (self.aabb.max[a] - self.aabb.min[a]) / r as f64);
        for c in 0..n {
            let idx = [c % r, (c / r) % r, c / (r * r)];
            points.push(std::array::from_fn(|a| {
                self.aabb.min[a] + (idx[a] as f64 + rng.random::<f64>()) * size[a]
            }));
            times.push(rng.random::<f64>());
        }
        (points, times)
    }

    /// `cache = max(cache * decay, sigma)` per cell, then bits refreshed.
    pub fn apply_update(&mut self, sigma: &[f64]) {
        assert_eq!(sigma.len(), self.cache.len());
        for (c, &s) in self.cache.iter_mut().zip(sigma) {
            *c = (*c * self.decay).max(s);
        }
        self.refresh_bits();
    }

    /// Full update against a density oracle `f(points, times) -> sigma`.
    pub fn update(&mut self, rng: &mut impl Rng, f: impl FnOnce(&[[f64; 3]], &[f64]) -> Vec<f64>) {
        let (p, t) = self.update_queries(rng);
        let sigma = f(&p, &t);
        self.apply_update(&sigma);
    }

    /// Indices of the samples of `ray` that lie in occupied cells.
    pub fn skip(&self, ray: &Ray, samples: &[SamplePoint]) -> Vec<usize> {
        (0..samples.len()).filter(|&k| self.occupied(ray.at(samples[k].u))).collect()
    }
}

/// Fixed-step marching: candidates at `near + (k + xi) * step` with
/// `step = (far - near) / steps`, kept when inside `aabb` and (if a grid is
/// given) in an occupied cell. `xi` in `[0, 1)` is the per-ray offset.
pub fn march(ray: &Ray, aabb: &Aabb, steps: usize, grid: Option<&OccupancyGrid>, xi: f64) -> Vec<SamplePoint> {
    let step = (ray.far - ray.near) / steps as f64;
    let Some((lo, hi)) = aabb.clip(ray.origin, ray.dir, ray.near, ray.far) else {
        return Vec::new();
    };
    let first = (((lo - ray.near) / step - xi).ceil().max(0.0)) as usize;
    let mut out = Vec::new();
    for k in first..steps {
        let u = ray.near + (k as f64 + xi) * step;
        if u > hi {
            break;
        }
        if u < lo {
            continue;
        }
        let x = ray.at(u);
        if grid.is_none_or(|g| g.occupied(x)) {
            out.push(SamplePoint { u, delta: step });
        }
    }
    out
}
