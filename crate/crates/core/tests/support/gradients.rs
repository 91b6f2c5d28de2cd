//! Central finite-difference checks of every differentiable operation.
//!
//! Each instance draws fresh inputs and parameters, records a scalar loss,
//! and compares the reverse-mode directional derivative along a random
//! direction `v` with `(f(theta + h v) - f(theta - h v)) / 2h`. An instance
//! whose step straddles a ReLU kink is detected by comparing the `h` and
//! `2h` difference quotients (they agree to O(h^2) for smooth functions) and
//! is redrawn, as is an instance with no signal at all.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinerf_core::autodiff::{Graph, Matrix, NodeId, ParameterTape, RaySpan, SegmentId};
use tinerf_core::field::FieldConfig;
use tinerf_core::hashgrid::{HashGridConfig, HashGridSet};
use tinerf_core::model::{Model, ModelConfig, Representation};
use tinerf_core::render::{generate_rays, Aabb, Camera, OccupancyConfig, Ray};
use tinerf_core::temporal::{KeyframeBank, KeyframeConfig, TimeCode};
use tinerf_core::train::{color_loss, total_loss};
use tinerf_core::Result;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    /// Instances redrawn because the step crossed a kink.
    pub kinks: usize,
    /// Instances redrawn because the loss did not depend on the parameters.
    pub no_signal: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE && self.kinks * 10 <= self.instances
    }
}

type Build = Box<dyn Fn(&mut Graph) -> Result<NodeId>>;

/// A randomly drawn problem: parameters on a tape plus a loss recorder.
pub struct Instance {
    pub tape: ParameterTape,
    pub build: Build,
}

fn value(tape: &ParameterTape, build: &Build) -> Result<f64> {
    let mut g = Graph::new(tape);
    let loss = build(&mut g)?;
    Ok(g.value(loss).data[0])
}

fn shifted(tape: &mut ParameterTape, base: &[f64], v: &[f64], s: f64, build: &Build) -> Result<f64> {
    for ((p, b), d) in tape.values_mut().iter_mut().zip(base).zip(v) {
        *p = b + s * d;
    }
    value(tape, build)
}

/// Result of one directional check.
pub enum Verdict {
    Checked(f64),
    /// The step straddles a point where the loss is not differentiable.
    Kink,
    /// Both derivatives vanish; nothing to compare.
    NoSignal,
}

pub fn directional(inst: &mut Instance, rng: &mut impl Rng) -> Result<Verdict> {
    let mut grads = vec![0.0; inst.tape.len()];
    let f0 = {
        let mut g = Graph::new(&inst.tape);
        let loss = (inst.build)(&mut g)?;
        g.backward(loss, &mut grads)?;
        g.value(loss).data[0]
    };
    let v: Vec<f64> = (0..inst.tape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic: f64 = grads.iter().zip(&v).map(|(g, d)| g * d).sum();
    let base = inst.tape.values().to_vec();
    let h = STEP;
    let f1 = shifted(&mut inst.tape, &base, &v, h, &inst.build)?;
    let f_1 = shifted(&mut inst.tape, &base, &v, -h, &inst.build)?;
    let f2 = shifted(&mut inst.tape, &base, &v, 2.0 * h, &inst.build)?;
    let f_2 = shifted(&mut inst.tape, &base, &v, -2.0 * h, &inst.build)?;
    inst.tape.load_values(&base)?;
    let d1 = (f1 - f_1) / (2.0 * h);
    let scale = analytic.abs().max(d1.abs());
    if scale < 1e-12 {
        return Ok(Verdict::NoSignal);
    }
    // Second differences at h and 2h agree to O(h^2) on smooth functions; a
    // kink at distance s < h from theta separates them by about c / 2h.
    let s1 = (f1 - 2.0 * f0 + f_1) / (h * h);
    let s2 = (f2 - 2.0 * f0 + f_2) / (4.0 * h * h);
    let roundoff = 16.0 * f64::EPSILON * f0.abs().max(f1.abs()).max(f_1.abs()) / h;
    if (s1 - s2).abs() * h > 1e-6 * scale + roundoff {
        return Ok(Verdict::Kink);
    }
    Ok(Verdict::Checked((analytic - d1).abs() / scale))
}

fn check(name: &'static str, instances: usize, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> Result<Instance>) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport {
        name,
        instances: 0,
        worst: 0.0,
        kinks: 0,
        no_signal: 0,
    };
    while report.instances < instances && report.kinks + report.no_signal <= 4 * instances {
        let mut inst = draw(&mut rng)?;
        match directional(&mut inst, &mut rng)? {
            Verdict::Checked(e) => {
                report.worst = report.worst.max(e);
                report.instances += 1;
            }
            Verdict::Kink => report.kinks += 1,
            Verdict::NoSignal => report.no_signal += 1,
        }
    }
    Ok(report)
}

/// Parameter block of `rows x cols` values gathered into a graph node.
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn new(tape: &mut ParameterTape, name: &str, rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> Self {
        let id = tape.add_segment(name, rows * cols, &mut init);
        Self {
            offset: tape.segment(id).offset,
            rows,
            cols,
        }
    }

    fn node(&self, g: &mut Graph) -> Result<NodeId> {
        g.gather(self.cols, 1, (0..self.rows).map(|r| (self.offset + r * self.cols, 1.0)).collect())
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Loss `0.5 |x - c|^2` against a fixed random target.
fn against_target(g: &mut Graph, x: NodeId, target: &Matrix) -> Result<NodeId> {
    let c = g.input(target.clone());
    g.squared_error(x, c, 0.5)
}

fn away_from_zero(rng: &mut impl Rng) -> f64 {
    let m = rng.random_range(0.05..1.0);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn affine(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (rows, i, o) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7));
    let mut tape = ParameterTape::new();
    let x = Block::new(&mut tape, "x", rows, i, || rng.random_range(-1.0..1.0));
    let w = tape.add_segment("w", i * o, || rng.random_range(-1.0..1.0));
    let b = tape.add_segment("b", o, || rng.random_range(-1.0..1.0));
    let target = random_matrix(rng, rows, o);
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let xn = x.node(g)?;
            let y = g.affine(xn, w, b)?;
            against_target(g, y, &target)
        }),
    })
}

fn unary(rng: &mut ChaCha8Rng, which: u8) -> Result<Instance> {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(1..6));
    let mut tape = ParameterTape::new();
    let x = Block::new(&mut tape, "x", rows, cols, || away_from_zero(rng));
    let target = random_matrix(rng, rows, cols);
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let xn = x.node(g)?;
            let y = match which {
                0 => g.relu(xn),
                1 => g.sigmoid(xn),
                2 => g.softplus(xn),
                _ => g.exp_neg(xn),
            };
            against_target(g, y, &target)
        }),
    })
}

fn posenc(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (rows, cols, bands) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let identity = rng.random::<bool>();
    let window: Vec<f64> = (0..bands).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut tape = ParameterTape::new();
    let x = Block::new(&mut tape, "x", rows, cols, || rng.random_range(-1.0..1.0));
    let out = tinerf_core::autodiff::posenc_dim(cols, bands, identity);
    let target = random_matrix(rng, rows, out);
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let xn = x.node(g)?;
            let y = g.posenc(xn, &window, identity);
            against_target(g, y, &target)
        }),
    })
}

/// concat, slice, lin_comb, row_gather and scatter_blend in one chain.
fn structural(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rows = rng.random_range(2..5);
    let (ca, cb) = (rng.random_range(1..4), rng.random_range(1..4));
    let mut tape = ParameterTape::new();
    let a = Block::new(&mut tape, "a", rows, ca, || rng.random_range(-1.0..1.0));
    let b = Block::new(&mut tape, "b", rows, cb, || rng.random_range(-1.0..1.0));
    let c = Block::new(&mut tape, "c", rows, ca + cb, || rng.random_range(-1.0..1.0));
    let coeffs = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let start = rng.random_range(0..ca + cb);
    let len = rng.random_range(1..=ca + cb - start);
    let picks: Vec<usize> = (0..rows + 1).map(|_| rng.random_range(0..rows)).collect();
    let out_rows = rng.random_range(1..4);
    let routes_a: Vec<(usize, f64)> = (0..picks.len()).map(|_| (rng.random_range(0..out_rows), rng.random_range(-1.0..1.0))).collect();
    let routes_b: Vec<(usize, f64)> = (0..rows).map(|_| (rng.random_range(0..out_rows), rng.random_range(-1.0..1.0))).collect();
    let target = random_matrix(rng, out_rows, len);
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let (an, bn, cn) = (a.node(g)?, b.node(g)?, c.node(g)?);
            let cat = g.concat(&[an, bn])?;
            let mixed = g.lin_comb(&[cat, cn], &coeffs)?;
            let sl = g.slice(mixed, start, len)?;
            let sq = g.sigmoid(sl);
            let picked = g.row_gather(sq, picks.clone())?;
            let tail = g.slice(cn, start, len)?;
            let blended = g.scatter_blend(out_rows, len, vec![(picked, routes_a.clone()), (tail, routes_b.clone())])?;
            against_target(g, blended, &target)
        }),
    })
}

fn hash_encode(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let config = HashGridConfig {
        levels: rng.random_range(1..4),
        table_size: [32, 64, 128][rng.random_range(0..3)],
        static_dim: rng.random_range(0..3),
        dynamic_dim: rng.random_range(1..4),
        spatial_base: 3.0,
        ..Default::default()
    };
    let mut tape = ParameterTape::new();
    let grid = HashGridSet::new(config, &mut tape, rng)?;
    for p in tape.values_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    let n = rng.random_range(1..6);
    let points: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let times: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let target = random_matrix(rng, n, grid.feature_dim());
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let (f, _) = grid.encode_graph(g, &points, &times)?;
            against_target(g, f, &target)
        }),
    })
}

fn frame_times(n: usize) -> Vec<f64> {
    (0..n).map(|f| f as f64 / (n - 1) as f64).collect()
}

fn temporal_blend(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let config = KeyframeConfig {
        slots: vec![rng.random_range(1..3), rng.random_range(2..5)],
        level_dim: rng.random_range(1..4),
        static_dim: rng.random_range(0..3),
        embed_dim: 2,
        x_bands: 2,
        z_bands: 1,
        blend_embeddings: rng.random::<bool>(),
    };
    let times = frame_times(rng.random_range(2..6));
    let mut tape = ParameterTape::new();
    let bank = KeyframeBank::new(config, times.clone(), &mut tape, rng)?;
    let n = rng.random_range(1..5);
    let points: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let codes: Vec<TimeCode> = (0..n).map(|_| TimeCode::at(rng.random(), &times)).collect();
    let alpha = rng.random_range(0.0..2.0);
    let target = random_matrix(rng, n, bank.feature_dim());
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let f = bank.features(g, &points, &codes, alpha)?;
            against_target(g, f.full, &target)
        }),
    })
}

fn composite(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rays = rng.random_range(1..4);
    let lens: Vec<usize> = (0..rays).map(|_| rng.random_range(0..6)).collect();
    let n: usize = lens.iter().sum::<usize>().max(1);
    let mut spans = Vec::new();
    let mut start = 0;
    for &len in &lens {
        spans.push(RaySpan { start, len });
        start += len;
    }
    let mut tape = ParameterTape::new();
    let rgb = Block::new(&mut tape, "rgb", n, 3, || rng.random_range(0.0..1.0));
    let sigma = Block::new(&mut tape, "sigma", n, 1, || rng.random_range(0.05..4.0));
    let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.5)).collect();
    let background = [rng.random(), rng.random(), rng.random()];
    let target = random_matrix(rng, rays, 3);
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let (c, s) = (rgb.node(g)?, sigma.node(g)?);
            let out = g.composite(c, s, spans.clone(), deltas.clone(), background)?;
            against_target(g, out, &target)
        }),
    })
}

fn color(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rays = rng.random_range(1..6);
    let total = rays + rng.random_range(0..4);
    let mut tape = ParameterTape::new();
    let pred = Block::new(&mut tape, "pred", rays, 3, || rng.random_range(0.0..1.0));
    let target: Vec<[f64; 3]> = (0..rays).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    Ok(Instance {
        tape,
        build: Box::new(move |g| {
            let p = pred.node(g)?;
            color_loss(g, p, &target, total)
        }),
    })
}

fn tiny_model(rng: &mut ChaCha8Rng, rep: Representation, frames: usize) -> Result<Model> {
    let config = ModelConfig {
        representation: rep,
        hash: HashGridConfig {
            levels: 3,
            table_size: 256,
            spatial_base: 3.0,
            ..Default::default()
        },
        grid_field: FieldConfig {
            layers: 2,
            hidden: 8,
            color_hidden: 8,
            skip: None,
        },
        keyframes: KeyframeConfig {
            slots: vec![1, 2],
            level_dim: 3,
            static_dim: 3,
            embed_dim: 2,
            x_bands: 2,
            z_bands: 1,
            blend_embeddings: false,
        },
        neural_field: FieldConfig {
            layers: 3,
            hidden: 8,
            color_hidden: 8,
            skip: Some(1),
        },
        coarse_samples: 6,
        fine_samples: 0,
        march_steps: 12,
        occupancy: OccupancyConfig {
            enabled: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let aabb = Aabb {
        min: [-1.0; 3],
        max: [1.0; 3],
    };
    let mut model = Model::new(config, aabb, frame_times(frames), rng.random())?;
    if rep == Representation::Grid {
        let ids: Vec<SegmentId> = model.hash_grid().expect("grid").segments().to_vec();
        let tape = model.tape_mut();
        for id in ids {
            for p in tape.segment_values_mut(id) {
                *p = rng.random_range(-0.5..0.5);
            }
        }
    }
    model.alpha = rng.random_range(0.0..2.0);
    Ok(model)
}

/// Rays from a random orbit camera at a random frame time, or a random
/// continuous time when `on_frame` is false.
fn tiny_rays(rng: &mut ChaCha8Rng, model: &Model, on_frame: bool) -> Result<Vec<Ray>> {
    tiny_rays_within(rng, model, on_frame, model.frame_times().len())
}

/// As [`tiny_rays`], drawing frames only from the first `frames`.
fn tiny_rays_within(rng: &mut ChaCha8Rng, model: &Model, on_frame: bool, frames: usize) -> Result<Vec<Ray>> {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let eye = [3.0 * az.cos(), 3.0 * az.sin(), rng.random_range(-1.0..1.5)];
    let cam = Camera::look_at(5, 5, 7.0, eye, [0.0; 3], [0.0, 0.0, 1.0]);
    let times = model.frame_times();
    let t = if on_frame { times[rng.random_range(0..frames)] } else { rng.random() };
    let pixels: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..25)).collect();
    generate_rays(&cam, &pixels, t, model.time_code(t), 1.0, 5.0)
}

fn into_instance(model: Model, build: impl Fn(&Model, &mut Graph) -> Result<NodeId> + 'static) -> Instance {
    let tape = model.tape().clone();
    Instance {
        tape,
        build: Box::new(move |g| build(&model, g)),
    }
}

fn neural_smooth(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let frames = rng.random_range(2..5);
    let model = tiny_model(rng, Representation::Neural, frames)?;
    let rays = tiny_rays_within(rng, &model, true, frames - 1)?;
    Ok(into_instance(model, move |m, g| {
        let out = m.render_rays(g, &rays, None, true)?;
        match out.smooth {
            Some(s) => Ok(s),
            None => g.squared_error(out.rgb, out.rgb, 1.0),
        }
    }))
}

fn grid_smooth(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let frames = rng.random_range(2..6);
    let model = tiny_model(rng, Representation::Grid, frames)?;
    let rays = tiny_rays(rng, &model, false)?;
    Ok(into_instance(model, move |m, g| {
        let out = m.render_rays(g, &rays, None, true)?;
        match out.smooth {
            Some(s) => Ok(s),
            None => g.squared_error(out.rgb, out.rgb, 1.0),
        }
    }))
}

fn total(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rep = if rng.random::<bool>() { Representation::Grid } else { Representation::Neural };
    total_with(rng, rep)
}

fn total_with(rng: &mut ChaCha8Rng, rep: Representation) -> Result<Instance> {
    let frames = rng.random_range(2..5);
    let model = tiny_model(rng, rep, frames)?;
    let rays = tiny_rays(rng, &model, true)?;
    let target: Vec<[f64; 3]> = rays.iter().map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let lambda = rng.random_range(0.0..1.0);
    Ok(into_instance(model, move |m, g| {
        let out = m.render_rays(g, &rays, None, true)?;
        let mut lc = color_loss(g, out.rgb, &target, rays.len())?;
        if let Some(c) = out.coarse_rgb {
            let lcc = color_loss(g, c, &target, rays.len())?;
            lc = g.lin_comb(&[lc, lcc], &[1.0, 1.0])?;
        }
        total_loss(g, lc, out.smooth, lambda)
    }))
}

/// Runs every check with `instances` accepted instances each.
pub fn run_all(instances: usize) -> Result<Vec<OpReport>> {
    Ok(vec![
        check("affine", instances, 1, affine)?,
        check("relu", instances, 2, |r| unary(r, 0))?,
        check("sigmoid", instances, 3, |r| unary(r, 1))?,
        check("softplus", instances, 4, |r| unary(r, 2))?,
        check("exp_neg", instances, 5, |r| unary(r, 3))?,
        check("posenc", instances, 6, posenc)?,
        check("concat/slice/lin_comb/row_gather/scatter_blend", instances, 7, structural)?,
        check("hash encode + scatter", instances, 8, hash_encode)?,
        check("keyframe blend", instances, 9, temporal_blend)?,
        check("composite", instances, 10, composite)?,
        check("color loss", instances, 11, color)?,
        check("neural smoothness loss", instances, 12, neural_smooth)?,
        check("grid smoothness loss", instances, 13, grid_smooth)?,
        check("total loss", instances, 14, total)?,
    ])
}
