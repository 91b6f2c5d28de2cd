//! Losses, optimizer, schedules and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParameterTape};
use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::imageio::{write_png, Image};
use crate::metrics::{psnr, ssim};
use crate::model::{target_matrix, Model, Representation};
use crate::render::Ray;
use crate::temporal::TimeCode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub grid_initial: f64,
    pub grid_decay_start: usize,
    pub grid_decay_every: usize,
    pub grid_decay_factor: f64,
    pub neural_initial: f64,
    pub neural_final: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            grid_initial: 0.01,
            grid_decay_start: 20_000,
            grid_decay_every: 10_000,
            grid_decay_factor: 0.33,
            neural_initial: 2e-3,
            neural_final: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    /// Rays per worker chunk. The partition (and hence every result) does
    /// not depend on the thread count.
    pub chunk_rays: usize,
    /// Smoothness weight; `None` picks the representation default.
    pub lambda: Option<f64>,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
    pub lr: LrConfig,
    /// Fraction of training over which the encoding window opens.
    pub window_ramp: f64,
    pub log_every: usize,
    /// Evaluation cadence; 0 evaluates only after the last iteration.
    pub eval_every: usize,
    /// Held-out views used per evaluation (0 = all).
    pub eval_views: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_rays: 1024,
            chunk_rays: 256,
            lambda: None,
            seed: 0,
            lr: LrConfig::default(),
            window_ramp: 0.2,
            log_every: 100,
            eval_every: 1000,
            eval_views: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 || self.chunk_rays == 0 {
            return Err(Error::Config("batch_rays and chunk_rays must be at least 1".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("lambda must be >= 0, got {l}")));
            }
        }
        if !(0.0..=1.0).contains(&self.window_ramp) {
            return Err(Error::Config("window_ramp must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lambda_for(&self, rep: Representation) -> f64 {
        self.lambda.unwrap_or(match rep {
            Representation::Neural => 0.01,
            Representation::Grid => 1e-4,
        })
    }
}

/// Mean over rays of the per-ray squared RGB error, recorded on `g`.
/// `total_rays` is the size of the whole batch when `pred` is one chunk.
pub fn color_loss(g: &mut Graph, pred: NodeId, target: &[[f64; 3]], total_rays: usize) -> Result<NodeId> {
    if target.is_empty() || total_rays == 0 {
        return Err(Error::InvalidArgument("color loss of an empty batch".into()));
    }
    let t = g.input(target_matrix(target));
    g.squared_error(pred, t, 1.0 / total_rays as f64)
}

/// Value-level color loss.
pub fn color_loss_value(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("color loss of an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::shape("color_loss", pred.len(), target.len()));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}

/// `L_c + lambda * L_s` on the graph.
pub fn total_loss(g: &mut Graph, color: NodeId, smooth: Option<NodeId>, lambda: f64) -> Result<NodeId> {
    match smooth {
        Some(s) if lambda != 0.0 => g.lin_comb(&[color, s], &[1.0, lambda]),
        _ => Ok(color),
    }
}

pub fn total_loss_value(color: f64, smooth: f64, lambda: f64) -> f64 {
    color + lambda * smooth
}

/// Learning rate at `iteration` of a run with `total` iterations.
pub fn lr_schedule(iteration: usize, total: usize, rep: Representation, cfg: &LrConfig) -> f64 {
    match rep {
        Representation::Grid => {
            if iteration < cfg.grid_decay_start {
                cfg.grid_initial
            } else {
                let blocks = (iteration - cfg.grid_decay_start) / cfg.grid_decay_every.max(1) + 1;
                cfg.grid_initial * cfg.grid_decay_factor.powi(blocks as i32)
            }
        }
        Representation::Neural => {
            let f = if total == 0 { 1.0 } else { (iteration.min(total) as f64) / total as f64 };
            cfg.neural_initial * (cfg.neural_final / cfg.neural_initial).powf(f)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const ADAM_GRID: AdamParams = AdamParams {
    beta1: 0.9,
    beta2: 0.99,
    eps: 1e-15,
};

pub const ADAM_MLP: AdamParams = AdamParams {
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
};

/// Adam with bias correction. Hash tables (segments named `hash.*`) and
/// everything else use separate hyperparameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    groups: Vec<(std::ops::Range<usize>, AdamParams, String)>,
}

impl Adam {
    pub fn new(tape: &ParameterTape) -> Self {
        let groups = tape
            .segments()
            .iter()
            .map(|s| {
                let p = if s.name.starts_with("hash.") { ADAM_GRID } else { ADAM_MLP };
                (s.range(), p, s.name.clone())
            })
            .collect();
        Self {
            m: vec![0.0; tape.len()],
            v: vec![0.0; tape.len()],
            step: 0,
            groups,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the tape gradients, then zeroes them. A
    /// non-finite gradient rejects the whole step (gradients are still
    /// zeroed) and names the offending segment.
    pub fn step(&mut self, tape: &mut ParameterTape, lr: f64) -> Result<()> {
        if self.m.len() != tape.len() {
            return Err(Error::shape("adam", self.m.len(), tape.len()));
        }
        let bad = self
            .groups
            .iter()
            .find(|(r, _, _)| tape.grads()[r.clone()].iter().any(|g| !g.is_finite()))
            .map(|(_, _, name)| name.clone());
        if let Some(name) = bad {
            tape.zero_grads();
            return Err(Error::NonFiniteGradient(name));
        }
        self.step += 1;
        let (values, grads) = tape.values_and_grads_mut();
        for (range, p, _) in &self.groups {
            let c1 = 1.0 - p.beta1.powi(self.step as i32);
            let c2 = 1.0 - p.beta2.powi(self.step as i32);
            for i in range.clone() {
                let g = grads[i];
                let m = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
                let v = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
                self.m[i] = m;
                self.v[i] = v;
                values[i] -= lr * (m / c1) / ((v / c2).sqrt() + p.eps);
                grads[i] = 0.0;
            }
        }
        Ok(())
    }
}

/// Independent random stream for `(purpose, index)` under a run seed.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) ^ index);
    rng
}

const STREAM_BATCH: u64 = 1;
const STREAM_CHUNK: u64 = 2;
const STREAM_OCCUPANCY: u64 = 3;

/// Training rays with their target colors.
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
}

/// Training images composited over the model background, with the time
/// code of each frame.
pub struct TrainingSet<'a> {
    data: &'a SceneDataset,
    images: Vec<Image>,
    codes: Vec<TimeCode>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(data: &'a SceneDataset, model: &Model) -> Result<Self> {
        if data.frames.is_empty() {
            return Err(Error::InvalidArgument("training set has no frames".into()));
        }
        let bg = model.config().background;
        Ok(Self {
            data,
            images: data.frames.iter().map(|f| f.image.over(bg)).collect(),
            codes: data.frames.iter().map(|f| model.time_code(f.time)).collect(),
        })
    }

    /// Rays drawn uniformly over all frames and pixels.
    pub fn sample(&self, rng: &mut impl Rng, count: usize) -> RayBatch {
        let pixels = self.data.width * self.data.height;
        let mut rays = Vec::with_capacity(count);
        let mut targets = Vec::with_capacity(count);
        for _ in 0..count {
            let f = rng.random_range(0..self.data.frames.len());
            let p = rng.random_range(0..pixels);
            let (origin, dir) = self.data.camera(f).pixel_ray(p);
            rays.push(Ray {
                origin,
                dir,
                near: self.data.near,
                far: self.data.far,
                time: self.data.frames[f].time,
                code: self.codes[f],
                pixel: p,
            });
            targets.push(self.images[f].rgb(p));
        }
        RayBatch { rays, targets }
    }
}

struct ChunkResult {
    color: f64,
    smooth: f64,
    samples: usize,
    grads: Vec<f64>,
}

/// One optimization-free step: loss values, sample count and summed
/// gradients of the batch, with chunk results reduced in chunk order.
pub struct StepResult {
    pub color_loss: f64,
    pub smooth_loss: f64,
    pub samples: usize,
    pub grads: Vec<f64>,
}

/// Forward and backward over a batch. Chunks run in parallel; each draws
/// its jitter from its own stream so results are independent of threads.
pub fn batch_gradients(model: &Model, batch: &RayBatch, cfg: &TrainConfig, iteration: usize) -> Result<StepResult> {
    let lambda = cfg.lambda_for(model.representation());
    let total = batch.rays.len();
    let chunks: Vec<usize> = (0..total).step_by(cfg.chunk_rays).collect();
    let n_chunks = chunks.len();
    let results: Vec<Result<ChunkResult>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &start)| {
            let end = (start + cfg.chunk_rays).min(total);
            let mut rng = stream_rng(cfg.seed, STREAM_CHUNK, ((iteration as u64) << 20) | c as u64);
            let tape = model.tape();
            let mut g = Graph::new(tape);
            let out = model.render_rays(&mut g, &batch.rays[start..end], Some(&mut rng), lambda > 0.0)?;
            let targets = &batch.targets[start..end];
            let mut lc = color_loss(&mut g, out.rgb, targets, total)?;
            if let Some(coarse) = out.coarse_rgb {
                let lcc = color_loss(&mut g, coarse, targets, total)?;
                lc = g.lin_comb(&[lc, lcc], &[1.0, 1.0])?;
            }
            // The neural term is a per-chunk mean; chunks are averaged.
            let smooth = match (out.smooth, model.representation()) {
                (Some(s), Representation::Neural) => Some(g.lin_comb(&[s], &[1.0 / n_chunks as f64])?),
                (s, _) => s,
            };
            let loss = total_loss(&mut g, lc, smooth, lambda)?;
            let mut grads = vec![0.0; tape.len()];
            g.backward(loss, &mut grads)?;
            Ok(ChunkResult {
                color: g.value(lc).data[0],
                smooth: smooth.map_or(0.0, |s| g.value(s).data[0]),
                samples: out.samples,
                grads,
            })
        })
        .collect();
    let mut step = StepResult {
        color_loss: 0.0,
        smooth_loss: 0.0,
        samples: 0,
        grads: vec![0.0; model.tape().len()],
    };
    for r in results {
        let r = r?;
        step.color_loss += r.color;
        step.smooth_loss += r.smooth;
        step.samples += r.samples;
        for (a, b) in step.grads.iter_mut().zip(&r.grads) {
            *a += b;
        }
    }
    Ok(step)
}

/// Per-view evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub time: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders the first `max_views` views of `data` (0 = all) and scores them
/// against the ground truth composited over the model background.
pub fn evaluate(model: &Model, data: &SceneDataset, max_views: usize) -> Result<(Vec<ViewMetrics>, Vec<Image>)> {
    let n = if max_views == 0 { data.frames.len() } else { max_views.min(data.frames.len()) };
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation split has no frames".into()));
    }
    let bg = model.config().background;
    let mut metrics = Vec::with_capacity(n);
    let mut renders = Vec::with_capacity(n);
    for v in 0..n {
        let frame = &data.frames[v];
        let img = model.render_image(&data.camera(v), frame.time, data.near, data.far)?;
        let gt = frame.image.over(bg);
        let s = if img.width >= 11 && img.height >= 11 { ssim(&img, &gt)? } else { f64::NAN };
        metrics.push(ViewMetrics {
            view: v,
            time: frame.time,
            psnr: psnr(&img, &gt)?,
            ssim: s,
        });
        renders.push(img);
    }
    Ok((metrics, renders))
}

pub fn mean_psnr(metrics: &[ViewMetrics]) -> f64 {
    metrics.iter().map(|m| m.psnr).sum::<f64>() / metrics.len() as f64
}

pub fn mean_ssim(metrics: &[ViewMetrics]) -> f64 {
    metrics.iter().map(|m| m.ssim).sum::<f64>() / metrics.len() as f64
}

/// Where training writes its artifacts. Everything goes under `dir`.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub write_snapshots: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub iterations: usize,
    pub final_color_loss: f64,
    pub final_smooth_loss: f64,
    pub last_eval_psnr: Option<f64>,
    pub last_eval_ssim: Option<f64>,
    /// Field evaluations per iteration.
    pub samples: Vec<usize>,
    /// Steps rejected for non-finite gradients.
    pub rejected_steps: usize,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "iteration,wall_clock,L_c,L_s,lr,eval_psnr";

/// Trains `model` in place on `train`. `eval` (if any) is scored every
/// `eval_every` iterations and after the last one.
pub fn train(
    model: &mut Model,
    train: &SceneDataset,
    eval: Option<&SceneDataset>,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let set = TrainingSet::new(train, model)?;
    let rep = model.representation();
    let lambda = cfg.lambda_for(rep);
    let mut adam = Adam::new(model.tape());
    let occ_cfg = model.config().occupancy.clone();
    let x_bands = model.config().keyframes.x_bands as f64;
    let ramp = cfg.window_ramp * cfg.iterations as f64;
    let window = |it: usize| {
        if ramp <= 0.0 {
            x_bands
        } else {
            x_bands * (it as f64 / ramp).min(1.0)
        }
    };

    let mut csv = match output {
        Some(o) => {
            fs::create_dir_all(&o.dir)?;
            let mut f = fs::File::create(o.dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut report = TrainReport::default();
    let first = model.iteration;
    let last = first + cfg.iterations;

    for it in first..last {
        model.alpha = window(it - first);
        if model.occupancy().is_some() && occ_cfg.interval > 0 && (it - first) % occ_cfg.interval == 0 {
            let mut rng = stream_rng(cfg.seed, STREAM_OCCUPANCY, it as u64);
            model.update_occupancy(&mut rng)?;
        }
        model.occupancy_live = model.occupancy().is_some() && it - first >= occ_cfg.warmup;

        let mut rng = stream_rng(cfg.seed, STREAM_BATCH, it as u64);
        let batch = set.sample(&mut rng, cfg.batch_rays);
        let step = batch_gradients(model, &batch, cfg, it)?;
        let loss = total_loss_value(step.color_loss, step.smooth_loss, lambda);
        if !loss.is_finite() {
            if let Some(o) = output {
                dump_diagnostics(&o.dir, it, &step, model)?;
            }
            return Err(Error::NonFiniteLoss {
                iteration: it,
                color_loss: step.color_loss,
                smooth_loss: step.smooth_loss,
            });
        }
        let lr = lr_schedule(it, last, rep, &cfg.lr);
        model.tape_mut().accumulate_grads(&step.grads)?;
        match adam.step(model.tape_mut(), lr) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(_)) => report.rejected_steps += 1,
            Err(e) => return Err(e),
        }
        model.iteration = it + 1;
        report.samples.push(step.samples);
        report.final_color_loss = step.color_loss;
        report.final_smooth_loss = step.smooth_loss;

        let done = it + 1 - first;
        let eval_now = eval.is_some() && (done == cfg.iterations || (cfg.eval_every > 0 && done % cfg.eval_every == 0));
        let mut eval_psnr = None;
        if eval_now {
            let data = eval.expect("checked above");
            let (m, renders) = evaluate(model, data, cfg.eval_views)?;
            let p = mean_psnr(&m);
            eval_psnr = Some(p);
            report.last_eval_psnr = Some(p);
            report.last_eval_ssim = Some(mean_ssim(&m));
            if let Some(o) = output.filter(|o| o.write_snapshots) {
                let dir = o.dir.join("eval");
                fs::create_dir_all(&dir)?;
                for (v, img) in renders.iter().enumerate() {
                    write_png(img, &dir.join(format!("iter{:06}_view{v:03}.png", it + 1)))?;
                }
            }
        }
        let log_now = eval_psnr.is_some() || done == cfg.iterations || (cfg.log_every > 0 && done % cfg.log_every == 0);
        if let (Some(f), true) = (csv.as_mut(), log_now) {
            let e = eval_psnr.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                f,
                "{},{:.3},{},{},{},{}",
                it + 1,
                start.elapsed().as_secs_f64(),
                step.color_loss,
                step.smooth_loss,
                lr,
                e
            )?;
        }
    }
    model.alpha = window(cfg.iterations);
    report.iterations = cfg.iterations;
    report.seconds = start.elapsed().as_secs_f64();
    if let Some(o) = output {
        model.save(&o.dir.join("model.ckpt"))?;
    }
    Ok(report)
}

fn dump_diagnostics(dir: &Path, iteration: usize, step: &StepResult, model: &Model) -> Result<()> {
    let bad: Vec<String> = model
        .tape()
        .segments()
        .iter()
        .filter(|s| step.grads[s.range()].iter().any(|g| !g.is_finite()) || model.tape().values()[s.range()].iter().any(|v| !v.is_finite()))
        .map(|s| s.name.clone())
        .collect();
    let report = serde_json::json!({
        "iteration": iteration,
        "color_loss": step.color_loss.to_string(),
        "smooth_loss": step.smooth_loss.to_string(),
        "samples": step.samples,
        "non_finite_segments": bad,
    });
    fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&report).unwrap_or_default())?;
    model.save(&dir.join("diagnostic.ckpt"))
}
