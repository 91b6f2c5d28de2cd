use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tinerf_core::config::{version_string, RunConfig};
use tinerf_core::dataset::{load_dataset, synthesize, write_dataset, CameraPath, SceneDataset, Split};
use tinerf_core::imageio::write_png;
use tinerf_core::model::{Model, Representation};
use tinerf_core::render::Camera;
use tinerf_core::scene::preset;
use tinerf_core::train::{evaluate, mean_psnr, mean_ssim, train, TrainOutput};
use tinerf_core::{Error, Result};

/// Dynamic radiance fields: training, rendering, evaluation and synthetic data.
///
/// Every flag can also be set through an environment variable with the
/// `TINERF_` prefix (for example `TINERF_SEED=3`). Flags win over the
/// environment, which wins over the config file.
#[derive(Parser)]
#[command(name = "tinerf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render images from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Write a synthetic dataset rendered from an analytic scene.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory; nothing is written outside it.
    #[arg(long, env = "TINERF_OUT")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "TINERF_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// TOML run configuration.
    #[arg(long, env = "TINERF_CONFIG")]
    config: Option<PathBuf>,
    /// Dataset directory with transforms_<split>.json files.
    #[arg(long, env = "TINERF_DATASET")]
    dataset: Option<PathBuf>,
    #[arg(long, env = "TINERF_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "TINERF_REPRESENTATION")]
    representation: Option<Representation>,
    /// Smoothness weight.
    #[arg(long, env = "TINERF_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long, env = "TINERF_ITERS")]
    iters: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take cameras (and default times) from this dataset split.
    #[arg(long, conflicts_with = "path")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Camera path JSON file.
    #[arg(long)]
    path: Option<PathBuf>,
    /// Comma-separated times; every camera is rendered at each. An empty
    /// value renders nothing. Defaults to each dataset frame's own time.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    times: Option<Vec<f64>>,
    /// Expected representation; a mismatching checkpoint is rejected.
    #[arg(long, env = "TINERF_REPRESENTATION")]
    representation: Option<Representation>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "TINERF_DATASET")]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluate only the first N views (0 = all).
    #[arg(long, default_value_t = 0)]
    views: usize,
    #[arg(long, env = "TINERF_REPRESENTATION")]
    representation: Option<Representation>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// TOML run configuration; only its [synth] table is used.
    #[arg(long, env = "TINERF_CONFIG")]
    config: Option<PathBuf>,
    /// blob-bounce, split-merge or reveal.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    /// Image width and height.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    train_views: Option<usize>,
    #[arg(long)]
    test_views: Option<usize>,
    #[arg(long)]
    views_per_frame: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn prepare_out(common: &Common) -> Result<()> {
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("VERSION"), version_string() + "\n")?;
    Ok(())
}

/// Held-out split for periodic evaluation: test, else val, else none.
fn eval_split(dir: &Path) -> Result<Option<SceneDataset>> {
    for split in [Split::Test, Split::Val] {
        if dir.join(format!("transforms_{}.json", split.name())).exists() {
            return load_dataset(dir, split).map(Some);
        }
    }
    Ok(None)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.out = Some(a.common.out.clone());
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.common.threads {
        cfg.threads = t;
    }
    if let Some(r) = a.representation {
        cfg.model.representation = r;
    }
    if let Some(l) = a.lambda {
        cfg.train.lambda = Some(l);
    }
    if let Some(i) = a.iters {
        cfg.train.iterations = i;
    }
    let cfg = cfg.resolve()?;
    set_threads(cfg.threads)?;
    let dir = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (use --dataset or `dataset` in the config)".into()))?;
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir));
    }
    let train_set = load_dataset(&dir, Split::Train)?;
    let held_out = eval_split(&dir)?;

    prepare_out(&a.common)?;
    fs::write(a.common.out.join("config.toml"), cfg.to_toml()?)?;
    let mut model = Model::new(cfg.model.clone(), train_set.aabb, train_set.frame_times(), cfg.seed)?;
    let output = TrainOutput {
        dir: a.common.out.clone(),
        write_snapshots: true,
    };
    let report = train(&mut model, &train_set, held_out.as_ref(), &cfg.train, Some(&output))?;
    println!(
        "trained {} iterations in {:.1}s: L_c {:.6}, L_s {:.6}{}",
        report.iterations,
        report.seconds,
        report.final_color_loss,
        report.final_smooth_loss,
        report
            .last_eval_psnr
            .map(|p| format!(", held-out PSNR {p:.2} dB"))
            .unwrap_or_default()
    );
    if report.rejected_steps > 0 {
        println!("{} steps rejected for non-finite gradients", report.rejected_steps);
    }
    Ok(())
}

fn load_checked(path: &Path, expected: Option<Representation>) -> Result<Model> {
    let model = Model::load(path)?;
    if let Some(r) = expected {
        if r != model.representation() {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model, expected {r}",
                path.display(),
                model.representation()
            )));
        }
    }
    Ok(model)
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    set_threads(a.common.threads.unwrap_or(0))?;
    let model = load_checked(&a.checkpoint, a.representation)?;
    // (camera, default time, near, far)
    let jobs: Vec<(Camera, f64, f64, f64)> = match (&a.dataset, &a.path) {
        (Some(dir), _) => {
            let d = load_dataset(dir, Split::parse(&a.split)?)?;
            (0..d.frames.len()).map(|i| (d.camera(i), d.frames[i].time, d.near, d.far)).collect()
        }
        (None, Some(p)) => {
            let path = CameraPath::load(p)?;
            path.cameras().into_iter().map(|c| (c, 0.0, path.near, path.far)).collect()
        }
        (None, None) => return Err(Error::Config("render needs --dataset or --path".into())),
    };
    prepare_out(&a.common)?;
    let mut written = 0;
    for (v, (camera, own_time, near, far)) in jobs.iter().enumerate() {
        let times = a.times.clone().unwrap_or_else(|| vec![*own_time]);
        for t in times {
            let img = model.render_image(camera, t, *near, *far)?;
            write_png(&img, &a.common.out.join(format!("view{v:03}_t{t:.4}.png")))?;
            written += 1;
        }
    }
    println!("wrote {written} images to {}", a.common.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    set_threads(a.common.threads.unwrap_or(0))?;
    let model = load_checked(&a.checkpoint, a.representation)?;
    let data = load_dataset(&a.dataset, Split::parse(&a.split)?)?;
    let (metrics, _) = evaluate(&model, &data, a.views)?;
    prepare_out(&a.common)?;
    let mut csv = String::from("view,time,psnr,ssim\n");
    for m in &metrics {
        csv += &format!("{},{},{},{}\n", m.view, m.time, m.psnr, m.ssim);
    }
    let (p, s) = (mean_psnr(&metrics), mean_ssim(&metrics));
    csv += &format!("mean,,{p},{s}\n");
    fs::write(a.common.out.join("eval.csv"), csv)?;
    let summary = format!(
        "{} views of {} ({} split): mean PSNR {p:.4} dB, mean SSIM {s:.6}\n",
        metrics.len(),
        a.dataset.display(),
        a.split
    );
    fs::write(a.common.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    set_threads(a.common.threads.unwrap_or(0))?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.synth,
        None => Default::default(),
    };
    if let Some(s) = a.scene {
        cfg.scene = s;
    }
    if let Some(f) = a.frames {
        cfg.frames = f;
    }
    if let Some(s) = a.size {
        cfg.width = s;
        cfg.height = s;
    }
    if let Some(v) = a.train_views {
        cfg.train_views = v;
    }
    if let Some(v) = a.test_views {
        cfg.test_views = v;
    }
    if let Some(v) = a.views_per_frame {
        cfg.train_views_per_frame = v;
    }
    let scene = preset(&cfg.scene).ok_or_else(|| Error::Config(format!("unknown scene `{}`", cfg.scene)))?;
    let (train_set, test_set) = synthesize(&scene, &cfg)?;
    prepare_out(&a.common)?;
    write_dataset(&a.common.out, &train_set)?;
    if !test_set.frames.is_empty() {
        write_dataset(&a.common.out, &test_set)?;
    }
    println!(
        "wrote {} train and {} test frames of `{}` to {}",
        train_set.frames.len(),
        test_set.frames.len(),
        cfg.scene,
        a.common.out.display()
    );
    Ok(())
}
