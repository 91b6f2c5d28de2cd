use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tinerf_core::dataset::{load_dataset, Split};
use tinerf_core::imageio::read_png;
use tinerf_core::model::Model;
use tinerf_core::train::evaluate;

const SMALL: &str = r#"
[model.hash]
levels = 3
table_size = 1024

[model.grid_field]
layers = 2
hidden = 8
color_hidden = 8

[model]
march_steps = 24

[model.occupancy]
resolution = 4
interval = 1
warmup = 1

[train]
batch_rays = 16
chunk_rays = 8
log_every = 1
eval_every = 1
eval_views = 2
"#;

fn tinerf(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tinerf"));
    cmd.args(args).env("TINERF_THREADS", "1");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny synthetic dataset plus a small config in a temp directory.
fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = tinerf(
        &[
            "synth", "--out", s(&data), "--scene", "blob-bounce", "--frames", "2", "--size", "12", "--train-views", "2",
            "--test-views", "1",
        ],
        &[],
    );
    ok(&out);
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    (dir, data, config)
}

#[test]
fn synth_writes_loadable_splits() {
    let (_dir, data, _) = setup();
    let train = load_dataset(&data, Split::Train).unwrap();
    let test = load_dataset(&data, Split::Test).unwrap();
    assert_eq!((train.frames.len(), test.frames.len()), (4, 2));
    assert_eq!((train.width, train.height), (12, 12));
    assert_eq!(train.frame_times(), vec![0.0, 1.0]);
}

#[test]
fn zero_iterations_saves_initialization() {
    let (dir, data, config) = setup();
    let run = dir.path().join("run");
    let out = tinerf(
        &["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--iters", "0", "--seed", "5"],
        &[],
    );
    ok(&out);
    let model = Model::load(&run.join("model.ckpt")).unwrap();
    let train = load_dataset(&data, Split::Train).unwrap();
    let mut cfg = tinerf_core::config::RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.train.iterations, 0);
    cfg = cfg.resolve().unwrap();
    let fresh = Model::new(cfg.model, train.aabb, train.frame_times(), 5).unwrap();
    assert_eq!(model.tape().values(), fresh.tape().values());
    assert!(fs::read_to_string(run.join("VERSION")).unwrap().starts_with("tinerf "));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn missing_dataset_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_data");
    let out = tinerf(&["train", "--dataset", s(&missing), "--out", s(&dir.path().join("r")), "--iters", "0"], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_data"));
}

#[test]
fn unknown_config_key_is_named() {
    let (dir, data, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch_rayz = 3\n").unwrap();
    let out = tinerf(&["train", "--config", s(&bad), "--dataset", s(&data), "--out", s(&dir.path().join("r"))], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_rayz"));
}

#[test]
fn environment_overrides_config() {
    let (dir, data, config) = setup();
    let run = dir.path().join("run");
    let out = tinerf(
        &["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run)],
        &[("TINERF_ITERS", "1"), ("TINERF_LAMBDA", "0.25"), ("TINERF_SEED", "9")],
    );
    ok(&out);
    let cfg = tinerf_core::config::RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!((cfg.train.iterations, cfg.train.lambda, cfg.seed), (1, Some(0.25), 9));
}

#[test]
fn render_matches_eval_snapshot_and_eval_is_deterministic() {
    let (dir, data, config) = setup();
    let run = dir.path().join("run");
    ok(&tinerf(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--iters", "3"], &[]));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("iteration,wall_clock,L_c,L_s,lr,eval_psnr\n"));
    assert_eq!(csv.lines().count(), 4);

    let renders = dir.path().join("renders");
    let ckpt = run.join("model.ckpt");
    ok(&tinerf(&["render", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&renders)], &[]));
    let test = load_dataset(&data, Split::Test).unwrap();
    for v in 0..2 {
        let snap = read_png(&run.join(format!("eval/iter000003_view{v:03}.png"))).unwrap();
        let t = test.frames[v].time;
        let ours = read_png(&renders.join(format!("view{v:03}_t{t:.4}.png"))).unwrap();
        assert_eq!(snap, ours);
    }

    // Intermediate times render to finite images.
    let mid = dir.path().join("mid");
    ok(&tinerf(
        &["render", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&mid), "--times", "0.37,0.5"],
        &[],
    ));
    assert_eq!(fs::read_dir(&mid).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count(), 4);

    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        ok(&tinerf(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(e)], &[]));
    }
    let r1 = fs::read_to_string(e1.join("eval.csv")).unwrap();
    assert_eq!(r1, fs::read_to_string(e2.join("eval.csv")).unwrap());
    assert_eq!(r1.lines().count(), 4);
    assert!(fs::read_to_string(e1.join("summary.txt")).unwrap().contains("mean PSNR"));
}

#[test]
fn empty_time_list_renders_nothing() {
    let (dir, data, config) = setup();
    let run = dir.path().join("run");
    ok(&tinerf(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--iters", "0"], &[]));
    let renders = dir.path().join("renders");
    let out = tinerf(
        &["render", "--checkpoint", s(&run.join("model.ckpt")), "--dataset", s(&data), "--out", s(&renders), "--times"],
        &[],
    );
    ok(&out);
    let pngs = fs::read_dir(&renders).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 0);
}

#[test]
fn representation_mismatch_rejected() {
    let (dir, data, config) = setup();
    let run = dir.path().join("run");
    ok(&tinerf(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--iters", "0"], &[]));
    let out = tinerf(
        &[
            "render", "--checkpoint", s(&run.join("model.ckpt")), "--dataset", s(&data), "--out", s(&dir.path().join("r")),
            "--representation", "neural",
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}

#[test]
fn camera_path_file_renders() {
    let (dir, _, config) = setup();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&tinerf(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--iters", "0"], &[]));
    let path = dir.path().join("path.json");
    fs::write(
        &path,
        r#"{"width": 8, "height": 6, "camera_angle_x": 0.8, "near": 1.0, "far": 5.0,
            "poses": [[[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]]]}"#,
    )
    .unwrap();
    let renders = dir.path().join("renders");
    ok(&tinerf(
        &["render", "--checkpoint", s(&run.join("model.ckpt")), "--path", s(&path), "--out", s(&renders), "--times", "0.25"],
        &[],
    ));
    let img = read_png(&renders.join("view000_t0.2500.png")).unwrap();
    assert_eq!((img.width, img.height), (8, 6));
}

#[test]
fn eval_against_own_render_is_perfect() {
    let (dir, data, config) = setup();
    let run = dir.path().join("run");
    ok(&tinerf(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--iters", "1"], &[]));
    let model = Model::load(&run.join("model.ckpt")).unwrap();
    let mut test = load_dataset(&data, Split::Test).unwrap();
    for v in 0..test.frames.len() {
        let f = &test.frames[v];
        test.frames[v].image = model.render_image(&test.camera(v), f.time, test.near, test.far).unwrap();
    }
    let (m, _) = evaluate(&model, &test, 0).unwrap();
    for v in m {
        assert_eq!(v.psnr, f64::INFINITY);
        assert!((v.ssim - 1.0).abs() < 1e-12);
    }
}
