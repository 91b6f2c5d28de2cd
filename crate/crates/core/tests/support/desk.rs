//! Desk-scale configurations and datasets shared by the long-running checks.

#![allow(dead_code)]

use tinerf_core::dataset::{synthesize, SceneDataset, SynthConfig};
use tinerf_core::field::FieldConfig;
use tinerf_core::hashgrid::HashGridConfig;
use tinerf_core::model::{Model, ModelConfig, Representation};
use tinerf_core::render::OccupancyConfig;
use tinerf_core::scene::preset;
use tinerf_core::temporal::KeyframeConfig;
use tinerf_core::train::{train, TrainConfig, TrainOutput, TrainReport};
use tinerf_core::Result;

pub const FRAMES: usize = 20;
pub const TRAIN_VIEWS: usize = 16;
pub const TEST_VIEWS: usize = 4;

/// Grid path: 8 levels, 2^14 rows per level, 3-layer field of width 32,
/// occupancy grid of 16^3 cells refreshed every iteration.
pub fn grid_model() -> ModelConfig {
    ModelConfig {
        representation: Representation::Grid,
        hash: HashGridConfig {
            levels: 8,
            table_size: 1 << 14,
            ..Default::default()
        },
        grid_field: FieldConfig {
            layers: 3,
            hidden: 32,
            color_hidden: 32,
            skip: None,
        },
        occupancy: OccupancyConfig {
            resolution: 16,
            interval: 1,
            warmup: 256,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn grid_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_rays: 128,
        chunk_rays: 64,
        log_every: 100,
        eval_every: 0,
        ..Default::default()
    }
}

/// Neural path: two keyframe levels (2 and 5 slots), halved feature widths,
/// 4-layer field of width 64.
pub fn neural_model() -> ModelConfig {
    ModelConfig {
        representation: Representation::Neural,
        keyframes: KeyframeConfig {
            slots: vec![2, 5],
            level_dim: 32,
            static_dim: 64,
            embed_dim: 4,
            ..Default::default()
        },
        neural_field: FieldConfig {
            layers: 4,
            hidden: 64,
            color_hidden: 32,
            skip: None,
        },
        coarse_samples: 32,
        fine_samples: 32,
        ..Default::default()
    }
}

pub fn neural_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_rays: 32,
        chunk_rays: 32,
        log_every: 100,
        eval_every: 0,
        ..Default::default()
    }
}

pub fn synth(scene: &str, size: usize, per_frame: usize) -> SynthConfig {
    SynthConfig {
        scene: scene.into(),
        frames: FRAMES,
        train_views: TRAIN_VIEWS,
        test_views: TEST_VIEWS,
        train_views_per_frame: per_frame,
        width: size,
        height: size,
        ..Default::default()
    }
}

/// One held-out camera per frame, cycling through the held-out ring
/// (frame `f` uses camera `f % 4`).
pub fn held_out_subset(test: &SceneDataset) -> SceneDataset {
    let per = test.frames.len() / FRAMES;
    let mut out = test.clone();
    out.frames = (0..FRAMES).map(|f| test.frames[f * per + f % per].clone()).collect();
    out
}

/// Train split plus the 20-view held-out subset.
pub fn dataset(cfg: &SynthConfig) -> Result<(SceneDataset, SceneDataset)> {
    let scene = preset(&cfg.scene).expect("known scene");
    let (train, test) = synthesize(&scene, cfg)?;
    Ok((train, held_out_subset(&test)))
}

pub fn run(
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    train_set: &SceneDataset,
    held_out: &SceneDataset,
    output: Option<&TrainOutput>,
) -> Result<(Model, TrainReport)> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut m = Model::new(model.clone(), train_set.aabb, train_set.frame_times(), seed)?;
    let report = train(&mut m, train_set, Some(held_out), &cfg, output)?;
    Ok((m, report))
}
