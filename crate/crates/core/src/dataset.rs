//! Posed, timestamped image collections in the D-NeRF transforms layout.
//!
//! `transforms_<split>.json`:
//! ```json
//! { "camera_angle_x": 0.69,
//!   "frames": [ { "file_path": "./train/r_000", "time": 0.0,
//!                 "transform_matrix": [[...4 rows...]] } ] }
//! ```
//! `file_path` may omit the `.png` extension. Optional top-level keys
//! `aabb` (`[[min], [max]]`), `near` and `far` override the defaults.
//! Frames without `time` get `index / (count - 1)`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_png, write_png, Image};
use crate::render::{validate_pose, Aabb, Camera, Pose};
use crate::scene::AnalyticScene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub pose: Pose,
    pub time: f64,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_angle_x: f64,
    pub aabb: Aabb,
    pub near: f64,
    pub far: f64,
    pub split: Split,
    pub frames: Vec<Frame>,
}

pub const DEFAULT_AABB: Aabb = Aabb {
    min: [-1.5; 3],
    max: [1.5; 3],
};

impl SceneDataset {
    pub fn camera(&self, frame: usize) -> Camera {
        Camera {
            width: self.width,
            height: self.height,
            focal: self.focal,
            pose: self.frames[frame].pose,
        }
    }

    /// Distinct frame timestamps in ascending order.
    pub fn frame_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.frames.iter().map(|f| f.time).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

pub fn focal_from_angle(width: usize, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aabb: Option<[[f64; 3]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<f64>,
    transform_matrix: Vec<Vec<f64>>,
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads `transforms_<split>.json` from `dir` together with its images.
pub fn load_dataset(dir: &Path, split: Split) -> Result<SceneDataset> {
    let path = dir.join(format!("transforms_{}.json", split.name()));
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    let tf: TransformsFile = serde_json::from_str(&text)
        .map_err(|e| parse_err(&path, format!("line {} column {}: {e}", e.line(), e.column())))?;
    if tf.frames.is_empty() {
        return Err(parse_err(&path, "no frames"));
    }
    if !(tf.camera_angle_x > 0.0 && tf.camera_angle_x < std::f64::consts::PI) {
        return Err(parse_err(&path, format!("camera_angle_x {} out of range", tf.camera_angle_x)));
    }
    let count = tf.frames.len();
    let parsed: Vec<(Pose, f64, PathBuf)> = tf
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let name = format!("frame {i} ({})", f.file_path);
            if f.transform_matrix.len() != 4 || f.transform_matrix.iter().any(|r| r.len() != 4) {
                return Err(parse_err(&path, format!("{name}: transform_matrix must be 4x4")));
            }
            let mut pose = [[0.0; 4]; 4];
            for (r, row) in f.transform_matrix.iter().enumerate() {
                pose[r].copy_from_slice(row);
            }
            validate_pose(&pose, 1e-5).map_err(|e| parse_err(&path, format!("{name}: {e}")))?;
            let time = f.time.unwrap_or(if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 });
            if !(0.0..=1.0).contains(&time) {
                return Err(parse_err(&path, format!("{name}: time {time} outside [0, 1]")));
            }
            let mut file = dir.join(&f.file_path);
            if file.extension().is_none() {
                file.set_extension("png");
            }
            Ok((pose, time, file))
        })
        .collect::<Result<_>>()?;
    let images: Vec<Image> = parsed.par_iter().map(|(_, _, file)| read_png(file)).collect::<Result<_>>()?;
    let (width, height) = (images[0].width, images[0].height);
    let mut frames = Vec::with_capacity(count);
    for ((pose, time, file), image) in parsed.into_iter().zip(images) {
        if image.width != width || image.height != height {
            return Err(parse_err(
                &path,
                format!("{}: size {}x{} differs from {width}x{height}", file.display(), image.width, image.height),
            ));
        }
        frames.push(Frame { image, pose, time, file });
    }
    let aabb = tf.aabb.map_or(DEFAULT_AABB, |[min, max]| Aabb { min, max });
    let near = tf.near.unwrap_or(0.1);
    let far = tf.far.unwrap_or(6.0);
    if !(near < far) {
        return Err(parse_err(&path, format!("near {near} must be below far {far}")));
    }
    Ok(SceneDataset {
        width,
        height,
        focal: focal_from_angle(width, tf.camera_angle_x),
        camera_angle_x: tf.camera_angle_x,
        aabb,
        near,
        far,
        split,
        frames,
    })
}

/// Writes the dataset as `transforms_<split>.json` plus one PNG per frame
/// under `<dir>/<split>/`.
pub fn write_dataset(dir: &Path, data: &SceneDataset) -> Result<()> {
    let sub = dir.join(data.split.name());
    fs::create_dir_all(&sub)?;
    let frames: Vec<FrameEntry> = data
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| FrameEntry {
            file_path: format!("./{}/r_{i:03}", data.split.name()),
            time: Some(f.time),
            rotation: None,
            transform_matrix: f.pose.iter().map(|r| r.to_vec()).collect(),
        })
        .collect();
    data.frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| write_png(&f.image, &sub.join(format!("r_{i:03}.png"))))
        .collect::<Result<Vec<()>>>()?;
    let tf = TransformsFile {
        camera_angle_x: data.camera_angle_x,
        aabb: Some([data.aabb.min, data.aabb.max]),
        near: Some(data.near),
        far: Some(data.far),
        frames,
    };
    let text = serde_json::to_string_pretty(&tf).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(dir.join(format!("transforms_{}.json", data.split.name())), text)?;
    Ok(())
}

/// Standalone camera path for rendering:
/// `{"width", "height", "camera_angle_x", "near", "far", "poses": [4x4, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    pub width: usize,
    pub height: usize,
    pub camera_angle_x: f64,
    pub near: f64,
    pub far: f64,
    pub poses: Vec<Pose>,
}

impl CameraPath {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let cp: CameraPath = serde_json::from_str(&text)
            .map_err(|e| parse_err(path, format!("line {} column {}: {e}", e.line(), e.column())))?;
        if cp.width == 0 || cp.height == 0 || !(cp.near < cp.far) {
            return Err(parse_err(path, "need positive image size and near < far"));
        }
        for (i, pose) in cp.poses.iter().enumerate() {
            validate_pose(pose, 1e-6).map_err(|e| parse_err(path, format!("pose {i}: {e}")))?;
        }
        Ok(cp)
    }

    pub fn cameras(&self) -> Vec<Camera> {
        let focal = focal_from_angle(self.width, self.camera_angle_x);
        self.poses
            .iter()
            .map(|&pose| Camera {
                width: self.width,
                height: self.height,
                focal,
                pose,
            })
            .collect()
    }
}

/// Camera placement and sampling for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scene: String,
    pub frames: usize,
    pub train_views: usize,
    pub test_views: usize,
    /// Train cameras per frame drawn from the `train_views` ring in a
    /// rotating pattern; 0 uses every train view for every frame.
    pub train_views_per_frame: usize,
    pub width: usize,
    pub height: usize,
    pub camera_angle_x: f64,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
    /// Quadrature samples per primitive-boundary piece.
    pub samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: "blob-bounce".into(),
            frames: 20,
            train_views: 16,
            test_views: 4,
            train_views_per_frame: 0,
            width: 64,
            height: 64,
            camera_angle_x: 0.8,
            radius: 3.2,
            near: 1.0,
            far: 5.5,
            samples: 64,
        }
    }
}

/// Cameras on a sphere of `radius` around the origin, alternating between
/// two elevations, looking at the origin with +z up. `offset` shifts the
/// azimuths by that fraction of the spacing.
pub fn orbit_cameras(count: usize, offset: f64, cfg: &SynthConfig) -> Vec<Camera> {
    let focal = focal_from_angle(cfg.width, cfg.camera_angle_x);
    (0..count)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * (i as f64 + offset) / count as f64;
            let el: f64 = if i % 2 == 0 { 0.45 } else { 0.85 };
            let eye = [
                cfg.radius * el.cos() * az.cos(),
                cfg.radius * el.cos() * az.sin(),
                cfg.radius * el.sin(),
            ];
            Camera::look_at(cfg.width, cfg.height, focal, eye, [0.0; 3], [0.0, 0.0, 1.0])
        })
        .collect()
}

/// Renders train and test splits of an analytic scene.
pub fn synthesize(scene: &AnalyticScene, cfg: &SynthConfig) -> Result<(SceneDataset, SceneDataset)> {
    if cfg.frames == 0 || cfg.train_views == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(Error::Config("synth: frames, views and size must be >= 1".into()));
    }
    let train_cams = orbit_cameras(cfg.train_views, 0.0, cfg);
    let test_cams = orbit_cameras(cfg.test_views, 0.5, cfg);
    let times: Vec<f64> = (0..cfg.frames)
        .map(|f| if cfg.frames > 1 { f as f64 / (cfg.frames - 1) as f64 } else { 0.0 })
        .collect();
    let per_frame = if cfg.train_views_per_frame == 0 { cfg.train_views } else { cfg.train_views_per_frame.min(cfg.train_views) };
    let mut train_jobs = Vec::new();
    let mut test_jobs = Vec::new();
    for (f, &t) in times.iter().enumerate() {
        for k in 0..per_frame {
            let v = (f * per_frame + k) % cfg.train_views;
            train_jobs.push((train_cams[v].clone(), t));
        }
        for cam in &test_cams {
            test_jobs.push((cam.clone(), t));
        }
    }
    let build = |jobs: Vec<(Camera, f64)>, split: Split| SceneDataset {
        width: cfg.width,
        height: cfg.height,
        focal: focal_from_angle(cfg.width, cfg.camera_angle_x),
        camera_angle_x: cfg.camera_angle_x,
        aabb: scene.aabb,
        near: cfg.near,
        far: cfg.far,
        split,
        frames: jobs
            .into_iter()
            .map(|(cam, t)| Frame {
                image: scene.render(&cam, t, cfg.near, cfg.far, cfg.samples),
                pose: cam.pose,
                time: t,
                file: PathBuf::new(),
            })
            .collect(),
    };
    Ok((build(train_jobs, Split::Train), build(test_jobs, Split::Test)))
}
