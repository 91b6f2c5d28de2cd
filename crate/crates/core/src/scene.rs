//! Closed-form dynamic scenes used as ground truth, and their reference
//! renderer.
//!
//! Primitives have hard boundaries. The oracle splits every ray at all
//! primitive entry/exit depths and integrates each piece with the midpoint
//! rule, so discontinuities never fall inside a quadrature cell.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imageio::Image;
use crate::render::{Aabb, Camera};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// `p0 + v t + a t^2`.
    Polynomial { p0: [f64; 3], v: [f64; 3], a: [f64; 3] },
    /// `from` at `t = 0` and `t = 1`, `to` at `t = 0.5`, linear in between.
    PingPong { from: [f64; 3], to: [f64; 3] },
    /// `away` for `start <= t <= end`, `at` otherwise.
    Pulse { at: [f64; 3], away: [f64; 3], start: f64, end: f64 },
}

impl Motion {
    pub fn fixed(p: [f64; 3]) -> Self {
        Motion::Polynomial {
            p0: p,
            v: [0.0; 3],
            a: [0.0; 3],
        }
    }

    pub fn position(&self, t: f64) -> [f64; 3] {
        match self {
            Motion::Polynomial { p0, v, a } => std::array::from_fn(|i| p0[i] + v[i] * t + a[i] * t * t),
            Motion::PingPong { from, to } => {
                let s = 1.0 - (2.0 * t - 1.0).abs();
                std::array::from_fn(|i| from[i] + s * (to[i] - from[i]))
            }
            Motion::Pulse { at, away, start, end } => {
                if (*start..=*end).contains(&t) {
                    *away
                } else {
                    *at
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    Solid { color: [f64; 3] },
    /// `mix(a, b, (1 + sin(f x) sin(f y)) / 2)` in world coordinates.
    Checker { a: [f64; 3], b: [f64; 3], frequency: f64 },
}

impl Texture {
    pub fn color(&self, x: [f64; 3]) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { a, b, frequency } => {
                let s = 0.5 * (1.0 + (frequency * x[0]).sin() * (frequency * x[1]).sin());
                std::array::from_fn(|i| a[i] + s * (b[i] - a[i]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        radius: f64,
        center: Motion,
        density: f64,
        texture: Texture,
    },
    Box {
        half: [f64; 3],
        center: Motion,
        density: f64,
        texture: Texture,
    },
}

impl Primitive {
    fn density_value(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Box { density, .. } => *density,
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Sphere { texture, .. } | Primitive::Box { texture, .. } => texture,
        }
    }

    pub fn contains(&self, x: [f64; 3], t: f64) -> bool {
        match self {
            Primitive::Sphere { radius, center, .. } => {
                let c = center.position(t);
                (0..3).map(|i| (x[i] - c[i]).powi(2)).sum::<f64>() <= radius * radius
            }
            Primitive::Box { half, center, .. } => {
                let c = center.position(t);
                (0..3).all(|i| (x[i] - c[i]).abs() <= half[i])
            }
        }
    }

    /// Depth interval where the ray is inside the primitive.
    pub fn interval(&self, o: [f64; 3], d: [f64; 3], t: f64) -> Option<(f64, f64)> {
        match self {
            Primitive::Sphere { radius, center, .. } => {
                let c = center.position(t);
                let oc: [f64; 3] = std::array::from_fn(|i| o[i] - c[i]);
                let b = (0..3).map(|i| oc[i] * d[i]).sum::<f64>();
                let cc = (0..3).map(|i| oc[i] * oc[i]).sum::<f64>() - radius * radius;
                let disc = b * b - cc;
                (disc > 0.0).then(|| {
                    let s = disc.sqrt();
                    (-b - s, -b + s)
                })
            }
            Primitive::Box { half, center, .. } => {
                let c = center.position(t);
                let bx = Aabb {
                    min: std::array::from_fn(|i| c[i] - half[i]),
                    max: std::array::from_fn(|i| c[i] + half[i]),
                };
                bx.clip(o, d, f64::NEG_INFINITY, f64::INFINITY)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub name: String,
    pub aabb: Aabb,
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    /// Sum of the densities of the primitives containing `x`.
    pub fn density(&self, x: [f64; 3], t: f64) -> f64 {
        self.primitives
            .iter()
            .filter(|p| p.contains(x, t))
            .map(Primitive::density_value)
            .sum()
    }

    /// Density-weighted mean color of the primitives containing `x`.
    pub fn color(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        let mut c = [0.0; 3];
        let mut s = 0.0;
        for p in self.primitives.iter().filter(|p| p.contains(x, t)) {
            let w = p.density_value();
            let pc = p.texture().color(x);
            for i in 0..3 {
                c[i] += w * pc[i];
            }
            s += w;
        }
        if s > 0.0 {
            c.map(|v| v / s)
        } else {
            c
        }
    }

    /// Emitted RGB of one ray over `[near, far]` with `n` midpoint samples
    /// per piece between consecutive primitive boundaries.
    pub fn integrate_ray(&self, o: [f64; 3], d: [f64; 3], t: f64, near: f64, far: f64, n: usize, background: [f64; 3]) -> [f64; 3] {
        let mut cuts = vec![near, far];
        for p in &self.primitives {
            if let Some((a, b)) = p.interval(o, d, t) {
                cuts.extend([a, b].into_iter().filter(|&u| u > near && u < far));
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        for seg in cuts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (a + b);
            if self.density([o[0] + mid * d[0], o[1] + mid * d[1], o[2] + mid * d[2]], t) == 0.0 {
                continue;
            }
            let h = (b - a) / n as f64;
            for k in 0..n {
                let u = a + (k as f64 + 0.5) * h;
                let x = [o[0] + u * d[0], o[1] + u * d[1], o[2] + u * d[2]];
                let next = trans * (-self.density(x, t) * h).exp();
                let c = self.color(x, t);
                for i in 0..3 {
                    rgb[i] += (trans - next) * c[i];
                }
                trans = next;
            }
        }
        std::array::from_fn(|i| rgb[i] + trans * background[i])
    }

    /// Ground-truth RGBA image (alpha = opacity, color premultiplied onto
    /// black then un-premultiplied so that `over(bg)` reproduces the render
    /// over `bg`).
    pub fn render(&self, camera: &Camera, t: f64, near: f64, far: f64, n: usize) -> Image {
        let px: Vec<[f64; 4]> = (0..camera.pixel_count())
            .into_par_iter()
            .map(|p| {
                let (o, d) = camera.pixel_ray(p);
                let black = self.integrate_ray(o, d, t, near, far, n, [0.0; 3]);
                let white = self.integrate_ray(o, d, t, near, far, n, [1.0; 3]);
                let alpha = (1.0 - (white[0] - black[0])).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    [black[0] / alpha, black[1] / alpha, black[2] / alpha, alpha].map(|v| v.clamp(0.0, 1.0))
                } else {
                    [0.0; 4]
                }
            })
            .collect();
        Image {
            width: camera.width,
            height: camera.height,
            channels: 4,
            data: px.into_iter().flatten().collect(),
        }
    }

    /// Renders RGB over `background`, doubling `n` until the maximum pixel
    /// change drops below `tol` (or `max_n` is reached). Returns the image
    /// and the accepted `n`.
    pub fn render_checked(&self, camera: &Camera, t: f64, near: f64, far: f64, background: [f64; 3], n0: usize, max_n: usize, tol: f64) -> (Image, usize, f64) {
        let render = |n: usize| {
            let px: Vec<[f64; 3]> = (0..camera.pixel_count())
                .into_par_iter()
                .map(|p| {
                    let (o, d) = camera.pixel_ray(p);
                    self.integrate_ray(o, d, t, near, far, n, background)
                })
                .collect();
            Image::from_rgb(camera.width, camera.height, &px)
        };
        let mut n = n0;
        let mut img = render(n);
        loop {
            let next = render(2 * n);
            let delta = img.data.iter().zip(&next.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if delta < tol || 2 * n >= max_n {
                return (next, 2 * n, delta);
            }
            n *= 2;
            img = next;
        }
    }
}

fn slab(aabb: &Aabb) -> Primitive {
    Primitive::Box {
        half: [1.0, 1.0, 0.1],
        center: Motion::fixed([0.0, 0.0, aabb.min[2] + 0.1]),
        density: 40.0,
        texture: Texture::Checker {
            a: [0.15, 0.3, 0.55],
            b: [0.85, 0.85, 0.75],
            frequency: 6.0,
        },
    }
}

fn unit_box() -> Aabb {
    Aabb {
        min: [-1.0; 3],
        max: [1.0; 3],
    }
}

/// Emissive sphere on a parabolic path over a static checkered slab.
pub fn blob_bounce() -> AnalyticScene {
    let aabb = unit_box();
    AnalyticScene {
        name: "blob-bounce".into(),
        primitives: vec![
            slab(&aabb),
            Primitive::Sphere {
                radius: 0.3,
                center: Motion::Polynomial {
                    p0: [-0.5, 0.0, -0.45],
                    v: [1.0, 0.0, 2.4],
                    a: [0.0, 0.0, -2.4],
                },
                density: 30.0,
                texture: Texture::Solid { color: [0.9, 0.35, 0.2] },
            },
        ],
        aabb,
    }
}

/// Two spheres that approach, overlap at mid-sequence, and separate again.
pub fn split_merge() -> AnalyticScene {
    let aabb = unit_box();
    AnalyticScene {
        name: "split-merge".into(),
        primitives: vec![
            slab(&aabb),
            Primitive::Sphere {
                radius: 0.28,
                center: Motion::PingPong {
                    from: [-0.6, 0.0, -0.2],
                    to: [-0.12, 0.0, -0.2],
                },
                density: 30.0,
                texture: Texture::Solid { color: [0.95, 0.8, 0.2] },
            },
            Primitive::Sphere {
                radius: 0.28,
                center: Motion::PingPong {
                    from: [0.6, 0.0, -0.2],
                    to: [0.12, 0.0, -0.2],
                },
                density: 30.0,
                texture: Texture::Solid { color: [0.2, 0.75, 0.4] },
            },
        ],
        aabb,
    }
}

/// A dark panel lies on the slab and hides the checker under it except
/// during `[0.5, 0.55]`, when it moves out of the box.
pub fn reveal() -> AnalyticScene {
    let aabb = unit_box();
    AnalyticScene {
        name: "reveal".into(),
        primitives: vec![
            slab(&aabb),
            Primitive::Box {
                half: [0.45, 0.45, 0.05],
                center: Motion::Pulse {
                    at: [0.35, 0.3, -0.75],
                    away: [0.35, 0.3, 3.0],
                    start: 0.5,
                    end: 0.55,
                },
                density: 40.0,
                texture: Texture::Solid { color: [0.1, 0.1, 0.12] },
            },
            Primitive::Sphere {
                radius: 0.25,
                center: Motion::PingPong {
                    from: [-0.5, -0.4, -0.4],
                    to: [-0.5, 0.4, -0.4],
                },
                density: 30.0,
                texture: Texture::Solid { color: [0.9, 0.35, 0.2] },
            },
        ],
        aabb,
    }
}

pub fn preset(name: &str) -> Option<AnalyticScene> {
    match name {
        "blob-bounce" => Some(blob_bounce()),
        "split-merge" => Some(split_merge()),
        "reveal" => Some(reveal()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn looking_down(width: usize) -> Camera {
        Camera::look_at(width, width, width as f64 * 1.2, [0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0])
    }

    #[test]
    fn empty_scene_is_transparent() {
        let scene = AnalyticScene {
            name: "empty".into(),
            aabb: unit_box(),
            primitives: vec![],
        };
        let img = scene.render(&looking_down(8), 0.3, 0.5, 6.0, 16);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opaque_plane_fills_frame() {
        let scene = AnalyticScene {
            name: "plane".into(),
            aabb: unit_box(),
            primitives: vec![Primitive::Box {
                half: [50.0, 50.0, 0.2],
                center: Motion::fixed([0.0; 3]),
                density: 1e4,
                texture: Texture::Solid { color: [0.3, 0.6, 0.9] },
            }],
        };
        let img = scene.render(&looking_down(6), 0.0, 0.5, 6.0, 8);
        for i in 0..36 {
            let p = img.pixel(i);
            assert!((p[0] - 0.3).abs() < 1e-9 && (p[1] - 0.6).abs() < 1e-9 && (p[2] - 0.9).abs() < 1e-9);
            assert!((p[3] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_sphere_center_pixel_matches_chord() {
        let (r, sigma, col) = (0.6, 2.0, [0.7, 0.2, 0.5]);
        let scene = AnalyticScene {
            name: "sphere".into(),
            aabb: unit_box(),
            primitives: vec![Primitive::Sphere {
                radius: r,
                center: Motion::fixed([0.0; 3]),
                density: sigma,
                texture: Texture::Solid { color: col },
            }],
        };
        let c = scene.integrate_ray([0.0, 0.0, 3.0], [0.0, 0.0, -1.0], 0.0, 0.5, 6.0, 4, [0.0; 3]);
        let opacity = 1.0 - (-sigma * 2.0 * r).exp();
        for i in 0..3 {
            assert!((c[i] - col[i] * opacity).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_converges_under_doubling() {
        let scene = blob_bounce();
        let cam = Camera::look_at(16, 16, 20.0, [2.2, -2.2, 1.8], [0.0; 3], [0.0, 0.0, 1.0]);
        let (_, n, delta) = scene.render_checked(&cam, 0.4, 0.5, 7.0, [0.0; 3], 8, 512, 1e-3);
        assert!(delta < 1e-3, "n = {n}, delta = {delta}");
    }

    #[test]
    fn fields_are_valid() {
        for scene in [blob_bounce(), split_merge(), reveal()] {
            for k in 0..200 {
                let x = [((k * 37) % 200) as f64 / 100.0 - 1.0, ((k * 91) % 200) as f64 / 100.0 - 1.0, (k % 200) as f64 / 100.0 - 1.0];
                let t = (k % 11) as f64 / 10.0;
                assert!(scene.density(x, t) >= 0.0);
                assert!(scene.color(x, t).iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }

    #[test]
    fn reveal_panel_moves_briefly() {
        let s = reveal();
        let probe = [0.35, 0.3, -0.75];
        let frames = 20;
        let hidden = (0..frames).filter(|&f| s.density(probe, f as f64 / (frames - 1) as f64) > 0.0).count();
        assert_eq!(frames - hidden, 1);
    }

    #[test]
    fn scene_serializes() {
        let s = split_merge();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<AnalyticScene>(&text).unwrap(), s);
    }
}
