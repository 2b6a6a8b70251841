//! Synthetic scenes, trajectories and a simulated tracker.
//!
//! Ground-truth images and depth maps are rendered from a ground-truth
//! Gaussian map with the library's own renderer. The simulated tracker
//! reports points at high-gradient pixels with exact depths, and optionally
//! perturbs every reported pose by a fixed rotation angle and translation
//! length in random directions.

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatmap::densify::{DepthMap, GroundTruthDepth};
use splatmap::gaussian::{logit, Gaussian, GaussianMap};
use splatmap::geometry::{backproject, project_point};
use splatmap::render::render;
use splatmap::{FrameInput, Intrinsics, Pose, TrackedPoint};

use crate::sequence::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// A textured wall of flattened Gaussians facing the camera.
    TexturedPlane,
    /// Gaussians scattered in a box around the origin.
    GaussianCloud,
    /// A long wall whose two halves carry unrelated textures.
    Corridor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trajectory {
    /// Arc around the scene center, looking at it.
    Orbit,
    /// First half of the frames in front of the corridor's first room, second
    /// half in front of the second.
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Fresh high-gradient pixels every frame.
    PerFrame,
    /// A fixed pool of world landmarks; each frame reports the oldest ones
    /// still in view.
    Persistent,
}

/// Axis-aligned world box with its own fine texture; the tracker never
/// reports points inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Patch {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub kind: SceneKind,
    pub gaussians: usize,
    pub trajectory: Trajectory,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub tracker_points: usize,
    pub rot_noise_deg: f64,
    pub trans_noise_m: f64,
    pub features: FeatureMode,
    pub patch: Option<Patch>,
}

/// Frames between the views that contribute to the persistent feature pool.
const POOL_STRIDE: usize = 10;

pub const PRESETS: &[&str] = &["plane", "plane_patch", "plane_clustered", "plane_noisy", "cloud", "corridor"];

impl SynthConfig {
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        let plane = Self {
            seed,
            kind: SceneKind::TexturedPlane,
            gaussians: 200,
            trajectory: Trajectory::Orbit,
            frames: 60,
            width: 96,
            height: 96,
            tracker_points: 150,
            rot_noise_deg: 0.0,
            trans_noise_m: 0.0,
            features: FeatureMode::PerFrame,
            patch: None,
        };
        Some(match name {
            "plane" => plane,
            "plane_patch" => Self {
                patch: Some(Patch {
                    min: Vector3::new(-0.9, -0.2, -0.1),
                    max: Vector3::new(0.1, 0.7, 0.1),
                }),
                ..plane
            },
            "plane_clustered" => Self {
                features: FeatureMode::Persistent,
                ..plane
            },
            "plane_noisy" => Self {
                rot_noise_deg: 0.5,
                trans_noise_m: 0.01,
                ..plane
            },
            "cloud" => Self {
                kind: SceneKind::GaussianCloud,
                ..plane
            },
            "corridor" => Self {
                kind: SceneKind::Corridor,
                gaussians: 450,
                trajectory: Trajectory::Sweep,
                frames: 64,
                ..plane
            },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.gaussians == 0 || self.frames == 0 || self.tracker_points == 0 {
            return Err("counts must be positive".into());
        }
        if self.width < 32 || self.height < 32 {
            return Err("images must be at least 32x32".into());
        }
        if !(self.rot_noise_deg >= 0.0 && self.trans_noise_m >= 0.0) {
            return Err("noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(60.0, self.width, self.height).expect("validated size")
    }

    /// Manifest positions belonging to the corridor's first room.
    pub fn segment_a(&self) -> std::ops::Range<usize> {
        0..self.frames / 2
    }
}

/// Everything a synthetic run needs.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub ground_truth: GaussianMap,
    pub true_poses: Vec<Pose>,
    /// Frames carry the tracker's (possibly noisy) poses.
    pub sequence: Sequence,
}

fn flat(rng: &mut ChaCha8Rng, center: Vector3<f64>, sx: f64, sy: f64, color: Vector3<f64>) -> Gaussian {
    let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(0.0..std::f64::consts::PI));
    let q = spin.into_inner();
    Gaussian {
        position: center,
        log_scale: Vector3::new(sx.ln(), sy.ln(), 0.005f64.ln()),
        rotation: Quaternion::new(q.w, q.i, q.j, q.k),
        opacity_logit: logit(0.92),
        color,
    }
}

fn clamp01(c: Vector3<f64>) -> Vector3<f64> {
    c.map(|v| v.clamp(0.02, 0.98))
}

/// A wall at `z = 0` over `[x0, x1] x [y0, y1]` covered by a jittered grid of
/// about `count` flattened Gaussians. `palette` picks the base color from the
/// normalized position.
fn wall(
    rng: &mut ChaCha8Rng,
    count: usize,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    palette: impl Fn(f64, f64) -> Vector3<f64>,
) -> Vec<Gaussian> {
    let aspect = (x1 - x0) / (y1 - y0);
    let ny = ((count as f64 / aspect).sqrt().round() as usize).max(1);
    let nx = count.div_ceil(ny);
    let (dx, dy) = ((x1 - x0) / nx as f64, (y1 - y0) / ny as f64);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (gx, gy) = (i % nx, i / nx);
        let x = x0 + (gx as f64 + 0.5 + rng.gen_range(-0.3..0.3)) * dx;
        let y = y0 + (gy as f64 + 0.5 + rng.gen_range(-0.3..0.3)) * dy;
        let base = palette((x - x0) / (x1 - x0), (y - y0) / (y1 - y0));
        let jitter = Vector3::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25));
        let z = rng.gen_range(-0.01..0.01);
        let (sx, sy) = (dx * rng.gen_range(0.55..0.8), dy * rng.gen_range(0.55..0.8));
        out.push(flat(rng, Vector3::new(x, y, z), sx, sy, clamp01(base + jitter)));
    }
    out
}

fn patch_gaussians(rng: &mut ChaCha8Rng, p: &Patch) -> Vec<Gaussian> {
    let mut out = Vec::new();
    let step = 0.06;
    let nx = ((p.max.x - p.min.x) / step).floor() as usize;
    let ny = ((p.max.y - p.min.y) / step).floor() as usize;
    for gy in 0..ny {
        for gx in 0..nx {
            let on = (gx + gy) % 2 == 0;
            let c = if on {
                Vector3::new(0.95, 0.9, rng.gen_range(0.1..0.3))
            } else {
                Vector3::new(0.05, rng.gen_range(0.1..0.3), 0.5)
            };
            let center = Vector3::new(
                p.min.x + (gx as f64 + 0.5) * step,
                p.min.y + (gy as f64 + 0.5) * step,
                0.02,
            );
            out.push(flat(rng, center, step * 0.45, step * 0.45, c));
        }
    }
    out
}

fn scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    match cfg.kind {
        SceneKind::TexturedPlane => {
            let mut g = wall(rng, cfg.gaussians, (-2.0, 2.0), (-1.5, 1.5), |u, v| {
                Vector3::new(0.2 + 0.6 * u, 0.3 + 0.4 * (1.0 - v), 0.7 - 0.5 * u * v)
            });
            if let Some(p) = &cfg.patch {
                g.extend(patch_gaussians(rng, p));
            }
            g
        }
        SceneKind::Corridor => {
            let half = cfg.gaussians / 2;
            let mut g = wall(rng, half, (-1.5, 3.0), (-1.5, 1.5), |u, v| {
                Vector3::new(0.75 - 0.4 * v, 0.3 + 0.4 * u, 0.25)
            });
            g.extend(wall(rng, cfg.gaussians - half, (3.0, 7.5), (-1.5, 1.5), |u, v| {
                Vector3::new(0.2, 0.35 + 0.3 * v, 0.8 - 0.4 * u)
            }));
            g
        }
        SceneKind::GaussianCloud => (0..cfg.gaussians)
            .map(|_| {
                let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                let q = UnitQuaternion::from_scaled_axis(axis * 3.0).into_inner();
                Gaussian {
                    position: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)),
                    log_scale: Vector3::new(
                        rng.gen_range(0.05f64..0.2).ln(),
                        rng.gen_range(0.05f64..0.2).ln(),
                        rng.gen_range(0.05f64..0.2).ln(),
                    ),
                    rotation: Quaternion::new(q.w, q.i, q.j, q.k),
                    opacity_logit: logit(rng.gen_range(0.6..0.95)),
                    color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                }
            })
            .collect(),
    }
}

fn trajectory(cfg: &SynthConfig) -> Vec<Pose> {
    let up = Vector3::y();
    let n = cfg.frames;
    let t = |i: usize, m: usize| if m <= 1 { 0.5 } else { i as f64 / (m - 1) as f64 };
    match cfg.trajectory {
        Trajectory::Orbit => (0..n)
            .map(|i| {
                let s = t(i, n);
                let yaw = (-20.0 + 40.0 * s).to_radians();
                let lift = 0.25 * (2.0 * std::f64::consts::PI * s).sin();
                let eye = Vector3::new(2.2 * yaw.sin(), lift, 2.2 * yaw.cos());
                Pose::look_at(&eye, &Vector3::zeros(), &up)
            })
            .collect(),
        Trajectory::Sweep => {
            let half = n / 2;
            (0..n)
                .map(|i| {
                    let (x, s) = if i < half {
                        let s = t(i, half);
                        (0.0 + 1.2 * s, s)
                    } else {
                        let s = t(i - half, n - half);
                        (4.5 + 1.2 * s, s)
                    };
                    let eye = Vector3::new(x, 0.1 * (3.0 * s).sin(), 1.8);
                    let target = Vector3::new(x + 0.2 * (2.0 * s - 1.0), 0.0, 0.0);
                    Pose::look_at(&eye, &target, &up)
                })
                .collect()
        }
    }
}

/// Expected depth per pixel: depth-weighted compositing normalized by the
/// accumulated opacity. Pixels less than half covered are marked unknown.
pub fn render_depth(map: &GaussianMap, pose: &Pose, k: &Intrinsics) -> DepthMap {
    let mut shaded = map.clone();
    let mut coverage = map.clone();
    for (g, c) in shaded.gaussians_mut().iter_mut().zip(coverage.gaussians_mut()) {
        g.color = Vector3::repeat(pose.transform_point(&g.position).z);
        c.color = Vector3::repeat(1.0);
    }
    let bg = Vector3::zeros();
    let d = render(&shaded, pose, k, &bg).image;
    let a = render(&coverage, pose, k, &bg).image;
    let values = d
        .data()
        .iter()
        .step_by(3)
        .zip(a.data().iter().step_by(3))
        .map(|(&d, &a)| if a > 0.5 { d / a } else { 0.0 })
        .collect();
    DepthMap {
        width: k.width,
        height: k.height,
        values,
    }
}

fn perturb(pose: &Pose, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Pose {
    if cfg.rot_noise_deg == 0.0 && cfg.trans_noise_m == 0.0 {
        return *pose;
    }
    let mut dir = || loop {
        let v = Vector3::<f64>::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    };
    let w = dir() * cfg.rot_noise_deg.to_radians();
    let v = dir() * cfg.trans_noise_m;
    // Rotate about the camera center so the position error is exactly `v`.
    let center = pose.center();
    let rotated = UnitQuaternion::from_scaled_axis(w) * pose.rotation;
    Pose::new(rotated, -(rotated * (center + v)))
}

/// Pixels in the top gradient-magnitude quartile that have a depth.
fn high_gradient_pixels(image: &splatmap::Image, depth: &DepthMap) -> Vec<usize> {
    let grad = image.gradient_magnitude();
    let mut sorted: Vec<f64> = grad.clone();
    sorted.sort_by(f64::total_cmp);
    let q3 = sorted[(sorted.len() * 3) / 4];
    (0..grad.len())
        .filter(|&i| grad[i] >= q3 && grad[i] > 0.0 && depth.values[i] > 0.0)
        .collect()
}

fn report_point(
    world: Vector3<f64>,
    tracker_pose: &Pose,
    k: &Intrinsics,
    patch: Option<&Patch>,
) -> Option<TrackedPoint> {
    if patch.is_some_and(|p| p.contains(&world)) {
        return None;
    }
    let (pixel, depth) = project_point(tracker_pose, k, &world).ok()?;
    k.contains(&pixel).then_some(TrackedPoint { world, pixel, depth })
}

pub fn synth_scene(cfg: &SynthConfig) -> SynthOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ground_truth = GaussianMap::from_gaussians(scene(cfg, &mut rng));
    let k = cfg.intrinsics();
    let true_poses = trajectory(cfg);
    let bg = Vector3::zeros();
    let images: Vec<splatmap::Image> = true_poses.iter().map(|p| render(&ground_truth, p, &k, &bg).image).collect();
    let depths: Vec<DepthMap> = true_poses.iter().map(|p| render_depth(&ground_truth, p, &k)).collect();
    let tracker_poses: Vec<Pose> = true_poses.iter().map(|p| perturb(p, cfg, &mut rng)).collect();
    let lift = |pose: &Pose, d: &DepthMap, i: usize| {
        let pixel = Vector2::new((i % k.width) as f64 + 0.5, (i / k.width) as f64 + 0.5);
        backproject(pose, &k, &pixel, d.values[i])
    };

    let pool: Vec<Vector3<f64>> = match cfg.features {
        FeatureMode::PerFrame => Vec::new(),
        FeatureMode::Persistent => {
            let mut pool = Vec::new();
            for f in (0..cfg.frames).step_by(POOL_STRIDE) {
                let cands = high_gradient_pixels(&images[f], &depths[f]);
                let n = cfg.tracker_points.min(cands.len());
                for j in sample(&mut rng, cands.len(), n) {
                    pool.push(lift(&true_poses[f], &depths[f], cands[j]));
                }
            }
            pool
        }
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut depth = GroundTruthDepth::new();
    for f in 0..cfg.frames {
        let mut points: Vec<TrackedPoint> = match cfg.features {
            FeatureMode::PerFrame => {
                let cands = high_gradient_pixels(&images[f], &depths[f]);
                let n = cfg.tracker_points.min(cands.len());
                let mut picked: Vec<usize> = sample(&mut rng, cands.len(), n).into_iter().map(|j| cands[j]).collect();
                picked.sort_unstable();
                picked
                    .into_iter()
                    .filter_map(|i| report_point(lift(&true_poses[f], &depths[f], i), &tracker_poses[f], &k, cfg.patch.as_ref()))
                    .collect()
            }
            FeatureMode::Persistent => {
                let visible: Vec<&Vector3<f64>> = pool
                    .iter()
                    .filter(|w| match project_point(&true_poses[f], &k, w) {
                        Ok((px, z)) if k.contains(&px) => {
                            let i = px.y as usize * k.width + px.x as usize;
                            let d = depths[f].values[i];
                            d > 0.0 && (z - d).abs() < 0.02 * d
                        }
                        _ => false,
                    })
                    .collect();
                // The oldest landmarks keep being tracked while they stay in view.
                visible
                    .into_iter()
                    .take(cfg.tracker_points)
                    .filter_map(|w| report_point(*w, &tracker_poses[f], &k, cfg.patch.as_ref()))
                    .collect()
            }
        };
        points.shrink_to_fit();
        depth.insert(f, depths[f].clone());
        frames.push(FrameInput {
            index: f,
            pose: tracker_poses[f],
            intrinsics: k,
            image: images[f].clone(),
            tracked_points: points,
        });
    }
    let timestamps = (0..cfg.frames).map(|f| f as f64 / 30.0).collect();
    SynthOutput {
        config: *cfg,
        ground_truth,
        true_poses,
        sequence: Sequence {
            frames,
            timestamps,
            depth,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str) -> SynthConfig {
        SynthConfig {
            frames: 6,
            width: 48,
            height: 48,
            tracker_points: 40,
            ..SynthConfig::preset(name, 5).unwrap()
        }
    }

    #[test]
    fn same_seed_same_output() {
        let a = synth_scene(&small("plane"));
        let b = synth_scene(&small("plane"));
        assert_eq!(a.ground_truth.gaussians(), b.ground_truth.gaussians());
        assert_eq!(a.sequence.frames, b.sequence.frames);
    }

    #[test]
    fn zero_noise_reports_true_poses() {
        let out = synth_scene(&small("plane"));
        for (f, p) in out.sequence.frames.iter().zip(&out.true_poses) {
            assert_eq!(f.pose, *p);
        }
    }

    #[test]
    fn noise_has_the_requested_size() {
        let out = synth_scene(&small("plane_noisy"));
        for (f, p) in out.sequence.frames.iter().zip(&out.true_poses) {
            let (rot, _) = f.pose.distance(p);
            let trans = (f.pose.center() - p.center()).norm();
            assert!((rot.to_degrees() - 0.5).abs() < 1e-9, "{rot}");
            assert!((trans - 0.01).abs() < 1e-9, "{trans}");
        }
    }

    #[test]
    fn frames_validate() {
        for name in PRESETS {
            let out = synth_scene(&small(name));
            for f in &out.sequence.frames {
                f.validate().unwrap();
                assert!(!f.tracked_points.is_empty(), "{name} frame {}", f.index);
            }
        }
    }

    #[test]
    fn patch_is_never_tracked() {
        let out = synth_scene(&small("plane_patch"));
        let patch = out.config.patch.unwrap();
        for f in &out.sequence.frames {
            assert!(f.tracked_points.iter().all(|tp| !patch.contains(&tp.world)));
        }
    }

    #[test]
    fn depth_matches_the_plane() {
        let cfg = small("plane");
        let out = synth_scene(&cfg);
        let f = &out.sequence.frames[0];
        let d = out.sequence.depth.get(0).unwrap();
        let center = (cfg.height / 2) * cfg.width + cfg.width / 2;
        let z = out.true_poses[0].transform_point(&Vector3::zeros()).z;
        // Splat depth is constant across a footprint, so an oblique view
        // deviates from the ray-plane intersection by a few centimeters.
        assert!((d.values[center] - z).abs() < 0.1, "{} vs {z}", d.values[center]);
        assert_eq!(f.image.dims(), (48, 48));
    }
}
