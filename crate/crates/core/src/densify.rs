//! Hierarchical Gaussian management: scale computation, candidate seeding
//! and occupancy-filtered insertion.
//!
//! New Gaussians come from two sources per keyframe:
//!
//! 1. every tracked feature point (they sit on high-contrast structure), and
//! 2. up to `k` pixels where the current render disagrees structurally with
//!    the observation (per-pixel SSIM below `eps_e`), lifted to 3D with a
//!    [`DepthProvider`].
//!
//! Candidates are then passed through the [`Mohv`] at the level matching the
//! keyframe's scale, and survivors become isotropic Gaussians whose size is
//! the world footprint of one pixel at their depth.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::frame::FrameInput;
use crate::gaussian::{Gaussian, GaussianMap};
use crate::geometry::backproject;
use crate::image::Image;
use crate::metrics::ssim_map;
use crate::mohv::Mohv;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig {
    /// Additive floor of the pixel-footprint scale, meters.
    pub eps: f64,
    /// SSIM threshold below which a pixel counts as badly reconstructed.
    pub eps_e: f64,
    /// Error-compensation pixels per keyframe.
    pub k: usize,
    /// Opacity given to freshly inserted Gaussians.
    pub opacity_init: f64,
    /// Cells per image side used to spread compensation pixels.
    pub grid_cells: usize,
    pub use_mohv: bool,
    pub use_error_comp: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            eps_e: 0.5,
            k: 200,
            opacity_init: 0.5,
            grid_cells: 16,
            use_mohv: true,
            use_error_comp: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeedSource {
    Feature,
    ErrorComp,
}

/// A proposed Gaussian before occupancy filtering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedCandidate {
    pub world: Vector3<f64>,
    pub source: SeedSource,
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
}

/// Supplies depth for individual pixels of a frame.
pub trait DepthProvider {
    /// Camera depth at pixel `(x, y)` of `frame`, or `None` when no estimate
    /// is available. Returned depths are finite and positive.
    fn depth_at(&self, frame: &FrameInput, x: usize, y: usize) -> Option<f64>;
}

/// Dense per-frame depth maps (non-positive or non-finite entries mean
/// "unknown").
#[derive(Debug, Clone, Default)]
pub struct GroundTruthDepth {
    maps: HashMap<usize, DepthMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let v = *self.values.get(y * self.width + x)?;
        (v > 0.0 && v.is_finite()).then_some(v)
    }
}

impl GroundTruthDepth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame_index: usize, map: DepthMap) {
        self.maps.insert(frame_index, map);
    }

    pub fn get(&self, frame_index: usize) -> Option<&DepthMap> {
        self.maps.get(&frame_index)
    }
}

impl DepthProvider for GroundTruthDepth {
    fn depth_at(&self, frame: &FrameInput, x: usize, y: usize) -> Option<f64> {
        self.maps.get(&frame.index)?.get(x, y)
    }
}

/// Depth of the nearest tracked point within `radius_px` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestTrackedDepth {
    pub radius_px: f64,
}

impl Default for NearestTrackedDepth {
    fn default() -> Self {
        Self { radius_px: 40.0 }
    }
}

impl DepthProvider for NearestTrackedDepth {
    fn depth_at(&self, frame: &FrameInput, x: usize, y: usize) -> Option<f64> {
        let at = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        frame
            .tracked_points
            .iter()
            .map(|tp| ((tp.pixel - at).norm_squared(), tp.depth))
            .filter(|(d2, _)| *d2 <= self.radius_px * self.radius_px)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, d)| d)
    }
}

/// World-space size of one pixel at depth `depth` for focal length `focal`,
/// plus the floor `eps`.
pub fn gaussian_scale(depth: f64, focal: f64, eps: f64) -> Result<f64> {
    if !(depth > 0.0) || !(focal > 0.0) || !(eps >= 0.0) {
        return Err(Error::NonPositiveInput(format!(
            "gaussian_scale(depth={depth}, focal={focal}, eps={eps})"
        )));
    }
    Ok(depth / focal + eps)
}

/// Lower median of `values` (which must be non-empty).
fn lower_median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Median Gaussian scale over the frame's tracked points (lower median for
/// even counts).
pub fn camera_scale(frame: &FrameInput, eps: f64) -> Result<f64> {
    if frame.tracked_points.is_empty() {
        return Err(Error::NoTrackedPoints);
    }
    let f = frame.intrinsics.focal();
    let scales = frame
        .tracked_points
        .iter()
        .map(|tp| gaussian_scale(tp.depth, f, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(lower_median(scales))
}

/// One candidate per tracked point, colored from the image.
pub fn seed_from_features(frame: &FrameInput) -> Vec<SeedCandidate> {
    frame
        .tracked_points
        .iter()
        .map(|tp| SeedCandidate {
            world: tp.world,
            source: SeedSource::Feature,
            pixel: tp.pixel,
            depth: tp.depth,
            color: frame.image.sample_bilinear(&tp.pixel).map(|c| c.clamp(0.0, 1.0)),
        })
        .collect()
}

/// Picks up to `k` pixels with SSIM below `eps_e`, spread over a
/// `cells x cells` grid: each cell contributes at most `ceil(k / eligible
/// cells)` of its worst pixels, and the union is cut back to the `k` worst.
/// Returns `(x, y)` pixel coordinates ordered by ascending SSIM.
pub fn select_error_pixels(
    ssim: &[f64],
    width: usize,
    height: usize,
    k: usize,
    eps_e: f64,
    cells: usize,
) -> Vec<(usize, usize)> {
    if k == 0 {
        return Vec::new();
    }
    let cell_w = width.div_ceil(cells).max(1);
    let cell_h = height.div_ceil(cells).max(1);
    let mut per_cell: HashMap<(usize, usize), Vec<(f64, usize)>> = HashMap::new();
    for (i, &s) in ssim.iter().enumerate() {
        if s < eps_e {
            let (x, y) = (i % width, i / width);
            per_cell.entry((x / cell_w, y / cell_h)).or_default().push((s, i));
        }
    }
    if per_cell.is_empty() {
        return Vec::new();
    }
    let quota = k.div_ceil(per_cell.len());
    let mut picked: Vec<(f64, usize)> = Vec::new();
    for mut cell in per_cell.into_values() {
        cell.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        picked.extend(cell.into_iter().take(quota));
    }
    picked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    picked.truncate(k);
    debug_assert!(picked.iter().all(|(_, i)| *i < width * height));
    picked.into_iter().map(|(_, i)| (i % width, i / width)).collect()
}

/// Candidates at pixels where `rendered` is structurally wrong, lifted to
/// world space with `depth`.
pub fn error_compensation(
    frame: &FrameInput,
    rendered: &Image,
    k: usize,
    eps_e: f64,
    cells: usize,
    depth: &dyn DepthProvider,
) -> Result<Vec<SeedCandidate>> {
    let ssim = ssim_map(rendered, &frame.image)?;
    let (w, h) = frame.image.dims();
    let pixels = select_error_pixels(&ssim, w, h, k, eps_e, cells);
    let mut out = Vec::with_capacity(pixels.len());
    for (x, y) in pixels {
        let Some(d) = depth.depth_at(frame, x, y) else {
            continue;
        };
        let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        out.push(SeedCandidate {
            world: backproject(&frame.pose, &frame.intrinsics, &pixel, d),
            source: SeedSource::ErrorComp,
            pixel,
            depth: d,
            color: frame.image.pixel(x, y),
        });
    }
    Ok(out)
}

/// Filters `candidates` through `mohv` (when given) and inserts the survivors
/// into `map`. Feature candidates are considered before error-compensation
/// ones. Returns the number inserted.
pub fn densify(
    map: &mut GaussianMap,
    mohv: Option<&mut Mohv>,
    frame: &FrameInput,
    candidates: &[SeedCandidate],
    cfg: &DensifyConfig,
) -> Result<usize> {
    if candidates.is_empty() {
        return Ok(0);
    }
    let mut ordered: Vec<&SeedCandidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.source);
    let f = frame.intrinsics.focal();

    let kept: Vec<&SeedCandidate> = match mohv {
        Some(mohv) => {
            let scale = match camera_scale(frame, cfg.eps) {
                Ok(s) => s,
                Err(Error::NoTrackedPoints) => lower_median(
                    ordered
                        .iter()
                        .map(|c| gaussian_scale(c.depth, f, cfg.eps))
                        .collect::<Result<Vec<_>>>()?,
                ),
                Err(e) => return Err(e),
            };
            let level = mohv.level_for_scale(scale)?;
            let positions: Vec<Vector3<f64>> = ordered.iter().map(|c| c.world).collect();
            mohv.filter_candidates(&positions, level)?
                .into_iter()
                .map(|i| ordered[i])
                .collect()
        }
        None => ordered,
    };

    let batch = kept
        .iter()
        .map(|c| {
            let s = gaussian_scale(c.depth, f, cfg.eps)?;
            Ok(Gaussian::isotropic(c.world, s, cfg.opacity_init, c.color))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len();
    map.insert_gaussians(batch);
    Ok(n)
}
