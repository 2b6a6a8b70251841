//! CPU splat rasterizer.
//!
//! Gaussians are projected to screen-space ellipses (EWA), globally sorted by
//! camera depth and alpha-composited front to back at every pixel center:
//!
//! ```text
//! C = Σ_i c_i α_i T_i + T_final · background,   T_i = Π_{k<i} (1 - α_k)
//! α_i = min(α_max, o_i · exp(-½ dᵀ Σ₂d⁻¹ d) - α_min)
//! ```
//!
//! Rows are split into fixed blocks that may be processed on different
//! threads. Block boundaries do not depend on the thread count, so renders
//! and gradients are bit-identical however many workers run.

mod backward;

pub use backward::{render_backward, GaussianGrad, MapGradients};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::gaussian::{Gaussian, GaussianMap};
use crate::geometry::{Intrinsics, Pose, DEPTH_EPSILON};
use crate::image::Image;
use crate::parallel;

/// Upper clamp on per-splat alpha.
pub const ALPHA_MAX: f64 = 0.999;
/// Compositing stops once transmittance drops below this.
pub const T_STOP: f64 = 1e-4;
/// Added to the diagonal of every projected covariance (pixels²).
pub const COV_FLOOR: f64 = 0.3;
/// Alpha is lowered by this amount and contributions that would go
/// negative are skipped, so alpha fades to exactly zero at the cutoff and the
/// render stays continuous.
pub const ALPHA_MIN: f64 = 1e-10;
/// Squared Mahalanobis radius holding 99% of a 2D Gaussian's mass.
pub const CHI2_99: f64 = 9.210_340_371_976_184;

pub(crate) const ROW_BLOCK: usize = 8;

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian in the map.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    /// Screen covariance including [`COV_FLOOR`].
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Inclusive pixel range `[x0, x1] x [y0, y1]` outside of which alpha is
    /// below [`ALPHA_MIN`]; empty when `x0 > x1` or `y0 > y1`.
    pub support: [i64; 4],
    pub(crate) cam_point: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
}

impl Splat2D {
    #[inline]
    pub(crate) fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64, f64, bool)> {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let q = &self.conic;
        let power = -0.5 * (q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy);
        let falloff = power.exp();
        let raw = self.opacity * falloff;
        if raw < ALPHA_MIN {
            return None;
        }
        let alpha = raw - ALPHA_MIN;
        let clamped = alpha > ALPHA_MAX;
        Some((if clamped { ALPHA_MAX } else { alpha }, falloff, power, clamped))
    }
}

/// Pinhole Jacobian of `(u, v)` with respect to the camera-frame point.
pub(crate) fn pinhole_jacobian(k: &Intrinsics, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz2,
    )
}

/// EWA projection of one Gaussian; `None` means culled (behind the camera or
/// the 99% ellipse misses the image).
pub fn project_gaussian(g: &Gaussian, pose: &Pose, k: &Intrinsics) -> Option<Splat2D> {
    project_indexed(0, g, pose, k)
}

pub(crate) fn project_indexed(index: usize, g: &Gaussian, pose: &Pose, k: &Intrinsics) -> Option<Splat2D> {
    let pc = pose.transform_point(&g.position);
    if pc.z <= DEPTH_EPSILON {
        return None;
    }
    let w = pose.rotation_matrix();
    let cov_cam = w * g.covariance() * w.transpose();
    let jac = pinhole_jacobian(k, &pc);
    let mut cov2d = jac * cov_cam * jac.transpose();
    cov2d[(0, 0)] += COV_FLOOR;
    cov2d[(1, 1)] += COV_FLOOR;
    // Symmetrize against rounding so the conic is exactly symmetric.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -off, -off, cov2d[(0, 0)]) / det;
    let mean2d = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);

    let hx = (CHI2_99 * cov2d[(0, 0)]).sqrt();
    let hy = (CHI2_99 * cov2d[(1, 1)]).sqrt();
    let (wf, hf) = (k.width as f64, k.height as f64);
    if mean2d.x + hx < 0.0 || mean2d.x - hx > wf || mean2d.y + hy < 0.0 || mean2d.y - hy > hf {
        return None;
    }

    let opacity = g.opacity();
    let support = {
        let q_max = (opacity / ALPHA_MIN).ln();
        if q_max <= 0.0 {
            [0, -1, 0, -1]
        } else {
            let rx = (2.0 * q_max * cov2d[(0, 0)]).sqrt();
            let ry = (2.0 * q_max * cov2d[(1, 1)]).sqrt();
            let x0 = ((mean2d.x - rx - 0.5).ceil() as i64).max(0);
            let x1 = ((mean2d.x + rx - 0.5).floor() as i64).min(k.width as i64 - 1);
            let y0 = ((mean2d.y - ry - 0.5).ceil() as i64).max(0);
            let y1 = ((mean2d.y + ry - 0.5).floor() as i64).min(k.height as i64 - 1);
            [x0, x1, y0, y1]
        }
    };

    Some(Splat2D {
        index,
        mean2d,
        cov2d,
        conic,
        depth: pc.z,
        color: g.color,
        opacity,
        support,
        cam_point: pc,
        jacobian: jac,
        cov_cam,
    })
}

/// Result of one forward render.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Transmittance left for the background at each pixel.
    pub final_transmittance: Vec<f64>,
    /// Number of splats composited at each pixel (a prefix of that pixel's
    /// depth-sorted candidate list).
    pub contributors: Vec<u32>,
    /// Visible splats in front-to-back order.
    pub splats: Vec<Splat2D>,
}

impl RenderOutput {
    /// Whether the Gaussian with map index `i` survived culling.
    pub fn is_visible(&self, i: usize) -> bool {
        self.splats.iter().any(|s| s.index == i)
    }
}

/// Projects and depth-sorts every Gaussian. Ties are broken by map index.
pub(crate) fn project_all(map: &GaussianMap, pose: &Pose, k: &Intrinsics) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = map
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_indexed(i, g, pose, k))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

pub(crate) const TILE_WIDTH: usize = 8;

/// Per-tile candidate lists: positions (into `splats`) of splats whose
/// support overlaps a one-row, [`TILE_WIDTH`]-pixel tile, in depth order.
pub(crate) struct CandidateGrid {
    tiles_per_row: usize,
    tiles: Vec<Vec<u32>>,
}

impl CandidateGrid {
    pub(crate) fn new(splats: &[Splat2D], width: usize, height: usize) -> Self {
        let tiles_per_row = width.div_ceil(TILE_WIDTH);
        let mut tiles = vec![Vec::new(); tiles_per_row * height];
        for (pos, s) in splats.iter().enumerate() {
            let [x0, x1, y0, y1] = s.support;
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let (t0, t1) = (x0 as usize / TILE_WIDTH, x1 as usize / TILE_WIDTH);
            for y in y0 as usize..=y1 as usize {
                for tile in &mut tiles[y * tiles_per_row + t0..=y * tiles_per_row + t1] {
                    tile.push(pos as u32);
                }
            }
        }
        Self { tiles_per_row, tiles }
    }

    #[inline]
    pub(crate) fn at(&self, x: usize, y: usize) -> &[u32] {
        &self.tiles[y * self.tiles_per_row + x / TILE_WIDTH]
    }
}

/// Walks one pixel's candidates front to back, calling `visit` with the
/// candidate position, its alpha details and the transmittance in front of
/// it. Returns `(final transmittance, contributors)`.
#[inline]
pub(crate) fn composite_pixel(
    splats: &[Splat2D],
    candidates: &[u32],
    x: usize,
    y: usize,
    mut visit: impl FnMut(u32, (f64, f64, f64, bool), f64),
) -> (f64, u32) {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let xi = x as i64;
    let mut t = 1.0;
    let mut count = 0;
    for &pos in candidates {
        let s = &splats[pos as usize];
        if xi < s.support[0] || xi > s.support[1] {
            continue;
        }
        let Some(a) = s.alpha_at(px, py) else {
            continue;
        };
        visit(pos, a, t);
        count += 1;
        t *= 1.0 - a.0;
        if t < T_STOP {
            break;
        }
    }
    (t, count)
}

/// Forward render of `map` seen from `pose`.
pub fn render(map: &GaussianMap, pose: &Pose, k: &Intrinsics, background: &Vector3<f64>) -> RenderOutput {
    let splats = project_all(map, pose, k);
    let grid = CandidateGrid::new(&splats, k.width, k.height);
    let (w, h) = (k.width, k.height);

    let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<u32>)> = parallel::pool().install(|| {
        (0..h.div_ceil(ROW_BLOCK))
            .into_par_iter()
            .map(|b| {
                let y_range = b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(h);
                let n = y_range.len() * w;
                let mut rgb = Vec::with_capacity(n * 3);
                let mut trans = Vec::with_capacity(n);
                let mut contrib = Vec::with_capacity(n);
                for y in y_range {
                    for x in 0..w {
                        let mut c = Vector3::zeros();
                        let (t, count) = composite_pixel(&splats, grid.at(x, y), x, y, |pos, (alpha, ..), t| {
                            c += splats[pos as usize].color * (alpha * t);
                        });
                        c += background * t;
                        rgb.extend_from_slice(&[c.x, c.y, c.z]);
                        trans.push(t);
                        contrib.push(count);
                    }
                }
                (rgb, trans, contrib)
            })
            .collect()
    });

    let mut data = Vec::with_capacity(w * h * 3);
    let mut final_transmittance = Vec::with_capacity(w * h);
    let mut contributors = Vec::with_capacity(w * h);
    for (rgb, t, c) in blocks {
        data.extend(rgb);
        final_transmittance.extend(t);
        contributors.extend(c);
    }
    RenderOutput {
        image: Image::new(w, h, data).expect("renderer produced a malformed image"),
        final_transmittance,
        contributors,
        splats,
    }
}

/// Per-pixel `Σ α_i T_i + T_final`; equals one up to rounding.
pub fn compositing_weight_sums(map: &GaussianMap, pose: &Pose, k: &Intrinsics) -> Vec<f64> {
    let splats = project_all(map, pose, k);
    let grid = CandidateGrid::new(&splats, k.width, k.height);
    let mut out = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let mut acc = 0.0;
            let (t, _) = composite_pixel(&splats, grid.at(x, y), x, y, |_, (alpha, ..), t| acc += alpha * t);
            out.push(acc + t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::logit;
    use approx::assert_relative_eq;

    fn k64() -> Intrinsics {
        Intrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn iso(pos: [f64; 3], sigma: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian::isotropic(Vector3::from(pos), sigma, opacity, Vector3::from(color))
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let k = k64();
        let (sigma, d) = (0.05, 2.0);
        let s = project_gaussian(&iso([0.0, 0.0, d], sigma, 0.5, [1.0; 3]), &Pose::identity(), &k).unwrap();
        let expect = (k.fx * sigma / d).powi(2);
        assert_relative_eq!(s.cov2d[(0, 0)], expect + COV_FLOOR, epsilon = 1e-12);
        assert_relative_eq!(s.cov2d[(1, 1)], expect + COV_FLOOR, epsilon = 1e-12);
        assert_relative_eq!(s.cov2d[(0, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(s.mean2d, Vector2::new(32.0, 32.0));
    }

    #[test]
    fn doubling_depth_halves_projected_sigma() {
        let k = k64();
        let a = project_gaussian(&iso([0.0, 0.0, 2.0], 0.1, 0.5, [1.0; 3]), &Pose::identity(), &k).unwrap();
        let b = project_gaussian(&iso([0.0, 0.0, 4.0], 0.1, 0.5, [1.0; 3]), &Pose::identity(), &k).unwrap();
        let sa = (a.cov2d[(0, 0)] - COV_FLOOR).sqrt();
        let sb = (b.cov2d[(0, 0)] - COV_FLOOR).sqrt();
        assert_relative_eq!(sb, 0.5 * sa, epsilon = 1e-12);
    }

    #[test]
    fn behind_and_offscreen_are_culled() {
        let k = k64();
        assert!(project_gaussian(&iso([0.0, 0.0, -1.0], 0.1, 0.5, [1.0; 3]), &Pose::identity(), &k).is_none());
        assert!(project_gaussian(&iso([5.0, 0.0, 1.0], 0.01, 0.5, [1.0; 3]), &Pose::identity(), &k).is_none());
    }

    #[test]
    fn empty_map_renders_background() {
        let k = k64();
        let bg = Vector3::new(0.1, 0.2, 0.3);
        let out = render(&GaussianMap::new(), &Pose::identity(), &k, &bg);
        assert!(out.final_transmittance.iter().all(|&t| t == 1.0));
        for y in 0..k.height {
            for x in 0..k.width {
                assert_eq!(out.image.pixel(x, y), bg);
            }
        }
    }

    #[test]
    fn single_huge_splat_composites_one_term() {
        let k = k64();
        let c = Vector3::new(0.9, 0.4, 0.1);
        let bg = Vector3::new(0.2, 0.2, 0.2);
        let mut g = iso([0.0, 0.0, 2.0], 100.0, 0.5, [0.9, 0.4, 0.1]);
        g.opacity_logit = 50.0;
        let map = GaussianMap::from_gaussians(vec![g]);
        let out = render(&map, &Pose::identity(), &k, &bg);
        // Center pixel (31, 31) sits half a pixel off the mean; the falloff
        // there is exp(-0.25 / σ²) with σ ≈ 4000 px, i.e. 1 - 1.6e-8.
        let expect = c * ALPHA_MAX + bg * (1.0 - ALPHA_MAX);
        assert_relative_eq!(out.image.pixel(31, 31), expect, epsilon = 1e-9);
    }

    #[test]
    fn two_overlapping_splats_composite_in_depth_order() {
        let k = k64();
        let bg = Vector3::new(0.05, 0.1, 0.15);
        let (c1, c2) = (Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let alpha = 0.6;
        // Huge splats so the falloff at the pixel is ≈ 1; inserted back first
        // to check that the sort, not insertion order, decides.
        let back = iso([0.0, 0.0, 3.0], 500.0, alpha, [0.0, 1.0, 0.0]);
        let front = iso([0.0, 0.0, 2.0], 500.0, alpha, [1.0, 0.0, 0.0]);
        let map = GaussianMap::from_gaussians(vec![back, front]);
        let out = render(&map, &Pose::identity(), &k, &bg);
        let expect = c1 * alpha + c2 * ((1.0 - alpha) * alpha) + bg * (1.0 - alpha).powi(2);
        assert_relative_eq!(out.image.pixel(31, 31), expect, epsilon = 1e-8);
        assert_eq!(out.splats[0].index, 1);
    }

    #[test]
    fn depth_ties_break_by_insertion_index() {
        let k = k64();
        let a = iso([0.0, 0.0, 2.0], 0.2, 0.5, [1.0, 0.0, 0.0]);
        let b = iso([0.01, 0.0, 2.0], 0.2, 0.5, [0.0, 0.0, 1.0]);
        let map = GaussianMap::from_gaussians(vec![a, b]);
        let out = render(&map, &Pose::identity(), &k, &Vector3::zeros());
        assert_eq!(out.splats.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1]);
        let again = render(&map, &Pose::identity(), &k, &Vector3::zeros());
        assert_eq!(out.image, again.image);
    }

    #[test]
    fn weights_are_conserved() {
        let k = k64();
        let map = GaussianMap::from_gaussians(
            (0..8)
                .map(|i| {
                    let t = i as f64;
                    let mut g = iso([0.1 * t - 0.4, 0.05 * t - 0.2, 2.0 + 0.1 * t], 0.15, 0.5, [0.5; 3]);
                    g.opacity_logit = logit(0.3 + 0.08 * t);
                    g
                })
                .collect(),
        );
        for s in compositing_weight_sums(&map, &Pose::identity(), &k) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
