//! Analytic gradients of the compositing equation.
//!
//! The pass runs in two stages. Per pixel, compositing is replayed front to
//! back and then unwound back to front, producing gradients with respect to
//! each splat's screen-space quantities (mean, conic, opacity, color). Per
//! Gaussian, those are then chained through the EWA projection to world
//! parameters and to a left-multiplied twist on the camera pose.

use nalgebra::{Matrix2, Matrix3, Quaternion, Vector3, Vector6};
use rayon::prelude::*;

use super::{composite_pixel, CandidateGrid, RenderOutput, Splat2D, ROW_BLOCK};
use crate::gaussian::{Gaussian, GaussianMap, PARAMS_PER_GAUSSIAN};
use crate::geometry::{hat, Intrinsics, Pose};
use crate::image::Image;
use crate::parallel;

/// Gradient of a scalar loss with respect to one Gaussian's stored parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// With respect to the raw (unnormalized) quaternion `(w, x, y, z)`.
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn as_array(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let q = &self.rotation;
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            q.w,
            q.i,
            q.j,
            q.k,
            self.opacity_logit,
            self.color.x,
            self.color.y,
            self.color.z,
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.as_array().iter().all(|&v| v == 0.0)
    }
}

/// Gradients for every Gaussian of the map plus the camera pose twist
/// (`[ω; v]`, left perturbation `exp(ξ) ∘ pose`).
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradients {
    pub gaussians: Vec<GaussianGrad>,
    /// True for Gaussians that survived culling in this view.
    pub visible: Vec<bool>,
    pub pose: Vector6<f64>,
}

impl MapGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            gaussians: vec![GaussianGrad::default(); n],
            visible: vec![false; n],
            pose: Vector6::zeros(),
        }
    }

    /// Adds `other` scaled by `w` into `self`, OR-ing visibility.
    pub fn accumulate(&mut self, other: &MapGradients, w: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.position += b.position * w;
            a.log_scale += b.log_scale * w;
            a.rotation += b.rotation * w;
            a.opacity_logit += b.opacity_logit * w;
            a.color += b.color * w;
        }
        for (a, b) in self.visible.iter_mut().zip(&other.visible) {
            *a |= *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.iter().all(|v| v.is_finite())
            && self
                .gaussians
                .iter()
                .all(|g| g.as_array().iter().all(|v| v.is_finite()))
    }
}

/// Screen-space gradient accumulator for one splat:
/// `[mean.x, mean.y, conic00, conic01, conic11, opacity, r, g, b]`.
type ScreenGrad = [f64; 9];

/// Gradient of `Σ_pixels grad_image · render(...)` with respect to the map
/// and the pose. `forward` must be the output of [`super::render`] with the
/// same arguments.
pub fn render_backward(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    background: &Vector3<f64>,
    forward: &RenderOutput,
    grad_image: &Image,
) -> MapGradients {
    assert_eq!(grad_image.dims(), (k.width, k.height), "gradient image has wrong shape");
    let mut out = MapGradients::zeros(map.len());
    let splats: &[Splat2D] = &forward.splats;
    for s in splats {
        out.visible[s.index] = true;
    }
    if splats.is_empty() || grad_image.data().iter().all(|&v| v == 0.0) {
        return out;
    }

    let screen = screen_space_grads(splats, k, background, grad_image);

    let w = pose.rotation_matrix();
    let mut pose_grad = Vector6::zeros();
    for (s, sg) in splats.iter().zip(&screen) {
        if sg.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = map.get(s.index);
        let (grad, dpc, dcov_cam) = chain_to_world(g, s, &w, k, sg);
        out.gaussians[s.index] = grad;
        // Left twist: pc -> pc + ω × pc + v, Σc -> Σc + [ω]Σc - Σc[ω].
        let pc = &s.cam_point;
        let dw = pc.cross(&dpc);
        let a = s.cov_cam * dcov_cam;
        let skew = a - a.transpose();
        let mut drot = Vector3::zeros();
        for axis in 0..3 {
            let kx = hat(&Vector3::ith(axis, 1.0));
            drot[axis] = (skew * kx).trace();
        }
        let dw = dw + drot;
        pose_grad += Vector6::new(dw.x, dw.y, dw.z, dpc.x, dpc.y, dpc.z);
    }
    out.pose = pose_grad;
    out
}

fn screen_space_grads(
    splats: &[Splat2D],
    k: &Intrinsics,
    background: &Vector3<f64>,
    grad_image: &Image,
) -> Vec<ScreenGrad> {
    let grid = CandidateGrid::new(splats, k.width, k.height);
    let (w, h) = (k.width, k.height);
    let n = splats.len();

    let blocks: Vec<Vec<ScreenGrad>> = parallel::pool().install(|| {
        (0..h.div_ceil(ROW_BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![[0.0; 9]; n];
                let mut chain: Vec<(u32, f64, f64, bool, f64)> = Vec::new();
                for y in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(h) {
                    for x in 0..w {
                        let gp = grad_image.pixel(x, y);
                        if gp == Vector3::zeros() {
                            continue;
                        }
                        chain.clear();
                        composite_pixel(splats, grid.at(x, y), x, y, |pos, (alpha, falloff, _, clamped), t| {
                            chain.push((pos, alpha, falloff, clamped, t));
                        });
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        // Color seen behind the current splat, normalized by
                        // the transmittance just past it.
                        let mut behind = *background;
                        for &(pos, alpha, falloff, clamped, t) in chain.iter().rev() {
                            let s = &splats[pos as usize];
                            let a = &mut acc[pos as usize];
                            let wgt = alpha * t;
                            a[6] += gp.x * wgt;
                            a[7] += gp.y * wgt;
                            a[8] += gp.z * wgt;
                            let dalpha = t * gp.dot(&(s.color - behind));
                            behind = s.color * alpha + behind * (1.0 - alpha);
                            if clamped {
                                continue;
                            }
                            a[5] += dalpha * falloff;
                            let dpower = dalpha * s.opacity * falloff;
                            let dx = px - s.mean2d.x;
                            let dy = py - s.mean2d.y;
                            let q = &s.conic;
                            a[0] += dpower * (q[(0, 0)] * dx + q[(0, 1)] * dy);
                            a[1] += dpower * (q[(0, 1)] * dx + q[(1, 1)] * dy);
                            a[2] += -0.5 * dx * dx * dpower;
                            a[3] += -dx * dy * dpower;
                            a[4] += -0.5 * dy * dy * dpower;
                        }
                    }
                }
                acc
            })
            .collect()
    });

    // Fixed-order reduction keeps results independent of scheduling.
    let mut total = vec![[0.0; 9]; n];
    for block in blocks {
        for (t, b) in total.iter_mut().zip(block) {
            for i in 0..9 {
                t[i] += b[i];
            }
        }
    }
    total
}

/// d R(q) / d q for a unit quaternion `(w, x, y, z)`, one matrix per component.
fn rotation_partials(q: &Quaternion<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Chains one splat's screen gradients to its Gaussian's parameters.
/// Also returns the gradients with respect to the camera-frame mean and the
/// camera-frame covariance, which feed the pose twist.
fn chain_to_world(
    g: &Gaussian,
    s: &Splat2D,
    w: &Matrix3<f64>,
    k: &Intrinsics,
    sg: &ScreenGrad,
) -> (GaussianGrad, Vector3<f64>, Matrix3<f64>) {
    let pc = &s.cam_point;
    let (iz, iz2) = (1.0 / pc.z, 1.0 / (pc.z * pc.z));
    let iz3 = iz2 * iz;

    // Conic -> screen covariance. The off-diagonal conic entry appears twice
    // in the quadratic form, hence the split.
    let dconic = Matrix2::new(sg[2], 0.5 * sg[3], 0.5 * sg[3], sg[4]);
    let dcov2d = -(s.conic * dconic * s.conic);

    // Screen covariance -> camera covariance and Jacobian.
    let jac = &s.jacobian;
    let dcov_cam = jac.transpose() * dcov2d * jac;
    let djac = dcov2d * jac * s.cov_cam * 2.0;

    // Camera point from the mean and from the Jacobian.
    let mut dpc = Vector3::new(
        sg[0] * k.fx * iz,
        sg[1] * k.fy * iz,
        -sg[0] * k.fx * pc.x * iz2 - sg[1] * k.fy * pc.y * iz2,
    );
    dpc.x += djac[(0, 2)] * (-k.fx * iz2);
    dpc.y += djac[(1, 2)] * (-k.fy * iz2);
    dpc.z += djac[(0, 0)] * (-k.fx * iz2)
        + djac[(0, 2)] * (2.0 * k.fx * pc.x * iz3)
        + djac[(1, 1)] * (-k.fy * iz2)
        + djac[(1, 2)] * (2.0 * k.fy * pc.y * iz3);

    // World covariance Σ = M Mᵀ with M = R S.
    let dsigma = w.transpose() * dcov_cam * w;
    let unit = g.unit_rotation();
    let r = unit.to_rotation_matrix().into_inner();
    let scale = g.scale();
    let m = r * Matrix3::from_diagonal(&scale);
    let dm = dsigma * m * 2.0;
    let rt_dm = r.transpose() * dm;
    let log_scale = Vector3::new(
        rt_dm[(0, 0)] * scale.x,
        rt_dm[(1, 1)] * scale.y,
        rt_dm[(2, 2)] * scale.z,
    );
    let dr = dm * Matrix3::from_diagonal(&scale);
    let qn = unit.into_inner();
    let partials = rotation_partials(&qn);
    let dqn = [0, 1, 2, 3].map(|i| partials[i].component_mul(&dr).sum());
    let dqn = Quaternion::new(dqn[0], dqn[1], dqn[2], dqn[3]);
    // Through the normalization q̂ = q / |q|.
    let norm = g.rotation.norm();
    let radial = qn.coords.dot(&dqn.coords);
    let rotation = Quaternion::from((dqn.coords - qn.coords * radial) / norm);

    let opacity = s.opacity;
    let grad = GaussianGrad {
        position: w.transpose() * dpc,
        log_scale,
        rotation,
        opacity_logit: sg[5] * opacity * (1.0 - opacity),
        color: Vector3::new(sg[6], sg[7], sg[8]),
    };
    (grad, dpc, dcov_cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render;

    fn k32() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let k = k32();
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, Vector3::new(0.3, 0.6, 0.9));
        let map = GaussianMap::from_gaussians(vec![g]);
        let fwd = render(&map, &Pose::identity(), &k, &Vector3::zeros());
        let grads = render_backward(&map, &Pose::identity(), &k, &Vector3::zeros(), &fwd, &Image::zeros(32, 32));
        assert!(grads.gaussians[0].is_zero());
        assert_eq!(grads.pose, Vector6::zeros());
        assert!(grads.visible[0]);
    }

    #[test]
    fn single_splat_color_gradient_is_alpha_sum() {
        let k = k32();
        let g = Gaussian::isotropic(Vector3::new(0.05, -0.02, 2.0), 0.15, 0.7, Vector3::new(0.3, 0.6, 0.9));
        let map = GaussianMap::from_gaussians(vec![g]);
        let bg = Vector3::new(0.1, 0.1, 0.1);
        let fwd = render(&map, &Pose::identity(), &k, &bg);
        let upstream = Image::from_fn(32, 32, |x, y| [1.0, (x as f64) / 32.0, -(y as f64) / 32.0]);
        let grads = render_backward(&map, &Pose::identity(), &k, &bg, &fwd, &upstream);
        let s = &fwd.splats[0];
        let mut expect = Vector3::zeros();
        for y in 0..32 {
            for x in 0..32 {
                let a = s.alpha_at(x as f64 + 0.5, y as f64 + 0.5).map_or(0.0, |a| a.0);
                expect += upstream.pixel(x, y) * a;
            }
        }
        assert!((grads.gaussians[0].color - expect).amax() < 1e-12);
    }

    #[test]
    fn culled_gaussian_gets_zero_gradient() {
        let k = k32();
        let seen = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, Vector3::repeat(0.5));
        let behind = Gaussian::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.1, 0.5, Vector3::repeat(0.5));
        let map = GaussianMap::from_gaussians(vec![seen, behind]);
        let fwd = render(&map, &Pose::identity(), &k, &Vector3::zeros());
        let grads = render_backward(&map, &Pose::identity(), &k, &Vector3::zeros(), &fwd, &Image::filled(32, 32, [1.0; 3]));
        assert!(!grads.gaussians[0].is_zero());
        assert!(grads.gaussians[1].is_zero());
        assert!(!grads.visible[1]);
    }

    #[test]
    fn clamped_alpha_has_no_opacity_gradient() {
        let k = k32();
        let mut g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 50.0, 0.5, Vector3::repeat(0.5));
        g.opacity_logit = 40.0;
        let map = GaussianMap::from_gaussians(vec![g]);
        let fwd = render(&map, &Pose::identity(), &k, &Vector3::zeros());
        let grads = render_backward(&map, &Pose::identity(), &k, &Vector3::zeros(), &fwd, &Image::filled(32, 32, [1.0; 3]));
        assert_eq!(grads.gaussians[0].opacity_logit, 0.0);
        assert_eq!(grads.gaussians[0].position, Vector3::zeros());
    }
}
