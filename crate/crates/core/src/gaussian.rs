//! The Gaussian primitive and the growing scene map.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::optim::AdamSlot;

/// Number of scalar parameters per Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Offsets of each parameter group inside the flat parameter vector.
pub mod layout {
    pub const POSITION: std::ops::Range<usize> = 0..3;
    pub const LOG_SCALE: std::ops::Range<usize> = 3..6;
    pub const ROTATION: std::ops::Range<usize> = 6..10;
    pub const OPACITY: usize = 10;
    pub const COLOR: std::ops::Range<usize> = 11..14;
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian.
///
/// Scale and opacity are stored in unconstrained form (log and logit). The
/// rotation quaternion is stored raw and normalized on use, so an optimizer
/// may step it freely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    /// Isotropic Gaussian with standard deviation `scale` on every axis.
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Quaternion::identity(),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
    }

    /// World-space covariance `R S² Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.unit_rotation().to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&self.scale().map(|s| s * s));
        r * s2 * r.transpose()
    }

    pub fn params(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
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

    pub fn set_params(&mut self, p: &[f64; PARAMS_PER_GAUSSIAN]) {
        self.position = Vector3::new(p[0], p[1], p[2]);
        self.log_scale = Vector3::new(p[3], p[4], p[5]);
        self.rotation = Quaternion::new(p[6], p[7], p[8], p[9]);
        self.opacity_logit = p[10];
        self.color = Vector3::new(p[11], p[12], p[13]);
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

/// The scene: Gaussians plus one optimizer slot per Gaussian.
#[derive(Debug, Clone, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    moments: Vec<AdamSlot<PARAMS_PER_GAUSSIAN>>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian>) -> Self {
        let mut map = Self::new();
        map.insert_gaussians(gaussians);
        map
    }

    /// Appends `batch` with zeroed optimizer state and returns the new count.
    pub fn insert_gaussians(&mut self, batch: impl IntoIterator<Item = Gaussian>) -> usize {
        for g in batch {
            self.gaussians.push(g);
            self.moments.push(AdamSlot::default());
        }
        self.gaussians.len()
    }

    /// Removes every Gaussian for which `drop` returns true and returns how
    /// many were removed. Relative order of survivors is preserved.
    pub fn prune(&mut self, mut drop: impl FnMut(&Gaussian) -> bool) -> usize {
        let before = self.gaussians.len();
        let keep: Vec<bool> = self.gaussians.iter().map(|g| !drop(g)).collect();
        let mut flags = keep.iter();
        self.gaussians.retain(|_| *flags.next().unwrap());
        let mut flags = keep.iter();
        self.moments.retain(|_| *flags.next().unwrap());
        before - self.gaussians.len()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn get(&self, i: usize) -> &Gaussian {
        &self.gaussians[i]
    }

    /// Simultaneous mutable access to Gaussians and their optimizer slots.
    pub fn parts_mut(&mut self) -> (&mut [Gaussian], &mut [AdamSlot<PARAMS_PER_GAUSSIAN>]) {
        (&mut self.gaussians, &mut self.moments)
    }

    pub fn moments(&self) -> &[AdamSlot<PARAMS_PER_GAUSSIAN>] {
        &self.moments
    }
}
