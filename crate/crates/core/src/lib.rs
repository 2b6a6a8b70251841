//! Online dense mapping with 3D Gaussian splats.
//!
//! The library consumes posed frames and sparse tracked points from an
//! external tracker and grows a Gaussian map that renders the observed
//! images. The main pieces:
//!
//! * [`render`]: differentiable front-to-back splat rasterizer.
//! * [`densify`]: seeding of new Gaussians from tracked points and from
//!   poorly reconstructed pixels, filtered through [`mohv`].
//! * [`consistency`]: keyframe management and joint map/pose optimization.
//! * [`mapper`]: the per-frame driver tying them together.

pub mod consistency;
pub mod densify;
pub mod error;
pub mod frame;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod mapper;
pub mod metrics;
pub mod mohv;
pub mod optim;
pub mod parallel;
pub mod render;

pub use error::{Error, Result};
pub use frame::{FrameInput, TrackedPoint};
pub use gaussian::{Gaussian, GaussianMap};
pub use geometry::{Intrinsics, Pose};
pub use image::Image;
pub use mapper::{Mapper, MapperConfig};
