//! Differentiable 2D Gaussian splat scenes: software rasterization,
//! object-centric semantic labeling, motion-basis tracking and a simulated
//! manipulation loop.

pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod manipulate;
pub mod math;
pub mod motion;
pub mod projection;
pub mod raster;
pub mod scene;
pub mod semantics;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use image::{GrayImage, Image, Mask, RgbImage};
pub use math::Quat;
pub use projection::{ProjectedSplat, Space};
pub use raster::{Channels, Overrides, Rasterizer, RenderConfig, RenderGrads, RenderTarget};
pub use scene::{Camera, Pose, Scene, SplatPrimitive};
pub use manipulate::{CentroidGrasp, GraspPose, GraspProvider, ManipulationConfig, Outcome, SimWorld};
pub use motion::{FitConfig, MotionField, MotionMode, Observations};
pub use semantics::{DetectionInput, DistillConfig, FeatureSet, SemanticTable};
pub use synth::{SynthOutput, SynthSpec};
