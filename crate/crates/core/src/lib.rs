//! Whole-body collision avoidance with distributed proximity sensing.
//!
//! A simplified humanoid stands in a dodgeball arena while balls are thrown at
//! it. Sensors on its upper body report nearby balls through one of several
//! signal functions; a small actor-critic trained with PPO learns to keep the
//! robot upright and untouched. The [`ablation`] module sweeps sensor
//! geometry, signal type and range over seeded runs.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod arena;
pub mod config;
pub mod error;
pub mod geom;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod robot;
pub mod sensors;

pub use error::{Error, Result};
pub use geom::{CapsuleShape, Pose, RayShape, Rotation, SphereShape, Vec3};
pub use robot::{RobotModel, RobotState, TorqueCommand};
pub use sensors::{Geometry, Reduction, SensorNet, SensorNetConfig, SignalFn};
