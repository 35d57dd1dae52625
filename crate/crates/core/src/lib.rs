//! Walking/standing estimation for pedestrians from 2D pose keypoint tracks.
//!
//! Per-frame micro-motion features (normalized joint positions, inter-joint
//! distances, limb angles and their frame-to-frame differences) are embedded per
//! group, concatenated and fed to a GRU whose hidden state is classified at every
//! frame. Training, evaluation, streaming inference and a synthetic gait generator
//! are included.

pub mod cli;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod features;
pub mod linalg;
pub mod network;
pub mod skeleton;
pub mod synthgait;
pub mod training;

pub use error::{Error, Result};
