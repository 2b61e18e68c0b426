//! Generalizable radiance fields for articulated bodies from monocular video.

pub mod autodiff;
pub mod body;
pub mod deform;
pub mod encoder;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod imagebuf;
pub mod math;
pub mod model;
pub mod volume;
