//! Articulated body: rest template, kinematic tree, skinning weights,
//! forward kinematics and linear blend skinning.

mod humanoid;
mod io;
mod template;

pub use humanoid::{build_humanoid, generate_humanoid, Humanoid, HumanoidConfig, SkeletonLayout};
pub use io::{load_template, parse_template, save_template, template_to_string};
pub use template::{BodyTemplate, PartTransforms, Pose};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("blend weight row {row} sums to {sum} (must be 1 ± 1e-9)")]
    WeightRowSum { row: usize, sum: f64 },
    #[error("blend weight row {row} has negative or non-finite entry {value}")]
    WeightEntry { row: usize, value: f64 },
    #[error("blend weights: expected {expected} rows of {joints} entries, row {row} has {found}")]
    WeightShape {
        expected: usize,
        joints: usize,
        row: usize,
        found: usize,
    },
    #[error("face {face} references vertex {index} but template has {vertices} vertices")]
    FaceIndex {
        face: usize,
        index: usize,
        vertices: usize,
    },
    #[error("joint hierarchy: {0}")]
    Hierarchy(String),
    #[error("template has no vertices or no joints")]
    Empty,
    #[error("pose has {found} joint rotations, template has {expected} joints")]
    JointCount { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("humanoid config: {0}")]
    Config(String),
    #[error("template file: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
