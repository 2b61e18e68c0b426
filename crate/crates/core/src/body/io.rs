//! Template file: a JSON document
//!
//! ```json
//! { "format": "mononerf-body-template", "version": 1,
//!   "vertices": [[x, y, z], ...], "faces": [[i, j, k], ...],
//!   "joints": [[x, y, z], ...], "parents": [-1, 0, ...],
//!   "weights": [[w_0, ..., w_{N-1}], ...] }
//! ```
//!
//! Units are meters. `parents[0]` must be -1; weight rows must be
//! non-negative and sum to 1 within 1e-9.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BodyError, BodyTemplate};
use crate::math::Vec3;

pub const TEMPLATE_FORMAT: &str = "mononerf-body-template";
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    format: String,
    version: u32,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    joints: Vec<[f64; 3]>,
    parents: Vec<i64>,
    weights: Vec<Vec<f64>>,
}

pub fn template_to_string(t: &BodyTemplate) -> String {
    let file = TemplateFile {
        format: TEMPLATE_FORMAT.into(),
        version: TEMPLATE_VERSION,
        vertices: t.vertices().iter().map(|v| v.to_array()).collect(),
        faces: t.faces().to_vec(),
        joints: t.joints().iter().map(|v| v.to_array()).collect(),
        parents: t
            .parents()
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect(),
        weights: t.weights().to_vec(),
    };
    serde_json::to_string(&file).expect("template serializes")
}

pub fn parse_template(text: &str) -> Result<BodyTemplate, BodyError> {
    let file: TemplateFile = serde_json::from_str(text)
        .map_err(|e| BodyError::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    if file.format != TEMPLATE_FORMAT {
        return Err(BodyError::Parse(format!(
            "field `format`: expected {TEMPLATE_FORMAT:?}, found {:?}",
            file.format
        )));
    }
    if file.version != TEMPLATE_VERSION {
        return Err(BodyError::Parse(format!(
            "field `version`: unsupported version {}",
            file.version
        )));
    }
    let parents = file
        .parents
        .iter()
        .enumerate()
        .map(|(j, &p)| match p {
            -1 => Ok(None),
            p if p >= 0 => Ok(Some(p as usize)),
            p => Err(BodyError::Parse(format!(
                "field `parents[{j}]`: invalid parent {p}"
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    BodyTemplate::new(
        file.vertices.into_iter().map(Vec3::from_array).collect(),
        file.faces,
        file.joints.into_iter().map(Vec3::from_array).collect(),
        parents,
        file.weights,
    )
}

pub fn save_template(t: &BodyTemplate, path: &Path) -> Result<(), BodyError> {
    std::fs::write(path, template_to_string(t))?;
    Ok(())
}

pub fn load_template(path: &Path) -> Result<BodyTemplate, BodyError> {
    parse_template(&std::fs::read_to_string(path)?)
}
