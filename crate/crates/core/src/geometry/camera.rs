//! Pinhole cameras (OpenCV convention: +z forward, +y down, pixel `(i, j)`
//! covers `[i, i+1) x [j, j+1)` with its center at `(i + 0.5, j + 0.5)`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::autodiff::{Pinhole, MIN_DEPTH};
use crate::math::{Mat3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World to camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub camera_id: usize,
}

/// Result of projecting one point. `projectable` is false at or behind the
/// camera plane, in which case `u`, `v` are meaningless.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub projectable: bool,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
        camera_id: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            camera_id,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::Camera(format!(
                "focal lengths must be positive, got {} {}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.translation.is_finite()) {
            return Err(GeometryError::Camera(
                "non-finite principal point or translation".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::Camera("image size must be non-zero".into()));
        }
        let err = self.rotation.orthonormality_error();
        if err > 1e-9 || (self.rotation.det() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::Camera(format!(
                "rotation is not a proper rotation (orthonormality error {err:e}, det {})",
                self.rotation.det()
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up.
    /// Field of view is horizontal, in degrees.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_deg: f64,
        width: usize,
        height: usize,
        camera_id: usize,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalized();
        let x = z.cross(up);
        if !(x.norm() > 1e-9) {
            return Err(GeometryError::Camera(
                "look_at: up is parallel to the view direction".into(),
            ));
        }
        let x = x.normalized();
        let y = z.cross(x);
        let rotation = Mat3::from_rows(x, y, z);
        let translation = -rotation.mul_vec(eye);
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Camera::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
            camera_id,
        )
    }

    pub fn center(&self) -> Vec3 {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn to_world(&self, q: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(q - self.translation)
    }

    pub fn project(&self, p: Vec3) -> Projection {
        let q = self.to_camera(p);
        if q.z <= MIN_DEPTH {
            return Projection {
                u: 0.0,
                v: 0.0,
                depth: q.z,
                projectable: false,
            };
        }
        Projection {
            u: self.fx * q.x / q.z + self.cx,
            v: self.fy * q.y / q.z + self.cy,
            depth: q.z,
            projectable: true,
        }
    }

    /// Inverse of [`Camera::project`] for a projectable point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        self.to_world(Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Same camera with the image resampled to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }

    pub fn pinhole(&self) -> Pinhole {
        Pinhole {
            rot: self.rotation.flat(),
            trans: self.translation.to_array(),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }
}

/// One record of a camera file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub frame: usize,
    pub camera_id: usize,
    pub width: usize,
    pub height: usize,
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    /// World to camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(frame: usize, c: &Camera) -> Self {
        CameraRecord {
            frame,
            camera_id: c.camera_id,
            width: c.width,
            height: c.height,
            intrinsics: [c.fx, c.fy, c.cx, c.cy],
            rotation: c.rotation.0,
            translation: c.translation.to_array(),
        }
    }

    pub fn camera(&self) -> Result<Camera, GeometryError> {
        let [fx, fy, cx, cy] = self.intrinsics;
        Camera::new(
            fx,
            fy,
            cx,
            cy,
            Mat3(self.rotation),
            Vec3::from_array(self.translation),
            self.width,
            self.height,
            self.camera_id,
        )
        .map_err(|e| GeometryError::Camera(format!("frame {}: {e}", self.frame)))
    }
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    #[serde(default)]
    frames: Vec<CameraRecord>,
}

/// Camera file: TOML with one `[[frames]]` table per frame.
pub fn cameras_to_string(records: &[CameraRecord]) -> String {
    toml::to_string(&CameraFile {
        frames: records.to_vec(),
    })
    .expect("camera records serialize")
}

pub fn parse_cameras(text: &str) -> Result<Vec<CameraRecord>, GeometryError> {
    let file: CameraFile = toml::from_str(text).map_err(|e| GeometryError::Parse(e.to_string()))?;
    for r in &file.frames {
        r.camera()?;
    }
    Ok(file.frames)
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraRecord>, GeometryError> {
    parse_cameras(&std::fs::read_to_string(path)?)
}

pub fn save_cameras(path: &Path, records: &[CameraRecord]) -> Result<(), GeometryError> {
    std::fs::write(path, cameras_to_string(records))?;
    Ok(())
}
