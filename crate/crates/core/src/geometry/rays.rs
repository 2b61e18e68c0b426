use serde::{Deserialize, Serialize};

use super::camera::Camera;
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    /// Integer pixel `(column, row)`; the ray passes through its center.
    pub pixel: (usize, usize),
    pub time_index: usize,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// One ray per pixel through the pixel center.
///
/// # Panics
/// If a pixel lies outside the image.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)], time_index: usize) -> Vec<Ray> {
    let origin = camera.center();
    let rt = camera.rotation.transpose();
    pixels
        .iter()
        .map(|&(x, y)| {
            assert!(
                x < camera.width && y < camera.height,
                "pixel ({x}, {y}) outside {}x{} image",
                camera.width,
                camera.height
            );
            let d = Vec3::new(
                (x as f64 + 0.5 - camera.cx) / camera.fx,
                (y as f64 + 0.5 - camera.cy) / camera.fy,
                1.0,
            );
            Ray {
                origin,
                direction: rt.mul_vec(d).normalized(),
                pixel: (x, y),
                time_index,
            }
        })
        .collect()
}

/// Intersection `[t0, t1]` of a ray with an axis-aligned box, clipped to `t >= 0`.
pub fn ray_box(ray: &Ray, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0: f64 = 0.0;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.direction[a]);
        if d.abs() < 1e-300 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}
