//! Z-buffer rasterization and vertex visibility.

use super::camera::{Camera, Projection};
use super::mesh::{incident_faces, ray_triangle};
use crate::autodiff::MIN_DEPTH;
use crate::exec::{map_range, Parallelism};
use crate::math::Vec3;

pub const NO_FACE: usize = usize::MAX;

/// Per-pixel nearest surface: depth, face index and perspective-correct
/// barycentric coordinates.
#[derive(Clone, Debug)]
pub struct ZBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub face: Vec<usize>,
    pub bary: Vec<[f64; 3]>,
}

impl ZBuffer {
    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.face[y * self.width + x] != NO_FACE
    }
}

/// Rasterizes at the camera's own resolution, sampling at pixel centers.
/// Triangles with any vertex at or behind the camera plane are skipped.
pub fn rasterize(vertices: &[Vec3], faces: &[[usize; 3]], camera: &Camera) -> ZBuffer {
    let (w, h) = (camera.width, camera.height);
    let mut zb = ZBuffer {
        width: w,
        height: h,
        depth: vec![f64::INFINITY; w * h],
        face: vec![NO_FACE; w * h],
        bary: vec![[0.0; 3]; w * h],
    };
    let proj: Vec<_> = vertices.iter().map(|&v| camera.project(v)).collect();
    for (fi, f) in faces.iter().enumerate() {
        let p = [proj[f[0]], proj[f[1]], proj[f[2]]];
        if p.iter().any(|q| !q.projectable) {
            continue;
        }
        let area = edge(p[0].u, p[0].v, p[1].u, p[1].v, p[2].u, p[2].v);
        if area.abs() < 1e-18 {
            continue;
        }
        let umin = p.iter().map(|q| q.u).fold(f64::INFINITY, f64::min);
        let umax = p.iter().map(|q| q.u).fold(f64::NEG_INFINITY, f64::max);
        let vmin = p.iter().map(|q| q.v).fold(f64::INFINITY, f64::min);
        let vmax = p.iter().map(|q| q.v).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (umin - 0.5).ceil().max(0.0) as usize;
        let y0 = (vmin - 0.5).ceil().max(0.0) as usize;
        let x1 = ((umax - 0.5).floor()).min(w as f64 - 1.0);
        let y1 = ((vmax - 0.5).floor()).min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for y in y0..=y1 {
            let py = y as f64 + 0.5;
            for x in x0..=x1 {
                let px = x as f64 + 0.5;
                let l0 = edge(p[1].u, p[1].v, p[2].u, p[2].v, px, py) / area;
                let l1 = edge(p[2].u, p[2].v, p[0].u, p[0].v, px, py) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let inv = [l0 / p[0].depth, l1 / p[1].depth, l2 / p[2].depth];
                let s = inv[0] + inv[1] + inv[2];
                let z = 1.0 / s;
                let idx = y * w + x;
                if z < zb.depth[idx] {
                    zb.depth[idx] = z;
                    zb.face[idx] = fi;
                    zb.bary[idx] = [inv[0] / s, inv[1] / s, inv[2] / s];
                }
            }
        }
    }
    zb
}

/// Perspective-correct depth of face `f` along the ray through `(u, v)`, if
/// the face covers that point.
fn face_depth_at(proj: &[Projection], f: [usize; 3], u: f64, v: f64) -> Option<f64> {
    let p = [proj[f[0]], proj[f[1]], proj[f[2]]];
    let area = edge(p[0].u, p[0].v, p[1].u, p[1].v, p[2].u, p[2].v);
    if area.abs() < 1e-18 {
        return None;
    }
    let l0 = edge(p[1].u, p[1].v, p[2].u, p[2].v, u, v) / area;
    let l1 = edge(p[2].u, p[2].v, p[0].u, p[0].v, u, v) / area;
    let l2 = 1.0 - l0 - l1;
    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
        return None;
    }
    Some(1.0 / (l0 / p[0].depth + l1 / p[1].depth + l2 / p[2].depth))
}

fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityConfig {
    /// Longest side of the visibility raster in pixels; `None` uses the
    /// camera's own image size.
    pub resolution: Option<usize>,
    /// Depth bias as a fraction of the mesh bounding-box diagonal.
    pub bias_scale: f64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        VisibilityConfig {
            resolution: Some(256),
            bias_scale: 1e-3,
        }
    }
}

/// Per-pixel lists of the faces whose screen-space bounding box touches the
/// pixel (a conservative fragment list).
struct FaceBins {
    width: usize,
    height: usize,
    cells: Vec<Vec<u32>>,
}

impl FaceBins {
    fn new(proj: &[Projection], faces: &[[usize; 3]], width: usize, height: usize) -> Self {
        let mut cells = vec![Vec::new(); width * height];
        for (fi, f) in faces.iter().enumerate() {
            let p = [proj[f[0]], proj[f[1]], proj[f[2]]];
            if p.iter().any(|q| !q.projectable) {
                continue;
            }
            let umin = p
                .iter()
                .map(|q| q.u)
                .fold(f64::INFINITY, f64::min)
                .floor()
                .max(0.0);
            let vmin = p
                .iter()
                .map(|q| q.v)
                .fold(f64::INFINITY, f64::min)
                .floor()
                .max(0.0);
            let umax = p
                .iter()
                .map(|q| q.u)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min(width as f64 - 1.0);
            let vmax = p
                .iter()
                .map(|q| q.v)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min(height as f64 - 1.0);
            if umax < umin || vmax < vmin {
                continue;
            }
            for y in vmin as usize..=vmax as usize {
                for x in umin as usize..=umax as usize {
                    cells[y * width + x].push(fi as u32);
                }
            }
        }
        FaceBins {
            width,
            height,
            cells,
        }
    }
}

/// Per-vertex visibility by depth testing.
///
/// Faces are rasterized into per-pixel fragment lists at the configured
/// resolution. A vertex is visible when it projects in front of the camera and
/// inside the image, and the nearest surface at its exact (sub-pixel)
/// projection, among the faces not incident to it, is no more than the bias
/// in front of it.
pub fn rasterize_visibility(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    camera: &Camera,
    cfg: &VisibilityConfig,
) -> Vec<bool> {
    let cam = match cfg.resolution {
        Some(r) => {
            let s = r as f64 / camera.width.max(camera.height) as f64;
            let w = ((camera.width as f64 * s).round() as usize).max(1);
            let h = ((camera.height as f64 * s).round() as usize).max(1);
            camera.resized(w, h)
        }
        None => camera.clone(),
    };
    let bias = cfg.bias_scale * scene_scale(vertices);
    let inc = incident_faces(vertices.len(), faces);
    let proj: Vec<_> = vertices.iter().map(|&v| cam.project(v)).collect();
    let bins = FaceBins::new(&proj, faces, cam.width, cam.height);
    proj.iter()
        .enumerate()
        .map(|(i, p)| {
            if !p.projectable || !cam.in_image(p.u, p.v) {
                return false;
            }
            let cell = &bins.cells[(p.v as usize).min(bins.height - 1) * bins.width
                + (p.u as usize).min(bins.width - 1)];
            let nearest = cell
                .iter()
                .map(|&fi| fi as usize)
                .filter(|fi| !inc[i].contains(fi))
                .filter_map(|fi| face_depth_at(&proj, faces[fi], p.u, p.v))
                .fold(f64::INFINITY, f64::min);
            p.depth <= nearest + bias
        })
        .collect()
}

pub(crate) fn scene_scale(vertices: &[Vec3]) -> f64 {
    let (lo, hi) = crate::math::bounds(vertices);
    (hi - lo).norm()
}

/// Reference visibility: a vertex is visible iff it is in front of the camera,
/// inside the image, and the segment from the camera center to it crosses no
/// face other than those incident to it.
pub fn raycast_visibility(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    camera: &Camera,
    par: Parallelism,
) -> Vec<bool> {
    let inc = incident_faces(vertices.len(), faces);
    let o = camera.center();
    map_range(vertices.len(), par, |i| {
        let v = vertices[i];
        let p = camera.project(v);
        if !p.projectable || !camera.in_image(p.u, p.v) || p.depth <= MIN_DEPTH {
            return false;
        }
        let d = v - o;
        !faces.iter().enumerate().any(|(k, f)| {
            !inc[i].contains(&k)
                && ray_triangle(o, d, vertices[f[0]], vertices[f[1]], vertices[f[2]])
                    .is_some_and(|t| t > 1e-9 && t < 1.0 - 1e-9)
        })
    })
}
