//! Voxel grids of unsigned distance to a triangle mesh.

use serde::{Deserialize, Serialize};

use super::mesh::point_triangle_distance;
use super::GeometryError;
use crate::exec::{map_range, Parallelism};
use crate::math::Vec3;

/// Unsigned distance sampled at voxel centers `origin + (i + 0.5) * voxel_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// x-fastest: index `(k * dims[1] + j) * dims[0] + i`.
    pub values: Vec<f64>,
}

impl DistanceGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Upper corner of the grid's box.
    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                self.dims[0] as f64,
                self.dims[1] as f64,
                self.dims[2] as f64,
            ) * self.voxel_size
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= hi[a])
    }

    /// Trilinear interpolation between voxel centers, clamped to the grid.
    /// Returns the distance and whether `p` lay outside the grid box.
    pub fn query(&self, p: Vec3) -> (f64, bool) {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut fr = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let mut g =
                ((p[a] - self.origin[a]) / self.voxel_size - 0.5).clamp(0.0, (n - 1) as f64);
            // absorb round-off so voxel centers return their stored value
            if (g - g.round()).abs() < 1e-9 {
                g = g.round();
            }
            let lo = (g.floor() as usize).min(n - 1);
            i0[a] = lo;
            i1[a] = (lo + 1).min(n - 1);
            fr[a] = g - lo as f64;
        }
        let mut d = 0.0;
        for c in 0..8 {
            let pick = |a: usize| {
                if c >> a & 1 == 1 {
                    (i1[a], fr[a])
                } else {
                    (i0[a], 1.0 - fr[a])
                }
            };
            let ((x, wx), (y, wy), (z, wz)) = (pick(0), pick(1), pick(2));
            let w = wx * wy * wz;
            if w != 0.0 {
                d += w * self.value(x, y, z);
            }
        }
        (d, !self.contains(p))
    }
}

/// Builds a grid covering `[lo, hi]` with cubic voxels of `voxel_size`, holding
/// the exact distance from each voxel center to the nearest triangle.
///
/// The grid is cut into blocks of voxels. A block keeps only the triangles
/// that can be nearest to one of its voxel centers: with `c` the block's
/// center and `r` the radius of its voxel centers around `c`, a triangle `T`
/// stays iff `d(c, T) <= min_T' d(c, T') + 2r`. Blocks split in half and
/// repeat the cull down to single voxels.
pub fn build_distance_grid(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    lo: Vec3,
    hi: Vec3,
    voxel_size: f64,
    par: Parallelism,
) -> Result<DistanceGrid, GeometryError> {
    if faces.is_empty() || vertices.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(GeometryError::Grid(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if !(0..3).all(|a| hi[a] > lo[a]) {
        return Err(GeometryError::Grid("empty bounding box".into()));
    }
    let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / voxel_size).ceil() as usize).max(1));
    let mut grid = DistanceGrid {
        origin: lo,
        voxel_size,
        dims,
        values: vec![0.0; dims[0] * dims[1] * dims[2]],
    };
    let nb = dims.map(|d| d.div_ceil(BLOCK));
    let all: Vec<u32> = (0..faces.len() as u32).collect();
    let tris: Vec<[Vec3; 3]> = faces
        .iter()
        .map(|f| [vertices[f[0]], vertices[f[1]], vertices[f[2]]])
        .collect();
    let blocks = map_range(nb[0] * nb[1] * nb[2], par, |b| {
        let (bi, bj, bk) = (b % nb[0], b / nb[0] % nb[1], b / (nb[0] * nb[1]));
        let start = [bi * BLOCK, bj * BLOCK, bk * BLOCK];
        let end = [0, 1, 2].map(|a| (start[a] + BLOCK).min(dims[a]));
        let mut out = Vec::new();
        solve(&grid, &tris, start, end, &all, &mut out);
        out
    });
    for (idx, d) in blocks.into_iter().flatten() {
        grid.values[idx] = d;
    }
    Ok(grid)
}

const BLOCK: usize = 8;

fn tri_distance(p: Vec3, t: &[Vec3; 3]) -> f64 {
    point_triangle_distance(p, t[0], t[1], t[2])
}

fn solve(
    grid: &DistanceGrid,
    tris: &[[Vec3; 3]],
    start: [usize; 3],
    end: [usize; 3],
    cands: &[u32],
    out: &mut Vec<(usize, f64)>,
) {
    let n = [0, 1, 2].map(|a| end[a] - start[a]);
    if n == [1, 1, 1] {
        let p = grid.center(start[0], start[1], start[2]);
        let d = cands
            .iter()
            .map(|&t| tri_distance(p, &tris[t as usize]))
            .fold(f64::INFINITY, f64::min);
        out.push((grid.index(start[0], start[1], start[2]), d));
        return;
    }
    let c = (grid.center(start[0], start[1], start[2])
        + grid.center(end[0] - 1, end[1] - 1, end[2] - 1))
        * 0.5;
    let r = 0.5
        * grid.voxel_size
        * Vec3::new((n[0] - 1) as f64, (n[1] - 1) as f64, (n[2] - 1) as f64).norm();
    let dists: Vec<f64> = cands
        .iter()
        .map(|&t| tri_distance(c, &tris[t as usize]))
        .collect();
    let dmin = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = dmin + 2.0 * r + 1e-12 * (1.0 + dmin);
    let kept: Vec<u32> = cands
        .iter()
        .zip(&dists)
        .filter(|(_, &d)| d <= cut)
        .map(|(&t, _)| t)
        .collect();
    let axis = (0..3).max_by_key(|&a| n[a]).unwrap();
    let mid = start[axis] + n[axis] / 2;
    let mut end_a = end;
    end_a[axis] = mid;
    let mut start_b = start;
    start_b[axis] = mid;
    solve(grid, tris, start, end_a, &kept, out);
    solve(grid, tris, start_b, end, &kept, out);
}
