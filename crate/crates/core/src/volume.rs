//! Sparse feature volume: visibility-weighted vertex features, voxel
//! scattering, sparse convolutional diffusion and trilinear queries.

use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Csr, ParamId, ParamStore, Rulebook, Tape, Tensor, Var};
use crate::encoder::FeatureMap;
use crate::geometry::Camera;
use crate::math::Vec3;

/// Per-vertex frame weights of the visibility-weighted mean: `b_i / sum b` when
/// the vertex is seen at least once, else `1 / T` and the vertex is flagged.
/// `visibility[t][v]` is frame `t`'s visibility of vertex `v`.
pub fn visibility_weights(visibility: &[Vec<bool>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let t = visibility.len();
    assert!(t > 0, "visibility_weights: need at least one frame");
    let nv = visibility[0].len();
    let mut weights = vec![vec![0.0; t]; nv];
    let mut never = vec![false; nv];
    for v in 0..nv {
        let seen = visibility.iter().filter(|f| f[v]).count();
        if seen == 0 {
            never[v] = true;
            weights[v].iter_mut().for_each(|w| *w = 1.0 / t as f64);
        } else {
            for (i, f) in visibility.iter().enumerate() {
                if f[v] {
                    weights[v][i] = 1.0 / seen as f64;
                }
            }
        }
    }
    (weights, never)
}

/// Visibility-weighted mean of pixel-aligned features per vertex over the
/// input frames. Image `t` of `fmap` belongs to `cameras[t]` and
/// `posed[t]`. Returns `[V, C_f]` and the never-visible flags.
pub fn aggregate_vertex_features(
    tape: &Tape,
    fmap: &FeatureMap,
    cameras: &[Camera],
    posed: &[Vec<Vec3>],
    visibility: &[Vec<bool>],
) -> (Var, Vec<bool>) {
    let t = cameras.len();
    assert!(
        t > 0 && posed.len() == t && visibility.len() == t && fmap.images == t,
        "aggregate: frame count mismatch"
    );
    let nv = posed[0].len();
    let mut uv = Vec::with_capacity(2 * nv * t);
    let mut batch = Vec::with_capacity(nv * t);
    let mut valid = Vec::with_capacity(nv * t);
    for (i, (cam, verts)) in cameras.iter().zip(posed).enumerate() {
        for &p in verts {
            let q = cam.project(p);
            uv.extend([q.u, q.v]);
            batch.push(i);
            valid.push(q.projectable);
        }
    }
    let uv = tape.constant(Tensor::matrix(nv * t, 2, uv));
    let (samples, _) = fmap.sample(tape, uv, &batch, &valid);
    let (weights, never) = visibility_weights(visibility);
    let rows: Vec<Vec<(usize, f64)>> = weights
        .iter()
        .enumerate()
        .map(|(v, w)| {
            w.iter()
                .enumerate()
                .filter(|(_, &x)| x > 0.0)
                .map(|(i, &x)| (i * nv + v, x))
                .collect()
        })
        .collect();
    (
        tape.spmm(Rc::new(Csr::from_rows(nv * t, &rows)), samples),
        never,
    )
}

/// Axis-aligned voxel lattice: voxel `(i, j, k)` is centered at
/// `origin + (idx + 0.5) * voxel_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelLattice {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl VoxelLattice {
    /// Lattice covering `[lo, hi]`.
    pub fn covering(lo: Vec3, hi: Vec3, voxel_size: f64) -> Self {
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / voxel_size).ceil() as usize).max(1));
        VoxelLattice {
            origin: lo,
            voxel_size,
            dims,
        }
    }

    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let g = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if g < 0.0 || g >= self.dims[a] as f64 {
                return None;
            }
            c[a] = g as usize;
        }
        Some(c)
    }

    pub fn center(&self, c: [usize; 3]) -> Vec3 {
        self.origin
            + Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * self.voxel_size
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| {
            p[a] >= self.origin[a] && p[a] <= self.origin[a] + self.dims[a] as f64 * self.voxel_size
        })
    }

    /// Lattice with voxels twice as large (same origin).
    pub fn coarser(&self) -> Self {
        VoxelLattice {
            origin: self.origin,
            voxel_size: 2.0 * self.voxel_size,
            dims: self.dims.map(|d| d.div_ceil(2)),
        }
    }
}

/// Occupied voxels of one lattice with a feature row per voxel.
#[derive(Clone, Debug)]
pub struct SparseLevel {
    pub lattice: VoxelLattice,
    /// Sorted, unique.
    pub coords: Vec<[usize; 3]>,
    pub index: HashMap<[usize; 3], usize>,
    pub features: Var,
}

impl SparseLevel {
    fn new(lattice: VoxelLattice, coords: Vec<[usize; 3]>, features: Var) -> Self {
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        SparseLevel {
            lattice,
            coords,
            index,
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Multi-scale sparse feature volume; every level is queried and the results
/// concatenated.
#[derive(Clone, Debug)]
pub struct SparseFeatureVolume {
    pub levels: Vec<SparseLevel>,
}

fn sort_key(c: &[usize; 3]) -> (usize, usize, usize) {
    (c[2], c[1], c[0])
}

/// Mean of the features of the vertices falling in each voxel. Vertices
/// outside the lattice are dropped.
pub fn scatter_to_voxels(
    tape: &Tape,
    features: Var,
    vertices: &[Vec3],
    lattice: &VoxelLattice,
) -> SparseLevel {
    let mut members: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
    for (v, &p) in vertices.iter().enumerate() {
        if let Some(c) = lattice.voxel_of(p) {
            members.entry(c).or_default().push(v);
        }
    }
    let mut coords: Vec<[usize; 3]> = members.keys().copied().collect();
    coords.sort_by_key(sort_key);
    let rows: Vec<Vec<(usize, f64)>> = coords
        .iter()
        .map(|c| {
            let m = &members[c];
            m.iter().map(|&v| (v, 1.0 / m.len() as f64)).collect()
        })
        .collect();
    let f = tape.spmm(Rc::new(Csr::from_rows(vertices.len(), &rows)), features);
    SparseLevel::new(lattice.clone(), coords, f)
}

/// Kernel taps in `(dz, dy, dx)` lexicographic order, each in `-1..=1`.
pub fn kernel_offsets() -> Vec<[isize; 3]> {
    let mut out = Vec::with_capacity(27);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Rulebook of a dilating 3x3x3 sparse conv: output sites are all lattice
/// voxels within one step of an input site; `y[o] = sum_k x[o + off_k] W_k`.
pub fn dilating_rulebook(coords: &[[usize; 3]], dims: [usize; 3]) -> (Vec<[usize; 3]>, Rulebook) {
    let offs = kernel_offsets();
    let shift = |c: [usize; 3], o: [isize; 3]| -> Option<[usize; 3]> {
        let mut r = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + o[a];
            if v < 0 || v >= dims[a] as isize {
                return None;
            }
            r[a] = v as usize;
        }
        Some(r)
    };
    let mut out: Vec<[usize; 3]> = coords
        .iter()
        .flat_map(|&c| offs.iter().filter_map(move |&o| shift(c, o)))
        .collect();
    out.sort_by_key(sort_key);
    out.dedup();
    let out_index: HashMap<[usize; 3], usize> =
        out.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let offsets = offs
        .iter()
        .map(|&o| {
            // input at out + o  <=>  out = input - o
            let neg = [-o[0], -o[1], -o[2]];
            coords
                .iter()
                .enumerate()
                .filter_map(|(i, &c)| shift(c, neg).map(|oc| (i, out_index[&oc])))
                .collect()
        })
        .collect();
    (
        out.clone(),
        Rulebook {
            n_in: coords.len(),
            n_out: out.len(),
            offsets,
        },
    )
}

/// Stride-2 average pooling onto the coarser lattice.
fn downsample(tape: &Tape, level: &SparseLevel) -> SparseLevel {
    let coarse = level.lattice.coarser();
    let mut members: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
    for (i, c) in level.coords.iter().enumerate() {
        members.entry(c.map(|x| x / 2)).or_default().push(i);
    }
    let mut coords: Vec<[usize; 3]> = members.keys().copied().collect();
    coords.sort_by_key(sort_key);
    let rows: Vec<Vec<(usize, f64)>> = coords
        .iter()
        .map(|c| {
            members[c]
                .iter()
                .map(|&i| (i, 1.0 / members[c].len() as f64))
                .collect()
        })
        .collect();
    let f = tape.spmm(Rc::new(Csr::from_rows(level.len(), &rows)), level.features);
    SparseLevel::new(coarse, coords, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    /// Feature volume voxel size in meters.
    pub voxel_size: f64,
    /// Channels per level.
    pub channels: usize,
    pub levels: usize,
    /// Margin added around the target mesh bounds, meters.
    pub margin: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            voxel_size: 0.02,
            channels: 32,
            levels: 4,
            margin: 0.1,
        }
    }
}

/// Four (by default) blocks of dilating 3x3x3 sparse conv + ReLU; each block's
/// output is kept as a level, then average-pooled by 2 to feed the next.
#[derive(Clone, Debug)]
pub struct Diffuser {
    convs: Vec<(ParamId, ParamId)>,
    pub channels: usize,
}

impl Diffuser {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: &VolumeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut cin = in_channels;
        let convs = (0..cfg.levels)
            .map(|i| {
                let w = store.add_he(
                    &format!("{name}.conv{i}.weight"),
                    &[27, cin, cfg.channels],
                    27 * cin,
                    rng,
                );
                let b = store.add_zeros(&format!("{name}.conv{i}.bias"), &[cfg.channels]);
                cin = cfg.channels;
                (w, b)
            })
            .collect();
        Diffuser {
            convs,
            channels: cfg.channels,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.channels * self.convs.len()
    }

    pub fn diffuse(
        &self,
        tape: &Tape,
        store: &ParamStore,
        input: &SparseLevel,
    ) -> SparseFeatureVolume {
        assert!(!input.is_empty(), "diffuse: empty volume");
        let mut levels = Vec::with_capacity(self.convs.len());
        let mut cur = input.clone();
        for (k, &(w, b)) in self.convs.iter().enumerate() {
            let (coords, rules) = dilating_rulebook(&cur.coords, cur.lattice.dims);
            let y = tape.sparse_conv3d(
                cur.features,
                tape.param(store, w),
                tape.param(store, b),
                Rc::new(rules),
            );
            let level = SparseLevel::new(cur.lattice.clone(), coords, tape.relu(y));
            if k + 1 < self.convs.len() {
                cur = downsample(tape, &level);
            }
            levels.push(level);
        }
        SparseFeatureVolume { levels }
    }
}

impl SparseFeatureVolume {
    /// Trilinear interpolation between voxel centers at every level (missing
    /// neighbors count as zero), concatenated across levels. Points outside
    /// the finest lattice's box get zeros and a flag.
    pub fn query(&self, tape: &Tape, points: &[Vec3]) -> (Var, Vec<bool>) {
        let outside: Vec<bool> = points
            .iter()
            .map(|&p| !self.levels[0].lattice.contains(p))
            .collect();
        let parts: Vec<Var> = self
            .levels
            .iter()
            .map(|l| query_level(tape, l, points, &outside))
            .collect();
        (tape.concat(&parts), outside)
    }
}

/// Interpolation rows for `points` against one level.
pub fn trilinear_rows(
    level: &SparseLevel,
    points: &[Vec3],
    skip: &[bool],
) -> Vec<Vec<(usize, f64)>> {
    let lat = &level.lattice;
    points
        .iter()
        .zip(skip)
        .map(|(&p, &skip)| {
            let mut row = Vec::new();
            if skip {
                return row;
            }
            let mut base = [0isize; 3];
            let mut fr = [0.0; 3];
            for a in 0..3 {
                let g = (p[a] - lat.origin[a]) / lat.voxel_size - 0.5;
                let f = g.floor();
                base[a] = f as isize;
                fr[a] = g - f;
            }
            for c in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                let mut ok = true;
                for a in 0..3 {
                    let hi = c >> a & 1 == 1;
                    w *= if hi { fr[a] } else { 1.0 - fr[a] };
                    let v = base[a] + hi as isize;
                    ok &= v >= 0;
                    idx[a] = v.max(0) as usize;
                }
                if !ok || w == 0.0 {
                    continue;
                }
                if let Some(&r) = level.index.get(&idx) {
                    row.push((r, w));
                }
            }
            row
        })
        .collect()
}

fn query_level(tape: &Tape, level: &SparseLevel, points: &[Vec3], outside: &[bool]) -> Var {
    let rows = trilinear_rows(level, points, outside);
    tape.spmm(Rc::new(Csr::from_rows(level.len(), &rows)), level.features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_follow_visibility() {
        let vis = vec![vec![true, false], vec![false, false], vec![true, false]];
        let (w, never) = visibility_weights(&vis);
        assert_eq!(w[0], vec![0.5, 0.0, 0.5]);
        assert_eq!(w[1], vec![1.0 / 3.0; 3]);
        assert_eq!(never, vec![false, true]);
    }

    #[test]
    fn single_site_dilates_to_neighborhood() {
        let (out, rules) = dilating_rulebook(&[[3, 3, 3]], [8, 8, 8]);
        assert_eq!(out.len(), 27);
        assert_eq!(rules.offsets.iter().map(|o| o.len()).sum::<usize>(), 27);
        let (out, _) = dilating_rulebook(&[[0, 0, 0]], [8, 8, 8]);
        assert_eq!(out.len(), 8);
    }
}
