use std::rc::Rc;

use mononerf::autodiff::{grad_check, ParamStore, Tape, Tensor};
use mononerf::encoder::{sample_pixel_feature, FeatureMap, STRIDE};
use mononerf::geometry::Camera;
use mononerf::math::Vec3;
use mononerf::volume::{
    aggregate_vertex_features, dilating_rulebook, kernel_offsets, scatter_to_voxels, Diffuser,
    SparseFeatureVolume, VolumeConfig, VoxelLattice,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 6;
const W: usize = 8;
const C: usize = 3;

fn camera(eye: Vec3) -> Camera {
    Camera::look_at(
        eye,
        Vec3::ZERO,
        Vec3::new(0.0, 1.0, 0.0),
        50.0,
        W * STRIDE,
        H * STRIDE,
        0,
    )
    .unwrap()
}

fn map_data(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..H * W * C).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Stacks per-frame feature grids into one map on the tape.
fn stacked(tape: &Tape, frames: &[Vec<f64>]) -> FeatureMap {
    let data = frames.concat();
    let map = tape.constant(Tensor::new(vec![frames.len(), H, W, C], data));
    FeatureMap {
        map,
        images: frames.len(),
        height: H,
        width: W,
        channels: C,
        image_height: H * STRIDE,
        image_width: W * STRIDE,
    }
}

/// Per-frame feature of vertex `p` sampled directly from that frame's grid.
fn direct(tape: &Tape, frame: &[f64], cam: &Camera, p: Vec3) -> Vec<f64> {
    let q = cam.project(p);
    sample_pixel_feature(tape, &stacked(tape, &[frame.to_vec()]), q.u, q.v).0
}

fn vertices() -> Vec<Vec3> {
    vec![
        Vec3::new(0.1, 0.2, 0.0),
        Vec3::new(-0.3, 0.05, 0.1),
        Vec3::new(0.25, -0.2, -0.1),
    ]
}

#[test]
fn single_frame_passes_features_through() {
    let tape = Tape::inference();
    let frame = map_data(1);
    let cam = camera(Vec3::new(0.0, 0.0, 2.0));
    let v = vertices();
    let (f, never) = aggregate_vertex_features(
        &tape,
        &stacked(&tape, &[frame.clone()]),
        &[cam.clone()],
        &[v.clone()],
        &[vec![true; 3]],
    );
    let out = tape.value(f);
    for (i, &p) in v.iter().enumerate() {
        assert_eq!(out.row(i), direct(&tape, &frame, &cam, p).as_slice());
    }
    assert_eq!(never, vec![false; 3]);
}

#[test]
fn visibility_selects_frames() {
    let tape = Tape::inference();
    let frames: Vec<Vec<f64>> = (0..3).map(|s| map_data(10 + s)).collect();
    let cams: Vec<Camera> = [2.0, 2.5, 3.0]
        .iter()
        .map(|&z| camera(Vec3::new(0.2, 0.1, z)))
        .collect();
    let v = vertices();
    let posed = vec![v.clone(); 3];
    // indexed [frame][vertex]: vertex 0 seen in frames 1 and 3, vertex 1 never, vertex 2 always
    let vis = vec![
        vec![true, false, true],
        vec![false, false, true],
        vec![true, false, true],
    ];
    let (f, never) =
        aggregate_vertex_features(&tape, &stacked(&tape, &frames), &cams, &posed, &vis);
    let out = tape.value(f);
    let per: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|t| {
            v.iter()
                .map(|&p| direct(&tape, &frames[t], &cams[t], p))
                .collect()
        })
        .collect();
    for c in 0..C {
        assert!((out.row(0)[c] - 0.5 * (per[0][0][c] + per[2][0][c])).abs() < 1e-12);
        let mean = (per[0][1][c] + per[1][1][c] + per[2][1][c]) / 3.0;
        assert!((out.row(1)[c] - mean).abs() < 1e-12);
        let all = (per[0][2][c] + per[1][2][c] + per[2][2][c]) / 3.0;
        assert!((out.row(2)[c] - all).abs() < 1e-12);
    }
    assert_eq!(never, vec![false, true, false]);
}

fn unit_lattice() -> VoxelLattice {
    VoxelLattice {
        origin: Vec3::ZERO,
        voxel_size: 0.1,
        dims: [6, 6, 6],
    }
}

#[test]
fn scatter_averages_vertices_per_voxel() {
    let tape = Tape::inference();
    let verts = vec![
        Vec3::new(0.05, 0.05, 0.05),
        Vec3::new(0.06, 0.04, 0.07),
        Vec3::new(0.35, 0.15, 0.25),
        Vec3::new(9.0, 0.0, 0.0),
    ];
    let feats = tape.constant(Tensor::matrix(
        4,
        2,
        vec![1.0, 2.0, 3.0, 6.0, -1.0, 0.5, 7.0, 7.0],
    ));
    let level = scatter_to_voxels(&tape, feats, &verts, &unit_lattice());
    assert_eq!(level.coords, vec![[0, 0, 0], [3, 1, 2]]);
    assert_eq!(tape.value(level.features).data(), &[2.0, 4.0, -1.0, 0.5]);
    assert!(level.len() <= verts.len());
}

#[test]
fn zero_features_diffuse_to_zero() {
    let tape = Tape::inference();
    let mut store = ParamStore::new();
    let cfg = VolumeConfig {
        channels: 4,
        ..Default::default()
    };
    let d = Diffuser::new(
        &mut store,
        "vol",
        2,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let verts = vertices()
        .into_iter()
        .map(|p| p + Vec3::new(0.3, 0.3, 0.3))
        .collect::<Vec<_>>();
    let level = scatter_to_voxels(
        &tape,
        tape.constant(Tensor::zeros(&[3, 2])),
        &verts,
        &unit_lattice(),
    );
    let vol = d.diffuse(&tape, &store, &level);
    assert_eq!(vol.levels.len(), 4);
    for l in &vol.levels {
        assert!(tape.value(l.features).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn single_voxel_dilates_to_its_neighborhood() {
    let tape = Tape::inference();
    let mut store = ParamStore::new();
    let cfg = VolumeConfig {
        channels: 2,
        levels: 1,
        ..Default::default()
    };
    let d = Diffuser::new(
        &mut store,
        "vol",
        1,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(2),
    );
    let level = scatter_to_voxels(
        &tape,
        tape.constant(Tensor::matrix(1, 1, vec![1.0])),
        &[Vec3::new(0.25, 0.25, 0.25)],
        &unit_lattice(),
    );
    let vol = d.diffuse(&tape, &store, &level);
    let mut expect: Vec<[usize; 3]> = kernel_offsets()
        .iter()
        .map(|o| [0, 1, 2].map(|a| (2 + o[a]) as usize))
        .collect();
    expect.sort_by_key(|c| (c[2], c[1], c[0]));
    assert_eq!(vol.levels[0].coords, expect);
}

#[test]
fn diffusion_gradient_on_five_voxels() {
    let mut store = ParamStore::new();
    let cfg = VolumeConfig {
        channels: 3,
        levels: 2,
        ..Default::default()
    };
    let d = Diffuser::new(
        &mut store,
        "vol",
        2,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(3),
    );
    let feats = store.add_uniform("features", &[5, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let verts: Vec<Vec3> = [[1, 1, 1], [2, 1, 1], [2, 2, 1], [4, 3, 2], [1, 1, 3]]
        .iter()
        .map(|c| Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * 0.1)
        .collect();
    let ids: Vec<_> = store.ids().collect();
    let err = grad_check(&mut store, &ids, 1e-6, Some(40), |t, s| {
        let level = scatter_to_voxels(t, t.param(s, feats), &verts, &unit_lattice());
        let vol = d.diffuse(t, s, &level);
        let (f, _) = vol.query(
            t,
            &[Vec3::new(0.17, 0.13, 0.11), Vec3::new(0.41, 0.3, 0.22)],
        );
        t.sum(t.mul(
            f,
            t.constant(Tensor::new(
                t.shape(f),
                (0..12).map(|i| (i as f64 * 0.9).cos()).collect(),
            )),
        ))
    });
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn sparse_conv_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [5, 4, 6];
    let coords: Vec<[usize; 3]> = vec![[0, 0, 0], [2, 1, 3], [3, 1, 3], [4, 3, 5], [2, 2, 2]];
    let (cin, cout) = (2, 3);
    let x: Vec<f64> = (0..coords.len() * cin)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let w: Vec<f64> = (0..27 * cin * cout)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let b = vec![0.1, -0.2, 0.3];
    let (out, rules) = dilating_rulebook(&coords, dims);
    let tape = Tape::inference();
    let y = tape.sparse_conv3d(
        tape.constant(Tensor::matrix(coords.len(), cin, x.clone())),
        tape.constant(Tensor::new(vec![27, cin, cout], w.clone())),
        tape.constant(Tensor::from_vec(b.clone())),
        Rc::new(rules),
    );
    let y = tape.value(y);
    // dense grid with zeros at empty sites
    let idx = |c: [usize; 3]| (c[2] * dims[1] + c[1]) * dims[0] + c[0];
    let mut dense = vec![0.0; dims.iter().product::<usize>() * cin];
    for (i, &c) in coords.iter().enumerate() {
        dense[idx(c) * cin..idx(c) * cin + cin].copy_from_slice(&x[i * cin..i * cin + cin]);
    }
    for (r, &o) in out.iter().enumerate() {
        let mut acc = b.clone();
        for (k, off) in kernel_offsets().iter().enumerate() {
            let n = [0, 1, 2].map(|a| o[a] as isize + off[a]);
            if (0..3).any(|a| n[a] < 0 || n[a] >= dims[a] as isize) {
                continue;
            }
            let src = idx(n.map(|v| v as usize));
            for ci in 0..cin {
                for co in 0..cout {
                    acc[co] += dense[src * cin + ci] * w[(k * cin + ci) * cout + co];
                }
            }
        }
        for co in 0..cout {
            assert!((y.row(r)[co] - acc[co]).abs() < 1e-12, "site {o:?}");
        }
    }
    // every site outside the output list has no occupied neighbor
    for z in 0..dims[2] {
        for yy in 0..dims[1] {
            for xx in 0..dims[0] {
                let near = coords
                    .iter()
                    .any(|c| [xx, yy, z].iter().zip(c).all(|(a, b)| a.abs_diff(*b) <= 1));
                assert_eq!(near, out.contains(&[xx, yy, z]));
            }
        }
    }
}

fn level_volume(tape: &Tape, verts: &[Vec3], feats: Vec<f64>) -> SparseFeatureVolume {
    let f = tape.constant(Tensor::matrix(verts.len(), 2, feats));
    SparseFeatureVolume {
        levels: vec![scatter_to_voxels(tape, f, verts, &unit_lattice())],
    }
}

#[test]
fn query_cases() {
    let tape = Tape::inference();
    let lat = unit_lattice();
    let verts = vec![
        lat.center([1, 1, 1]),
        lat.center([2, 1, 1]),
        lat.center([4, 4, 4]),
    ];
    let vol = level_volume(&tape, &verts, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
    let mid = (lat.center([1, 1, 1]) + lat.center([2, 1, 1])) * 0.5;
    let (f, outside) = vol.query(
        &tape,
        &[lat.center([4, 4, 4]), mid, Vec3::new(5.0, 5.0, 5.0)],
    );
    let f = tape.value(f);
    assert_eq!(f.row(0), &[5.0, 6.0]);
    assert!((f.row(1)[0] - 2.0).abs() < 1e-12 && (f.row(1)[1] + 1.0).abs() < 1e-12);
    assert_eq!(f.row(2), &[0.0, 0.0]);
    assert_eq!(outside, vec![false, false, true]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregation_is_order_free_and_in_the_hull(vis in prop::collection::vec(prop::collection::vec(any::<bool>(), 3), 3), perm in Just([2usize, 0, 1]), seed in 0u64..1000) {
        let tape = Tape::inference();
        let frames: Vec<Vec<f64>> = (0..3).map(|s| map_data(seed * 3 + s)).collect();
        let cams: Vec<Camera> = [2.0, 2.4, 2.8].iter().map(|&z| camera(Vec3::new(-0.1, 0.1, z))).collect();
        let v = vertices();
        let posed = vec![v.clone(); 3];
        let (a, _) = aggregate_vertex_features(&tape, &stacked(&tape, &frames), &cams, &posed, &vis);
        let pf: Vec<Vec<f64>> = perm.iter().map(|&i| frames[i].clone()).collect();
        let pc: Vec<Camera> = perm.iter().map(|&i| cams[i].clone()).collect();
        let pv: Vec<Vec<bool>> = perm.iter().map(|&i| vis[i].clone()).collect();
        let (b, _) = aggregate_vertex_features(&tape, &stacked(&tape, &pf), &pc, &posed, &pv);
        let (a, b) = (tape.value(a), tape.value(b));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (i, &p) in v.iter().enumerate() {
            let seen: Vec<usize> = (0..3).filter(|&t| vis[t][i]).collect();
            let pool: Vec<usize> = if seen.is_empty() { (0..3).collect() } else { seen };
            let per: Vec<Vec<f64>> = pool.iter().map(|&t| direct(&tape, &frames[t], &cams[t], p)).collect();
            for c in 0..C {
                let lo = per.iter().map(|f| f[c]).fold(f64::INFINITY, f64::min);
                let hi = per.iter().map(|f| f[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a.row(i)[c] >= lo - 1e-12 && a.row(i)[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn scatter_then_query_recovers_singleton_features(cells in prop::collection::btree_set((0usize..6, 0usize..6, 0usize..6), 1..8)) {
        let tape = Tape::inference();
        let lat = unit_lattice();
        let verts: Vec<Vec3> = cells.iter().map(|&(x, y, z)| lat.center([x, y, z])).collect();
        let feats: Vec<f64> = (0..2 * verts.len()).map(|i| i as f64 + 1.0).collect();
        let vol = level_volume(&tape, &verts, feats.clone());
        let (f, _) = vol.query(&tape, &verts);
        let f = tape.value(f);
        for i in 0..verts.len() {
            prop_assert!((f.row(i)[0] - feats[2 * i]).abs() < 1e-12);
            prop_assert!((f.row(i)[1] - feats[2 * i + 1]).abs() < 1e-12);
        }
    }
}
