//! Target-to-observation warp: nearest-vertex blend weights, learned
//! refinement, blended rigid transforms and temporal feature gathering.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{FinalInit, Mlp};
use crate::autodiff::{ParamStore, Pinhole, Tape, Tensor, Var};
use crate::body::{PartTransforms, Pose};
use crate::encoder::FeatureMap;
use crate::geometry::Camera;
use crate::math::{Affine, Vec3};

/// Index of and distance to the nearest vertex; ties go to the lowest index.
pub fn nearest_vertex(p: Vec3, vertices: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &v) in vertices.iter().enumerate() {
        let d2 = (v - p).norm2();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Initial weights `w_s` (the nearest posed vertex's row) and distance `d` per point.
pub fn initial_blend_weights(
    points: &[Vec3],
    posed: &[Vec3],
    weights: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    points
        .iter()
        .map(|&p| {
            let (i, d) = nearest_vertex(p, posed);
            (weights[i].clone(), d)
        })
        .unzip()
}

/// `p_o = (sum_j w_j  T_o,j  T_g,j^-1) p_g`.
pub fn warp_to_observation(
    p: Vec3,
    w: &[f64],
    target: &PartTransforms,
    observed: &PartTransforms,
) -> Vec3 {
    assert!(
        w.len() == target.len() && w.len() == observed.len(),
        "warp: part count mismatch"
    );
    let mut m = Affine {
        linear: crate::math::Mat3([[0.0; 3]; 3]),
        translation: Vec3::ZERO,
    };
    for (j, &wj) in w.iter().enumerate() {
        m = m.add(&relative(target, observed, j).scaled(wj));
    }
    m.apply(p)
}

/// `T_o,j T_g,j^-1`.
pub fn relative(target: &PartTransforms, observed: &PartTransforms, j: usize) -> Affine {
    let g = &target.0[j];
    assert!(
        g.linear.det().abs() > 1e-12,
        "warp: singular target transform for part {j}"
    );
    observed.0[j].compose(&g.rigid_inverse())
}

/// Candidate observation points `Q [S, N, 3T]`: every part's rigid motion of
/// every point into every frame. Blending a row with weights summing to one
/// gives the warped point, which keeps the warp differentiable in `w`.
pub fn part_motions(
    points: &[Vec3],
    target: &PartTransforms,
    observed: &[PartTransforms],
) -> Tensor {
    let n = target.len();
    let t = observed.len();
    let rel: Vec<Vec<Affine>> = observed
        .iter()
        .map(|o| (0..n).map(|j| relative(target, o, j)).collect())
        .collect();
    let mut data = Vec::with_capacity(points.len() * n * 3 * t);
    for &p in points {
        for j in 0..n {
            for r in &rel {
                data.extend(r[j].apply(p).to_array());
            }
        }
    }
    Tensor::new(vec![points.len(), n, 3 * t], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Start the refinement MLP's last layer at zero.
    pub zero_init: bool,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            hidden: 64,
            layers: 4,
            zero_init: true,
        }
    }
}

/// `w_g = softmax(w_s + MLP([w_s, pose, d]))`.
#[derive(Clone, Debug)]
pub struct WeightRefiner {
    pub mlp: Mlp,
    pub parts: usize,
}

impl WeightRefiner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        parts: usize,
        cfg: &WarpConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut widths = vec![parts + 3 * parts + 1];
        widths.extend(std::iter::repeat(cfg.hidden).take(cfg.layers.saturating_sub(1)));
        widths.push(parts);
        let last = if cfg.zero_init {
            FinalInit::Zero
        } else {
            FinalInit::Small
        };
        WeightRefiner {
            mlp: Mlp::new(store, name, &widths, last, rng),
            parts,
        }
    }

    /// `ws [S, N]`, one distance per row; the target pose is shared by all rows.
    pub fn refine(&self, tape: &Tape, store: &ParamStore, ws: Var, pose: &Pose, d: &[f64]) -> Var {
        let s = d.len();
        let theta = pose.flat_rotations();
        assert_eq!(
            theta.len(),
            3 * self.parts,
            "refine: pose has {} joints, expected {}",
            theta.len() / 3,
            self.parts
        );
        let theta = tape.constant(Tensor::matrix(
            s,
            theta.len(),
            theta
                .iter()
                .copied()
                .cycle()
                .take(s * theta.len())
                .collect(),
        ));
        let dv = tape.constant(Tensor::matrix(s, 1, d.to_vec()));
        let x = tape.concat(&[ws, theta, dv]);
        let delta = self.mlp.forward(tape, store, x);
        tape.softmax(tape.add(ws, delta))
    }
}

/// Projects the warped points `p_o [S, 3T]` into each input frame and samples
/// the frame's features. Returns `[S, T, C]` and per-`(s, t)` masks (true
/// where the point is unprojectable or outside the image).
pub fn gather_temporal_features(
    tape: &Tape,
    fmap: &FeatureMap,
    cameras: &[Camera],
    p_o: Var,
) -> (Var, Vec<bool>) {
    let t = cameras.len();
    let shape = tape.shape(p_o);
    assert_eq!(
        shape[1],
        3 * t,
        "gather: warped points have {} columns for {t} frames",
        shape[1]
    );
    let s = shape[0];
    let pts = tape.reshape(p_o, &[s * t, 3]);
    let pins: Vec<Pinhole> = (0..s)
        .flat_map(|_| cameras.iter().map(|c| c.pinhole()))
        .collect();
    let (uv, depth) = tape.project(pts, Rc::new(pins));
    let batch: Vec<usize> = (0..s * t).map(|i| i % t).collect();
    let valid: Vec<bool> = depth
        .iter()
        .map(|&z| z > crate::autodiff::MIN_DEPTH)
        .collect();
    let (f, masked) = fmap.sample(tape, uv, &batch, &valid);
    let c = fmap.channels;
    (tape.reshape(f, &[s, t, c]), masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat3;

    #[test]
    fn nearest_vertex_tie_breaks_low() {
        let v = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 3.0, 0.0),
        ];
        assert_eq!(nearest_vertex(Vec3::ZERO, &v), (0, 1.0));
        assert_eq!(nearest_vertex(Vec3::new(0.0, 3.0, 0.0), &v), (2, 0.0));
    }

    #[test]
    fn two_part_blend_matches_matrix_arithmetic() {
        let tg = PartTransforms(vec![
            Affine::IDENTITY,
            Affine::translation(Vec3::new(0.0, 1.0, 0.0)),
        ]);
        let r = Mat3::from_axis_angle(Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let to = PartTransforms(vec![
            Affine::rotation(r),
            Affine::translation(Vec3::new(2.0, 1.0, 0.0)),
        ]);
        let p = Vec3::new(1.0, 0.0, 0.0);
        // part 0: Rz(90) p = (0,1,0); part 1: T(2,1,0) T(0,-1,0) p = (3,0,0)
        let q = warp_to_observation(p, &[0.25, 0.75], &tg, &to);
        assert!(q.dist(Vec3::new(2.25, 0.25, 0.0)) < 1e-15);
        let m = part_motions(&[p], &tg, &[to]);
        assert_eq!(m.shape(), &[1, 2, 3]);
    }
}
