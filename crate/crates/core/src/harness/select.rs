use serde::{Deserialize, Serialize};

use crate::geometry::Camera;
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// `k * n / T` over the candidate pool.
    #[default]
    Evenly,
    /// The `T` candidates whose posed vertices are closest to the target's.
    VertexDistance,
}

/// Evenly spaced picks from `pool`; all of it when `pool.len() <= t`.
pub fn select_evenly(pool: &[usize], t: usize) -> Vec<usize> {
    let n = pool.len();
    if n <= t {
        return pool.to_vec();
    }
    (0..t).map(|k| pool[k * n / t]).collect()
}

/// Summed distance between corresponding vertices, measured in the
/// candidate's camera frame.
pub fn vertex_distance(target: &[Vec3], candidate: &[Vec3], camera: &Camera) -> f64 {
    target
        .iter()
        .zip(candidate)
        .map(|(&a, &b)| camera.to_camera(a).dist(camera.to_camera(b)))
        .sum()
}

/// The `t` pool entries with the smallest distance, ties broken by lower
/// index, returned in pool order.
pub fn select_by_distance(pool: &[usize], t: usize, distance: impl Fn(usize) -> f64) -> Vec<usize> {
    if pool.len() <= t {
        return pool.to_vec();
    }
    let mut scored: Vec<(f64, usize)> = pool.iter().map(|&i| (distance(i), i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = scored[..t].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

/// Picks `t` input frames from `pool` (indices into `posed` / `cameras`) for
/// a target with vertices `target`.
pub fn select_frames(
    pool: &[usize],
    t: usize,
    criterion: Criterion,
    target: &[Vec3],
    posed: &[Vec<Vec3>],
    cameras: &[Camera],
) -> Vec<usize> {
    match criterion {
        Criterion::Evenly => select_evenly(pool, t),
        Criterion::VertexDistance => {
            select_by_distance(pool, t, |i| vertex_distance(target, &posed[i], &cameras[i]))
        }
    }
}
