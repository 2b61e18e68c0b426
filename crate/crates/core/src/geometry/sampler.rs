//! Surface-guided sampling: only spend samples where the ray passes near the
//! body surface.

use rand::Rng;

use super::distance::DistanceGrid;
use super::rays::{ray_box, Ray};

/// Samples along one ray, sorted by depth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    /// Segment length per sample: gap to the next sample, march step for the last.
    pub deltas: Vec<f64>,
    /// Total length of the near-surface intervals.
    pub covered: f64,
    /// Distance-grid lookups spent finding the intervals.
    pub grid_queries: usize,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Marches the ray through the grid box in steps of half a voxel, keeps the
/// union of steps whose midpoint lies within `threshold` of the surface and
/// places `n_samples` stratified samples uniformly over that union. With
/// `rng` each stratum is jittered; without it samples sit at stratum centers.
pub fn surface_guided_sample<R: Rng + ?Sized>(
    ray: &Ray,
    grid: &DistanceGrid,
    threshold: f64,
    n_samples: usize,
    rng: Option<&mut R>,
) -> RaySamples {
    assert!(
        threshold > 0.0,
        "surface_guided_sample: threshold must be positive"
    );
    let mut out = RaySamples::default();
    let Some((t0, t1)) = ray_box(ray, grid.origin, grid.max_corner()) else {
        return out;
    };
    let step = grid.voxel_size / 2.0;
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut a = t0;
    while a < t1 {
        let b = (a + step).min(t1);
        let (d, _) = grid.query(ray.at(0.5 * (a + b)));
        out.grid_queries += 1;
        if d <= threshold {
            match intervals.last_mut() {
                Some(last) if last.1 == a => last.1 = b,
                _ => intervals.push((a, b)),
            }
        }
        a = b;
    }
    let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    out.covered = total;
    if total <= 0.0 || n_samples == 0 {
        return out;
    }
    let mut rng = rng;
    let mut seg = 0;
    let mut before = 0.0;
    for k in 0..n_samples {
        let xi = match rng.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        let s = (k as f64 + xi) / n_samples as f64 * total;
        while seg + 1 < intervals.len() && s >= before + (intervals[seg].1 - intervals[seg].0) {
            before += intervals[seg].1 - intervals[seg].0;
            seg += 1;
        }
        let t = (intervals[seg].0 + (s - before)).min(intervals[seg].1);
        if out.depths.last().is_some_and(|&p| t <= p) {
            continue;
        }
        out.depths.push(t);
    }
    out.deltas = out.depths.windows(2).map(|w| w[1] - w[0]).collect();
    out.deltas.push(step);
    out
}
