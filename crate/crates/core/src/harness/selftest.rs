//! Quick invariant and oracle checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{psnr, ssim};
use crate::autodiff::{Tape, Tensor};
use crate::body::{generate_humanoid, HumanoidConfig, Pose};
use crate::deform::warp_to_observation;
use crate::exec::Parallelism;
use crate::fusion::composite_ray;
use crate::geometry::mesh::{brute_force_distance, icosphere};
use crate::geometry::{
    build_distance_grid, generate_rays, rasterize_visibility, raycast_visibility,
    surface_guided_sample, Camera, VisibilityConfig,
};
use crate::imagebuf::Image;
use crate::math::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn compositing() -> Check {
    let n = 256;
    let (len, sigma, c) = (2.0, 0.5, [0.2, 0.6, 0.9]);
    let delta = vec![len / n as f64; n];
    let out = composite_ray(&vec![sigma; n], &vec![c; n], &delta, [0.0; 3]);
    let err = (0..3)
        .map(|k| (out[k] / (c[k] * (1.0 - (-1.0f64).exp())) - 1.0).abs())
        .fold(0.0, f64::max);
    check(
        "analytic compositing",
        err < 0.01,
        format!("max relative error {err:.2e}"),
    )
}

fn warp_identity(rng: &mut ChaCha8Rng) -> Check {
    let template = generate_humanoid(1, &HumanoidConfig::default()).expect("humanoid");
    let parts = template.num_joints();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let pose = Pose {
            joint_rotations: (0..parts)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
            root_translation: Vec3::new(rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0)),
            time_index: 0,
        };
        let tr = template.forward_kinematics(&pose).expect("pose");
        for _ in 0..100 {
            let p = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(-1.0..1.0),
            );
            let mut w: Vec<f64> = (0..parts).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            worst = worst.max(warp_to_observation(p, &w, &tr, &tr).dist(p));
        }
    }
    check(
        "warp identity",
        worst <= 1e-9 * 2.0,
        format!("max displacement {worst:.2e} m"),
    )
}

fn softmax_simplex(rng: &mut ChaCha8Rng) -> Check {
    let tape = Tape::inference();
    let x = tape.constant(Tensor::matrix(
        1000,
        12,
        (0..12_000).map(|_| rng.gen_range(-30.0..30.0)).collect(),
    ));
    let y = tape.value(tape.softmax(x));
    let worst = y
        .data()
        .chunks(12)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let nonneg = y.data().iter().all(|&v| v >= 0.0);
    check(
        "softmax simplex",
        nonneg && worst <= 1e-9,
        format!("max |sum - 1| {worst:.2e}"),
    )
}

fn icosphere_visibility() -> Check {
    let (v, f) = icosphere(Vec3::ZERO, 0.5, 2);
    let cam = Camera::look_at(
        Vec3::new(0.3, 0.4, 2.5),
        Vec3::ZERO,
        Vec3::new(0.0, 1.0, 0.0),
        40.0,
        96,
        96,
        0,
    )
    .expect("camera");
    let a = rasterize_visibility(&v, &f, &cam, &VisibilityConfig::default());
    let b = raycast_visibility(&v, &f, &cam, Parallelism::Rayon);
    let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    check(
        "icosphere visibility",
        agree == v.len(),
        format!("{agree}/{} vertices agree", v.len()),
    )
}

fn sampler_soundness(rng: &mut ChaCha8Rng) -> Check {
    let (v, f) = icosphere(Vec3::ZERO, 0.4, 2);
    let (h, thr) = (0.03, 0.05);
    let pad = Vec3::new(0.2, 0.2, 0.2);
    let grid = build_distance_grid(
        &v,
        &f,
        Vec3::new(-0.4, -0.4, -0.4) - pad,
        Vec3::new(0.4, 0.4, 0.4) + pad,
        h,
        Parallelism::Rayon,
    )
    .expect("grid");
    let cam = Camera::look_at(
        Vec3::new(0.0, 0.0, 2.0),
        Vec3::ZERO,
        Vec3::new(0.0, 1.0, 0.0),
        50.0,
        64,
        64,
        0,
    )
    .expect("camera");
    let pixels: Vec<(usize, usize)> = (0..200)
        .map(|_| (rng.gen_range(0..64), rng.gen_range(0..64)))
        .collect();
    let rays = generate_rays(&cam, &pixels, 0);
    let bound = thr + h * 3f64.sqrt();
    let mut worst: f64 = 0.0;
    for r in &rays {
        let s = surface_guided_sample(r, &grid, thr, 16, Some(rng));
        for &t in &s.depths {
            worst = worst.max(brute_force_distance(r.at(t), &v, &f));
        }
    }
    check(
        "sampler soundness",
        worst <= bound,
        format!("max sample distance {worst:.4} (bound {bound:.4})"),
    )
}

fn metrics() -> Check {
    let a = Image::filled(16, 16, [0.5; 3]);
    let b = Image::filled(16, 16, [0.6; 3]);
    let p = psnr(&a, &b).expect("dims");
    let s = ssim(&a, &a).expect("dims");
    let sym = psnr(&b, &a).expect("dims") == p
        && ssim(&a, &b).expect("dims") == ssim(&b, &a).expect("dims");
    let ok = (p - 20.0).abs() < 1e-9 && s == 1.0 && sym;
    check(
        "psnr/ssim closed forms",
        ok,
        format!("psnr {p:.12} dB, ssim(a,a) {s}"),
    )
}

/// Runs all checks with a fixed seed.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    vec![
        compositing(),
        warp_identity(&mut rng),
        softmax_simplex(&mut rng),
        icosphere_visibility(),
        sampler_soundness(&mut rng),
        metrics(),
    ]
}
