//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::rc::Rc;
use std::time::{Duration, Instant};

use mononerf::autodiff::{grad_check, ParamStore, Tape, Tensor};
use mononerf::body::{generate_humanoid, BodyTemplate, HumanoidConfig, Pose};
use mononerf::deform::{warp_to_observation, WarpConfig, WeightRefiner};
use mononerf::exec::Parallelism;
use mononerf::fusion::{composite_ray, photometric_loss, TemporalAttention};
use mononerf::geometry::mesh::{brute_force_distance, icosphere};
use mononerf::geometry::{
    generate_rays, rasterize_visibility, raycast_visibility, surface_guided_sample, Camera, Ray,
    VisibilityConfig,
};
use mononerf::harness::train::{body_pixel_box, PreparedCapture};
use mononerf::harness::*;
use mononerf::imagebuf::Image;
use mononerf::math::{bounds, Vec3};
use mononerf::model::{body_distance_grid, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn humanoid() -> BodyTemplate {
    generate_humanoid(11, &HumanoidConfig::default()).expect("humanoid")
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize, spread: f64) -> Pose {
    let mut v = || {
        Vec3::new(
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
        )
    };
    Pose {
        joint_rotations: (0..joints).map(|_| v()).collect(),
        root_translation: v(),
        time_index: 0,
    }
}

fn simplex_error(rows: &[f64], width: usize) -> (f64, bool) {
    let err = rows
        .chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    (err, rows.iter().all(|&x| x >= 0.0))
}

fn up() -> Vec3 {
    Vec3::new(0.0, 1.0, 0.0)
}

fn compositing() -> Outcome {
    let n = 256;
    let (len, c) = (2.0, [0.2, 0.6, 0.9]);
    let sigma = 1.0 / len;
    let out = composite_ray(
        &vec![sigma; n],
        &vec![c; n],
        &vec![len / n as f64; n],
        [0.0; 3],
    );
    let err = (0..3)
        .map(|k| (out[k] / (c[k] * (1.0 - (-1.0f64).exp())) - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(err < 0.01, format!("max relative error {err:.2e}"))
}

fn warp_identity() -> Outcome {
    let t = humanoid();
    let (lo, hi) = bounds(t.vertices());
    let scale = lo.dist(hi);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let parts = t.num_joints();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tr = t
            .forward_kinematics(&random_pose(&mut rng, parts, 1.5))
            .expect("pose");
        for _ in 0..100 {
            let p = Vec3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.5..2.5),
                rng.gen_range(-1.5..1.5),
            );
            let mut w: Vec<f64> = (0..parts).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            worst = worst.max(warp_to_observation(p, &w, &tr, &tr).dist(p));
        }
    }
    outcome(
        worst <= 1e-9 * scale,
        format!(
            "max displacement {worst:.2e} m, bound {:.2e} m",
            1e-9 * scale
        ),
    )
}

fn simplex() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let parts = 12;
    let mut store = ParamStore::new();
    let cfg = WarpConfig {
        zero_init: false,
        ..Default::default()
    };
    let refiner = WeightRefiner::new(&mut store, "warp", parts, &cfg, &mut rng);
    let (mut werr, mut wneg) = (0.0f64, true);
    for _ in 0..100 {
        let tape = Tape::inference();
        let pose = random_pose(&mut rng, parts, 2.0);
        let ws: Vec<f64> = (0..100 * parts).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let d: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..0.5)).collect();
        let w = tape.value(refiner.refine(
            &tape,
            &store,
            tape.constant(Tensor::matrix(100, parts, ws)),
            &pose,
            &d,
        ));
        let (e, nn) = simplex_error(w.data(), parts);
        werr = werr.max(e);
        wneg &= nn;
    }
    let (frames, vd, td) = (6, 16, 12);
    let att = TemporalAttention::new(&mut store, "att", vd, td, 8, &mut rng);
    let (mut aerr, mut aneg) = (0.0f64, true);
    for _ in 0..100 {
        let tape = Tape::inference();
        let fv = Tensor::matrix(
            100,
            vd,
            (0..100 * vd).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        );
        let ft = Tensor::new(
            vec![100, frames, td],
            (0..100 * frames * td)
                .map(|_| rng.gen_range(-20.0..20.0))
                .collect(),
        );
        // at least one frame per row stays unmasked
        let masked: Vec<bool> = (0..100 * frames)
            .map(|i| i % frames != 0 && rng.gen_bool(0.4))
            .collect();
        let a =
            tape.value(att.weights(&tape, &store, tape.constant(fv), tape.constant(ft), &masked));
        let (e, nn) = simplex_error(a.data(), frames);
        aerr = aerr.max(e);
        aneg &= nn;
    }
    outcome(
        werr <= 1e-9 && aerr <= 1e-9 && wneg && aneg,
        format!("blend weights max |sum-1| {werr:.1e}, attention max |sum-1| {aerr:.1e}, non-negative {}", wneg && aneg),
    )
}

fn visibility() -> Outcome {
    let t = humanoid();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut agree, mut total, mut worst) = (0usize, 0usize, 1.0f64);
    for _ in 0..20 {
        let v = t
            .posed_vertices(&random_pose(&mut rng, t.num_joints(), 0.6))
            .expect("pose");
        let (lo, hi) = bounds(&v);
        let center = (lo + hi) * 0.5;
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let eye = center + Vec3::new(3.5 * a.sin(), rng.gen_range(-1.0..1.5), 3.5 * a.cos());
        let cam = Camera::look_at(eye, center, up(), 45.0, 128, 128, 0).expect("camera");
        let fast = rasterize_visibility(&v, t.faces(), &cam, &VisibilityConfig::default());
        let oracle = raycast_visibility(&v, t.faces(), &cam, Parallelism::Rayon);
        let n = fast.iter().zip(&oracle).filter(|(x, y)| x == y).count();
        worst = worst.min(n as f64 / v.len() as f64);
        agree += n;
        total += v.len();
    }
    let (sv, sf) = icosphere(Vec3::ZERO, 0.5, 2);
    let cam = Camera::look_at(Vec3::new(0.3, 0.4, 2.5), Vec3::ZERO, up(), 40.0, 96, 96, 0)
        .expect("camera");
    let a = rasterize_visibility(&sv, &sf, &cam, &VisibilityConfig::default());
    let b = raycast_visibility(&sv, &sf, &cam, Parallelism::Rayon);
    let sphere = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    let rate = agree as f64 / total as f64;
    outcome(
        rate >= 0.98 && sphere == sv.len(),
        format!(
            "humanoid agreement {:.2}% (worst pair {:.2}%), icosphere {sphere}/{}",
            100.0 * rate,
            100.0 * worst,
            sv.len()
        ),
    )
}

fn misses_box(r: &Ray, lo: Vec3, hi: Vec3) -> bool {
    let (o, d) = (r.origin.to_array(), r.direction.to_array());
    let (lo, hi) = (lo.to_array(), hi.to_array());
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return true;
            }
            continue;
        }
        let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    t0 > t1
}

fn sampling() -> Outcome {
    let t = humanoid();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pose = random_pose(&mut rng, t.num_joints(), 0.4);
    let v = t.posed_vertices(&pose).expect("pose");
    let mut cfg = ModelConfig {
        samples_per_ray: 12,
        ..Default::default()
    };
    cfg.grid_voxel = 0.03;
    let grid = body_distance_grid(&v, t.faces(), &cfg, Parallelism::Rayon);
    let bound = cfg.threshold + grid.voxel_size * 3f64.sqrt();
    let (lo, hi) = bounds(&v);
    let center = (lo + hi) * 0.5;
    let cam = Camera::look_at(
        center + Vec3::new(0.5, 0.3, 3.2),
        center,
        up(),
        50.0,
        96,
        96,
        0,
    )
    .expect("camera");
    // random pixels over the body's projected box, so most rays reach the surface
    let (x0, x1, y0, y1) = body_pixel_box(&v, &cam, 4).expect("body in view");
    let pixels: Vec<(usize, usize)> = (0..1000)
        .map(|_| (rng.gen_range(x0..x1), rng.gen_range(y0..y1)))
        .collect();
    let rays = generate_rays(&cam, &pixels, 0);
    let mut worst: f64 = 0.0;
    let (mut hits, mut samples) = (0, 0);
    for r in &rays {
        let s = surface_guided_sample(r, &grid, cfg.threshold, cfg.samples_per_ray, Some(&mut rng));
        hits += !s.depths.is_empty() as usize;
        samples += s.depths.len();
        for &d in &s.depths {
            worst = worst.max(brute_force_distance(r.at(d), &v, t.faces()));
        }
    }
    // rays that clear the dilated body box must never reach the network
    let (model, store) = Model::new(
        &ModelConfig {
            samples_per_ray: 8,
            ..small_model()
        },
        t.num_joints(),
        1,
    );
    let capture = generate_capture(&SceneConfig {
        frames: 2,
        width: 32,
        height: 32,
        supersample: 1,
        ..Default::default()
    })
    .expect("scene");
    let prepared = PreparedCapture::new(&capture).expect("capture");
    let geom = &prepared.geometry[0][1];
    let tape = Tape::inference();
    let ctx = model.build_context(
        &tape,
        &store,
        &capture.template,
        &prepared.input_frames(0, &[0]),
        geom,
        None,
    );
    let (blo, bhi) = bounds(&geom.posed);
    let m = model.config.threshold + 2.0 * model.config.grid_voxel;
    let pad = Vec3::new(m, m, m);
    let cam = &capture.views[0].frames[1].camera;
    let all: Vec<(usize, usize)> = (0..32).flat_map(|y| (0..32).map(move |x| (x, y))).collect();
    let missing: Vec<Ray> = generate_rays(cam, &all, 1)
        .into_iter()
        .filter(|r| misses_box(r, blo - pad, bhi + pad))
        .collect();
    let s = model.sample_rays(&ctx, &missing, None);
    let out = model.render_rays(
        &tape,
        &store,
        &capture.template,
        &ctx,
        &missing,
        &s,
        cam.camera_id,
    );
    let empty = s.iter().all(|x| x.depths.is_empty());
    outcome(
        worst <= bound && hits > 100 && !missing.is_empty() && empty && out.evaluated == 0,
        format!(
            "max sample distance {worst:.4} m (bound {bound:.4}) over {hits} hitting rays / {samples} samples; {} missing rays -> {} evaluations",
            missing.len(),
            out.evaluated
        ),
    )
}

fn small_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.encoder.channels = [4, 4, 4, 4];
    m.encoder.feature_dim = 4;
    m.volume.channels = 4;
    m.volume.levels = 2;
    m.volume.voxel_size = 0.08;
    m.grid_voxel = 0.04;
    m.warp.hidden = 8;
    m.key_dim = 4;
    m.head_hidden = 8;
    m.latent_dim = 2;
    m.encoding_levels = 2;
    m
}

fn gradients() -> Outcome {
    let capture = generate_capture(&SceneConfig {
        frames: 3,
        width: 32,
        height: 32,
        supersample: 1,
        heldout_every: 0,
        ..Default::default()
    })
    .expect("scene");
    let prepared = PreparedCapture::new(&capture).expect("capture");
    let cfg = ModelConfig {
        samples_per_ray: 8,
        ..small_model()
    };
    let (model, mut store) = Model::new(&cfg, capture.template.num_joints(), 6);
    // move every trainable tensor off its initialization so no path starts at zero
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| !store.get(id).name.contains("input_"))
        .collect();
    for &id in &ids {
        store
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-0.2..0.2));
    }
    let frame = &capture.views[0].frames[2];
    let geom = &prepared.geometry[0][2];
    let inputs = prepared.input_frames(0, &[0, 1]);
    let tape = Tape::inference();
    let ctx = model.build_context(&tape, &store, &capture.template, &inputs, geom, None);
    let grid = Rc::clone(&ctx.grid);
    let all: Vec<(usize, usize)> = (0..32).flat_map(|y| (0..32).map(move |x| (x, y))).collect();
    let candidates = generate_rays(&frame.camera, &all, frame.time_index);
    let full = model.sample_rays(&ctx, &candidates, None);
    let hit: Vec<usize> = (0..candidates.len())
        .filter(|&i| full[i].depths.len() == 8)
        .collect();
    if hit.len() < 2 {
        return outcome(false, "fewer than two rays with 8 samples".into());
    }
    let picks = [hit[hit.len() / 3], hit[2 * hit.len() / 3]];
    let rays: Vec<Ray> = picks.iter().map(|&i| candidates[i].clone()).collect();
    let samples: Vec<_> = picks.iter().map(|&i| full[i].clone()).collect();
    let reference: Vec<f64> = rays
        .iter()
        .flat_map(|r| frame.image.get(r.pixel.0, r.pixel.1))
        .collect();
    drop(ctx);
    let err = grad_check(&mut store, &ids, 1e-6, Some(3), |t, s| {
        let ctx = model.build_context(t, s, &capture.template, &inputs, geom, Some(grid.clone()));
        let out = model.render_rays(
            t,
            s,
            &capture.template,
            &ctx,
            &rays,
            &samples,
            frame.camera.camera_id,
        );
        photometric_loss(t, out.colors, &reference)
    });
    outcome(
        err < 1e-4,
        format!(
            "max relative error {err:.2e} over {} parameter tensors (2 rays x 8 samples)",
            ids.len()
        ),
    )
}

fn desk_config(mode: Mode, iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        mode,
        inputs: 4,
        rays_per_batch: 256,
        iterations,
        learning_rate: 1e-3,
        voxel_size: 0.04,
        seed: Some(1),
        ..Default::default()
    };
    cfg.model.volume.channels = 16;
    cfg.model.samples_per_ray = 16;
    cfg
}

fn train_quietly(cfg: &TrainConfig, captures: &[Capture], label: &str) -> TrainOutcome {
    let t0 = Instant::now();
    train(cfg, captures, &mut |p| {
        if let Some(w) = p.window_mean {
            if (p.iteration + 1) % 500 == 0 {
                eprintln!(
                    "  [{label}] iteration {} window loss {w:.5} ({:.0?})",
                    p.iteration + 1,
                    t0.elapsed()
                );
            }
        }
    })
    .expect("training")
}

fn overfit() -> Outcome {
    let capture = generate_capture(&SceneConfig {
        frames: 10,
        seed: 21,
        ..Default::default()
    })
    .expect("scene");
    let cfg = desk_config(Mode::Mot, 1000);
    let untrained = Trainer::new(&cfg, std::slice::from_ref(&capture)).expect("trainer");
    let before = evaluate(
        &untrained.model,
        &untrained.store,
        &capture,
        &cfg,
        &EvalSpec::monocular(),
        Parallelism::Rayon,
    )
    .expect("eval");
    let out = train_quietly(&cfg, std::slice::from_ref(&capture), "MoT");
    let rep = evaluate(
        &out.model,
        &out.store,
        &capture,
        &cfg,
        &EvalSpec::monocular(),
        Parallelism::Rayon,
    )
    .expect("eval");
    let (p, s) = (rep.mean_psnr(), rep.mean_ssim());
    outcome(
        p >= 28.0 && s >= 0.90 && p > before.mean_psnr(),
        format!(
            "held-out PSNR {p:.2} dB, SSIM {s:.4} after {} iterations (untrained {:.2} dB, constant image {:.2} dB)",
            cfg.iterations,
            before.mean_psnr(),
            rep.mean_baseline_psnr()
        ),
    )
}

struct Generalization {
    with_attention: EvalReport,
    without_attention: EvalReport,
}

fn generalization() -> Generalization {
    let motions = [Motion::Wave, Motion::Turn, Motion::Walk, Motion::WaveTurn];
    let captures: Vec<Capture> = (0..4)
        .map(|i| {
            generate_capture(&SceneConfig {
                name: format!("identity{i}"),
                seed: 100 + i as u64,
                motion: motions[i],
                frames: 10,
                views: 4,
                heldout_every: 0,
                ..Default::default()
            })
            .expect("scene")
        })
        .collect();
    let run = |attention: bool| {
        let mut cfg = desk_config(Mode::Mvt, 1500);
        cfg.model.use_attention = attention;
        let out = train_quietly(
            &cfg,
            &captures[..3],
            if attention { "MVT" } else { "MVT no attention" },
        );
        evaluate(
            &out.model,
            &out.store,
            &captures[3],
            &cfg,
            &EvalSpec::novel_view(6),
            Parallelism::Rayon,
        )
        .expect("eval")
    };
    Generalization {
        with_attention: run(true),
        without_attention: run(false),
    }
}

fn metrics() -> Outcome {
    let a = Image::filled(16, 16, [0.3, 0.5, 0.7]);
    let b = Image::filled(16, 16, [0.4, 0.6, 0.8]);
    let p = psnr(&a, &b).expect("dims");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut x = Image::new(24, 24);
    let mut y = Image::new(24, 24);
    x.data.iter_mut().for_each(|v| *v = rng.gen());
    y.data.iter_mut().for_each(|v| *v = rng.gen());
    let s_same = ssim(&x, &x).expect("dims");
    let sym = psnr(&x, &y).unwrap() == psnr(&y, &x).unwrap()
        && ssim(&x, &y).unwrap() == ssim(&y, &x).unwrap();
    let cap = psnr(&x, &x).unwrap();
    outcome(
        (p - 20.0).abs() <= 1e-12 && s_same == 1.0 && sym && cap == 99.0,
        format!("MSE 0.01 -> {p:.15} dB, SSIM(a,a) = {s_same}, PSNR(a,a) = {cap}, symmetric {sym}"),
    )
}

fn report(n: usize, name: &str, o: &Outcome, took: Duration, limit: Option<Duration>) -> bool {
    let in_time = limit.is_none_or(|l| took <= l);
    let ok = o.passed && in_time;
    let time = match limit {
        Some(l) => format!("{took:.2?} (limit {l:.0?})"),
        None => format!("{took:.2?}"),
    };
    println!(
        "{} criterion {n} ({name}): {}; {time}",
        if ok { "PASS" } else { "FAIL" },
        o.detail
    );
    ok
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed())
}

fn main() {
    // `cargo test` passes harness flags such as --list or a name filter
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // ACCEPTANCE_CRITERIA=5,7 runs a subset
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|c| c.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let secs = Duration::from_secs;
    let mut ok = true;
    if want(1) {
        let (o, t) = timed(compositing);
        ok &= report(1, "analytic compositing", &o, t, Some(secs(1)));
    }
    if want(2) {
        let (o, t) = timed(warp_identity);
        ok &= report(2, "warp identity", &o, t, Some(secs(10)));
    }
    if want(3) {
        let (o, t) = timed(simplex);
        ok &= report(3, "simplex guarantees", &o, t, None);
    }
    if want(4) {
        let (o, t) = timed(visibility);
        ok &= report(4, "visibility oracle", &o, t, None);
    }
    if want(5) {
        let (o, t) = timed(sampling);
        ok &= report(5, "surface-guided sampling", &o, t, None);
    }
    if want(6) {
        let (o, t) = timed(gradients);
        ok &= report(6, "gradient integrity", &o, t, Some(secs(60)));
    }
    if want(7) {
        let (o, t) = timed(overfit);
        ok &= report(7, "monocular overfit", &o, t, Some(secs(30 * 60)));
    }

    if want(8) || want(9) {
        let t0 = Instant::now();
        let g = generalization();
        let took = t0.elapsed();
        let (with, without) = (&g.with_attention, &g.without_attention);
        let margin = with.mean_psnr() - with.mean_baseline_psnr();
        let o = outcome(
            margin >= 5.0,
            format!(
                "unseen identity PSNR {:.2} dB, SSIM {:.4}, constant image {:.2} dB (margin {margin:.2} dB)",
                with.mean_psnr(),
                with.mean_ssim(),
                with.mean_baseline_psnr()
            ),
        );
        ok &= report(8, "generalization", &o, took, None);
        let drop = with.mean_psnr() - without.mean_psnr();
        let o = outcome(
            drop > 0.0,
            format!(
                "attention {:.2} dB -> volume feature only {:.2} dB (change {:+.2} dB)",
                with.mean_psnr(),
                without.mean_psnr(),
                -drop
            ),
        );
        ok &= report(9, "ablation direction", &o, took, None);
    }

    if want(10) {
        let (o, t) = timed(metrics);
        ok &= report(10, "metric correctness", &o, t, None);
    }
    if !ok {
        std::process::exit(1);
    }
}
