use mononerf::autodiff::Tape;
use mononerf::body::build_humanoid;
use mononerf::exec::Parallelism;
use mononerf::geometry::{generate_rays, rasterize_visibility, Camera, VisibilityConfig};
use mononerf::harness::dataset::{render_vertex_colors, ring_cameras, vertex_colors};
use mononerf::harness::eval::check_compatible;
use mononerf::harness::metrics::{constant_baseline_psnr, luma, mse, PSNR_CAP, SSIM_K1};
use mononerf::harness::select::{select_by_distance, select_evenly, vertex_distance};
use mononerf::harness::train::PreparedCapture;
use mononerf::harness::*;
use mononerf::imagebuf::Image;
use mononerf::math::Vec3;
use mononerf::model::{FrameGeometry, Model, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(frames: usize, views: usize, size: usize) -> SceneConfig {
    SceneConfig {
        frames,
        views,
        width: size,
        height: size,
        supersample: 1,
        heldout_every: 0,
        ..Default::default()
    }
}

fn small_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.encoder.channels = [8, 8, 8, 8];
    m.encoder.feature_dim = 8;
    m.volume.channels = 8;
    m.volume.levels = 2;
    m.key_dim = 8;
    m.head_hidden = 32;
    m.latent_dim = 4;
    m.samples_per_ray = 8;
    m
}

fn small_train(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        inputs: 2,
        rays_per_batch: 64,
        iterations: 10,
        learning_rate: 1e-3,
        voxel_size: 0.06,
        seed: Some(seed),
        log_window: 5,
        model: small_model(),
        ..Default::default()
    }
}

fn noise(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(w, h);
    img.data.iter_mut().for_each(|v| *v = rng.gen());
    img
}

// ---- dataset ----

#[test]
fn static_pose_images_differ_iff_cameras_differ() {
    let cfg = SceneConfig {
        motion: Motion::Static,
        frames: 2,
        views: 2,
        width: 32,
        height: 32,
        ..Default::default()
    };
    let c = generate_capture(&cfg).unwrap();
    assert_eq!(c.views[0].frames[0].image, c.views[0].frames[1].image);
    assert_ne!(c.views[0].frames[0].image, c.views[1].frames[0].image);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = SceneConfig {
        frames: 3,
        views: 2,
        width: 24,
        height: 24,
        seed: 9,
        ..Default::default()
    };
    assert_eq!(
        generate_capture(&cfg).unwrap(),
        generate_capture(&cfg).unwrap()
    );
    let other = generate_capture(&SceneConfig {
        seed: 10,
        ..cfg.clone()
    })
    .unwrap();
    assert_ne!(
        other.views[0].frames[0].image,
        generate_capture(&cfg).unwrap().views[0].frames[0].image
    );
}

#[test]
fn visible_vertex_colors_reproject_into_their_pixels() {
    let cfg = SceneConfig {
        width: 256,
        height: 256,
        views: 1,
        ..Default::default()
    };
    let human = build_humanoid(cfg.seed, &cfg.body).unwrap();
    let t = &human.template;
    let colors = vertex_colors(t, &human.vertex_parts, cfg.seed);
    let cam = &ring_cameras(&cfg).unwrap()[0];
    let verts = t.vertices();
    let img = render_vertex_colors(verts, t.faces(), &colors, cam, 1);
    let vis = rasterize_visibility(verts, t.faces(), cam, &VisibilityConfig::default());
    let mut ring: Vec<Vec<usize>> = vec![Vec::new(); verts.len()];
    for f in t.faces() {
        for &a in f {
            ring[a].extend(f.iter().copied());
        }
    }
    let (mut checked, mut ok) = (0, 0);
    for i in 0..verts.len() {
        if !vis[i] {
            continue;
        }
        let p = cam.project(verts[i]);
        let (x, y) = (p.u.floor(), p.v.floor());
        if !cam.in_image(p.u, p.v) || x < 0.0 || y < 0.0 {
            continue;
        }
        checked += 1;
        let envelope: Vec<(f64, f64)> = (0..3)
            .map(|k| {
                let c = ring[i].iter().map(|&j| colors[j][k]);
                (
                    c.clone().fold(f64::INFINITY, f64::min),
                    c.fold(f64::NEG_INFINITY, f64::max),
                )
            })
            .collect();
        // a pixel center within one pixel of the projection lies on a face
        // touching the vertex, so its color sits inside the 1-ring envelope
        let matches = |px: [f64; 3]| {
            (0..3).all(|k| px[k] >= envelope[k].0 - 1e-9 && px[k] <= envelope[k].1 + 1e-9)
        };
        let (x, y) = (x as usize, y as usize);
        let found = (y.saturating_sub(1)..=(y + 1).min(img.height - 1)).any(|yy| {
            (x.saturating_sub(1)..=(x + 1).min(img.width - 1)).any(|xx| matches(img.get(xx, yy)))
        });
        ok += found as usize;
    }
    assert!(checked > 200, "only {checked} visible vertices");
    assert!(
        ok as f64 >= 0.95 * checked as f64,
        "{ok}/{checked} vertices match a nearby pixel"
    );
}

#[test]
fn sequence_directory_round_trip() {
    let c = generate_capture(&SceneConfig {
        frames: 3,
        views: 2,
        width: 20,
        height: 16,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_capture(&c, dir.path()).unwrap();
    let back = load_capture(dir.path()).unwrap();
    assert_eq!(back.views.len(), 2);
    assert_eq!(back.template, c.template);
    for (a, b) in c.views.iter().zip(&back.views) {
        assert_eq!(a.name, b.name);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.image.quantized(), fb.image);
            assert_eq!(fa.pose, fb.pose);
            assert_eq!(fa.split, fb.split);
            assert_eq!(fa.time_index, fb.time_index);
            assert_eq!(fa.camera.camera_id, fb.camera.camera_id);
            let p = Vec3::new(0.1, 1.0, -0.2);
            assert!((fa.camera.project(p).u - fb.camera.project(p).u).abs() < 1e-9);
        }
    }
    // a single view directory loads as a one-view capture
    assert_eq!(
        load_capture(&dir.path().join("view01"))
            .unwrap()
            .views
            .len(),
        1
    );
}

#[test]
fn unsupported_manifest_version_is_rejected() {
    let c = generate_capture(&SceneConfig {
        frames: 1,
        width: 8,
        height: 8,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_capture(&c, dir.path()).unwrap();
    let m = dir.path().join("view00/manifest.toml");
    let text = std::fs::read_to_string(&m)
        .unwrap()
        .replace("version = 1", "version = 7");
    std::fs::write(&m, text).unwrap();
    let err = load_capture(dir.path()).unwrap_err().to_string();
    assert!(err.contains("v7"), "{err}");
}

// ---- frame selection ----

#[test]
fn pool_of_exactly_t_returns_everything() {
    let pool = [2, 5, 7];
    assert_eq!(select_evenly(&pool, 3), pool);
    assert_eq!(select_by_distance(&pool, 3, |i| i as f64), pool);
}

#[test]
fn zero_distance_frames_are_chosen() {
    let c = generate_capture(&SceneConfig {
        frames: 12,
        width: 8,
        height: 8,
        ..Default::default()
    })
    .unwrap();
    let p = PreparedCapture::new(&c).unwrap();
    let posed: Vec<Vec<Vec3>> = p.geometry[0].iter().map(|g| g.posed.clone()).collect();
    let mut cams: Vec<Camera> = c.views[0].frames.iter().map(|f| f.camera.clone()).collect();
    let mut posed = posed;
    // frames 3, 8 and 10 share the target's pose
    let target = posed[0].clone();
    for i in [3, 8, 10] {
        posed[i] = target.clone();
        cams[i] = cams[0].clone();
    }
    let pool: Vec<usize> = (1..12).collect();
    let picked = select_frames(&pool, 3, Criterion::VertexDistance, &target, &posed, &cams);
    assert_eq!(picked, vec![3, 8, 10]);
}

#[test]
fn vertex_distance_selection_matches_exhaustive_sort() {
    let c = generate_capture(&SceneConfig {
        frames: 20,
        motion: Motion::WaveTurn,
        width: 8,
        height: 8,
        ..Default::default()
    })
    .unwrap();
    let p = PreparedCapture::new(&c).unwrap();
    let posed: Vec<Vec<Vec3>> = p.geometry[0].iter().map(|g| g.posed.clone()).collect();
    let cams: Vec<Camera> = c.views[0].frames.iter().map(|f| f.camera.clone()).collect();
    for target in [0, 7, 13] {
        let pool: Vec<usize> = (0..20).filter(|&i| i != target).collect();
        for t in [1, 4, 9] {
            let picked = select_frames(
                &pool,
                t,
                Criterion::VertexDistance,
                &posed[target],
                &posed,
                &cams,
            );
            // exhaustive oracle computed from scratch in camera coordinates
            let mut d: Vec<(f64, usize)> = pool
                .iter()
                .map(|&i| {
                    let s: f64 = posed[target]
                        .iter()
                        .zip(&posed[i])
                        .map(|(&a, &b)| {
                            let (qa, qb) = (cams[i].to_camera(a), cams[i].to_camera(b));
                            ((qa.x - qb.x).powi(2) + (qa.y - qb.y).powi(2) + (qa.z - qb.z).powi(2))
                                .sqrt()
                        })
                        .sum();
                    (s, i)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut oracle: Vec<usize> = d[..t].iter().map(|x| x.1).collect();
            oracle.sort();
            assert_eq!(picked, oracle, "target {target}, T {t}");
            assert!(
                (vertex_distance(&posed[target], &posed[pool[0]], &cams[pool[0]])
                    - d.iter().find(|x| x.1 == pool[0]).unwrap().0)
                    .abs()
                    < 1e-9
            );
        }
    }
}

// ---- training ----

#[test]
fn single_frame_overfit_loss_decreases_over_fifty_windows() {
    let capture = generate_capture(&scene(1, 1, 32)).unwrap();
    let mut cfg = small_train(Mode::Mot, 3);
    cfg.inputs = 1;
    // the batch covers the whole body box, so only the depth jitter is random
    cfg.rays_per_batch = 512;
    cfg.learning_rate = 2e-4;
    cfg.log_window = 16;
    cfg.iterations = 50 * 16;
    let out = train(&cfg, std::slice::from_ref(&capture), &mut |_| {}).unwrap();
    let w = &out.curve.windows;
    assert_eq!(w.len(), 50);
    let mut strict = 0;
    for k in 1..w.len() {
        // Adam wobbles by a few percent near the plateau
        assert!(
            w[k] < 1.05 * w[k - 1],
            "window {k}: {} vs {}\n{w:?}",
            w[k],
            w[k - 1]
        );
        strict += (w[k] < w[k - 1]) as usize;
    }
    assert!(strict >= 45, "only {strict}/49 windows decreased\n{w:?}");
    assert!(w[49] < 0.1 * w[0], "{w:?}");
}

#[test]
fn equal_seeds_give_identical_loss_curves() {
    let capture = generate_capture(&scene(4, 2, 24)).unwrap();
    let cfg = small_train(Mode::Mvt, 5);
    let caps = std::slice::from_ref(&capture);
    let a = train(&cfg, caps, &mut |_| {}).unwrap();
    let b = train(&cfg, caps, &mut |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.episodes, b.episodes);
    let c = train(
        &TrainConfig {
            seed: Some(6),
            ..cfg
        },
        caps,
        &mut |_| {},
    )
    .unwrap();
    assert_ne!(a.curve.losses, c.curve.losses);
}

#[test]
fn monocular_training_stays_on_one_camera() {
    let capture = generate_capture(&scene(5, 3, 16)).unwrap();
    let mut cfg = small_train(Mode::Mot, 8);
    cfg.iterations = 30;
    let mut tr = Trainer::new(&cfg, std::slice::from_ref(&capture)).unwrap();
    for _ in 0..cfg.iterations {
        tr.step().unwrap();
    }
    for e in &tr.episodes {
        assert_eq!(e.input_view, e.target_view);
        assert!(!e.inputs.contains(&e.target));
        assert!(e
            .input_camera_ids
            .iter()
            .all(|&id| id == e.target_camera_id));
    }
    // and multi-view training supervises with another camera
    let mut tr = Trainer::new(
        &TrainConfig {
            mode: Mode::Mvt,
            ..cfg
        },
        std::slice::from_ref(&capture),
    )
    .unwrap();
    for _ in 0..10 {
        tr.step().unwrap();
    }
    assert!(tr.episodes.iter().all(|e| e.input_view != e.target_view
        && e.input_camera_ids
            .iter()
            .all(|&id| id != e.target_camera_id)));
}

#[test]
fn missing_seed_is_rejected() {
    let err = TrainConfig::from_toml("inputs = 4\n")
        .unwrap()
        .validate()
        .unwrap_err();
    assert!(err.to_string().contains("seed"));
    let capture = generate_capture(&scene(1, 1, 8)).unwrap();
    assert!(Trainer::new(
        &TrainConfig {
            seed: None,
            ..small_train(Mode::Mot, 0)
        },
        &[capture]
    )
    .is_err());
}

#[test]
fn config_toml_round_trip() {
    let mut cfg = small_train(Mode::Mot, 11);
    cfg.selection = Criterion::VertexDistance;
    cfg.data = vec!["captures/a".into()];
    cfg.output = Some("out/model.ckpt".into());
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(TrainConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
    assert!(TrainConfig::from_toml("seed = 1\ninputs = 0\n")
        .unwrap()
        .validate()
        .is_err());
}

#[test]
fn config_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.toml");
    std::fs::write(
        &path,
        "seed = 4\ndata = [\"caps/a\"]\noutput = \"m.ckpt\"\n",
    )
    .unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.data[0], dir.path().join("caps/a"));
    assert_eq!(cfg.output.unwrap(), dir.path().join("m.ckpt"));
}

// ---- rendering and checkpoints ----

fn untrained(capture: &Capture, seed: u64) -> (Model, mononerf::autodiff::ParamStore) {
    Model::new(
        &small_train(Mode::Mvt, seed).model_config(),
        capture.template.num_joints(),
        seed,
    )
}

#[test]
fn zero_density_model_renders_background() {
    let capture = generate_capture(&scene(3, 1, 24)).unwrap();
    let (mut model, mut store) = untrained(&capture, 1);
    model.config.background = [0.25, 0.5, 0.75];
    let last = model.density.mlp.layers.last().unwrap();
    store.get_mut(last.weight).value.data_mut().fill(0.0);
    store.get_mut(last.bias).value.data_mut().fill(-1e3);
    let f = &capture.views[0].frames[2];
    let (img, _, evaluated) = render_target(
        &model,
        &store,
        &capture,
        0,
        &[0, 1],
        &f.pose,
        &f.camera,
        false,
        Parallelism::Rayon,
    )
    .unwrap();
    assert!(evaluated > 0);
    for px in img.data.chunks(3) {
        for k in 0..3 {
            assert!((px[k] - model.config.background[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_renders_are_identical_across_executors() {
    let capture = generate_capture(&scene(3, 2, 24)).unwrap();
    let (model, store) = untrained(&capture, 2);
    let f = &capture.views[1].frames[1];
    let r = |par| {
        render_target(
            &model,
            &store,
            &capture,
            0,
            &[0, 2],
            &f.pose,
            &f.camera,
            true,
            par,
        )
        .unwrap()
    };
    let (a, da, ea) = r(Parallelism::Rayon);
    let (b, db, eb) = r(Parallelism::Rayon);
    let (c, dc, ec) = r(Parallelism::Sequential);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!((ea, eb), (ec, ec));
    assert_eq!(da, db);
    assert_eq!(da, dc);
    let d = da.unwrap();
    assert_eq!(d.sigma.len(), d.dims.iter().product::<usize>());
}

#[test]
fn network_evaluations_equal_sample_count() {
    let capture = generate_capture(&scene(2, 1, 24)).unwrap();
    let (model, store) = untrained(&capture, 3);
    let p = PreparedCapture::new(&capture).unwrap();
    let f = &capture.views[0].frames[1];
    let geom = FrameGeometry::new(&capture.template, &f.pose);
    let inputs = p.input_frames(0, &[0]);
    let (_, _, evaluated) = render_target(
        &model,
        &store,
        &capture,
        0,
        &[0],
        &f.pose,
        &f.camera,
        false,
        Parallelism::Rayon,
    )
    .unwrap();
    let tape = Tape::inference();
    let ctx = model.build_context(&tape, &store, &capture.template, &inputs, &geom, None);
    let pixels: Vec<(usize, usize)> = (0..24).flat_map(|y| (0..24).map(move |x| (x, y))).collect();
    let rays = generate_rays(&f.camera, &pixels, f.time_index);
    let total: usize = model
        .sample_rays(&ctx, &rays, None)
        .iter()
        .map(|s| s.depths.len())
        .sum();
    assert!(total > 0);
    assert_eq!(evaluated, total);

    // a camera facing away from the body never reaches the network
    let away = Camera::look_at(
        Vec3::new(0.0, 1.0, 3.5),
        Vec3::new(0.0, 1.0, 10.0),
        Vec3::new(0.0, 1.0, 0.0),
        40.0,
        24,
        24,
        0,
    )
    .unwrap();
    let (img, _, evaluated) = render_target(
        &model,
        &store,
        &capture,
        0,
        &[0],
        &f.pose,
        &away,
        false,
        Parallelism::Rayon,
    )
    .unwrap();
    assert_eq!(evaluated, 0);
    assert!(img.data.iter().all(|&v| v == 0.0));
}

#[test]
fn incompatible_checkpoint_reports_dimensions() {
    let capture = generate_capture(&scene(2, 1, 16)).unwrap();
    let (model, store) = Model::new(&small_model(), 5, 0);
    let f = &capture.views[0].frames[0];
    let err = render_target(
        &model,
        &store,
        &capture,
        0,
        &[1],
        &f.pose,
        &f.camera,
        false,
        Parallelism::Rayon,
    )
    .unwrap_err();
    assert!(matches!(err, HarnessError::Incompatible(_)));
    let msg = err.to_string();
    assert!(msg.contains("5 body parts") && msg.contains("12"), "{msg}");
    assert!(check_compatible(&model, 5).is_ok());
}

#[test]
fn checkpoint_round_trip_reproduces_renders() {
    let capture = generate_capture(&scene(3, 1, 16)).unwrap();
    let mut cfg = small_train(Mode::Mot, 12);
    cfg.iterations = 4;
    let dir = tempfile::tempdir().unwrap();
    cfg.output = Some(dir.path().join("m.ckpt"));
    cfg.checkpoint_every = 2;
    let out = train(&cfg, std::slice::from_ref(&capture), &mut |_| {}).unwrap();
    assert_eq!(
        out.checkpoints,
        vec![dir.path().join("m-000002.ckpt"), dir.path().join("m.ckpt")]
    );
    let (model, store, extra) = load_checkpoint(&dir.path().join("m.ckpt")).unwrap();
    assert_eq!(extra["iteration"], 4);
    assert_eq!(model.config, out.model.config);
    let f = &capture.views[0].frames[2];
    let r = |m: &Model, s| {
        render_target(
            m,
            s,
            &capture,
            0,
            &[0, 1],
            &f.pose,
            &f.camera,
            false,
            Parallelism::Rayon,
        )
        .unwrap()
        .0
    };
    assert_eq!(r(&model, &store), r(&out.model, &out.store));
}

#[test]
fn evaluation_reports_one_row_per_heldout_frame() {
    let capture = generate_capture(&SceneConfig {
        frames: 10,
        width: 16,
        height: 16,
        supersample: 1,
        ..Default::default()
    })
    .unwrap();
    let (model, store) = untrained(&capture, 4);
    let cfg = small_train(Mode::Mot, 4);
    let rep = evaluate(
        &model,
        &store,
        &capture,
        &cfg,
        &EvalSpec::monocular(),
        Parallelism::Rayon,
    )
    .unwrap();
    let held = capture.views[0].indices(Split::Heldout);
    assert_eq!(rep.rows.iter().map(|r| r.frame).collect::<Vec<_>>(), held);
    assert!(rep.table().lines().count() == held.len() + 2);
}

// ---- metrics ----

#[test]
fn psnr_closed_forms() {
    let a = Image::filled(8, 8, [0.3, 0.6, 0.9]);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = Image::filled(8, 8, [0.4, 0.7, 1.0]);
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(
        psnr(&Image::filled(8, 8, [1.0; 3]), &Image::new(8, 8)).unwrap(),
        0.0
    );
}

#[test]
fn ssim_closed_forms() {
    let a = noise(20, 20, 1);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let mut neg = a.clone();
    neg.data.iter_mut().for_each(|v| *v = 1.0 - *v);
    assert!(ssim(&a, &neg).unwrap() < 0.0);
    // constant patches: zero variances leave (2ab + C1) / (a² + b² + C1) on luma
    let (x, y) = (
        Image::filled(16, 16, [0.2, 0.5, 0.1]),
        Image::filled(16, 16, [0.7, 0.4, 0.9]),
    );
    let (la, lb) = (luma(&x)[0], luma(&y)[0]);
    let c1 = SSIM_K1 * SSIM_K1;
    let expect = (2.0 * la * lb + c1) / (la * la + lb * lb + c1);
    assert!((ssim(&x, &y).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn metrics_reject_size_mismatch() {
    let (a, b) = (Image::new(8, 8), Image::new(8, 9));
    assert!(matches!(psnr(&a, &b), Err(HarnessError::Dimension(_))));
    assert!(matches!(ssim(&a, &b), Err(HarnessError::Dimension(_))));
}

#[test]
fn constant_baseline_uses_the_mean_color() {
    let mut img = Image::new(2, 1);
    img.set(0, 0, [0.0, 0.2, 0.4]);
    img.set(1, 0, [1.0, 0.2, 0.8]);
    // per-channel errors: 0.5, 0, 0.2 on both pixels
    let m: f64 = (0.25 + 0.0 + 0.04) / 3.0;
    assert!((constant_baseline_psnr(&img) + 10.0 * m.log10()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (noise(13, 12, s1), noise(13, 12, s2));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
