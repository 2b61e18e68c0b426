use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::dataset::{Capture, Split};
use super::select::select_frames;
use super::HarnessError;
use crate::autodiff::{Adam, ParamStore, Tape};
use crate::exec::Parallelism;
use crate::fusion::photometric_loss;
use crate::geometry::{generate_rays, Camera, DistanceGrid};
use crate::imagebuf::Image;
use crate::math::{bounds, Vec3};
use crate::model::{
    body_distance_grid, frame_visibility, FrameGeometry, InputFrame, Model, ModelConfig,
};

/// Posed geometry and visibility for every frame of every view.
pub struct PreparedCapture<'a> {
    pub capture: &'a Capture,
    /// `[view][frame]`.
    pub geometry: Vec<Vec<FrameGeometry>>,
    pub visibility: Vec<Vec<Vec<bool>>>,
    grids: HashMap<usize, Rc<DistanceGrid>>,
}

impl<'a> PreparedCapture<'a> {
    pub fn new(capture: &'a Capture) -> Result<Self, HarnessError> {
        let faces = capture.template.faces();
        let mut geometry = Vec::new();
        let mut visibility = Vec::new();
        for v in &capture.views {
            v.validate()?;
            if v.template.num_joints() != capture.template.num_joints() {
                return Err(HarnessError::Data(format!(
                    "{}: view template differs from capture template",
                    v.name
                )));
            }
            let g: Vec<FrameGeometry> = v
                .frames
                .iter()
                .map(|f| FrameGeometry::new(&capture.template, &f.pose))
                .collect();
            visibility.push(
                g.iter()
                    .zip(&v.frames)
                    .map(|(g, f)| frame_visibility(g, faces, &f.camera))
                    .collect(),
            );
            geometry.push(g);
        }
        Ok(PreparedCapture {
            capture,
            geometry,
            visibility,
            grids: HashMap::new(),
        })
    }

    /// Distance grid of the body at `(view, frame)`, cached per time index.
    pub fn grid(&mut self, view: usize, frame: usize, cfg: &ModelConfig) -> Rc<DistanceGrid> {
        let t = self.capture.views[view].frames[frame].time_index;
        let g = &self.geometry[view][frame];
        let faces = self.capture.template.faces();
        self.grids
            .entry(t)
            .or_insert_with(|| {
                Rc::new(body_distance_grid(&g.posed, faces, cfg, Parallelism::Rayon))
            })
            .clone()
    }

    pub fn input_frames(&self, view: usize, frames: &[usize]) -> Vec<InputFrame<'_>> {
        let seq = &self.capture.views[view];
        frames
            .iter()
            .map(|&i| InputFrame {
                image: &seq.frames[i].image,
                camera: &seq.frames[i].camera,
                geometry: &self.geometry[view][i],
                visibility: &self.visibility[view][i],
            })
            .collect()
    }

    /// `T` input frames of `view` for a target with posed vertices `target`,
    /// drawn from `pool`.
    pub fn select(
        &self,
        view: usize,
        pool: &[usize],
        target: &[Vec3],
        cfg: &TrainConfig,
    ) -> Vec<usize> {
        let seq = &self.capture.views[view];
        let posed: Vec<Vec<Vec3>> = self.geometry[view]
            .iter()
            .map(|g| g.posed.clone())
            .collect();
        let cams: Vec<Camera> = seq.frames.iter().map(|f| f.camera.clone()).collect();
        select_frames(pool, cfg.inputs, cfg.selection, target, &posed, &cams)
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covering the projected 3D bounding
/// box of `posed`, dilated by `margin` pixels and clipped to the image.
pub fn body_pixel_box(
    posed: &[Vec3],
    camera: &Camera,
    margin: usize,
) -> Option<(usize, usize, usize, usize)> {
    let (lo, hi) = bounds(posed);
    let (mut u0, mut v0, mut u1, mut v1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for k in 0..8 {
        let c = Vec3::new(
            if k & 1 == 0 { lo.x } else { hi.x },
            if k & 2 == 0 { lo.y } else { hi.y },
            if k & 4 == 0 { lo.z } else { hi.z },
        );
        let p = camera.project(c);
        if !p.projectable {
            return Some((0, camera.width, 0, camera.height));
        }
        u0 = u0.min(p.u);
        v0 = v0.min(p.v);
        u1 = u1.max(p.u);
        v1 = v1.max(p.v);
    }
    let m = margin as f64;
    let clip = |x: f64, n: usize| x.clamp(0.0, n as f64) as usize;
    let (x0, x1) = (
        clip((u0 - m).floor(), camera.width),
        clip((u1 + m).ceil(), camera.width),
    );
    let (y0, y1) = (
        clip((v0 - m).floor(), camera.height),
        clip((v1 + m).ceil(), camera.height),
    );
    (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
}

/// Up to `n` distinct pixels of the box, drawn without replacement; the whole
/// box when it holds no more than `n`.
pub fn batch_pixels(
    rng: &mut ChaCha8Rng,
    (x0, x1, y0, y1): (usize, usize, usize, usize),
    n: usize,
) -> Vec<(usize, usize)> {
    let w = x1 - x0;
    let count = w * (y1 - y0);
    let pick = |i: usize| (x0 + i % w, y0 + i / w);
    if count <= n {
        return (0..count).map(pick).collect();
    }
    rand::seq::index::sample(rng, count, n)
        .into_iter()
        .map(pick)
        .collect()
}

/// Window-averaged training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub window: usize,
    /// Per-iteration loss (mean squared error per ray).
    pub losses: Vec<f64>,
    /// Means of consecutive complete windows.
    pub windows: Vec<f64>,
}

impl LossCurve {
    pub fn new(window: usize) -> Self {
        LossCurve {
            window,
            ..Default::default()
        }
    }

    /// Records a loss; returns the window mean when a window completes.
    pub fn push(&mut self, loss: f64) -> Option<f64> {
        self.losses.push(loss);
        if self.losses.len() % self.window == 0 {
            let tail = &self.losses[self.losses.len() - self.window..];
            let m = tail.iter().sum::<f64>() / self.window as f64;
            self.windows.push(m);
            return Some(m);
        }
        None
    }
}

/// What one iteration trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub capture: usize,
    pub input_view: usize,
    pub inputs: Vec<usize>,
    pub input_camera_ids: Vec<usize>,
    pub target_view: usize,
    pub target: usize,
    pub target_camera_id: usize,
}

pub struct Progress<'a> {
    pub iteration: usize,
    pub loss: f64,
    pub window_mean: Option<f64>,
    pub episode: &'a Episode,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub curve: LossCurve,
    pub episodes: Vec<Episode>,
    pub checkpoints: Vec<PathBuf>,
}

/// A single-frame sequence can only be overfit: its target is its own input.
fn own_frame_if_empty(pool: Vec<usize>, target: usize) -> Vec<usize> {
    if pool.is_empty() {
        vec![target]
    } else {
        pool
    }
}

/// Draws the target and input frames for one iteration.
pub fn draw_episode(
    rng: &mut ChaCha8Rng,
    prepared: &[PreparedCapture],
    cfg: &TrainConfig,
) -> Result<Episode, HarnessError> {
    let c = rng.gen_range(0..prepared.len());
    let p = &prepared[c];
    let views = &p.capture.views;
    let pick = |rng: &mut ChaCha8Rng, xs: &[usize]| xs[rng.gen_range(0..xs.len())];
    let (input_view, target_view, target, pool) = match cfg.mode {
        Mode::Mot => {
            let v = rng.gen_range(0..views.len());
            let train = views[v].indices(Split::Train);
            if train.is_empty() {
                return Err(HarnessError::Data(format!(
                    "{}: no training frames",
                    views[v].name
                )));
            }
            let t = pick(rng, &train);
            let pool: Vec<usize> = train.into_iter().filter(|&i| i != t).collect();
            (v, v, t, own_frame_if_empty(pool, t))
        }
        Mode::Mvt => {
            let vi = rng.gen_range(0..views.len());
            let vt = if views.len() > 1 {
                let k = rng.gen_range(0..views.len() - 1);
                if k >= vi {
                    k + 1
                } else {
                    k
                }
            } else {
                vi
            };
            let train_t = views[vt].indices(Split::Train);
            if train_t.is_empty() {
                return Err(HarnessError::Data(format!(
                    "{}: no training frames",
                    views[vt].name
                )));
            }
            let t = pick(rng, &train_t);
            let train_i = views[vi].indices(Split::Train);
            if train_i.is_empty() {
                return Err(HarnessError::Data(format!(
                    "{}: no input frames",
                    views[vi].name
                )));
            }
            let pool: Vec<usize> = train_i
                .into_iter()
                .filter(|&i| vi != vt || i != t)
                .collect();
            (vi, vt, t, own_frame_if_empty(pool, t))
        }
    };
    let inputs = p.select(
        input_view,
        &pool,
        &p.geometry[target_view][target].posed,
        cfg,
    );
    Ok(Episode {
        capture: c,
        input_view,
        input_camera_ids: inputs
            .iter()
            .map(|&i| views[input_view].frames[i].camera.camera_id)
            .collect(),
        inputs,
        target_view,
        target,
        target_camera_id: views[target_view].frames[target].camera.camera_id,
    })
}

fn save_checkpoint(
    model: &Model,
    store: &ParamStore,
    path: &Path,
    iteration: usize,
    cfg: &TrainConfig,
) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }
    let f = File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let extra = serde_json::json!({ "iteration": iteration, "train": cfg });
    model.save(store, &mut BufWriter::new(f), extra)?;
    Ok(())
}

fn periodic_path(out: &Path, iteration: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let ext = out
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    out.with_file_name(format!("{stem}-{iteration:06}.{ext}"))
}

/// Stepwise training state; [`train`] drives it to completion.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub curve: LossCurve,
    pub episodes: Vec<Episode>,
    pub iteration: usize,
    prepared: Vec<PreparedCapture<'a>>,
    rng: ChaCha8Rng,
    adam: Adam,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, captures: &'a [Capture]) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let seed = cfg.seed()?;
        if captures.is_empty() {
            return Err(HarnessError::Data("no training captures".into()));
        }
        let parts = captures[0].template.num_joints();
        if let Some(c) = captures.iter().find(|c| c.template.num_joints() != parts) {
            return Err(HarnessError::Data(format!(
                "{}: {} parts, expected {parts}",
                c.name,
                c.template.num_joints()
            )));
        }
        let (model, mut store) = Model::new(&cfg.model_config(), parts, seed);
        let all: Vec<&Image> = captures
            .iter()
            .flat_map(|c| {
                c.views
                    .iter()
                    .flat_map(|v| v.frames.iter().map(|f| &f.image))
            })
            .collect();
        model.encoder.set_normalization(&mut store, &all);
        let prepared = captures
            .iter()
            .map(PreparedCapture::new)
            .collect::<Result<_, _>>()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            curve: LossCurve::new(cfg.log_window),
            episodes: Vec::new(),
            iteration: 0,
            prepared,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7261_6e64)),
            adam: Adam::with_lr(cfg.learning_rate),
        })
    }

    /// One optimization step. Returns the per-ray loss and what was trained on.
    pub fn step(&mut self) -> Result<(f64, Option<f64>), HarnessError> {
        let cfg = &self.cfg;
        let it = self.iteration;
        let rng = &mut self.rng;
        let ep = draw_episode(rng, &self.prepared, cfg)?;
        let grid = self.prepared[ep.capture].grid(ep.target_view, ep.target, &self.model.config);
        let p = &self.prepared[ep.capture];
        let tframe = &p.capture.views[ep.target_view].frames[ep.target];
        let tgeom = &p.geometry[ep.target_view][ep.target];
        let pixels: Vec<(usize, usize)> =
            match body_pixel_box(&tgeom.posed, &tframe.camera, cfg.bbox_dilation) {
                Some(b) => batch_pixels(rng, b, cfg.rays_per_batch),
                None => Vec::new(),
            };
        let loss_value = if pixels.is_empty() {
            0.0
        } else {
            let model = &self.model;
            let tape = Tape::new();
            let inputs = p.input_frames(ep.input_view, &ep.inputs);
            let ctx = model.build_context(
                &tape,
                &self.store,
                &p.capture.template,
                &inputs,
                tgeom,
                Some(grid),
            );
            let rays = generate_rays(&tframe.camera, &pixels, tframe.time_index);
            let samples = model.sample_rays(&ctx, &rays, Some(rng));
            let out = model.render_rays(
                &tape,
                &self.store,
                &p.capture.template,
                &ctx,
                &rays,
                &samples,
                tframe.camera.camera_id,
            );
            let reference: Vec<f64> = pixels
                .iter()
                .flat_map(|&(x, y)| tframe.image.get(x, y))
                .collect();
            let loss = photometric_loss(&tape, out.colors, &reference);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(HarnessError::NonFinite(format!(
                    "iteration {it}: loss {value} (capture {}, target view {} frame {}, inputs {:?}, {} rays, {} samples)",
                    p.capture.name,
                    ep.target_view,
                    ep.target,
                    ep.inputs,
                    rays.len(),
                    out.evaluated
                )));
            }
            tape.backward(loss, &mut self.store);
            self.adam.step(&mut self.store);
            value / pixels.len() as f64
        };
        let window_mean = self.curve.push(loss_value);
        self.episodes.push(ep);
        self.iteration += 1;
        Ok((loss_value, window_mean))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        save_checkpoint(&self.model, &self.store, path, self.iteration, &self.cfg)
    }
}

/// Runs the training loop on `captures`; fully determined by the config seed.
pub fn train(
    cfg: &TrainConfig,
    captures: &[Capture],
    observer: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome, HarnessError> {
    let mut trainer = Trainer::new(cfg, captures)?;
    let mut checkpoints = Vec::new();
    for it in 0..cfg.iterations {
        let (loss, window_mean) = trainer.step()?;
        observer(&Progress {
            iteration: it,
            loss,
            window_mean,
            episode: trainer.episodes.last().expect("episode"),
        });
        if let Some(out) = &cfg.output {
            if cfg.checkpoint_every > 0
                && (it + 1) % cfg.checkpoint_every == 0
                && it + 1 < cfg.iterations
            {
                let path = periodic_path(out, it + 1);
                trainer.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(out) = &cfg.output {
        trainer.save(out)?;
        checkpoints.push(out.clone());
    }
    let Trainer {
        model,
        store,
        curve,
        episodes,
        ..
    } = trainer;
    Ok(TrainOutcome {
        model,
        store,
        curve,
        episodes,
        checkpoints,
    })
}
