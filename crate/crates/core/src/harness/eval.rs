use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::dataset::{Capture, Split};
use super::metrics::{constant_baseline_psnr, psnr, ssim};
use super::train::PreparedCapture;
use super::HarnessError;
use crate::autodiff::ParamStore;
use crate::body::Pose;
use crate::exec::Parallelism;
use crate::geometry::Camera;
use crate::imagebuf::Image;
use crate::model::{FrameGeometry, Model};

/// One evaluated target frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub view: usize,
    pub frame: usize,
    pub time_index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the best constant image for this target.
    pub baseline_psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|r| r.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|r| r.ssim)
    }

    pub fn mean_baseline_psnr(&self) -> f64 {
        self.mean(|r| r.baseline_psnr)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("view  frame  time    psnr    ssim  const_psnr\n");
        for r in &self.rows {
            s += &format!(
                "{:>4}  {:>5}  {:>4}  {:>6.2}  {:>6.4}  {:>10.2}\n",
                r.view, r.frame, r.time_index, r.psnr, r.ssim, r.baseline_psnr
            );
        }
        s += &format!(
            "mean              {:>6.2}  {:>6.4}  {:>10.2}\n",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_baseline_psnr()
        );
        s
    }
}

/// Which targets to render and from which video.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub mode: Mode,
    /// The monocular input video.
    pub input_view: usize,
    /// Target frames must carry this tag (any when `None`).
    pub target_split: Option<Split>,
    /// Evaluate at most this many targets, evenly spread.
    pub max_targets: usize,
}

impl EvalSpec {
    /// Held-out frames of the input video itself.
    pub fn monocular() -> Self {
        EvalSpec {
            mode: Mode::Mot,
            input_view: 0,
            target_split: Some(Split::Heldout),
            max_targets: usize::MAX,
        }
    }

    /// Every frame of the other cameras, driven by view 0.
    pub fn novel_view(max_targets: usize) -> Self {
        EvalSpec {
            mode: Mode::Mvt,
            input_view: 0,
            target_split: None,
            max_targets,
        }
    }
}

/// Renders every selected target of `capture` and scores it.
/// In monocular mode targets come from the input video and never serve as
/// their own inputs; inputs are drawn from the training frames.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    capture: &Capture,
    train: &TrainConfig,
    spec: &EvalSpec,
    par: Parallelism,
) -> Result<EvalReport, HarnessError> {
    check_compatible(model, capture.template.num_joints())?;
    let mut prepared = PreparedCapture::new(capture)?;
    let vi = spec.input_view;
    if vi >= capture.views.len() {
        return Err(HarnessError::Data(format!(
            "{}: no view {vi}",
            capture.name
        )));
    }
    let mut targets = Vec::new();
    for (v, seq) in capture.views.iter().enumerate() {
        if (spec.mode == Mode::Mot) != (v == vi) {
            continue;
        }
        for (i, f) in seq.frames.iter().enumerate() {
            if spec.target_split.is_none_or(|s| s == f.split) {
                targets.push((v, i));
            }
        }
    }
    if targets.len() > spec.max_targets {
        let n = targets.len();
        targets = (0..spec.max_targets)
            .map(|k| targets[k * n / spec.max_targets])
            .collect();
    }
    let train_pool = capture.views[vi].indices(Split::Train);
    let mut rows = Vec::new();
    for (v, i) in targets {
        let pool: Vec<usize> = train_pool
            .iter()
            .copied()
            .filter(|&j| v != vi || j != i)
            .collect();
        if pool.is_empty() {
            return Err(HarnessError::Data(format!(
                "{}: no input frames for target {i}",
                capture.name
            )));
        }
        let target = prepared.geometry[v][i].clone();
        let inputs = prepared.select(vi, &pool, &target.posed, train);
        let grid = prepared.grid(v, i, &model.config);
        let frame = &capture.views[v].frames[i];
        let frames = prepared.input_frames(vi, &inputs);
        let (img, _) = model.render_image(
            store,
            &capture.template,
            &frames,
            &target,
            &frame.camera,
            Some(grid),
            par,
        );
        rows.push(EvalRow {
            view: v,
            frame: i,
            time_index: frame.time_index,
            psnr: psnr(&img, &frame.image)?,
            ssim: ssim(&img, &frame.image)?,
            baseline_psnr: constant_baseline_psnr(&frame.image),
        });
    }
    Ok(EvalReport { rows })
}

pub fn check_compatible(model: &Model, parts: usize) -> Result<(), HarnessError> {
    if model.parts != parts {
        return Err(HarnessError::Incompatible(format!(
            "checkpoint was trained for {} body parts (weight refiner input {}, output {}), template has {parts}",
            model.parts,
            4 * model.parts + 1,
            model.parts
        )));
    }
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(Model, ParamStore, serde_json::Value), HarnessError> {
    let f = File::open(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(Model::load(BufReader::new(f))?)
}

/// Voxelized density exported next to a render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityDump {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// x-fastest; zero outside the near-surface band.
    pub sigma: Vec<f64>,
}

/// Renders `target` seen by `camera` using frames `inputs` of `view` as the
/// monocular input video; optionally also returns the density grid.
#[allow(clippy::too_many_arguments)]
pub fn render_target(
    model: &Model,
    store: &ParamStore,
    capture: &Capture,
    view: usize,
    inputs: &[usize],
    target: &Pose,
    camera: &Camera,
    with_density: bool,
    par: Parallelism,
) -> Result<(Image, Option<DensityDump>, usize), HarnessError> {
    check_compatible(model, capture.template.num_joints())?;
    if target.joint_rotations.len() != capture.template.num_joints() {
        return Err(HarnessError::Data(format!(
            "target pose has {} joints, template has {}",
            target.joint_rotations.len(),
            capture.template.num_joints()
        )));
    }
    let prepared = PreparedCapture::new(capture)?;
    let geom = FrameGeometry::new(&capture.template, target);
    let frames = prepared.input_frames(view, inputs);
    let (img, evaluated) =
        model.render_image(store, &capture.template, &frames, &geom, camera, None, par);
    let dump = with_density.then(|| {
        let tape = crate::autodiff::Tape::inference();
        let ctx = model.build_context(&tape, store, &capture.template, &frames, &geom, None);
        let sigma = model.density_grid(store, &capture.template, &tape, &ctx);
        let g = &ctx.grid;
        DensityDump {
            origin: g.origin.to_array(),
            voxel_size: g.voxel_size,
            dims: g.dims,
            sigma,
        }
    });
    Ok((img, dump, evaluated))
}
