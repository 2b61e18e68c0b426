//! The full renderer: encoder, feature volume, warp, attention fusion and
//! heads, wired to rays from the surface-guided sampler.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::FinalInit;
use crate::autodiff::{checkpoint, ParamStore, Tape, Tensor, Var};
use crate::body::{BodyTemplate, PartTransforms, Pose};
use crate::deform::{
    gather_temporal_features, initial_blend_weights, part_motions, WarpConfig, WeightRefiner,
};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap};
use crate::exec::{map_range, Parallelism};
use crate::fusion::{
    encoded_dim, positional_encode, CameraLatents, ColorHead, DensityHead, TemporalAttention,
};
use crate::geometry::{
    build_distance_grid, generate_rays, rasterize_visibility, surface_guided_sample, Camera,
    DistanceGrid, Ray, RaySamples, VisibilityConfig,
};
use crate::imagebuf::Image;
use crate::math::{bounds, Vec3};
use crate::volume::{
    aggregate_vertex_features, scatter_to_voxels, Diffuser, SparseFeatureVolume, SparseLevel,
    VolumeConfig, VoxelLattice,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub volume: VolumeConfig,
    pub warp: WarpConfig,
    /// Query/key width of each attention block.
    pub key_dim: usize,
    /// Replace attention fusion with the volume feature alone.
    pub use_attention: bool,
    pub head_hidden: usize,
    pub head_layers: usize,
    pub latent_dim: usize,
    /// Number of per-camera latent entries.
    pub cameras: usize,
    pub encoding_levels: usize,
    /// Surface-guided sampling distance threshold, meters.
    pub threshold: f64,
    pub samples_per_ray: usize,
    /// Distance grid voxel size, meters.
    pub grid_voxel: f64,
    pub background: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            volume: VolumeConfig::default(),
            warp: WarpConfig::default(),
            key_dim: 32,
            use_attention: true,
            head_hidden: 64,
            head_layers: 3,
            latent_dim: 16,
            cameras: 4,
            encoding_levels: 4,
            threshold: 0.05,
            samples_per_ray: 24,
            grid_voxel: 0.02,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub parts: usize,
    pub encoder: Encoder,
    pub diffuser: Diffuser,
    pub refiner: WeightRefiner,
    pub density_attention: TemporalAttention,
    pub color_attention: TemporalAttention,
    pub latents: CameraLatents,
    pub density: DensityHead,
    pub color: ColorHead,
}

/// Geometry of one posed frame that does not depend on learned weights.
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    pub pose: Pose,
    pub transforms: PartTransforms,
    pub posed: Vec<Vec3>,
}

impl FrameGeometry {
    pub fn new(template: &BodyTemplate, pose: &Pose) -> Self {
        let transforms = template
            .forward_kinematics(pose)
            .expect("pose matches template");
        let posed = template.pose_mesh(&transforms);
        FrameGeometry {
            pose: pose.clone(),
            transforms,
            posed,
        }
    }
}

/// An observed input frame.
#[derive(Clone, Copy, Debug)]
pub struct InputFrame<'a> {
    pub image: &'a Image,
    pub camera: &'a Camera,
    pub geometry: &'a FrameGeometry,
    /// Rasterized visibility of the frame's posed vertices in its own camera.
    pub visibility: &'a [bool],
}

/// Everything the per-ray network needs for one target frame, on a tape.
pub struct SceneContext {
    pub fmap: FeatureMap,
    pub cameras: Vec<Camera>,
    pub observed: Vec<PartTransforms>,
    pub target: FrameGeometry,
    pub volume: SparseFeatureVolume,
    pub grid: Rc<DistanceGrid>,
    pub never_visible: Vec<bool>,
}

/// Tape-free snapshot of a [`SceneContext`] for sharded rendering.
#[derive(Clone)]
pub struct FrozenScene {
    fmap: (FeatureMap, Tensor),
    cameras: Vec<Camera>,
    observed: Vec<PartTransforms>,
    target: FrameGeometry,
    levels: Vec<(SparseLevel, Tensor)>,
    grid: DistanceGrid,
}

/// Rendered colors of a ray batch plus bookkeeping.
pub struct RayBatchOutput {
    pub colors: Var,
    /// Points pushed through the networks.
    pub evaluated: usize,
}

/// Distance grid around a posed body, padded by the sampling threshold.
pub fn body_distance_grid(
    posed: &[Vec3],
    faces: &[[usize; 3]],
    cfg: &ModelConfig,
    par: Parallelism,
) -> DistanceGrid {
    let (lo, hi) = bounds(posed);
    let m = cfg.threshold + 2.0 * cfg.grid_voxel;
    let pad = Vec3::new(m, m, m);
    build_distance_grid(posed, faces, lo - pad, hi + pad, cfg.grid_voxel, par)
        .expect("non-empty body mesh")
}

pub fn frame_visibility(
    geometry: &FrameGeometry,
    faces: &[[usize; 3]],
    camera: &Camera,
) -> Vec<bool> {
    rasterize_visibility(&geometry.posed, faces, camera, &VisibilityConfig::default())
}

impl Model {
    pub fn new(config: &ModelConfig, parts: usize, seed: u64) -> (Model, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let encoder = Encoder::new(&mut store, "encoder", &c.encoder, &mut rng);
        let cf = c.encoder.feature_dim;
        let diffuser = Diffuser::new(&mut store, "volume", cf, &c.volume, &mut rng);
        let cv = diffuser.output_dim();
        let refiner = WeightRefiner::new(&mut store, "warp", parts, &c.warp, &mut rng);
        let density_attention =
            TemporalAttention::new(&mut store, "attention_density", cv, cf, c.key_dim, &mut rng);
        let color_attention =
            TemporalAttention::new(&mut store, "attention_color", cv, cf, c.key_dim, &mut rng);
        let latents = CameraLatents::new(
            &mut store,
            "camera_latent",
            c.cameras,
            c.latent_dim,
            &mut rng,
        );
        let hidden = vec![c.head_hidden; c.head_layers.saturating_sub(1)];
        let dw: Vec<usize> = [cv]
            .into_iter()
            .chain(hidden.iter().copied())
            .chain([1])
            .collect();
        let density = DensityHead::new(&mut store, "density", &dw, FinalInit::Small, &mut rng);
        let cin = cv + encoded_dim(c.encoding_levels) + c.latent_dim;
        let cw: Vec<usize> = [cin]
            .into_iter()
            .chain(hidden.iter().copied())
            .chain([3])
            .collect();
        let color = ColorHead::new(&mut store, "color", &cw, FinalInit::Small, &mut rng);
        let model = Model {
            config: config.clone(),
            parts,
            encoder,
            diffuser,
            refiner,
            density_attention,
            color_attention,
            latents,
            density,
            color,
        };
        (model, store)
    }

    /// Encodes the inputs and builds the feature volume around the target pose.
    pub fn build_context(
        &self,
        tape: &Tape,
        store: &ParamStore,
        template: &BodyTemplate,
        inputs: &[InputFrame],
        target: &FrameGeometry,
        grid: Option<Rc<DistanceGrid>>,
    ) -> SceneContext {
        assert!(!inputs.is_empty(), "build_context: no input frames");
        let images: Vec<&Image> = inputs.iter().map(|f| f.image).collect();
        let fmap = self.encoder.encode(tape, store, &images);
        let cameras: Vec<Camera> = inputs.iter().map(|f| f.camera.clone()).collect();
        let posed: Vec<Vec<Vec3>> = inputs.iter().map(|f| f.geometry.posed.clone()).collect();
        let vis: Vec<Vec<bool>> = inputs.iter().map(|f| f.visibility.to_vec()).collect();
        let (vfeat, never_visible) = aggregate_vertex_features(tape, &fmap, &cameras, &posed, &vis);
        let (lo, hi) = bounds(&target.posed);
        let m = self.config.volume.margin;
        let pad = Vec3::new(m, m, m);
        let lattice = VoxelLattice::covering(lo - pad, hi + pad, self.config.volume.voxel_size);
        let scattered = scatter_to_voxels(tape, vfeat, &target.posed, &lattice);
        let volume = self.diffuser.diffuse(tape, store, &scattered);
        let grid = grid.unwrap_or_else(|| {
            Rc::new(body_distance_grid(
                &target.posed,
                template.faces(),
                &self.config,
                Parallelism::Rayon,
            ))
        });
        SceneContext {
            fmap,
            cameras,
            observed: inputs
                .iter()
                .map(|f| f.geometry.transforms.clone())
                .collect(),
            target: target.clone(),
            volume,
            grid,
            never_visible,
        }
    }

    /// Near-surface samples per ray; jittered when `rng` is given.
    pub fn sample_rays(
        &self,
        ctx: &SceneContext,
        rays: &[Ray],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<RaySamples> {
        sample_all(&ctx.grid, &self.config, rays, rng)
    }

    /// Renders a ray batch; `camera_id` selects the color latent.
    pub fn render_rays(
        &self,
        tape: &Tape,
        store: &ParamStore,
        template: &BodyTemplate,
        ctx: &SceneContext,
        rays: &[Ray],
        samples: &[RaySamples],
        camera_id: usize,
    ) -> RayBatchOutput {
        let cfg = &self.config;
        let mut points = Vec::new();
        let mut dirs = Vec::new();
        let mut deltas = Vec::new();
        let mut spans = Vec::with_capacity(rays.len());
        for (r, s) in rays.iter().zip(samples) {
            spans.push((points.len(), s.len()));
            for (&t, &d) in s.depths.iter().zip(&s.deltas) {
                points.push(r.at(t));
                dirs.extend(positional_encode(
                    r.direction.to_array(),
                    cfg.encoding_levels,
                ));
                deltas.push(d);
            }
        }
        let n = points.len();
        if n == 0 {
            let bg: Vec<f64> = (0..rays.len()).flat_map(|_| cfg.background).collect();
            return RayBatchOutput {
                colors: tape.constant(Tensor::matrix(rays.len(), 3, bg)),
                evaluated: 0,
            };
        }
        let (fv, _) = ctx.volume.query(tape, &points);
        let (fe_sigma, fe_rgb) = if cfg.use_attention {
            let (ws, d) = initial_blend_weights(&points, &ctx.target.posed, template.weights());
            let ws = tape.constant(Tensor::matrix(n, self.parts, ws.concat()));
            let wg = self.refiner.refine(tape, store, ws, &ctx.target.pose, &d);
            let q = tape.constant(part_motions(&points, &ctx.target.transforms, &ctx.observed));
            let p_o = tape.batched_weighted_sum(wg, q);
            let (ft, masked) = gather_temporal_features(tape, &ctx.fmap, &ctx.cameras, p_o);
            (
                self.density_attention.enhance(tape, store, fv, ft, &masked),
                self.color_attention.enhance(tape, store, fv, ft, &masked),
            )
        } else {
            (fv, fv)
        };
        let sigma = self.density.forward(tape, store, fe_sigma);
        let enc = tape.constant(Tensor::matrix(n, encoded_dim(cfg.encoding_levels), dirs));
        let latent = self.latents.lookup(tape, store, &vec![camera_id; n]);
        let color = self.color.forward(tape, store, fe_rgb, enc, latent);
        let colors = tape.composite(
            sigma,
            color,
            Rc::new(deltas),
            Rc::new(spans),
            cfg.background,
        );
        RayBatchOutput {
            colors,
            evaluated: n,
        }
    }

    /// Renders a full image with the given target camera, sharding rows of
    /// rays across workers. Returns the image and the number of network
    /// evaluations.
    #[allow(clippy::too_many_arguments)]
    pub fn render_image(
        &self,
        store: &ParamStore,
        template: &BodyTemplate,
        inputs: &[InputFrame],
        target: &FrameGeometry,
        camera: &Camera,
        grid: Option<Rc<DistanceGrid>>,
        par: Parallelism,
    ) -> (Image, usize) {
        if !self.latents.knows(camera.camera_id) {
            log::warn!(
                "camera id {} has no trained latent ({} known); using the mean latent",
                camera.camera_id,
                self.latents.cameras
            );
        }
        let tape = Tape::inference();
        let ctx = self.build_context(&tape, store, template, inputs, target, grid);
        let frozen = FrozenScene::freeze(&tape, &ctx);
        drop(ctx);
        let (w, h) = (camera.width, camera.height);
        let shard_rows = 4;
        let shards = map_range(h.div_ceil(shard_rows), par, |s| {
            let tape = Tape::inference();
            let ctx = frozen.thaw(&tape);
            let pixels: Vec<(usize, usize)> = (s * shard_rows..((s + 1) * shard_rows).min(h))
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .collect();
            let rays = generate_rays(camera, &pixels, target.pose.time_index);
            let samples = self.sample_rays(&ctx, &rays, None);
            let out = self.render_rays(
                &tape,
                store,
                template,
                &ctx,
                &rays,
                &samples,
                camera.camera_id,
            );
            (tape.value(out.colors).data().to_vec(), out.evaluated)
        });
        let mut img = Image::new(w, h);
        let mut evaluated = 0;
        let mut off = 0;
        for (data, e) in shards {
            img.data[off..off + data.len()].copy_from_slice(&data);
            off += data.len();
            evaluated += e;
        }
        (img, evaluated)
    }

    /// Density on the voxel centers of the context's distance grid
    /// (zero outside the near-surface band), x-fastest.
    pub fn density_grid(
        &self,
        store: &ParamStore,
        template: &BodyTemplate,
        ctx_tape: &Tape,
        ctx: &SceneContext,
    ) -> Vec<f64> {
        let g = &ctx.grid;
        let mut pts = Vec::new();
        let mut idx = Vec::new();
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    if g.value(i, j, k) <= self.config.threshold {
                        pts.push(g.center(i, j, k));
                        idx.push(g.index(i, j, k));
                    }
                }
            }
        }
        let mut out = vec![0.0; g.values.len()];
        for chunk in pts.chunks(4096).zip(idx.chunks(4096)) {
            let (p, ix) = chunk;
            let (fv, _) = ctx.volume.query(ctx_tape, p);
            let fe = if self.config.use_attention {
                let n = p.len();
                let (ws, d) = initial_blend_weights(p, &ctx.target.posed, template.weights());
                let ws = ctx_tape.constant(Tensor::matrix(n, self.parts, ws.concat()));
                let wg = self
                    .refiner
                    .refine(ctx_tape, store, ws, &ctx.target.pose, &d);
                let q = ctx_tape.constant(part_motions(p, &ctx.target.transforms, &ctx.observed));
                let p_o = ctx_tape.batched_weighted_sum(wg, q);
                let (ft, masked) = gather_temporal_features(ctx_tape, &ctx.fmap, &ctx.cameras, p_o);
                self.density_attention
                    .enhance(ctx_tape, store, fv, ft, &masked)
            } else {
                fv
            };
            let sigma = self.density.forward(ctx_tape, store, fe);
            for (&i, &s) in ix.iter().zip(ctx_tape.value(sigma).data()) {
                out[i] = s;
            }
        }
        out
    }

    /// Writes weights, optimizer state and the model configuration.
    pub fn save(
        &self,
        store: &ParamStore,
        w: &mut impl std::io::Write,
        extra: serde_json::Value,
    ) -> Result<(), checkpoint::CheckpointError> {
        let meta = serde_json::json!({ "model": self.config, "parts": self.parts, "extra": extra });
        checkpoint::write(w, store, &meta.to_string())
    }

    /// Rebuilds a model from a checkpoint. Returns the model, its parameters
    /// and the `extra` metadata.
    pub fn load(
        r: impl std::io::Read,
    ) -> Result<(Model, ParamStore, serde_json::Value), checkpoint::CheckpointError> {
        let (loaded, meta) = checkpoint::read(r)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)
            .map_err(|e| checkpoint::CheckpointError::Malformed(format!("metadata: {e}")))?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| checkpoint::CheckpointError::Malformed(format!("model config: {e}")))?;
        let parts = meta["parts"]
            .as_u64()
            .ok_or_else(|| checkpoint::CheckpointError::Malformed("missing part count".into()))?;
        let (model, mut store) = Model::new(&config, parts as usize, 0);
        checkpoint::restore(&mut store, &loaded)?;
        Ok((model, store, meta["extra"].clone()))
    }
}

pub(crate) fn sample_all(
    grid: &DistanceGrid,
    cfg: &ModelConfig,
    rays: &[Ray],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Vec<RaySamples> {
    rays.iter()
        .map(|r| {
            surface_guided_sample(
                r,
                grid,
                cfg.threshold,
                cfg.samples_per_ray,
                rng.as_deref_mut(),
            )
        })
        .collect()
}

impl FrozenScene {
    pub fn freeze(tape: &Tape, ctx: &SceneContext) -> Self {
        FrozenScene {
            fmap: (ctx.fmap, (*tape.value(ctx.fmap.map)).clone()),
            cameras: ctx.cameras.clone(),
            observed: ctx.observed.clone(),
            target: ctx.target.clone(),
            levels: ctx
                .volume
                .levels
                .iter()
                .map(|l| (l.clone(), (*tape.value(l.features)).clone()))
                .collect(),
            grid: (*ctx.grid).clone(),
        }
    }

    pub fn thaw(&self, tape: &Tape) -> SceneContext {
        let fmap = FeatureMap {
            map: tape.constant(self.fmap.1.clone()),
            ..self.fmap.0
        };
        let levels = self
            .levels
            .iter()
            .map(|(l, t)| SparseLevel {
                features: tape.constant(t.clone()),
                ..l.clone()
            })
            .collect();
        SceneContext {
            fmap,
            cameras: self.cameras.clone(),
            observed: self.observed.clone(),
            target: self.target.clone(),
            volume: SparseFeatureVolume { levels },
            grid: Rc::new(self.grid.clone()),
            never_visible: Vec::new(),
        }
    }
}
