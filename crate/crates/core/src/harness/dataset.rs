//! Synthetic captures of the procedural humanoid and their on-disk layout.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::body::{
    build_humanoid, load_template, save_template, BodyTemplate, HumanoidConfig, Pose,
};
use crate::geometry::{rasterize, Camera, CameraRecord};
use crate::imagebuf::Image;
use crate::math::Vec3;

pub const MANIFEST: &str = "manifest.toml";
pub const MANIFEST_FORMAT: &str = "mononerf-sequence";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub pose: Pose,
    pub camera: Camera,
    pub time_index: usize,
    pub split: Split,
}

/// Frames of one camera over time.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub template: BodyTemplate,
    /// Where the template lives relative to the manifest, when saved.
    pub template_path: String,
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let joints = self.template.num_joints();
        for (i, f) in self.frames.iter().enumerate() {
            if f.pose.joint_rotations.len() != joints {
                return Err(HarnessError::Data(format!(
                    "{}: frame {i} has {} joint rotations, template has {joints} joints",
                    self.name,
                    f.pose.joint_rotations.len()
                )));
            }
            if (f.image.width, f.image.height) != (f.camera.width, f.camera.height) {
                return Err(HarnessError::Data(format!(
                    "{}: frame {i} image size differs from its camera",
                    self.name
                )));
            }
            if f.pose.time_index != f.time_index {
                return Err(HarnessError::Data(format!(
                    "{}: frame {i} pose time index differs from frame's",
                    self.name
                )));
            }
        }
        if self
            .frames
            .windows(2)
            .any(|w| w[1].time_index <= w[0].time_index)
        {
            return Err(HarnessError::Data(format!(
                "{}: time indices are not strictly increasing",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.frames[i].split == split)
            .collect()
    }

    pub fn camera_ids(&self) -> BTreeSet<usize> {
        self.frames.iter().map(|f| f.camera.camera_id).collect()
    }
}

/// One performer seen by several synchronized cameras, one sequence per
/// camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub name: String,
    pub template: BodyTemplate,
    pub views: Vec<Sequence>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Static,
    #[default]
    Wave,
    Turn,
    WaveTurn,
    Walk,
}

impl Motion {
    /// Pose at normalized time `s` in `[0, 1]` for a standard 12-joint body.
    pub fn pose(self, s: f64, joints: usize, time_index: usize) -> Result<Pose, HarnessError> {
        if joints != 12 && self != Motion::Static && self != Motion::Turn {
            return Err(HarnessError::Data(format!(
                "motion {self:?} needs the standard 12-joint layout, got {joints}"
            )));
        }
        let mut pose = Pose::rest(joints);
        pose.time_index = time_index;
        let w = std::f64::consts::TAU * s;
        let deg = |d: f64| d.to_radians();
        let z = |a: f64| Vec3::new(0.0, 0.0, a);
        let y = |a: f64| Vec3::new(0.0, a, 0.0);
        let x = |a: f64| Vec3::new(a, 0.0, 0.0);
        if matches!(self, Motion::Wave | Motion::WaveTurn) {
            pose.joint_rotations[4] = z(deg(55.0) * (0.5 - 0.5 * w.cos()));
            pose.joint_rotations[5] = z(deg(50.0) * (0.5 - 0.5 * (2.0 * w).cos()));
            pose.joint_rotations[6] = z(-deg(15.0) * w.sin());
        }
        if matches!(self, Motion::Turn | Motion::WaveTurn) {
            pose.joint_rotations[0] = y(deg(35.0) * w.sin());
        }
        if self == Motion::Walk {
            pose.joint_rotations[8] = x(deg(25.0) * w.sin());
            pose.joint_rotations[10] = x(-deg(25.0) * w.sin());
            pose.joint_rotations[9] = x(deg(30.0) * (0.5 - 0.5 * w.cos()));
            pose.joint_rotations[11] = x(deg(30.0) * (0.5 + 0.5 * w.cos()));
            pose.joint_rotations[4] = x(-deg(20.0) * w.sin());
            pose.joint_rotations[6] = x(deg(20.0) * w.sin());
            pose.root_translation = Vec3::new(0.0, 0.0, 0.15 * w.sin());
        }
        Ok(pose)
    }
}

/// Everything needed to synthesize a capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    pub seed: u64,
    pub body: HumanoidConfig,
    pub motion: Motion,
    pub frames: usize,
    /// Motion cycles over the whole sequence.
    pub cycles: f64,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    /// Camera ring radius and height, meters.
    pub radius: f64,
    pub camera_height: f64,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    /// Azimuth of view 0, degrees; the others are spread evenly.
    pub azimuth_deg: f64,
    /// Sub-pixel samples per axis.
    pub supersample: usize,
    /// Every `heldout_every`-th frame (starting at `heldout_offset`) is held out; 0 disables.
    pub heldout_every: usize,
    pub heldout_offset: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            name: "subject".into(),
            seed: 0,
            body: HumanoidConfig::default(),
            motion: Motion::Wave,
            frames: 20,
            cycles: 1.0,
            width: 64,
            height: 64,
            views: 1,
            radius: 3.5,
            camera_height: 1.0,
            fov_deg: 36.0,
            azimuth_deg: 0.0,
            supersample: 2,
            heldout_every: 5,
            heldout_offset: 2,
        }
    }
}

pub fn ring_cameras(cfg: &SceneConfig) -> Result<Vec<Camera>, HarnessError> {
    let center = Vec3::new(0.0, 0.95, 0.0);
    (0..cfg.views)
        .map(|k| {
            let a = (cfg.azimuth_deg + 360.0 * k as f64 / cfg.views as f64).to_radians();
            let eye = Vec3::new(
                cfg.radius * a.sin(),
                cfg.camera_height,
                cfg.radius * a.cos(),
            );
            Ok(Camera::look_at(
                eye,
                center,
                Vec3::new(0.0, 1.0, 0.0),
                cfg.fov_deg,
                cfg.width,
                cfg.height,
                k,
            )?)
        })
        .collect()
}

/// Smooth per-vertex albedo: a random base color per body part modulated by
/// a low-frequency pattern, deterministic per seed.
pub fn vertex_colors(template: &BodyTemplate, vertex_parts: &[usize], seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c010);
    let parts = template.num_joints();
    let base: Vec<[f64; 3]> = (0..parts)
        .map(|_| [0; 3].map(|_: i32| rng.gen_range(0.2..0.9)))
        .collect();
    let freq: [f64; 3] = [0; 3].map(|_: i32| rng.gen_range(4.0..8.0));
    let phase: [f64; 3] = [0; 3].map(|_: i32| rng.gen_range(0.0..std::f64::consts::TAU));
    template
        .vertices()
        .iter()
        .zip(vertex_parts)
        .map(|(v, &k)| {
            let c = base[k];
            let pattern = [
                (freq[0] * v.y + phase[0]).sin(),
                (freq[1] * (v.x + v.z) + phase[1]).sin(),
                (freq[2] * (v.y - v.x) + phase[2]).sin(),
            ];
            [0, 1, 2].map(|i| (c[i] + 0.1 * pattern[i]).clamp(0.0, 1.0))
        })
        .collect()
}

/// Renders vertex colors with barycentric interpolation over a black
/// background, averaging `supersample`² pixel-center samples per pixel.
pub fn render_vertex_colors(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    colors: &[[f64; 3]],
    camera: &Camera,
    supersample: usize,
) -> Image {
    let s = supersample.max(1);
    let cam = camera.resized(camera.width * s, camera.height * s);
    let z = rasterize(vertices, faces, &cam);
    let mut img = Image::new(camera.width, camera.height);
    let norm = 1.0 / (s * s) as f64;
    for y in 0..cam.height {
        for x in 0..cam.width {
            if !z.covered(x, y) {
                continue;
            }
            let i = y * cam.width + x;
            let f = faces[z.face[i]];
            let b = z.bary[i];
            let mut c = img.get(x / s, y / s);
            for k in 0..3 {
                c[k] += norm
                    * (b[0] * colors[f[0]][k] + b[1] * colors[f[1]][k] + b[2] * colors[f[2]][k]);
            }
            img.set(x / s, y / s, c);
        }
    }
    img
}

/// Renders a synthetic capture. Deterministic per configuration.
pub fn generate_capture(cfg: &SceneConfig) -> Result<Capture, HarnessError> {
    if cfg.frames == 0 || cfg.views == 0 {
        return Err(HarnessError::Data(
            "scene needs at least one frame and one view".into(),
        ));
    }
    let human = build_humanoid(cfg.seed, &cfg.body)?;
    let template = human.template;
    let colors = vertex_colors(&template, &human.vertex_parts, cfg.seed);
    let cameras = ring_cameras(cfg)?;
    let poses: Vec<Pose> = (0..cfg.frames)
        .map(|t| {
            cfg.motion.pose(
                cfg.cycles * t as f64 / cfg.frames as f64,
                template.num_joints(),
                t,
            )
        })
        .collect::<Result<_, _>>()?;
    let posed: Vec<Vec<Vec3>> = poses
        .iter()
        .map(|p| template.posed_vertices(p))
        .collect::<Result<_, _>>()?;
    let views = cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let frames = poses
                .iter()
                .zip(&posed)
                .map(|(pose, verts)| {
                    let t = pose.time_index;
                    let heldout = cfg.heldout_every > 0
                        && t % cfg.heldout_every == cfg.heldout_offset % cfg.heldout_every;
                    Frame {
                        image: render_vertex_colors(
                            verts,
                            template.faces(),
                            &colors,
                            cam,
                            cfg.supersample,
                        ),
                        pose: pose.clone(),
                        camera: cam.clone(),
                        time_index: t,
                        split: if heldout {
                            Split::Heldout
                        } else {
                            Split::Train
                        },
                    }
                })
                .collect();
            Sequence {
                name: format!("{}/view{k:02}", cfg.name),
                template: template.clone(),
                template_path: "../template.json".into(),
                frames,
            }
        })
        .collect();
    Ok(Capture {
        name: cfg.name.clone(),
        template,
        views,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    template: String,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    image: String,
    time_index: usize,
    split: Split,
    root_translation: [f64; 3],
    joint_rotations: Vec<[f64; 3]>,
    camera: CameraRecord,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut frames = Vec::new();
    for (i, f) in seq.frames.iter().enumerate() {
        let image = format!("{i:04}.png");
        let path = dir.join(&image);
        f.image.save_png(&path).map_err(|e| io_err(&path, e))?;
        frames.push(FrameRecord {
            image,
            time_index: f.time_index,
            split: f.split,
            root_translation: f.pose.root_translation.to_array(),
            joint_rotations: f
                .pose
                .joint_rotations
                .iter()
                .map(|r| r.to_array())
                .collect(),
            camera: CameraRecord::from_camera(f.time_index, &f.camera),
        });
    }
    let m = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: seq.name.clone(),
        template: seq.template_path.clone(),
        frames,
    };
    let text = toml::to_string(&m).map_err(|e| HarnessError::Data(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn load_sequence(dir: &Path) -> Result<Sequence, HarnessError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: Manifest = toml::from_str(&text)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(HarnessError::Data(format!(
            "{}: unsupported manifest {} v{} (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
            path.display(),
            m.format,
            m.version
        )));
    }
    let template = load_template(&dir.join(&m.template))?;
    let frames = m
        .frames
        .into_iter()
        .map(|r| {
            let p = dir.join(&r.image);
            let image = Image::load_png(&p).map_err(|e| io_err(&p, e))?;
            let pose = Pose {
                joint_rotations: r
                    .joint_rotations
                    .into_iter()
                    .map(Vec3::from_array)
                    .collect(),
                root_translation: Vec3::from_array(r.root_translation),
                time_index: r.time_index,
            };
            Ok(Frame {
                image,
                pose,
                camera: r.camera.camera()?,
                time_index: r.time_index,
                split: r.split,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let seq = Sequence {
        name: m.name,
        template,
        template_path: m.template,
        frames,
    };
    seq.validate()?;
    Ok(seq)
}

/// Writes `template.json` plus one `viewNN/` sequence directory per camera.
pub fn save_capture(capture: &Capture, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    save_template(&capture.template, &dir.join("template.json"))?;
    for (k, v) in capture.views.iter().enumerate() {
        save_sequence(v, &dir.join(format!("view{k:02}")))?;
    }
    Ok(())
}

/// Loads a capture directory, or a single sequence directory as a one-view
/// capture.
pub fn load_capture(dir: &Path) -> Result<Capture, HarnessError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if dir.join(MANIFEST).exists() {
        let seq = load_sequence(dir)?;
        return Ok(Capture {
            name,
            template: seq.template.clone(),
            views: vec![seq],
        });
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(HarnessError::Data(format!(
            "{}: no sequence manifests found",
            dir.display()
        )));
    }
    let views: Vec<Sequence> = subdirs
        .iter()
        .map(|d| load_sequence(d))
        .collect::<Result<_, _>>()?;
    Ok(Capture {
        name,
        template: views[0].template.clone(),
        views,
    })
}
