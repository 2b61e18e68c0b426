use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BodyError, BodyTemplate};
use crate::math::Vec3;

/// Which joints the procedural skeleton exposes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkeletonLayout {
    /// 6 parts: torso, head, one segment per limb.
    Coarse,
    /// 12 parts: three torso segments, head, upper/lower arms and legs.
    #[default]
    Standard,
    /// 16 parts: standard plus hands and feet.
    Extended,
}

impl SkeletonLayout {
    pub fn num_joints(self) -> usize {
        match self {
            SkeletonLayout::Coarse => 6,
            SkeletonLayout::Standard => 12,
            SkeletonLayout::Extended => 16,
        }
    }
}

/// Proportions and tessellation of the capsule humanoid. Lengths in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanoidConfig {
    pub layout: SkeletonLayout,
    pub leg_length: f64,
    pub torso_length: f64,
    pub arm_length: f64,
    pub head_length: f64,
    pub shoulder_half_width: f64,
    pub hip_half_width: f64,
    pub torso_radius: f64,
    pub limb_radius: f64,
    pub head_radius: f64,
    /// Downward tilt of the rest-pose arms, degrees from horizontal.
    pub arm_drop_deg: f64,
    /// Segments around each capsule.
    pub around: usize,
    /// Latitude rings per hemispherical cap.
    pub cap_rings: usize,
    /// Extra rings along each cylinder.
    pub body_rings: usize,
    /// Relative jitter applied to proportions per seed (0 = exact config).
    pub variation: f64,
}

impl Default for HumanoidConfig {
    fn default() -> Self {
        HumanoidConfig {
            layout: SkeletonLayout::Standard,
            leg_length: 0.84,
            torso_length: 0.56,
            arm_length: 0.56,
            head_length: 0.2,
            shoulder_half_width: 0.18,
            hip_half_width: 0.09,
            torso_radius: 0.13,
            limb_radius: 0.055,
            head_radius: 0.095,
            arm_drop_deg: 45.0,
            around: 10,
            cap_rings: 3,
            body_rings: 2,
            variation: 0.08,
        }
    }
}

struct PartSpec {
    parent: Option<usize>,
    joint: Vec3,
    end: Vec3,
    radius: f64,
}

/// Procedural humanoid plus the capsule each vertex was generated on.
#[derive(Clone, Debug)]
pub struct Humanoid {
    pub template: BodyTemplate,
    pub vertex_parts: Vec<usize>,
}

/// Builds a watertight capsule humanoid, deterministic per seed.
pub fn generate_humanoid(seed: u64, config: &HumanoidConfig) -> Result<BodyTemplate, BodyError> {
    Ok(build_humanoid(seed, config)?.template)
}

pub fn build_humanoid(seed: u64, config: &HumanoidConfig) -> Result<Humanoid, BodyError> {
    let cfg = jittered(seed, config)?;
    let parts = skeleton(&cfg);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vertex_parts = Vec::new();
    for (k, p) in parts.iter().enumerate() {
        let base = vertices.len();
        let (vs, fs) = capsule(
            p.joint,
            p.end,
            p.radius,
            cfg.around,
            cfg.cap_rings,
            cfg.body_rings,
        );
        vertex_parts.extend(std::iter::repeat(k).take(vs.len()));
        vertices.extend(vs);
        faces.extend(
            fs.into_iter()
                .map(|f| [f[0] + base, f[1] + base, f[2] + base]),
        );
    }
    let weights = vertices
        .iter()
        .zip(&vertex_parts)
        .map(|(&v, &k)| {
            let tau = 0.5 * parts[k].radius;
            let mut row: Vec<f64> = parts
                .iter()
                .map(|p| {
                    let d = point_segment_distance(v, p.joint, p.end);
                    (-d * d / (2.0 * tau * tau)).exp()
                })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= s);
            row
        })
        .collect();
    let joints = parts.iter().map(|p| p.joint).collect();
    let parents = parts.iter().map(|p| p.parent).collect();
    let template = BodyTemplate::new(vertices, faces, joints, parents, weights)?;
    Ok(Humanoid {
        template,
        vertex_parts,
    })
}

fn jittered(seed: u64, c: &HumanoidConfig) -> Result<HumanoidConfig, BodyError> {
    let lengths = [
        ("leg_length", c.leg_length),
        ("torso_length", c.torso_length),
        ("arm_length", c.arm_length),
        ("head_length", c.head_length),
        ("shoulder_half_width", c.shoulder_half_width),
        ("hip_half_width", c.hip_half_width),
        ("torso_radius", c.torso_radius),
        ("limb_radius", c.limb_radius),
        ("head_radius", c.head_radius),
    ];
    for (name, v) in lengths {
        if !(v > 0.0 && v.is_finite()) {
            return Err(BodyError::Config(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if c.around < 3 || c.cap_rings < 1 {
        return Err(BodyError::Config(format!(
            "tessellation too coarse (around {}, cap_rings {})",
            c.around, c.cap_rings
        )));
    }
    if !(0.0..0.5).contains(&c.variation) {
        return Err(BodyError::Config(format!(
            "variation {} outside [0, 0.5)",
            c.variation
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j = |amp: f64| 1.0 + c.variation * amp * rng.gen_range(-1.0..1.0);
    let height = j(1.0);
    let girth = j(2.0);
    Ok(HumanoidConfig {
        leg_length: c.leg_length * height * j(1.0),
        torso_length: c.torso_length * height * j(1.0),
        arm_length: c.arm_length * height * j(1.0),
        head_length: c.head_length * height,
        shoulder_half_width: c.shoulder_half_width * girth.sqrt(),
        hip_half_width: c.hip_half_width * girth.sqrt(),
        torso_radius: c.torso_radius * girth,
        limb_radius: c.limb_radius * girth,
        head_radius: c.head_radius * j(1.0),
        ..c.clone()
    })
}

fn skeleton(c: &HumanoidConfig) -> Vec<PartSpec> {
    let v = Vec3::new;
    let foot = 0.05;
    let hip_y = foot + c.leg_length;
    let pelvis_y = hip_y + 0.03;
    let neck_y = pelvis_y + c.torso_length;
    let shoulder_y = neck_y - 0.08;
    let drop = c.arm_drop_deg.to_radians();
    let arm_dir = |side: f64| v(side * drop.cos(), -drop.sin(), 0.0);
    let shoulder = |side: f64| v(side * c.shoulder_half_width, shoulder_y, 0.0);
    let hip = |side: f64| v(side * c.hip_half_width, hip_y, 0.0);
    let head_top = v(0.0, neck_y + c.head_length + c.head_radius, 0.0);
    let head_base = v(0.0, neck_y, 0.0);
    let part = |parent: Option<usize>, joint: Vec3, end: Vec3, radius: f64| PartSpec {
        parent,
        joint,
        end,
        radius,
    };
    let upper_arm = c.arm_length * 0.52;
    let fore_arm = c.arm_length - upper_arm;
    let limb = c.limb_radius;
    match c.layout {
        SkeletonLayout::Coarse => vec![
            part(None, v(0.0, pelvis_y, 0.0), head_base, c.torso_radius),
            part(
                Some(0),
                head_base,
                head_top - v(0.0, c.head_radius, 0.0),
                c.head_radius,
            ),
            part(
                Some(0),
                shoulder(1.0),
                shoulder(1.0) + arm_dir(1.0) * c.arm_length,
                limb * 0.9,
            ),
            part(
                Some(0),
                shoulder(-1.0),
                shoulder(-1.0) + arm_dir(-1.0) * c.arm_length,
                limb * 0.9,
            ),
            part(
                Some(0),
                hip(1.0),
                v(c.hip_half_width, foot, 0.0),
                limb * 1.15,
            ),
            part(
                Some(0),
                hip(-1.0),
                v(-c.hip_half_width, foot, 0.0),
                limb * 1.15,
            ),
        ],
        SkeletonLayout::Standard | SkeletonLayout::Extended => {
            let seg = c.torso_length / 3.0;
            let spine = v(0.0, pelvis_y + seg, 0.0);
            let chest = v(0.0, pelvis_y + 2.0 * seg, 0.0);
            let elbow = |s: f64| shoulder(s) + arm_dir(s) * upper_arm;
            let wrist = |s: f64| elbow(s) + arm_dir(s) * fore_arm;
            let knee = |s: f64| v(s * c.hip_half_width, foot + c.leg_length * 0.5, 0.0);
            let ankle = |s: f64| v(s * c.hip_half_width, foot, 0.0);
            let extended = c.layout == SkeletonLayout::Extended;
            let hand_len = 0.08;
            let mut parts = vec![
                part(None, v(0.0, pelvis_y, 0.0), spine, c.torso_radius),
                part(Some(0), spine, chest, c.torso_radius * 1.02),
                part(Some(1), chest, head_base, c.torso_radius * 1.06),
                part(
                    Some(2),
                    head_base,
                    head_top - v(0.0, c.head_radius, 0.0),
                    c.head_radius,
                ),
                part(Some(2), shoulder(1.0), elbow(1.0), limb),
                part(Some(4), elbow(1.0), wrist(1.0), limb * 0.85),
                part(Some(2), shoulder(-1.0), elbow(-1.0), limb),
                part(Some(6), elbow(-1.0), wrist(-1.0), limb * 0.85),
                part(Some(0), hip(1.0), knee(1.0), limb * 1.3),
                part(Some(8), knee(1.0), ankle(1.0), limb),
                part(Some(0), hip(-1.0), knee(-1.0), limb * 1.3),
                part(Some(10), knee(-1.0), ankle(-1.0), limb),
            ];
            if extended {
                parts.push(part(
                    Some(5),
                    wrist(1.0),
                    wrist(1.0) + arm_dir(1.0) * hand_len,
                    limb * 0.7,
                ));
                parts.push(part(
                    Some(7),
                    wrist(-1.0),
                    wrist(-1.0) + arm_dir(-1.0) * hand_len,
                    limb * 0.7,
                ));
                parts.push(part(
                    Some(9),
                    ankle(1.0),
                    ankle(1.0) + v(0.0, 0.0, 0.14),
                    limb * 0.7,
                ));
                parts.push(part(
                    Some(11),
                    ankle(-1.0),
                    ankle(-1.0) + v(0.0, 0.0, 0.14),
                    limb * 0.7,
                ));
            }
            parts
        }
    }
}

pub(crate) fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm2();
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Closed capsule mesh around segment `a → b`, outward-facing triangles.
fn capsule(
    a: Vec3,
    b: Vec3,
    r: f64,
    around: usize,
    cap_rings: usize,
    body_rings: usize,
) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let axis = (b - a).normalized();
    let helper = if axis.x.abs() < 0.9 {
        Vec3::new(1.0, 0.0, 0.0)
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    };
    let u = axis.cross(helper).normalized();
    let w = axis.cross(u);
    // (center, ring radius) from the `a` pole to the `b` pole, excluding poles.
    let mut rings: Vec<(Vec3, f64)> = Vec::new();
    let half_pi = std::f64::consts::FRAC_PI_2;
    for k in 1..=cap_rings {
        let phi = half_pi * k as f64 / cap_rings as f64;
        rings.push((a - axis * (r * phi.cos()), r * phi.sin()));
    }
    for k in 1..=body_rings {
        let t = k as f64 / (body_rings + 1) as f64;
        rings.push((a + (b - a) * t, r));
    }
    for k in (1..=cap_rings).rev() {
        let phi = half_pi * k as f64 / cap_rings as f64;
        rings.push((b + axis * (r * phi.cos()), r * phi.sin()));
    }
    let mut verts = vec![a - axis * r];
    for &(c, rho) in &rings {
        for i in 0..around {
            let th = std::f64::consts::TAU * i as f64 / around as f64;
            verts.push(c + (u * th.cos() + w * th.sin()) * rho);
        }
    }
    let top = verts.len();
    verts.push(b + axis * r);
    let ring = |k: usize, i: usize| 1 + k * around + (i % around);
    let mut faces = Vec::new();
    for i in 0..around {
        faces.push([0, ring(0, i + 1), ring(0, i)]);
    }
    for k in 0..rings.len() - 1 {
        for i in 0..around {
            faces.push([ring(k, i), ring(k, i + 1), ring(k + 1, i + 1)]);
            faces.push([ring(k, i), ring(k + 1, i + 1), ring(k + 1, i)]);
        }
    }
    let last = rings.len() - 1;
    for i in 0..around {
        faces.push([top, ring(last, i), ring(last, i + 1)]);
    }
    // orient outward: normal should point away from the capsule axis
    for f in &mut faces {
        let (p0, p1, p2) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        let n = (p1 - p0).cross(p2 - p0);
        let centroid = (p0 + p1 + p2) / 3.0;
        let ab = b - a;
        let t = ((centroid - a).dot(ab) / ab.norm2()).clamp(0.0, 1.0);
        let out = centroid - (a + ab * t);
        if n.dot(out) < 0.0 {
            f.swap(1, 2);
        }
    }
    (verts, faces)
}
