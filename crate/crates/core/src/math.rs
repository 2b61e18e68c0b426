//! Small fixed-size linear algebra for 3D geometry.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i}"),
        }
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Default for Mat3 {
    fn default() -> Self {
        Mat3::IDENTITY
    }
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3([r0.to_array(), r1.to_array(), r2.to_array()])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.0[i])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, ri) in r.iter_mut().enumerate() {
            for (j, rij) in ri.iter_mut().enumerate() {
                *rij = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max deviation of `MᵀM` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul_mat(self);
        let mut e: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                e = e.max((p.0[i][j] - target).abs());
            }
        }
        e
    }

    pub fn flat(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    /// Rodrigues' formula for an axis-angle vector (angle = norm).
    pub fn from_axis_angle(aa: Vec3) -> Mat3 {
        let theta = aa.norm();
        if theta < 1e-14 {
            return Mat3::IDENTITY;
        }
        let k = aa / theta;
        let (s, c) = theta.sin_cos();
        let t = 1.0 - c;
        Mat3([
            [
                c + k.x * k.x * t,
                k.x * k.y * t - k.z * s,
                k.x * k.z * t + k.y * s,
            ],
            [
                k.y * k.x * t + k.z * s,
                c + k.y * k.y * t,
                k.y * k.z * t - k.x * s,
            ],
            [
                k.z * k.x * t - k.y * s,
                k.z * k.y * t + k.x * s,
                c + k.z * k.z * t,
            ],
        ])
    }
}

/// Affine map `x ↦ A x + b`, i.e. the top three rows of a homogeneous 4×4
/// matrix. Rigid transforms and their weighted blends both live here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Default for Affine {
    fn default() -> Self {
        Affine::IDENTITY
    }
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        linear: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(linear: Mat3, translation: Vec3) -> Self {
        Affine {
            linear,
            translation,
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Affine {
            linear: Mat3::IDENTITY,
            translation: t,
        }
    }

    pub fn rotation(r: Mat3) -> Self {
        Affine {
            linear: r,
            translation: Vec3::ZERO,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.linear.mul_vec(p) + self.translation
    }

    /// `self ∘ o`.
    pub fn compose(&self, o: &Affine) -> Affine {
        Affine {
            linear: self.linear.mul_mat(&o.linear),
            translation: self.linear.mul_vec(o.translation) + self.translation,
        }
    }

    /// Inverse assuming the linear part is a rotation.
    pub fn rigid_inverse(&self) -> Affine {
        let rt = self.linear.transpose();
        Affine {
            linear: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    pub fn scaled(&self, s: f64) -> Affine {
        let mut l = self.linear;
        l.0.iter_mut().flatten().for_each(|x| *x *= s);
        Affine {
            linear: l,
            translation: self.translation * s,
        }
    }

    pub fn add(&self, o: &Affine) -> Affine {
        let mut l = self.linear;
        for i in 0..3 {
            for j in 0..3 {
                l.0[i][j] += o.linear.0[i][j];
            }
        }
        Affine {
            linear: l,
            translation: self.translation + o.translation,
        }
    }

    /// Full homogeneous 4×4 matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let l = &self.linear.0;
        let t = self.translation;
        [
            [l[0][0], l[0][1], l[0][2], t.x],
            [l[1][0], l[1][1], l[1][2], t.y],
            [l[2][0], l[2][1], l[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Max absolute entry difference.
    pub fn max_diff(&self, o: &Affine) -> f64 {
        let a = self.to_matrix4();
        let b = o.to_matrix4();
        let mut e: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                e = e.max((a[i][j] - b[i][j]).abs());
            }
        }
        e
    }
}

/// `Σ_j weights[j] · transforms[j]`.
/// Axis-aligned bounds `(min, max)`; inverted infinities for an empty slice.
pub fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for &p in points {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    (lo, hi)
}

pub fn blend(weights: &[f64], transforms: &[Affine]) -> Affine {
    assert_eq!(
        weights.len(),
        transforms.len(),
        "blend: {} weights for {} transforms",
        weights.len(),
        transforms.len()
    );
    let mut acc = Affine {
        linear: Mat3([[0.0; 3]; 3]),
        translation: Vec3::ZERO,
    };
    for (w, t) in weights.iter().zip(transforms) {
        if *w != 0.0 {
            acc = acc.add(&t.scaled(*w));
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = Mat3::from_axis_angle(Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let v = r.mul_vec(Vec3::new(1.0, 0.0, 0.0));
        assert!((v - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert!(r.orthonormality_error() < 1e-15);
        assert!((r.det() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rigid_inverse_composes_to_identity() {
        let t = Affine::new(
            Mat3::from_axis_angle(Vec3::new(0.3, -0.7, 1.1)),
            Vec3::new(1.0, 2.0, -3.0),
        );
        let id = t.compose(&t.rigid_inverse());
        assert!(id.max_diff(&Affine::IDENTITY) < 1e-14);
    }
}
