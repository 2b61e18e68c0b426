use serde::{Deserialize, Serialize};

use super::BodyError;
use crate::math::{blend, Affine, Mat3, Vec3};

/// Rest-pose mesh with skeleton and per-vertex skinning weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    joints: Vec<Vec3>,
    parents: Vec<Option<usize>>,
    /// `V × N`, rows on the probability simplex.
    weights: Vec<Vec<f64>>,
}

impl BodyTemplate {
    /// Validates every structural invariant before constructing.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        joints: Vec<Vec3>,
        parents: Vec<Option<usize>>,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self, BodyError> {
        if vertices.is_empty() || joints.is_empty() {
            return Err(BodyError::Empty);
        }
        if !vertices.iter().all(|v| v.is_finite()) {
            return Err(BodyError::NonFinite("vertices"));
        }
        if !joints.iter().all(|v| v.is_finite()) {
            return Err(BodyError::NonFinite("joints"));
        }
        let (nv, nj) = (vertices.len(), joints.len());
        for (f, face) in faces.iter().enumerate() {
            if let Some(&index) = face.iter().find(|&&i| i >= nv) {
                return Err(BodyError::FaceIndex {
                    face: f,
                    index,
                    vertices: nv,
                });
            }
        }
        validate_hierarchy(&parents, nj)?;
        if weights.len() != nv {
            return Err(BodyError::WeightShape {
                expected: nv,
                joints: nj,
                row: weights.len(),
                found: 0,
            });
        }
        for (row, w) in weights.iter().enumerate() {
            if w.len() != nj {
                return Err(BodyError::WeightShape {
                    expected: nv,
                    joints: nj,
                    row,
                    found: w.len(),
                });
            }
            if let Some(&value) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(BodyError::WeightEntry { row, value });
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(BodyError::WeightRowSum { row, sum });
            }
        }
        Ok(BodyTemplate {
            vertices,
            faces,
            joints,
            parents,
            weights,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Axis-aligned bounds of the rest mesh.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        crate::math::bounds(&self.vertices)
    }

    /// Per-part rest → posed rigid transforms.
    ///
    /// Each joint frame is its parent's frame, moved to the joint's rest
    /// offset and rotated by the joint's axis-angle; the root additionally
    /// carries the global translation. The rest-joint position is then
    /// factored out so a zero pose gives identities.
    pub fn forward_kinematics(&self, pose: &Pose) -> Result<PartTransforms, BodyError> {
        let n = self.num_joints();
        if pose.joint_rotations.len() != n {
            return Err(BodyError::JointCount {
                expected: n,
                found: pose.joint_rotations.len(),
            });
        }
        if !pose.root_translation.is_finite() || !pose.joint_rotations.iter().all(|r| r.is_finite())
        {
            return Err(BodyError::NonFinite("pose"));
        }
        let mut world: Vec<Option<Affine>> = vec![None; n];
        // parents precede children is not guaranteed by the file format
        for j in self.topological_order() {
            let rot = Affine::rotation(Mat3::from_axis_angle(pose.joint_rotations[j]));
            let frame = match self.parents[j] {
                None => Affine::translation(self.joints[j] + pose.root_translation).compose(&rot),
                Some(p) => {
                    let parent = world[p].expect("topological order visits parents first");
                    parent
                        .compose(&Affine::translation(self.joints[j] - self.joints[p]))
                        .compose(&rot)
                }
            };
            world[j] = Some(frame);
        }
        let parts = world
            .into_iter()
            .enumerate()
            .map(|(j, w)| w.unwrap().compose(&Affine::translation(-self.joints[j])))
            .collect();
        Ok(PartTransforms(parts))
    }

    /// Linear blend skinning: `v' = (Σ_j w_j 𝒯_j) v` per vertex.
    pub fn pose_mesh(&self, transforms: &PartTransforms) -> Vec<Vec3> {
        assert_eq!(
            transforms.0.len(),
            self.num_joints(),
            "pose_mesh: transform count"
        );
        self.vertices
            .iter()
            .zip(&self.weights)
            .map(|(&v, w)| blend(w, &transforms.0).apply(v))
            .collect()
    }

    /// Convenience: FK followed by LBS.
    pub fn posed_vertices(&self, pose: &Pose) -> Result<Vec<Vec3>, BodyError> {
        Ok(self.pose_mesh(&self.forward_kinematics(pose)?))
    }

    fn topological_order(&self) -> Vec<usize> {
        let n = self.num_joints();
        let mut children = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (j, p) in self.parents.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(j),
                None => roots.push(j),
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = roots;
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(children[j].iter().rev());
        }
        order
    }
}

fn validate_hierarchy(parents: &[Option<usize>], n: usize) -> Result<(), BodyError> {
    if parents.len() != n {
        return Err(BodyError::Hierarchy(format!(
            "{} parent entries for {} joints",
            parents.len(),
            n
        )));
    }
    if parents[0].is_some() {
        return Err(BodyError::Hierarchy("joint 0 must be the root".into()));
    }
    for (j, p) in parents.iter().enumerate().skip(1) {
        match p {
            None => return Err(BodyError::Hierarchy(format!("joint {j} is a second root"))),
            Some(p) if *p >= n => {
                return Err(BodyError::Hierarchy(format!(
                    "joint {j} has parent {p} out of range"
                )))
            }
            Some(p) if *p == j => {
                return Err(BodyError::Hierarchy(format!("joint {j} is its own parent")))
            }
            _ => {}
        }
    }
    for start in 0..n {
        let mut j = start;
        for _ in 0..=n {
            match parents[j] {
                None => break,
                Some(p) => j = p,
            }
        }
        if parents[j].is_some() {
            return Err(BodyError::Hierarchy(format!("cycle through joint {start}")));
        }
    }
    Ok(())
}

/// Per-joint axis-angle rotations plus root translation for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joint_rotations: Vec<Vec3>,
    pub root_translation: Vec3,
    pub time_index: usize,
}

impl Pose {
    pub fn rest(joints: usize) -> Self {
        Pose {
            joint_rotations: vec![Vec3::ZERO; joints],
            root_translation: Vec3::ZERO,
            time_index: 0,
        }
    }

    /// Wraps every rotation angle into `[0, 2π)` keeping its axis.
    pub fn normalized(mut self) -> Self {
        let two_pi = std::f64::consts::TAU;
        for r in &mut self.joint_rotations {
            let theta = r.norm();
            if theta >= two_pi {
                *r = *r * (theta.rem_euclid(two_pi) / theta);
            }
        }
        self
    }

    /// Rotations flattened as `[x0, y0, z0, x1, ...]`.
    pub fn flat_rotations(&self) -> Vec<f64> {
        self.joint_rotations
            .iter()
            .flat_map(|r| r.to_array())
            .collect()
    }
}

/// Per-part rest → posed transforms 𝒯_j.
#[derive(Clone, Debug, PartialEq)]
pub struct PartTransforms(pub Vec<Affine>);

impl PartTransforms {
    pub fn identity(n: usize) -> Self {
        PartTransforms(vec![Affine::IDENTITY; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Left-multiplies a global rigid motion into every part.
    pub fn premultiply(&self, g: &Affine) -> PartTransforms {
        PartTransforms(self.0.iter().map(|t| g.compose(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    /// Three joints along +x, one vertex bound to each.
    fn chain() -> BodyTemplate {
        let joints = vec![
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        let vertices = vec![
            Vec3::new(0.5, 0.1, 0.0),
            Vec3::new(1.5, 0.1, 0.0),
            Vec3::new(2.5, 0.1, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        ];
        let weights = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.5, 0.5],
        ];
        BodyTemplate::new(
            vertices,
            vec![[0, 1, 2]],
            joints,
            vec![None, Some(0), Some(1)],
            weights,
        )
        .unwrap()
    }

    #[test]
    fn zero_pose_gives_identity_transforms() {
        let t = chain();
        let parts = t.forward_kinematics(&Pose::rest(3)).unwrap();
        for p in &parts.0 {
            assert!(p.max_diff(&Affine::IDENTITY) < 1e-15);
        }
        assert_eq!(t.pose_mesh(&parts), t.vertices());
    }

    #[test]
    fn root_rotation_rotates_every_part() {
        let t = chain();
        let mut pose = Pose::rest(3);
        pose.joint_rotations[0] = Vec3::new(0.2, -0.4, 0.9);
        let r = Mat3::from_axis_angle(pose.joint_rotations[0]);
        for p in &t.forward_kinematics(&pose).unwrap().0 {
            assert!(Affine::rotation(p.linear).max_diff(&Affine::rotation(r)) < 1e-12);
        }
    }

    #[test]
    fn middle_joint_quarter_turn_matches_hand_composition() {
        let t = chain();
        let mut pose = Pose::rest(3);
        pose.joint_rotations[1] = Vec3::new(0.0, 0.0, FRAC_PI_2);
        let parts = t.forward_kinematics(&pose).unwrap();
        // Hand-built: leaf frame = T(J1) R T(J2 − J1), part = frame · T(−J2).
        let rz = Affine::rotation(Mat3([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]));
        let expected = Affine::translation(Vec3::new(1.0, 0.0, 0.0))
            .compose(&rz)
            .compose(&Affine::translation(Vec3::new(1.0, 0.0, 0.0)))
            .compose(&Affine::translation(Vec3::new(-2.0, 0.0, 0.0)));
        assert!(parts.0[2].max_diff(&expected) < 1e-15);
        // The leaf joint itself ends up at (1, 1, 0).
        let j2 = parts.0[2].apply(Vec3::new(2.0, 0.0, 0.0));
        assert!((j2 - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-15);
        for p in &parts.0 {
            assert!(p.linear.orthonormality_error() < 1e-12 && (p.linear.det() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_vertex_follows_its_part_and_half_weights_give_midpoint() {
        let t = chain();
        let parts = PartTransforms(vec![
            Affine::IDENTITY,
            Affine::translation(Vec3::new(0.0, 2.0, 0.0)),
            Affine::translation(Vec3::new(0.0, 0.0, 4.0)),
        ]);
        let posed = t.pose_mesh(&parts);
        assert_eq!(posed[1], parts.0[1].apply(t.vertices()[1]));
        let a = parts.0[1].apply(t.vertices()[3]);
        let b = parts.0[2].apply(t.vertices()[3]);
        assert!((posed[3] - (a + b) * 0.5).norm() < 1e-15);
    }

    #[test]
    fn joint_count_mismatch_is_rejected() {
        assert!(matches!(
            chain().forward_kinematics(&Pose::rest(2)),
            Err(BodyError::JointCount { .. })
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        let j = vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)];
        let v = vec![Vec3::ZERO];
        let bad_sum = BodyTemplate::new(
            v.clone(),
            vec![],
            j.clone(),
            vec![None, Some(0)],
            vec![vec![0.6, 0.6]],
        );
        assert!(matches!(
            bad_sum,
            Err(BodyError::WeightRowSum { row: 0, .. })
        ));
        let cyc = BodyTemplate::new(
            v.clone(),
            vec![],
            vec![Vec3::ZERO; 3],
            vec![None, Some(2), Some(1)],
            vec![vec![1.0, 0.0, 0.0]],
        );
        assert!(matches!(cyc, Err(BodyError::Hierarchy(_))));
        let face = BodyTemplate::new(
            v,
            vec![[0, 0, 3]],
            j,
            vec![None, Some(0)],
            vec![vec![1.0, 0.0]],
        );
        assert!(matches!(face, Err(BodyError::FaceIndex { index: 3, .. })));
    }

    #[test]
    fn normalization_wraps_large_angles() {
        let mut p = Pose::rest(1);
        p.joint_rotations[0] = Vec3::new(0.0, 0.0, 7.0);
        let n = p.normalized();
        assert!(n.joint_rotations[0].norm() < std::f64::consts::TAU);
        let a = Mat3::from_axis_angle(Vec3::new(0.0, 0.0, 7.0));
        let b = Mat3::from_axis_angle(n.joint_rotations[0]);
        assert!(Affine::rotation(a).max_diff(&Affine::rotation(b)) < 1e-12);
    }
}
