//! Triangle primitives and a few analytic test meshes.

use std::collections::HashMap;

use crate::math::Vec3;

/// Closest point on triangle `(a, b, c)` to `p`.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    closest_point_on_triangle(p, a, b, c).dist(p)
}

/// Möller–Trumbore. Returns the ray parameter `t` of the hit, if any, for
/// `origin + t * dir` (dir need not be unit).
pub fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let h = dir.cross(e2);
    let det = e1.dot(h);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = inv * s.dot(h);
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = inv * dir.dot(q);
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(inv * e2.dot(q))
}

/// Minimum distance from `p` to any triangle, by exhaustive search.
pub fn brute_force_distance(p: Vec3, vertices: &[Vec3], faces: &[[usize; 3]]) -> f64 {
    faces
        .iter()
        .map(|f| point_triangle_distance(p, vertices[f[0]], vertices[f[1]], vertices[f[2]]))
        .fold(f64::INFINITY, f64::min)
}

/// Area-weighted vertex normals (zero for isolated vertices).
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut n = vec![Vec3::ZERO; vertices.len()];
    for f in faces {
        let fn_ = (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]);
        for &i in f {
            n[i] += fn_;
        }
    }
    n.into_iter()
        .map(|v| if v.norm2() > 0.0 { v.normalized() } else { v })
        .collect()
}

/// Faces incident to each vertex.
pub fn incident_faces(n_vertices: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_vertices];
    for (k, f) in faces.iter().enumerate() {
        for &i in f {
            out[i].push(k);
        }
    }
    out
}

/// Axis-aligned box `[-h, h]^3` around `center`, outward-facing triangles.
pub fn cube(center: Vec3, h: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let vertices = (0..8)
        .map(|i| {
            let s = |b: usize| if i & b != 0 { h } else { -h };
            center + Vec3::new(s(1), s(2), s(4))
        })
        .collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3], // z-
        [4, 5, 6],
        [5, 7, 6], // z+
        [0, 1, 4],
        [1, 5, 4], // y-
        [2, 6, 3],
        [3, 6, 7], // y+
        [0, 4, 2],
        [2, 4, 6], // x-
        [1, 3, 5],
        [3, 7, 5], // x+
    ];
    (vertices, faces)
}

/// Subdivided icosahedron projected onto a sphere.
pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalized())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalized());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (
        verts.into_iter().map(|v| center + v * radius).collect(),
        faces,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        );
        assert!(
            closest_point_on_triangle(Vec3::new(0.2, 0.2, 3.0), a, b, c)
                .dist(Vec3::new(0.2, 0.2, 0.0))
                < 1e-15
        );
        assert_eq!(
            closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), a, b, c),
            a
        );
        assert_eq!(
            closest_point_on_triangle(Vec3::new(0.5, -2.0, 0.0), a, b, c),
            Vec3::new(0.5, 0.0, 0.0)
        );
        let p = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), a, b, c);
        assert!(p.dist(Vec3::new(0.5, 0.5, 0.0)) < 1e-15);
    }

    #[test]
    fn ray_hits_triangle_interior_only() {
        let (a, b, c) = (
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        );
        let dir = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(
            ray_triangle(Vec3::new(0.25, 0.25, 2.0), dir, a, b, c),
            Some(2.0)
        );
        assert_eq!(ray_triangle(Vec3::new(0.8, 0.8, 2.0), dir, a, b, c), None);
    }

    #[test]
    fn test_meshes_are_closed_and_outward() {
        for (v, f) in [
            cube(Vec3::ZERO, 0.5),
            icosphere(Vec3::new(1.0, 2.0, 3.0), 0.7, 2),
        ] {
            let centroid = v.iter().fold(Vec3::ZERO, |s, &p| s + p) / v.len() as f64;
            let mut edges: HashMap<(usize, usize), i32> = HashMap::new();
            for t in &f {
                let n = (v[t[1]] - v[t[0]]).cross(v[t[2]] - v[t[0]]);
                assert!(n.dot(v[t[0]] - centroid) > 0.0);
                for k in 0..3 {
                    *edges.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
                }
            }
            for (&(a, b), &n) in &edges {
                assert_eq!(n, 1);
                assert_eq!(edges.get(&(b, a)), Some(&1));
            }
        }
    }
}
