//! Procedural meshes and contours used by the synthetic cohorts and the tests.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::mesh::{Contour, Point, TriangleMesh};

/// The unit cube `[0,1]^3` as 8 vertices and 12 outward-facing triangles.
pub fn unit_cube() -> TriangleMesh {
    lattice_box([1, 1, 1], |i, j, k| Point::new(i as f64, j as f64, k as f64))
}

/// Axis-aligned box with `n` subdivisions along every edge.
pub fn subdivided_box(lo: Point, hi: Point, n: usize) -> TriangleMesh {
    let n = n.max(1);
    let d = (hi - lo) / n as f64;
    lattice_box([n, n, n], |i, j, k| {
        lo + Point::new(i as f64 * d.x, j as f64 * d.y, k as f64 * d.z)
    })
}

/// Surface of the lattice block `[0,nx]×[0,ny]×[0,nz]` mapped through `map`.
/// Faces are outward oriented as long as `map` preserves orientation. Every
/// quad is split along the diagonal joining its lowest and highest lattice
/// corners, so two blocks sharing a lattice face produce identical triangles.
pub fn lattice_box(
    dims: [usize; 3],
    map: impl Fn(usize, usize, usize) -> Point,
) -> TriangleMesh {
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |c: [usize; 3], vertices: &mut Vec<Point>| {
        *index.entry(c).or_insert_with(|| {
            vertices.push(map(c[0], c[1], c[2]));
            vertices.len() - 1
        })
    };
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [0, dims[axis]] {
            for u in 0..dims[b] {
                for v in 0..dims[c] {
                    let corner = |du: usize, dv: usize| {
                        let mut p = [0; 3];
                        p[axis] = side;
                        p[b] = u + du;
                        p[c] = v + dv;
                        p
                    };
                    let q00 = vid(corner(0, 0), &mut vertices);
                    let q10 = vid(corner(1, 0), &mut vertices);
                    let q11 = vid(corner(1, 1), &mut vertices);
                    let q01 = vid(corner(0, 1), &mut vertices);
                    if side == 0 {
                        faces.push([q00, q11, q10]);
                        faces.push([q00, q01, q11]);
                    } else {
                        faces.push([q00, q10, q11]);
                        faces.push([q00, q11, q01]);
                    }
                }
            }
        }
    }
    TriangleMesh::from_parts_unchecked(vertices, faces)
}

/// Subdivided icosahedron projected to a sphere of radius `radius` at the origin.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point> = [
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
    .map(|&(x, y, z)| Point::new(x, y, z).normalize())
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
        let mut mid = |a: usize, b: usize, vs: &mut Vec<Point>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vs.push(((vs[a] + vs[b]) * 0.5).normalize());
                vs.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = vertices.into_iter().map(|p| p * radius).collect();
    TriangleMesh::from_parts_unchecked(vertices, faces)
}

/// Icosphere scaled to semi-axes `axes`.
pub fn ellipsoid(axes: Point, subdivisions: usize) -> TriangleMesh {
    let s = icosphere(1.0, subdivisions);
    let vs = s.vertices().iter().map(|p| p.component_mul(&axes)).collect();
    s.with_vertices(vs)
}

/// Latitude/longitude sphere with poles on the z axis.
pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let rings = rings.max(1);
    let segments = segments.max(3);
    let mut vertices = vec![Point::new(0.0, 0.0, radius)];
    for r in 1..=rings {
        let theta = PI * r as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            vertices.push(
                Point::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()) * radius,
            );
        }
    }
    vertices.push(Point::new(0.0, 0.0, -radius));
    let south = vertices.len() - 1;
    let ring = |r: usize, s: usize| 1 + r * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s), ring(0, s + 1)]);
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    TriangleMesh::from_parts_unchecked(vertices, faces)
}

/// Planar `nx × ny` grid of squares in `z = 0` starting at the origin, facing +z.
pub fn grid(nx: usize, ny: usize, spacing: f64) -> TriangleMesh {
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push(Point::new(i as f64 * spacing, j as f64 * spacing, 0.0));
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut faces = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriangleMesh::from_parts_unchecked(vertices, faces)
}

/// Closed square of side `size` in `z = 0`.
pub fn square_contour(size: f64) -> Contour {
    Contour::new(
        vec![
            Point::new(0.0, 0.0, 0.0),
            Point::new(size, 0.0, 0.0),
            Point::new(size, size, 0.0),
            Point::new(0.0, size, 0.0),
        ],
        true,
    )
    .expect("distinct points")
}

/// Closed regular polygon with `n` vertices on a circle in `z = 0`.
pub fn circle_contour(radius: f64, n: usize) -> Contour {
    Contour::new(
        (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                Point::new(radius * a.cos(), radius * a.sin(), 0.0)
            })
            .collect(),
        true,
    )
    .expect("distinct points")
}
