//! Closest-point queries against meshes (BVH accelerated) and contours.

use super::{Contour, Point, SurfacePoint, TriangleMesh};

/// Closest point on triangle `abc` to `p`, with its barycentric coordinates.
pub fn closest_point_on_triangle(p: &Point, a: &Point, b: &Point, c: &Point) -> (Point, Point) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, Point::new(1.0, 0.0, 0.0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, Point::new(0.0, 1.0, 0.0));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Point::new(1.0 - v, v, 0.0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, Point::new(0.0, 0.0, 1.0));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Point::new(1.0 - w, 0.0, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Point::new(0.0, 1.0 - w, w));
    }
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        // zero-area triangle that slipped through the region tests
        return (*a, Point::new(1.0, 0.0, 0.0));
    }
    let v = vb / denom;
    let w = vc / denom;
    (a + ab * v + ac * w, Point::new(1.0 - v - w, v, w))
}

fn surface_point(mesh: &TriangleMesh, face: usize, q: &Point) -> (SurfacePoint, f64) {
    let [a, b, c] = mesh.triangle(face);
    let (position, barycentric) = closest_point_on_triangle(q, &a, &b, &c);
    let d2 = (position - q).norm_squared();
    (
        SurfacePoint {
            position,
            face,
            barycentric,
        },
        d2,
    )
}

/// Exhaustive closest point: every face is tested, ties go to the lowest face index.
pub fn brute_force_closest_point(mesh: &TriangleMesh, query: &Point) -> Option<(SurfacePoint, f64)> {
    let mut best: Option<(SurfacePoint, f64)> = None;
    for f in 0..mesh.num_faces() {
        let (sp, d2) = surface_point(mesh, f, query);
        if best.as_ref().is_none_or(|(_, bd)| d2 < *bd) {
            best = Some((sp, d2));
        }
    }
    best.map(|(sp, d2)| (sp, d2.sqrt()))
}

/// Closest point on `mesh` to `query` and its distance. Builds a BVH; use
/// [`SurfaceQuery`] for repeated queries.
pub fn closest_point(mesh: &TriangleMesh, query: &Point) -> Option<(SurfacePoint, f64)> {
    SurfaceQuery::new(mesh.clone()).closest_point(query)
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { lo: Point, hi: Point, start: usize, end: usize },
    Inner { lo: Point, hi: Point, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> (&Point, &Point) {
        match self {
            Node::Leaf { lo, hi, .. } | Node::Inner { lo, hi, .. } => (lo, hi),
        }
    }
}

/// A mesh with an eagerly built bounding-volume hierarchy for closest-point queries.
/// Immutable after construction and safe to share between threads.
#[derive(Debug, Clone)]
pub struct SurfaceQuery {
    mesh: TriangleMesh,
    vertex_normals: Vec<Point>,
    // face across the edge opposite each corner; None on open or
    // non-manifold edges
    adjacency: Vec<[Option<usize>; 3]>,
    nodes: Vec<Node>,
    root: usize,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl SurfaceQuery {
    pub fn new(mesh: TriangleMesh) -> Self {
        let n = mesh.num_faces();
        let boxes: Vec<(Point, Point, Point)> = (0..n)
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                let lo = a.inf(&b).inf(&c);
                let hi = a.sup(&b).sup(&c);
                (lo, hi, (a + b + c) / 3.0)
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::new();
        let root = if n > 0 {
            build(&boxes, &mut order, 0, n, &mut nodes)
        } else {
            0
        };
        let vertex_normals = match mesh.normals() {
            Some(ns) => ns.to_vec(),
            None => mesh.vertex_normals(),
        };
        let adjacency = face_adjacency(&mesh);
        Self {
            mesh,
            vertex_normals,
            adjacency,
            nodes,
            root,
            order,
        }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn vertex_normals(&self) -> &[Point] {
        &self.vertex_normals
    }

    /// Interpolated (smooth) unit normal at a surface point.
    pub fn normal_at(&self, sp: &SurfacePoint) -> Point {
        let [a, b, c] = self.mesh.faces()[sp.face];
        let n = self.vertex_normals[a] * sp.barycentric.x
            + self.vertex_normals[b] * sp.barycentric.y
            + self.vertex_normals[c] * sp.barycentric.z;
        n.try_normalize(1e-300)
            .unwrap_or_else(|| self.mesh.face_normal(sp.face))
    }

    /// Global closest point; ties are broken towards the lowest face index.
    pub fn closest_point(&self, query: &Point) -> Option<(SurfacePoint, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(SurfacePoint, f64)> = None;
        let mut stack = vec![self.root];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let (lo, hi) = node.bounds();
            if let Some((_, bd)) = &best {
                if box_distance2(lo, hi, query) > *bd {
                    continue;
                }
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        let (sp, d2) = surface_point(&self.mesh, f, query);
                        let better = match &best {
                            None => true,
                            Some((bsp, bd)) => d2 < *bd || (d2 == *bd && f < bsp.face),
                        };
                        if better {
                            best = Some((sp, d2));
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dist = |i: usize| {
                        let (lo, hi) = self.nodes[i].bounds();
                        box_distance2(lo, hi, query)
                    };
                    // nearer child on top of the stack
                    if dist(left) <= dist(right) {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.map(|(sp, d2)| (sp, d2.sqrt()))
    }

    /// Distance from `query` to the surface.
    pub fn distance(&self, query: &Point) -> f64 {
        self.closest_point(query).map_or(f64::INFINITY, |(_, d)| d)
    }

    /// Moves `start` by `displacement` along the surface. The displacement
    /// is taken in the start face's plane; whenever the path leaves a face it
    /// continues into the neighbour with its direction rotated about the
    /// shared edge, keeping the angle to the edge. The walk stops at open
    /// boundaries. Unlike a closest-point retraction, this lets points move
    /// across convex creases instead of piling up on them.
    pub fn walk(&self, start: &SurfacePoint, displacement: &Point) -> SurfacePoint {
        const MAX_HOPS: usize = 256;
        let faces = self.mesh.faces();
        let verts = self.mesh.vertices();
        let mut f = start.face;
        let n = self.mesh.face_normal(f);
        let mut u = displacement - n * n.dot(displacement);
        let mut remaining = u.norm();
        if remaining == 0.0 || !remaining.is_finite() {
            return *start;
        }
        u /= remaining;
        let mut lambda = clamp_barycentric(start.barycentric);
        let mut entry: Option<usize> = None;
        for _ in 0..MAX_HOPS {
            let [a, b, c] = self.mesh.triangle(f);
            let Some(mu) = barycentric_rate(&a, &b, &c, &u) else { break };
            let mut exit: Option<(f64, usize)> = None;
            for k in 0..3 {
                if Some(k) == entry || mu[k] >= -1e-12 * mu.amax() {
                    continue;
                }
                let s = lambda[k].max(0.0) / -mu[k];
                if exit.is_none_or(|(best, _)| s < best) {
                    exit = Some((s, k));
                }
            }
            let at = |lambda: Point| SurfacePoint {
                position: a * lambda.x + b * lambda.y + c * lambda.z,
                face: f,
                barycentric: lambda,
            };
            let Some((s, k)) = exit.filter(|&(s, _)| s < remaining) else {
                return at(clamp_barycentric(lambda + mu * remaining));
            };
            lambda += mu * s;
            lambda[k] = 0.0;
            lambda = clamp_barycentric(lambda);
            remaining -= s;
            let (i0, i1) = (faces[f][(k + 1) % 3], faces[f][(k + 2) % 3]);
            let Some(g) = self.adjacency[f][k] else { return at(lambda) };
            let (w0, w1) = (lambda[(k + 1) % 3], lambda[(k + 2) % 3]);

            let e = (verts[i1] - verts[i0]).normalize();
            let along = u.dot(&e);
            let across = (u - e * along).norm();
            let mut w = self.mesh.face_normal(g).cross(&e);
            let opposite = faces[g].iter().position(|&v| v != i0 && v != i1).expect("adjacent face shares an edge");
            if w.dot(&(verts[faces[g][opposite]] - verts[i0])) < 0.0 {
                w = -w;
            }
            u = match (e * along + w * across).try_normalize(1e-300) {
                Some(v) => v,
                None => break,
            };
            lambda = Point::zeros();
            for (slot, &v) in faces[g].iter().enumerate() {
                if v == i0 {
                    lambda[slot] = w0;
                } else if v == i1 {
                    lambda[slot] = w1;
                }
            }
            entry = Some(opposite);
            f = g;
        }
        // degenerate geometry: fall back to projecting the current point
        let [a, b, c] = self.mesh.triangle(f);
        let p = a * lambda.x + b * lambda.y + c * lambda.z;
        self.closest_point(&(p + u * remaining)).map_or(*start, |(sp, _)| sp)
    }
}

fn face_adjacency(mesh: &TriangleMesh) -> Vec<[Option<usize>; 3]> {
    let edges = super::EdgeMap::new(mesh);
    mesh.faces()
        .iter()
        .enumerate()
        .map(|(f, tri)| {
            std::array::from_fn(|k| match edges.faces_of(tri[(k + 1) % 3], tri[(k + 2) % 3]) {
                [x, y] => Some(if *x == f { *y } else { *x }),
                _ => None,
            })
        })
        .collect()
}

fn clamp_barycentric(l: Point) -> Point {
    let l = l.map(|x| x.max(0.0));
    let sum = l.sum();
    if sum > 0.0 {
        l / sum
    } else {
        Point::new(1.0, 0.0, 0.0)
    }
}

/// Change of barycentric coordinates per unit move along `u` (in the plane of `abc`).
fn barycentric_rate(a: &Point, b: &Point, c: &Point, u: &Point) -> Option<Point> {
    let (v0, v1) = (b - a, c - a);
    let (d00, d01, d11) = (v0.dot(&v0), v0.dot(&v1), v1.dot(&v1));
    let den = d00 * d11 - d01 * d01;
    if den <= 1e-30 * d00 * d11 {
        return None;
    }
    let (d20, d21) = (u.dot(&v0), u.dot(&v1));
    let mv = (d11 * d20 - d01 * d21) / den;
    let mw = (d00 * d21 - d01 * d20) / den;
    Some(Point::new(-mv - mw, mv, mw))
}

fn box_distance2(lo: &Point, hi: &Point, p: &Point) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let v = if p[k] < lo[k] {
            lo[k] - p[k]
        } else if p[k] > hi[k] {
            p[k] - hi[k]
        } else {
            0.0
        };
        d2 += v * v;
    }
    d2
}

fn build(
    boxes: &[(Point, Point, Point)],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut lo = boxes[order[start]].0;
    let mut hi = boxes[order[start]].1;
    let mut clo = boxes[order[start]].2;
    let mut chi = clo;
    for &f in &order[start..end] {
        lo = lo.inf(&boxes[f].0);
        hi = hi.sup(&boxes[f].1);
        clo = clo.inf(&boxes[f].2);
        chi = chi.sup(&boxes[f].2);
    }
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { lo, hi, start, end });
        return nodes.len() - 1;
    }
    let axis = (chi - clo).imax();
    order[start..end].sort_by(|&a, &b| {
        boxes[a].2[axis]
            .total_cmp(&boxes[b].2[axis])
            .then(a.cmp(&b))
    });
    let mid = (start + end) / 2;
    let left = build(boxes, order, start, mid, nodes);
    let right = build(boxes, order, mid, end, nodes);
    nodes.push(Node::Inner {
        lo,
        hi,
        left,
        right,
    });
    nodes.len() - 1
}

/// Location of a point on a contour: segment index and parameter along it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContourPoint {
    pub segment: usize,
    pub t: f64,
}

/// Closest point on the polyline, as `(location, distance)`. Ties go to the
/// lowest segment index. Returns `None` for contours with fewer than two points.
pub fn closest_point_on_contour(contour: &Contour, query: &Point) -> Option<(ContourPoint, f64)> {
    let mut best: Option<(ContourPoint, f64)> = None;
    for s in 0..contour.num_segments() {
        let (a, b) = contour.segment(s);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((query - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d2 = (a + ab * t - query).norm_squared();
        if best.as_ref().is_none_or(|(_, bd)| d2 < *bd) {
            best = Some((ContourPoint { segment: s, t }, d2));
        }
    }
    best.map(|(cp, d2)| (cp, d2.sqrt()))
}
