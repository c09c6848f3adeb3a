//! Triangle meshes, contours and the geometric operations the pipeline is built on.

mod align;
mod io;
mod query;
mod remesh;
mod smooth;
mod topology;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{rigid_align, AlignOptions, Alignment, RigidTransform};
pub use io::{load_contour, load_mesh, load_particles, save_contour, save_mesh, save_particles};
pub use query::{
    brute_force_closest_point, closest_point, closest_point_on_contour, closest_point_on_triangle,
    ContourPoint, SurfaceQuery,
};
pub use remesh::{isotropic_remesh, RemeshOptions};
pub use smooth::laplacian_smooth;

pub(crate) mod smooth_internals {
    pub(crate) use super::smooth::{boundary_vertex_mask, laplacian_step, sharp_vertex_mask, vertex_neighbors};
}
pub use topology::{
    boundary_edges, boundary_loop, boundary_loops, connected_components, EdgeMap,
};

pub type Point = Vector3<f64>;

/// Indexed triangle surface.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
    normals: Option<Vec<Point>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex index out of range (vertex count {n})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references the same vertex twice"
                )));
            }
        }
        if let Some(v) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {v} is not finite")));
        }
        Ok(Self {
            vertices,
            faces,
            normals: None,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Attaches per-vertex normals. They are normalized on the way in.
    pub fn with_normals(mut self, normals: Vec<Point>) -> Result<Self> {
        if normals.len() != self.vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "{} normals for {} vertices",
                normals.len(),
                self.vertices.len()
            )));
        }
        self.normals = Some(
            normals
                .into_iter()
                .map(|n| n.try_normalize(0.0).unwrap_or_else(Point::z))
                .collect(),
        );
        Ok(self)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn normals(&self) -> Option<&[Point]> {
        self.normals.as_deref()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Point; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized normal; its length is twice the face area.
    pub fn face_cross(&self, face: usize) -> Point {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn face_normal(&self, face: usize) -> Point {
        self.face_cross(face)
            .try_normalize(0.0)
            .unwrap_or_else(Point::zeros)
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Unique undirected edges as `(lo, hi)` vertex pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| {
                (0..3).map(move |k| {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    (a.min(b), a.max(b))
                })
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn edge_lengths(&self) -> Vec<f64> {
        self.edges()
            .into_iter()
            .map(|(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .collect()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let lengths = self.edge_lengths();
        if lengths.is_empty() {
            return 0.0;
        }
        lengths.iter().sum::<f64>() / lengths.len() as f64
    }

    pub fn vertex_centroid(&self) -> Point {
        if self.vertices.is_empty() {
            return Point::zeros();
        }
        self.vertices.iter().sum::<Point>() / self.vertices.len() as f64
    }

    /// Area-weighted surface centroid; falls back to the vertex centroid for
    /// degenerate meshes.
    pub fn area_centroid(&self) -> Point {
        let mut acc = Point::zeros();
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let w = self.face_area(f);
            acc += w * (a + b + c) / 3.0;
            total += w;
        }
        if total > 0.0 {
            acc / total
        } else {
            self.vertex_centroid()
        }
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        bounding_box(&self.vertices)
    }

    /// Length of the bounding-box diagonal.
    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Area-weighted vertex normals, computed from the faces.
    pub fn vertex_normals(&self) -> Vec<Point> {
        let mut normals = vec![Point::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_cross(fi);
            for &v in f {
                normals[v] += n;
            }
        }
        normals
            .into_iter()
            .map(|n| n.try_normalize(0.0).unwrap_or_else(Point::zeros))
            .collect()
    }

    /// Same connectivity with new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Point>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len());
        Self {
            vertices,
            faces: self.faces.clone(),
            normals: None,
        }
    }

    pub(crate) fn from_parts_unchecked(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            faces,
            normals: None,
        }
    }

    /// Builds the sub-mesh made of `faces`, re-indexing vertices compactly in
    /// order of first use and dropping unreferenced ones.
    pub fn submesh(&self, faces: impl IntoIterator<Item = usize>) -> Self {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut out_faces = Vec::new();
        for fi in faces {
            let f = self.faces[fi];
            let mut nf = [0; 3];
            for k in 0..3 {
                let v = f[k];
                if remap[v] == usize::MAX {
                    remap[v] = vertices.len();
                    vertices.push(self.vertices[v]);
                }
                nf[k] = remap[v];
            }
            out_faces.push(nf);
        }
        Self::from_parts_unchecked(vertices, out_faces)
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| t.apply_point(p)).collect(),
            faces: self.faces.clone(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
        }
    }
}

pub(crate) fn bounding_box(points: &[Point]) -> (Point, Point) {
    if points.is_empty() {
        return (Point::zeros(), Point::zeros());
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Ordered polyline. A closed contour does not repeat its first point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    points: Vec<Point>,
    closed: bool,
}

impl Contour {
    pub fn new(points: Vec<Point>, closed: bool) -> Result<Self> {
        let n = points.len();
        for i in 0..n.saturating_sub(1) {
            if points[i] == points[i + 1] {
                return Err(Error::InvalidArgument(format!(
                    "contour points {i} and {} coincide",
                    i + 1
                )));
            }
        }
        if closed && n >= 2 && points[0] == points[n - 1] {
            return Err(Error::InvalidArgument(
                "closed contour repeats its first point".into(),
            ));
        }
        Ok(Self { points, closed })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        match (self.points.len(), self.closed) {
            (0 | 1, _) => 0,
            (2, true) => 2,
            (n, true) => n,
            (n, false) => n - 1,
        }
    }

    pub fn segment(&self, i: usize) -> (Point, Point) {
        let n = self.points.len();
        (self.points[i], self.points[(i + 1) % n])
    }

    pub fn segment_length(&self, i: usize) -> f64 {
        let (a, b) = self.segment(i);
        (b - a).norm()
    }

    /// Unit tangent of segment `i`.
    pub fn tangent(&self, i: usize) -> Point {
        let (a, b) = self.segment(i);
        (b - a).normalize()
    }

    pub fn point_at(&self, segment: usize, t: f64) -> Point {
        let (a, b) = self.segment(segment);
        a + (b - a) * t
    }

    pub fn perimeter(&self) -> f64 {
        (0..self.num_segments()).map(|i| self.segment_length(i)).sum()
    }

    /// Cumulative arc length at the start of each segment.
    pub fn arc_offsets(&self) -> Vec<f64> {
        let mut acc = 0.0;
        (0..self.num_segments())
            .map(|i| {
                let s = acc;
                acc += self.segment_length(i);
                s
            })
            .collect()
    }

    pub fn centroid(&self) -> Point {
        if self.points.is_empty() {
            return Point::zeros();
        }
        self.points.iter().sum::<Point>() / self.points.len() as f64
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = bounding_box(&self.points);
        (hi - lo).norm()
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            closed: self.closed,
        }
    }
}

/// A point on a mesh face, stored with its barycentric coordinates so it can
/// be reconstructed exactly from the face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub position: Point,
    pub face: usize,
    pub barycentric: Point,
}

impl SurfacePoint {
    pub fn reconstruct(&self, mesh: &TriangleMesh) -> Point {
        let [a, b, c] = mesh.triangle(self.face);
        a * self.barycentric.x + b * self.barycentric.y + c * self.barycentric.z
    }

    /// Distance between the stored position and its barycentric reconstruction.
    pub fn reconstruction_error(&self, mesh: &TriangleMesh) -> f64 {
        (self.reconstruct(mesh) - self.position).norm()
    }
}
