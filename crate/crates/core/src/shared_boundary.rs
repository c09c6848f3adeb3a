//! Decomposition of two adjoining organ meshes into two remainder meshes, the
//! shared surface between them and the contour bounding that surface.
//!
//! Pipeline: remesh both inputs, select the triangles of each mesh whose three
//! vertices lie within `threshold` of the other mesh, take B's selection as the
//! shared surface, cut both selections out of their meshes, snap A's new
//! boundary onto the shared surface's boundary, smooth, and read off the contour.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{
    boundary_loop, boundary_loops, closest_point_on_contour, connected_components,
    isotropic_remesh, Contour, RemeshOptions, SurfaceQuery, TriangleMesh,
};

/// Distance from every vertex of `source` to the surface behind `target`.
pub fn vertex_distances(source: &TriangleMesh, target: &SurfaceQuery) -> Vec<f64> {
    source
        .vertices()
        .par_iter()
        .map(|p| target.distance(p))
        .collect()
}

fn close_faces(source: &TriangleMesh, distances: &[f64], threshold: f64) -> Vec<usize> {
    source
        .faces()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.iter().all(|&v| distances[v] < threshold))
        .map(|(i, _)| i)
        .collect()
}

/// Faces of `source` whose three vertices are all closer than `threshold` to `target`.
pub fn find_close_triangles(
    source: &TriangleMesh,
    target: &TriangleMesh,
    threshold: f64,
) -> Result<Vec<usize>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    if target.is_empty() {
        return Ok(Vec::new());
    }
    let distances = vertex_distances(source, &SurfaceQuery::new(target.clone()));
    Ok(close_faces(source, &distances, threshold))
}

/// Splits `mesh` into `(selected, remainder)` meshes. Both are re-indexed compactly.
pub fn split_mesh(mesh: &TriangleMesh, selected: &[usize]) -> Result<(TriangleMesh, TriangleMesh)> {
    let mut mask = vec![false; mesh.num_faces()];
    for &f in selected {
        if f >= mesh.num_faces() {
            return Err(Error::InvalidArgument(format!(
                "selected face {f} out of range ({} faces)",
                mesh.num_faces()
            )));
        }
        mask[f] = true;
    }
    let sel = (0..mesh.num_faces()).filter(|&f| mask[f]);
    let rest = (0..mesh.num_faces()).filter(|&f| !mask[f]);
    Ok((mesh.submesh(sel), mesh.submesh(rest)))
}

/// Moves every boundary vertex of `open_mesh` to its closest point on
/// `target_loop`. Interior vertices and connectivity are untouched.
pub fn snap_boundary(open_mesh: &TriangleMesh, target_loop: &Contour) -> Result<TriangleMesh> {
    let loops = boundary_loops(open_mesh);
    match loops.len() {
        0 => return Err(Error::NoBoundary),
        1 => {}
        count => return Err(Error::MultipleBoundaryLoops { count }),
    }
    if target_loop.num_segments() == 0 {
        return Err(Error::InvalidArgument("target loop has no segments".into()));
    }
    let mut pos = open_mesh.vertices().to_vec();
    for &v in &loops[0] {
        let (cp, _) = closest_point_on_contour(target_loop, &pos[v]).expect("segments");
        pos[v] = target_loop.point_at(cp.segment, cp.t);
    }
    Ok(open_mesh.with_vertices(pos))
}

/// Which decomposition outputs get smoothed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothTargets {
    pub remainder_a: bool,
    pub shared: bool,
    pub remainder_b: bool,
}

impl Default for SmoothTargets {
    fn default() -> Self {
        Self {
            remainder_a: true,
            shared: true,
            remainder_b: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SharedBoundaryParams {
    pub threshold: f64,
    pub remesh: RemeshOptions,
    pub smooth_iterations: usize,
    pub smooth_step: f64,
    pub smooth_targets: SmoothTargets,
}

impl SharedBoundaryParams {
    pub fn new(threshold: f64, remesh_edge_length: f64, smooth_iterations: usize) -> Self {
        Self {
            threshold,
            remesh: RemeshOptions::new(remesh_edge_length),
            smooth_iterations,
            smooth_step: 0.5,
            smooth_targets: SmoothTargets::default(),
        }
    }
}

/// Areas recorded before snapping and smoothing, for conservation checks.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct AreaLedger {
    pub remeshed_a: f64,
    pub shared_a: f64,
    pub remainder_a: f64,
    pub remeshed_b: f64,
    pub shared_b: f64,
    pub remainder_b: f64,
}

#[derive(Debug, Clone)]
pub struct SharedBoundaryDecomposition {
    pub remainder_a: TriangleMesh,
    pub shared: TriangleMesh,
    pub remainder_b: TriangleMesh,
    pub contour: Contour,
    pub threshold_used: f64,
    pub areas: AreaLedger,
    /// Face counts: `(remeshed A, A_s, A_r)`, measured before snapping.
    pub face_counts_a: (usize, usize, usize),
    /// Vertex-to-other-mesh distances, A's vertices then B's.
    pub distances_a: Vec<f64>,
    pub distances_b: Vec<f64>,
    pub warnings: Vec<String>,
}

fn largest_component(mesh: &TriangleMesh, faces: Vec<usize>, what: &str, warnings: &mut Vec<String>) -> Vec<usize> {
    if faces.is_empty() {
        return faces;
    }
    let sub = mesh.submesh(faces.iter().copied());
    let comps = connected_components(&sub);
    if comps.len() > 1 {
        let msg = format!(
            "{what}: {} disconnected islands, keeping the largest ({} of {} faces)",
            comps.len(),
            comps[0].len(),
            faces.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let mut keep: Vec<usize> = comps[0].iter().map(|&i| faces[i]).collect();
    keep.sort_unstable();
    keep
}

/// Laplacian smoothing with pinned boundary and sharp-edge vertices,
/// re-projecting the free vertices onto `surface` after every pass.
fn smooth_on_surface(
    mesh: &TriangleMesh,
    surface: &SurfaceQuery,
    iterations: usize,
    step: f64,
    feature_angle_degrees: f64,
) -> TriangleMesh {
    use crate::mesh::smooth_internals::{boundary_vertex_mask, laplacian_step, sharp_vertex_mask, vertex_neighbors};
    let nbrs = vertex_neighbors(mesh);
    let sharp = sharp_vertex_mask(mesh, feature_angle_degrees);
    let pinned: Vec<bool> = boundary_vertex_mask(mesh).into_iter().zip(sharp).map(|(b, s)| b || s).collect();
    let mut pos = mesh.vertices().to_vec();
    for _ in 0..iterations {
        pos = laplacian_step(&pos, &nbrs, &pinned, step);
        for (v, p) in pos.iter_mut().enumerate() {
            if !pinned[v] {
                if let Some((sp, _)) = surface.closest_point(p) {
                    *p = sp.position;
                }
            }
        }
    }
    mesh.with_vertices(pos)
}

pub fn extract_shared_boundary(
    a: &TriangleMesh,
    b: &TriangleMesh,
    params: &SharedBoundaryParams,
) -> Result<SharedBoundaryDecomposition> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("both meshes need faces".into()));
    }
    let threshold = params.threshold;
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let (ra, rb) = rayon::join(
        || isotropic_remesh(a, &params.remesh),
        || isotropic_remesh(b, &params.remesh),
    );
    let (ra, rb) = (ra?, rb?);
    let qa = SurfaceQuery::new(ra.clone());
    let qb = SurfaceQuery::new(rb.clone());
    let distances_a = vertex_distances(&ra, &qb);
    let distances_b = vertex_distances(&rb, &qa);

    let mut warnings = Vec::new();
    let sel_a = largest_component(&ra, close_faces(&ra, &distances_a, threshold), "A_s", &mut warnings);
    let sel_b = largest_component(&rb, close_faces(&rb, &distances_b, threshold), "B_s", &mut warnings);
    if sel_a.is_empty() || sel_b.is_empty() {
        let min_distance = distances_a
            .iter()
            .chain(&distances_b)
            .copied()
            .fold(f64::INFINITY, f64::min);
        return Err(Error::NoSharedBoundary { min_distance });
    }

    let (shared_a, remainder_a) = split_mesh(&ra, &sel_a)?;
    let (shared, remainder_b) = split_mesh(&rb, &sel_b)?;
    let areas = AreaLedger {
        remeshed_a: ra.area(),
        shared_a: shared_a.area(),
        remainder_a: remainder_a.area(),
        remeshed_b: rb.area(),
        shared_b: shared.area(),
        remainder_b: remainder_b.area(),
    };
    let ratio = areas.shared_a.max(areas.shared_b) / areas.shared_a.min(areas.shared_b);
    if ratio > 1.5 {
        let msg = format!(
            "A_s and B_s areas differ by a factor {ratio:.2}; the threshold may be badly tuned"
        );
        warn!("{msg}");
        warnings.push(msg);
    }

    let loops = boundary_loops(&shared).len();
    if loops != 1 {
        return Err(Error::Topology(format!(
            "shared surface has {loops} boundary loops (expected 1); the threshold is likely too small or too large"
        )));
    }
    let shared_loop = boundary_loop(&shared)?;
    let remainder_a_snapped = snap_boundary(&remainder_a, &shared_loop).map_err(|e| {
        Error::Topology(format!("remainder of A cannot be snapped to the shared boundary: {e}"))
    })?;

    let smooth = |m: &TriangleMesh, on: bool, q: &SurfaceQuery| {
        if on && params.smooth_iterations > 0 {
            smooth_on_surface(m, q, params.smooth_iterations, params.smooth_step, params.remesh.feature_angle_degrees)
        } else {
            m.clone()
        }
    };
    let targets = params.smooth_targets;
    let out_a = smooth(&remainder_a_snapped, targets.remainder_a, &qa);
    let out_m = smooth(&shared, targets.shared, &qb);
    let out_b = smooth(&remainder_b, targets.remainder_b, &qb);
    let contour = boundary_loop(&out_m)?;

    Ok(SharedBoundaryDecomposition {
        remainder_a: out_a,
        shared: out_m,
        remainder_b: out_b,
        contour,
        threshold_used: threshold,
        areas,
        face_counts_a: (ra.num_faces(), shared_a.num_faces(), remainder_a.num_faces()),
        distances_a,
        distances_b,
        warnings,
    })
}

/// Equal-width histogram over `[0, max]` as `(bin upper edge, count)` pairs.
pub fn distance_histogram(distances: &[f64], bins: usize) -> Vec<(f64, usize)> {
    let finite: Vec<f64> = distances.iter().copied().filter(|d| d.is_finite()).collect();
    let bins = bins.max(1);
    let max = finite.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![(0.0, finite.len())];
    }
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for d in finite {
        counts[((d / width) as usize).min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| ((i + 1) as f64 * width, c))
        .collect()
}
