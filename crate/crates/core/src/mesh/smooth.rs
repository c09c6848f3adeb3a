use super::{boundary_edges, EdgeMap, Point, TriangleMesh};

/// Sorted, deduplicated 1-ring of every vertex.
pub(crate) fn vertex_neighbors(mesh: &TriangleMesh) -> Vec<Vec<usize>> {
    let mut nbrs = vec![Vec::new(); mesh.num_vertices()];
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
    }
    for n in &mut nbrs {
        n.sort_unstable();
        n.dedup();
    }
    nbrs
}

pub(crate) fn boundary_vertex_mask(mesh: &TriangleMesh) -> Vec<bool> {
    let mut mask = vec![false; mesh.num_vertices()];
    for (a, b) in boundary_edges(mesh) {
        mask[a] = true;
        mask[b] = true;
    }
    mask
}

/// Vertices on an edge whose two faces meet at more than `angle_degrees`.
pub(crate) fn sharp_vertex_mask(mesh: &TriangleMesh, angle_degrees: f64) -> Vec<bool> {
    let cos_limit = angle_degrees.to_radians().cos();
    let mut mask = vec![false; mesh.num_vertices()];
    for (&(a, b), fs) in EdgeMap::new(mesh).iter() {
        if let [f, g] = fs.as_slice() {
            if mesh.face_normal(*f).dot(&mesh.face_normal(*g)) < cos_limit {
                mask[a] = true;
                mask[b] = true;
            }
        }
    }
    mask
}

/// Uniform-weight Laplacian smoothing with boundary vertices held fixed.
///
/// Each iteration moves every interior vertex a fraction `step` of the way
/// towards the average of its 1-ring (Jacobi update). Connectivity is unchanged.
pub fn laplacian_smooth(mesh: &TriangleMesh, iterations: usize, step: f64) -> TriangleMesh {
    let step = step.clamp(0.0, 1.0);
    let nbrs = vertex_neighbors(mesh);
    let pinned = boundary_vertex_mask(mesh);
    let mut pos = mesh.vertices().to_vec();
    for _ in 0..iterations {
        pos = laplacian_step(&pos, &nbrs, &pinned, step);
    }
    mesh.with_vertices(pos)
}

pub(crate) fn laplacian_step(
    pos: &[Point],
    nbrs: &[Vec<usize>],
    pinned: &[bool],
    step: f64,
) -> Vec<Point> {
    pos.iter()
        .enumerate()
        .map(|(v, p)| {
            if pinned[v] || nbrs[v].is_empty() {
                return *p;
            }
            let avg = nbrs[v].iter().map(|&u| pos[u]).sum::<Point>() / nbrs[v].len() as f64;
            p + (avg - p) * step
        })
        .collect()
}
