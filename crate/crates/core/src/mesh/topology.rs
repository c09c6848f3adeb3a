//! Edge adjacency, boundary loops and connected components.

use std::collections::{BTreeMap, HashMap};

use super::{Contour, TriangleMesh};
use crate::error::{Error, Result};

/// Undirected edge `(lo, hi)` to the faces that contain it.
#[derive(Debug, Clone, Default)]
pub struct EdgeMap {
    map: HashMap<(usize, usize), Vec<usize>>,
}

impl EdgeMap {
    pub fn new(mesh: &TriangleMesh) -> Self {
        Self::from_faces(mesh.faces().iter().copied().enumerate())
    }

    pub(crate) fn from_faces(faces: impl Iterator<Item = (usize, [usize; 3])>) -> Self {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (fi, f) in faces {
            for k in 0..3 {
                map.entry(key(f[k], f[(k + 1) % 3])).or_default().push(fi);
            }
        }
        Self { map }
    }

    pub fn faces_of(&self, a: usize, b: usize) -> &[usize] {
        self.map.get(&key(a, b)).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<usize>)> {
        self.map.iter()
    }

    /// Fails if any edge is shared by more than two faces.
    pub fn check_manifold(&self) -> Result<()> {
        let mut bad: Vec<_> = self
            .map
            .iter()
            .filter(|(_, fs)| fs.len() > 2)
            .map(|(e, fs)| (*e, fs.len()))
            .collect();
        bad.sort_unstable();
        match bad.first() {
            None => Ok(()),
            Some(((a, b), n)) => Err(Error::Topology(format!(
                "{} non-manifold edges, e.g. ({a}, {b}) with {n} incident faces",
                bad.len()
            ))),
        }
    }
}

pub(crate) fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Directed boundary half-edges `(from, to)` following face orientation.
pub fn boundary_edges(mesh: &TriangleMesh) -> Vec<(usize, usize)> {
    let edges = EdgeMap::new(mesh);
    let mut out = Vec::new();
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if edges.faces_of(a, b).len() == 1 {
                out.push((a, b));
            }
        }
    }
    out
}

/// All boundary loops as vertex-index cycles. Loops are ordered by their
/// smallest vertex index and each starts at that vertex.
pub fn boundary_loops(mesh: &TriangleMesh) -> Vec<Vec<usize>> {
    let mut next: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (a, b) in boundary_edges(mesh) {
        next.entry(a).or_default().push(b);
    }
    for outs in next.values_mut() {
        outs.sort_unstable();
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = next.iter().find(|(_, outs)| !outs.is_empty()) {
        let mut cycle = vec![start];
        let mut cur = start;
        loop {
            let outs = next.get_mut(&cur).expect("boundary vertex");
            let Some(nxt) = (!outs.is_empty()).then(|| outs.remove(0)) else {
                // open chain; can only happen on inconsistently oriented input
                break;
            };
            if nxt == start {
                break;
            }
            cycle.push(nxt);
            cur = nxt;
        }
        loops.push(cycle);
    }
    loops
}

/// The single boundary loop of an open mesh, in connectivity order.
pub fn boundary_loop(mesh: &TriangleMesh) -> Result<Contour> {
    let loops = boundary_loops(mesh);
    match loops.len() {
        0 => Err(Error::NoBoundary),
        1 => Contour::new(
            loops[0].iter().map(|&v| mesh.vertices()[v]).collect(),
            true,
        ),
        count => Err(Error::MultipleBoundaryLoops { count }),
    }
}

/// Face components connected through shared edges, largest first (ties by
/// smallest face index). Faces within a component are sorted.
pub fn connected_components(mesh: &TriangleMesh) -> Vec<Vec<usize>> {
    let n = mesh.num_faces();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let edges = EdgeMap::new(mesh);
    for (_, fs) in edges.iter() {
        for w in fs.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for f in 0..n {
        let r = find(&mut parent, f);
        groups.entry(r).or_default().push(f);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Point;
    use crate::primitives;

    #[test]
    fn single_triangle_loop() {
        let m = TriangleMesh::new(
            vec![Point::zeros(), Point::x(), Point::y()],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let c = boundary_loop(&m).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.is_closed());
    }

    #[test]
    fn unit_square_perimeter() {
        let m = primitives::grid(1, 1, 1.0);
        let c = boundary_loop(&m).unwrap();
        assert_eq!(c.len(), 4);
        assert!((c.perimeter() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn closed_cube_has_no_boundary() {
        assert!(matches!(
            boundary_loop(&primitives::unit_cube()),
            Err(Error::NoBoundary)
        ));
    }

    #[test]
    fn two_loops_reported() {
        // open tube: cube without top and bottom faces
        let cube = primitives::unit_cube();
        let side: Vec<usize> = (0..12)
            .filter(|&f| {
                let n = cube.face_normal(f);
                n.z.abs() < 0.5
            })
            .collect();
        let tube = cube.submesh(side);
        assert!(matches!(
            boundary_loop(&tube),
            Err(Error::MultipleBoundaryLoops { count: 2 })
        ));
    }

    #[test]
    fn loop_uses_every_boundary_edge_once() {
        let m = primitives::grid(5, 3, 0.2);
        let loops = boundary_loops(&m);
        assert_eq!(loops.len(), 1);
        let l = &loops[0];
        let mut used: Vec<(usize, usize)> =
            (0..l.len()).map(|i| (l[i], l[(i + 1) % l.len()])).collect();
        let mut expected = boundary_edges(&m);
        used.sort_unstable();
        expected.sort_unstable();
        assert_eq!(used, expected);
    }

    #[test]
    fn non_manifold_detected() {
        let m = TriangleMesh::new(
            vec![
                Point::zeros(),
                Point::x(),
                Point::y(),
                Point::z(),
                -Point::y(),
            ],
            vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]],
        )
        .unwrap();
        assert!(matches!(
            EdgeMap::new(&m).check_manifold(),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn components_sorted_by_size() {
        let a = primitives::grid(2, 2, 1.0);
        let b = primitives::grid(1, 1, 1.0);
        let mut vs = a.vertices().to_vec();
        let off = vs.len();
        vs.extend(b.vertices().iter().map(|p| p + Point::new(10.0, 0.0, 0.0)));
        let mut fs = b.faces().iter().map(|f| f.map(|v| v + off)).collect::<Vec<_>>();
        fs.extend_from_slice(a.faces());
        let m = TriangleMesh::new(vs, fs).unwrap();
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 8);
        assert_eq!(comps[1], vec![0, 1]);
    }
}
