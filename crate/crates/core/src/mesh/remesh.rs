//! Isotropic remeshing: repeated split-long / collapse-short / flip-for-valence /
//! tangential-relaxation passes targeting edge lengths in `[0.8, 4/3] × target`.
//!
//! Sharp edges (dihedral angle above `feature_angle_degrees`) and open
//! boundaries are treated as feature curves: vertices on them only slide along
//! the curve, feature corners never move, and no edge is collapsed or flipped
//! across a feature. Smooth vertices are re-projected onto the input surface.

use std::collections::HashSet;

use super::topology::{key, EdgeMap};
use super::{Point, SurfaceQuery, TriangleMesh};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RemeshOptions {
    pub target_edge_length: f64,
    pub iterations: usize,
    pub feature_angle_degrees: f64,
    /// Fraction of the tangential step towards the 1-ring centroid.
    pub relaxation: f64,
}

impl RemeshOptions {
    pub fn new(target_edge_length: f64) -> Self {
        Self {
            target_edge_length,
            iterations: 10,
            feature_angle_degrees: 40.0,
            relaxation: 0.8,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }
}

const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VertexClass {
    Smooth,
    Crease,
    Corner,
}

struct Remesher {
    pos: Vec<Point>,
    class: Vec<VertexClass>,
    faces: Vec<[usize; 3]>,
    alive: Vec<bool>,
    features: HashSet<(usize, usize)>,
    surface: SurfaceQuery,
    feature_segments: Vec<(Point, Point)>,
    low: f64,
    high: f64,
}

pub fn isotropic_remesh(mesh: &TriangleMesh, options: &RemeshOptions) -> Result<TriangleMesh> {
    let target = options.target_edge_length;
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target edge length must be positive, got {target}"
        )));
    }
    if mesh.is_empty() {
        return Err(Error::InvalidArgument("cannot remesh a mesh without faces".into()));
    }
    let edges = EdgeMap::new(mesh);
    edges.check_manifold()?;

    let mut r = Remesher::new(mesh, &edges, options);
    for _ in 0..options.iterations {
        r.split_long_edges();
        r.collapse_short_edges();
        r.flip_edges();
        r.relax(options.relaxation);
    }
    Ok(r.finish())
}

fn cross(a: &Point, b: &Point, c: &Point) -> Point {
    (b - a).cross(&(c - a))
}

impl Remesher {
    fn new(mesh: &TriangleMesh, edges: &EdgeMap, options: &RemeshOptions) -> Self {
        let cos_limit = options.feature_angle_degrees.to_radians().cos();
        let mut features = HashSet::new();
        for (&(a, b), fs) in edges.iter() {
            let sharp = match fs.as_slice() {
                [_] => true,
                [f, g] => mesh.face_normal(*f).dot(&mesh.face_normal(*g)) < cos_limit,
                _ => unreachable!("manifold checked"),
            };
            if sharp {
                features.insert((a, b));
            }
        }
        let mut along: Vec<Vec<usize>> = vec![Vec::new(); mesh.num_vertices()];
        for &(a, b) in &features {
            along[a].push(b);
            along[b].push(a);
        }
        let vs = mesh.vertices();
        let class = along
            .iter()
            .enumerate()
            .map(|(v, nb)| match nb.as_slice() {
                [] => VertexClass::Smooth,
                [p, q] => {
                    // a feature curve that turns sharply is pinned like a corner
                    let d1 = (vs[v] - vs[*p]).normalize();
                    let d2 = (vs[*q] - vs[v]).normalize();
                    if d1.dot(&d2) < cos_limit {
                        VertexClass::Corner
                    } else {
                        VertexClass::Crease
                    }
                }
                _ => VertexClass::Corner,
            })
            .collect();
        let mut feature_segments: Vec<_> = features
            .iter()
            .map(|&(a, b)| (mesh.vertices()[a], mesh.vertices()[b]))
            .collect();
        feature_segments.sort_by(|x, y| {
            x.0.iter()
                .chain(x.1.iter())
                .zip(y.0.iter().chain(y.1.iter()))
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let target = options.target_edge_length;
        Self {
            pos: mesh.vertices().to_vec(),
            class,
            faces: mesh.faces().to_vec(),
            alive: vec![true; mesh.num_faces()],
            features,
            surface: SurfaceQuery::new(mesh.clone()),
            feature_segments,
            low: 0.8 * target,
            high: 4.0 / 3.0 * target,
        }
    }

    fn live_faces(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        self.faces
            .iter()
            .enumerate()
            .filter(|(i, _)| self.alive[*i])
            .map(|(i, f)| (i, *f))
    }

    fn edge_map(&self) -> EdgeMap {
        EdgeMap::from_faces(self.live_faces())
    }

    fn sorted_edges(&self, edges: &EdgeMap) -> Vec<((usize, usize), f64)> {
        let mut out: Vec<_> = edges
            .iter()
            .map(|(&(a, b), _)| ((a, b), (self.pos[a] - self.pos[b]).norm()))
            .collect();
        out.sort_by_key(|x| x.0);
        out
    }

    fn neighbors(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut nbrs = vec![Vec::new(); self.pos.len()];
        let mut vf = vec![Vec::new(); self.pos.len()];
        for (fi, f) in self.live_faces() {
            for k in 0..3 {
                nbrs[f[k]].push(f[(k + 1) % 3]);
                nbrs[f[(k + 1) % 3]].push(f[k]);
                vf[f[k]].push(fi);
            }
        }
        for n in &mut nbrs {
            n.sort_unstable();
            n.dedup();
        }
        (nbrs, vf)
    }

    fn project_to_surface(&self, p: &Point) -> Point {
        self.surface
            .closest_point(p)
            .map_or(*p, |(sp, _)| sp.position)
    }

    fn project_to_features(&self, p: &Point) -> Point {
        let mut best = (f64::INFINITY, *p);
        for (a, b) in &self.feature_segments {
            let ab = b - a;
            let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = (q - p).norm_squared();
            if d < best.0 {
                best = (d, q);
            }
        }
        best.1
    }

    fn split_long_edges(&mut self) {
        for _ in 0..64 {
            let edges = self.edge_map();
            let mut long: Vec<_> = self
                .sorted_edges(&edges)
                .into_iter()
                .filter(|(_, l)| *l > self.high)
                .collect();
            if long.is_empty() {
                return;
            }
            long.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let mut touched = vec![false; self.faces.len()];
            for ((a, b), _) in long {
                let incident = edges.faces_of(a, b).to_vec();
                if incident.iter().any(|&f| touched[f]) {
                    continue;
                }
                let is_feature = self.features.contains(&(a, b));
                let mid = (self.pos[a] + self.pos[b]) * 0.5;
                let m = self.pos.len();
                if is_feature {
                    self.pos.push(self.project_to_features(&mid));
                    self.class.push(VertexClass::Crease);
                    self.features.remove(&(a, b));
                    self.features.insert(key(a, m));
                    self.features.insert(key(m, b));
                } else {
                    self.pos.push(self.project_to_surface(&mid));
                    self.class.push(VertexClass::Smooth);
                }
                for f in incident {
                    let face = self.faces[f];
                    let k = (0..3)
                        .find(|&k| key(face[k], face[(k + 1) % 3]) == (a, b))
                        .expect("edge in face");
                    let (x, y, z) = (face[k], face[(k + 1) % 3], face[(k + 2) % 3]);
                    self.faces[f] = [x, m, z];
                    self.faces.push([m, y, z]);
                    self.alive.push(true);
                    touched[f] = true;
                }
            }
        }
    }

    fn collapse_short_edges(&mut self) {
        for _ in 0..32 {
            let edges = self.edge_map();
            let (nbrs, vf) = self.neighbors();
            let mut short: Vec<_> = self
                .sorted_edges(&edges)
                .into_iter()
                .filter(|(_, l)| *l < self.low)
                .collect();
            if short.is_empty() {
                return;
            }
            short.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            let mut locked = vec![false; self.pos.len()];
            let mut live = self.alive.iter().filter(|&&a| a).count();
            let mut collapsed = 0;
            for ((a, b), _) in short {
                if locked[a] || locked[b] || live <= 4 {
                    continue;
                }
                let Some((keep, gone, p)) = self.collapse_target(a, b) else {
                    continue;
                };
                if !self.collapse_ok(keep, gone, &p, &edges, &nbrs, &vf) {
                    continue;
                }
                for &f in &vf[gone] {
                    let face = &mut self.faces[f];
                    if face.contains(&keep) {
                        self.alive[f] = false;
                        live -= 1;
                    } else {
                        for v in face.iter_mut() {
                            if *v == gone {
                                *v = keep;
                            }
                        }
                    }
                }
                self.pos[keep] = p;
                self.features.remove(&key(keep, gone));
                for &x in &nbrs[gone] {
                    if self.features.remove(&key(gone, x)) {
                        self.features.insert(key(keep, x));
                    }
                }
                for &v in nbrs[a].iter().chain(&nbrs[b]) {
                    locked[v] = true;
                }
                locked[a] = true;
                locked[b] = true;
                collapsed += 1;
            }
            if collapsed == 0 {
                return;
            }
        }
    }

    /// Which endpoint survives and where it goes; `None` if the collapse would
    /// destroy a feature.
    fn collapse_target(&self, a: usize, b: usize) -> Option<(usize, usize, Point)> {
        use VertexClass::*;
        let (ca, cb) = (self.class[a], self.class[b]);
        if self.features.contains(&key(a, b)) {
            match (ca, cb) {
                (Corner, Corner) => None,
                (Corner, _) => Some((a, b, self.pos[a])),
                (_, Corner) => Some((b, a, self.pos[b])),
                _ => {
                    let mid = (self.pos[a] + self.pos[b]) * 0.5;
                    Some((a, b, self.project_to_features(&mid)))
                }
            }
        } else {
            match (ca, cb) {
                (Smooth, Smooth) => {
                    let mid = (self.pos[a] + self.pos[b]) * 0.5;
                    Some((a, b, self.project_to_surface(&mid)))
                }
                (_, Smooth) => Some((a, b, self.pos[a])),
                (Smooth, _) => Some((b, a, self.pos[b])),
                _ => None,
            }
        }
    }

    fn collapse_ok(
        &self,
        keep: usize,
        gone: usize,
        p: &Point,
        edges: &EdgeMap,
        nbrs: &[Vec<usize>],
        vf: &[Vec<usize>],
    ) -> bool {
        // link condition: shared neighbours are exactly the opposite vertices
        let edge_faces = edges.faces_of(keep, gone);
        let opposite: Vec<usize> = edge_faces
            .iter()
            .map(|&f| {
                *self.faces[f]
                    .iter()
                    .find(|&&v| v != keep && v != gone)
                    .expect("triangle")
            })
            .collect();
        let common = nbrs[keep]
            .iter()
            .filter(|v| nbrs[gone].binary_search(v).is_ok())
            .count();
        if common != opposite.len() {
            return false;
        }
        if opposite.iter().any(|&c| nbrs[c].len() <= 3) {
            return false;
        }
        // no new long edges
        for &u in nbrs[keep].iter().chain(&nbrs[gone]) {
            if u != keep && u != gone && (p - self.pos[u]).norm() > self.high {
                return false;
            }
        }
        // no flipped or degenerate faces
        for &f in vf[keep].iter().chain(&vf[gone]) {
            let face = self.faces[f];
            if face.contains(&keep) && face.contains(&gone) {
                continue;
            }
            let old = cross(&self.pos[face[0]], &self.pos[face[1]], &self.pos[face[2]]);
            let moved: Vec<Point> = face
                .iter()
                .map(|&v| if v == keep || v == gone { *p } else { self.pos[v] })
                .collect();
            let new = cross(&moved[0], &moved[1], &moved[2]);
            if 0.5 * new.norm() < MIN_AREA {
                return false;
            }
            if old.norm() > 0.0 && new.normalize().dot(&old.normalize()) < 0.2 {
                return false;
            }
        }
        true
    }

    fn flip_edges(&mut self) {
        let edges = self.edge_map();
        let (nbrs, _) = self.neighbors();
        let mut valence: Vec<i64> = nbrs.iter().map(|n| n.len() as i64).collect();
        let mut on_boundary = vec![false; self.pos.len()];
        let mut edge_set: HashSet<(usize, usize)> = HashSet::new();
        for (&(a, b), fs) in edges.iter() {
            edge_set.insert((a, b));
            if fs.len() == 1 {
                on_boundary[a] = true;
                on_boundary[b] = true;
            }
        }
        let target = |v: usize| if on_boundary[v] { 4 } else { 6 };
        let mut touched = vec![false; self.faces.len()];
        for ((a, b), _) in self.sorted_edges(&edges) {
            let fs = edges.faces_of(a, b);
            if fs.len() != 2 || self.features.contains(&(a, b)) {
                continue;
            }
            let (f1, f2) = (fs[0], fs[1]);
            if touched[f1] || touched[f2] {
                continue;
            }
            let dir = |f: usize, x: usize, y: usize| {
                let t = self.faces[f];
                (0..3).any(|k| t[k] == x && t[(k + 1) % 3] == y)
            };
            // orient so that f1 contains a->b
            let (a, b) = if dir(f1, a, b) { (a, b) } else { (b, a) };
            if !dir(f2, b, a) {
                continue; // inconsistent orientation
            }
            let c = *self.faces[f1].iter().find(|&&v| v != a && v != b).unwrap();
            let d = *self.faces[f2].iter().find(|&&v| v != a && v != b).unwrap();
            if c == d || edge_set.contains(&key(c, d)) {
                continue;
            }
            let dev = |v: usize, delta: i64| (valence[v] + delta - target(v)).pow(2);
            let before = dev(a, 0) + dev(b, 0) + dev(c, 0) + dev(d, 0);
            let after = dev(a, -1) + dev(b, -1) + dev(c, 1) + dev(d, 1);
            if after >= before || valence[a] <= 3 || valence[b] <= 3 {
                continue;
            }
            let (pa, pb, pc, pd) = (self.pos[a], self.pos[b], self.pos[c], self.pos[d]);
            let n_old = cross(&pa, &pb, &pc).normalize() + cross(&pb, &pa, &pd).normalize();
            let Some(n_old) = n_old.try_normalize(1e-12) else {
                continue;
            };
            let n1 = cross(&pa, &pd, &pc);
            let n2 = cross(&pd, &pb, &pc);
            if 0.5 * n1.norm() < MIN_AREA || 0.5 * n2.norm() < MIN_AREA {
                continue;
            }
            if n1.normalize().dot(&n_old) < 0.5 || n2.normalize().dot(&n_old) < 0.5 {
                continue;
            }
            self.faces[f1] = [a, d, c];
            self.faces[f2] = [d, b, c];
            touched[f1] = true;
            touched[f2] = true;
            edge_set.remove(&key(a, b));
            edge_set.insert(key(c, d));
            valence[a] -= 1;
            valence[b] -= 1;
            valence[c] += 1;
            valence[d] += 1;
        }
    }

    fn relax(&mut self, lambda: f64) {
        let (nbrs, vf) = self.neighbors();
        let mut normals = vec![Point::zeros(); self.pos.len()];
        for (_, f) in self.live_faces() {
            let n = cross(&self.pos[f[0]], &self.pos[f[1]], &self.pos[f[2]]);
            for &v in &f {
                normals[v] += n;
            }
        }
        let mut next = self.pos.clone();
        for v in 0..self.pos.len() {
            if nbrs[v].is_empty() {
                continue;
            }
            let p = self.pos[v];
            let candidate = match self.class[v] {
                VertexClass::Corner => continue,
                VertexClass::Crease => {
                    let along: Vec<usize> = nbrs[v]
                        .iter()
                        .copied()
                        .filter(|&u| self.features.contains(&key(u, v)))
                        .collect();
                    if along.len() != 2 {
                        continue;
                    }
                    let q = (self.pos[along[0]] + self.pos[along[1]]) * 0.5;
                    self.project_to_features(&(p + (q - p) * lambda))
                }
                VertexClass::Smooth => {
                    let q = nbrs[v].iter().map(|&u| self.pos[u]).sum::<Point>()
                        / nbrs[v].len() as f64;
                    let mut d = q - p;
                    if let Some(n) = normals[v].try_normalize(1e-300) {
                        d -= n * d.dot(&n);
                    }
                    self.project_to_surface(&(p + d * lambda))
                }
            };
            // keep the move only if no incident face folds or degenerates
            let ok = vf[v].iter().all(|&f| {
                let face = self.faces[f];
                let pts: Vec<Point> = face
                    .iter()
                    .map(|&u| if u == v { candidate } else { self.pos[u] })
                    .collect();
                let old = cross(&self.pos[face[0]], &self.pos[face[1]], &self.pos[face[2]]);
                let new = cross(&pts[0], &pts[1], &pts[2]);
                0.5 * new.norm() >= MIN_AREA
                    && (old.norm() == 0.0 || new.normalize().dot(&old.normalize()) > 0.2)
            });
            if ok {
                next[v] = candidate;
            }
        }
        self.pos = next;
    }

    fn finish(self) -> TriangleMesh {
        let faces: Vec<[usize; 3]> = self.live_faces().map(|(_, f)| f).collect();
        let mut remap = vec![usize::MAX; self.pos.len()];
        let mut used: Vec<usize> = faces.iter().flatten().copied().collect();
        used.sort_unstable();
        used.dedup();
        let vertices: Vec<Point> = used
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                remap[v] = i;
                self.pos[v]
            })
            .collect();
        let faces = faces.into_iter().map(|f| f.map(|v| remap[v])).collect();
        TriangleMesh::from_parts_unchecked(vertices, faces)
    }
}
