//! Particle-based correspondence optimization over multi-domain shapes.
//!
//! Every subject in a cohort carries the same list of domains (surfaces and
//! closed contours). Each domain holds a fixed number of particles; particle
//! `i` of domain `j` is the same anatomical location on every subject.
//!
//! The optimizer minimizes
//!
//! ```text
//! Q = w * H(Z) + sum over shapes, domains of (1/M_j) * sum_i log p(x_i)
//! ```
//!
//! where `H(Z)` is the Gaussian entropy of the cohort in shape space and
//! `p(x_i)` a Gaussian kernel density estimate at each particle. With contour
//! repulsion enabled, surface domains include the contour particles of the same
//! subject in their density estimates while the contour domain sees only its
//! own particles.

mod correspondence;
mod optimize;
mod sampling;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{closest_point_on_contour, Contour, ContourPoint, Point, SurfacePoint, SurfaceQuery};

pub use correspondence::{
    correspondence_eigenvalues, correspondence_entropy, correspondence_gradient, gram_matrix,
};
pub use optimize::{
    optimize, Checkpoint, LogRow, OptimizationParams, OptimizationReport, Progress, Regularization,
};
pub use sampling::{
    domain_log_densities, domain_sampling_energy, domain_sampling_gradient, estimate_sigma,
    kernel_density, log_kernel_density,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Surface,
    Contour,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    name: String,
    kind: DomainKind,
    particle_count: usize,
}

impl DomainSpec {
    /// `particle_count` must be a power of two so the splitting ladder reaches it exactly.
    pub fn new(name: impl Into<String>, kind: DomainKind, particle_count: usize) -> Result<Self> {
        let name = name.into();
        if particle_count == 0 || !particle_count.is_power_of_two() {
            return Err(Error::Config(format!(
                "particle count for domain '{name}' must be a power of two, got {particle_count}"
            )));
        }
        Ok(Self {
            name,
            kind,
            particle_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn particle_count(&self) -> usize {
        self.particle_count
    }
}

/// A closed polyline with precomputed arc-length offsets. Contour particles
/// live on it with a single degree of freedom: the arc-length coordinate.
#[derive(Debug, Clone)]
pub struct ContourDomain {
    contour: Contour,
    offsets: Vec<f64>,
    perimeter: f64,
}

impl ContourDomain {
    pub fn new(contour: Contour) -> Result<Self> {
        if !contour.is_closed() || contour.len() < 3 {
            return Err(Error::InvalidArgument(
                "contour domains need a closed contour with at least 3 points".into(),
            ));
        }
        let offsets = contour.arc_offsets();
        let perimeter = contour.perimeter();
        Ok(Self {
            contour,
            offsets,
            perimeter,
        })
    }

    pub fn contour(&self) -> &Contour {
        &self.contour
    }

    pub fn perimeter(&self) -> f64 {
        self.perimeter
    }

    pub fn position(&self, cp: &ContourPoint) -> Point {
        self.contour.point_at(cp.segment, cp.t)
    }

    /// Arc-length coordinate in `[0, perimeter)`.
    pub fn arc(&self, cp: &ContourPoint) -> f64 {
        let u = self.offsets[cp.segment] + cp.t * self.contour.segment_length(cp.segment);
        if u >= self.perimeter {
            u - self.perimeter
        } else {
            u
        }
    }

    /// Location at arc-length coordinate `u`, wrapping around the loop.
    pub fn at_arc(&self, u: f64) -> ContourPoint {
        let u = u.rem_euclid(self.perimeter);
        let seg = match self.offsets.binary_search_by(|o| o.total_cmp(&u)) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let len = self.contour.segment_length(seg);
        ContourPoint {
            segment: seg,
            t: ((u - self.offsets[seg]) / len).clamp(0.0, 1.0),
        }
    }

    pub fn tangent(&self, cp: &ContourPoint) -> Point {
        self.contour.tangent(cp.segment)
    }
}

/// Geometry of one domain of one subject. Cheap to clone.
#[derive(Debug, Clone)]
pub enum DomainGeometry {
    Surface(Arc<SurfaceQuery>),
    Contour(Arc<ContourDomain>),
}

impl DomainGeometry {
    pub fn surface(query: SurfaceQuery) -> Self {
        DomainGeometry::Surface(Arc::new(query))
    }

    pub fn contour(contour: Contour) -> Result<Self> {
        Ok(DomainGeometry::Contour(Arc::new(ContourDomain::new(contour)?)))
    }

    pub fn kind(&self) -> DomainKind {
        match self {
            DomainGeometry::Surface(_) => DomainKind::Surface,
            DomainGeometry::Contour(_) => DomainKind::Contour,
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            DomainGeometry::Surface(q) => q.mesh().diameter(),
            DomainGeometry::Contour(c) => c.contour().diameter(),
        }
    }

    pub fn centroid(&self) -> Point {
        match self {
            DomainGeometry::Surface(q) => q.mesh().area_centroid(),
            DomainGeometry::Contour(c) => c.contour().centroid(),
        }
    }

    /// Closest particle location on the domain.
    pub fn project(&self, p: &Point) -> Particle {
        match self {
            DomainGeometry::Surface(q) => {
                let (sp, _) = q.closest_point(p).expect("surface domain has faces");
                Particle::Surface(sp)
            }
            DomainGeometry::Contour(c) => {
                let (cp, _) = closest_point_on_contour(c.contour(), p).expect("contour has segments");
                Particle::on_contour(c, cp)
            }
        }
    }

    /// Projects `v` onto the tangent space at `particle`: the particle's face
    /// plane for surfaces, the segment direction for contours.
    pub fn tangent_component(&self, particle: &Particle, v: &Point) -> Point {
        match (self, particle) {
            (DomainGeometry::Surface(q), Particle::Surface(sp)) => {
                // the face plane, not the interpolated normal: retraction lands
                // on flat faces, so only this projection is a descent direction
                let n = q.mesh().face_normal(sp.face);
                v - n * n.dot(v)
            }
            (DomainGeometry::Contour(c), Particle::Contour { location, .. }) => {
                let t = c.tangent(location);
                t * t.dot(v)
            }
            _ => panic!("particle kind does not match domain kind"),
        }
    }

    /// Distance between the particle's stored position and the geometry it is
    /// anchored to.
    pub fn anchor_error(&self, particle: &Particle) -> f64 {
        match (self, particle) {
            (DomainGeometry::Surface(q), Particle::Surface(sp)) => {
                let b = sp.barycentric;
                let bary_ok = b.iter().all(|&x| (-1e-9..=1.0 + 1e-9).contains(&x))
                    && (b.sum() - 1.0).abs() < 1e-9;
                if !bary_ok || sp.face >= q.mesh().num_faces() {
                    return f64::INFINITY;
                }
                sp.reconstruction_error(q.mesh())
            }
            (DomainGeometry::Contour(c), Particle::Contour { location, position }) => {
                if location.segment >= c.contour().num_segments() || !(0.0..=1.0).contains(&location.t) {
                    return f64::INFINITY;
                }
                (c.position(location) - position).norm()
            }
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Particle {
    Surface(SurfacePoint),
    Contour { location: ContourPoint, position: Point },
}

impl Particle {
    pub fn on_contour(domain: &ContourDomain, location: ContourPoint) -> Self {
        Particle::Contour {
            location,
            position: domain.position(&location),
        }
    }

    pub fn position(&self) -> Point {
        match self {
            Particle::Surface(sp) => sp.position,
            Particle::Contour { position, .. } => *position,
        }
    }
}

/// One subject: its domain geometries and the particles on each of them.
#[derive(Debug, Clone)]
pub struct MultiDomainShape {
    pub id: String,
    geometry: Vec<DomainGeometry>,
    particles: Vec<Vec<Particle>>,
}

impl MultiDomainShape {
    pub fn new(id: impl Into<String>, geometry: Vec<DomainGeometry>) -> Self {
        let particles = vec![Vec::new(); geometry.len()];
        Self {
            id: id.into(),
            geometry,
            particles,
        }
    }

    pub fn geometry(&self) -> &[DomainGeometry] {
        &self.geometry
    }

    pub fn particles(&self, domain: usize) -> &[Particle] {
        &self.particles[domain]
    }

    pub fn positions(&self, domain: usize) -> Vec<Point> {
        self.particles[domain].iter().map(Particle::position).collect()
    }

    /// Largest anchor error over all particles.
    pub fn max_anchor_error(&self) -> f64 {
        self.geometry
            .iter()
            .zip(&self.particles)
            .flat_map(|(g, ps)| ps.iter().map(move |p| g.anchor_error(p)))
            .fold(0.0, f64::max)
    }
}

/// Which particles enter a domain's density estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Every domain is sampled on its own.
    Independent,
    /// Surface domains are also repelled by the subject's contour particles.
    #[default]
    ContourRepulsion,
}

/// A cohort of subjects sharing one list of domain specs.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    specs: Vec<DomainSpec>,
    shapes: Vec<MultiDomainShape>,
    sigma: Vec<Vec<Vec<f64>>>,
    pub relative_weighting: f64,
    pub coupling: Coupling,
    /// Neighbour rank used for bandwidth estimation. Ranks above 1 give kernels
    /// wide enough that the sampling term stops resolving local spacing.
    pub kernel_neighbors: usize,
}

impl ParticleSystem {
    pub fn new(specs: Vec<DomainSpec>, shapes: Vec<MultiDomainShape>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("no domains".into()));
        }
        if shapes.is_empty() {
            return Err(Error::InvalidArgument("empty cohort".into()));
        }
        for shape in &shapes {
            if shape.geometry.len() != specs.len() {
                return Err(Error::InvalidArgument(format!(
                    "shape '{}' has {} domains, expected {}",
                    shape.id,
                    shape.geometry.len(),
                    specs.len()
                )));
            }
            for (j, (g, s)) in shape.geometry.iter().zip(&specs).enumerate() {
                if g.kind() != s.kind() {
                    return Err(Error::InvalidArgument(format!(
                        "shape '{}' domain {j} ('{}') is a {:?}, expected {:?}",
                        shape.id,
                        s.name(),
                        g.kind(),
                        s.kind()
                    )));
                }
                if let DomainGeometry::Surface(q) = g {
                    if q.mesh().is_empty() {
                        return Err(Error::InvalidArgument(format!(
                            "shape '{}' domain '{}' has no faces",
                            shape.id,
                            s.name()
                        )));
                    }
                }
            }
        }
        let sigma = vec![vec![Vec::new(); specs.len()]; shapes.len()];
        Ok(Self {
            specs,
            shapes,
            sigma,
            relative_weighting: 1.0,
            coupling: Coupling::default(),
            kernel_neighbors: 1,
        })
    }

    pub fn specs(&self) -> &[DomainSpec] {
        &self.specs
    }

    pub fn shapes(&self) -> &[MultiDomainShape] {
        &self.shapes
    }

    pub fn num_shapes(&self) -> usize {
        self.shapes.len()
    }

    pub fn num_domains(&self) -> usize {
        self.specs.len()
    }

    /// Current particle count of a domain (identical across shapes).
    pub fn count(&self, domain: usize) -> usize {
        self.shapes[0].particles[domain].len()
    }

    pub fn total_particles(&self) -> usize {
        (0..self.num_domains()).map(|j| self.count(j)).sum()
    }

    pub fn sigma(&self, shape: usize, domain: usize) -> &[f64] {
        &self.sigma[shape][domain]
    }

    pub fn at_target(&self) -> bool {
        (0..self.num_domains()).all(|j| self.count(j) >= self.specs[j].particle_count)
    }

    /// Replaces all particles. The layout must be `[shape][domain][particle]`,
    /// with equal counts across shapes and every particle anchored to its domain.
    pub fn set_particles(&mut self, particles: Vec<Vec<Vec<Particle>>>) -> Result<()> {
        if particles.len() != self.shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "particles given for {} shapes, cohort has {}",
                particles.len(),
                self.shapes.len()
            )));
        }
        for (n, (shape, ps)) in self.shapes.iter().zip(&particles).enumerate() {
            if ps.len() != self.specs.len() {
                return Err(Error::InvalidArgument(format!("shape {n}: wrong domain count")));
            }
            for (j, (g, dp)) in shape.geometry.iter().zip(ps).enumerate() {
                if dp.len() != particles[0][j].len() {
                    return Err(Error::InvalidArgument(format!(
                        "shape {n} domain {j}: particle count differs from shape 0"
                    )));
                }
                if let Some(i) = dp.iter().position(|p| !(g.anchor_error(p) < 1e-9)) {
                    return Err(Error::InvalidArgument(format!(
                        "shape {n} domain {j} particle {i} is not on its domain"
                    )));
                }
            }
        }
        for (shape, ps) in self.shapes.iter_mut().zip(particles) {
            shape.particles = ps;
        }
        self.update_sigma();
        Ok(())
    }

    pub fn particles(&self) -> Vec<Vec<Vec<Particle>>> {
        self.shapes.iter().map(|s| s.particles.clone()).collect()
    }

    /// Positions of particles that act as extra kernel sources for `domain`.
    pub(crate) fn extra_sources(&self, shape: usize, domain: usize) -> Vec<Point> {
        if self.coupling == Coupling::Independent || self.specs[domain].kind() != DomainKind::Surface {
            return Vec::new();
        }
        let s = &self.shapes[shape];
        (0..self.num_domains())
            .filter(|&k| self.specs[k].kind() == DomainKind::Contour)
            .flat_map(|k| s.particles[k].iter().map(Particle::position))
            .collect()
    }

    /// Re-estimates every particle's kernel bandwidth.
    pub fn update_sigma(&mut self) {
        let k = self.kernel_neighbors;
        let sigma: Vec<Vec<Vec<f64>>> = (0..self.num_shapes())
            .map(|n| {
                (0..self.num_domains())
                    .map(|j| {
                        let own = self.shapes[n].positions(j);
                        let extra = self.extra_sources(n, j);
                        let diameter = self.shapes[n].geometry[j].diameter();
                        (0..own.len())
                            .map(|i| estimate_sigma(&own, &extra, i, k, diameter))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        self.sigma = sigma;
    }

    /// Kernel density at particle `i` of `domain` on `shape`, with the current bandwidth.
    pub fn kernel_density(&self, shape: usize, domain: usize, i: usize) -> f64 {
        let own = self.shapes[shape].positions(domain);
        let extra = self.extra_sources(shape, domain);
        kernel_density(&own, &extra, i, self.sigma[shape][domain][i])
    }

    /// Sampling energy `(1/M) sum_i log p(x_i)` of one domain of one shape.
    pub fn domain_energy(&self, shape: usize, domain: usize) -> f64 {
        let own = self.shapes[shape].positions(domain);
        let extra = self.extra_sources(shape, domain);
        domain_sampling_energy(&own, &extra, &self.sigma[shape][domain])
    }

    /// Sampling entropy of one shape, summed over its domains (nats).
    pub fn sampling_entropy(&self, shape: usize) -> f64 {
        -(0..self.num_domains())
            .map(|j| self.domain_energy(shape, j))
            .sum::<f64>()
    }

    /// Unprojected gradient of the domain's sampling energy with respect to
    /// each of its particle positions.
    pub fn raw_sampling_gradient(&self, shape: usize, domain: usize) -> Vec<Point> {
        let own = self.shapes[shape].positions(domain);
        let extra = self.extra_sources(shape, domain);
        domain_sampling_gradient(&own, &extra, &self.sigma[shape][domain])
    }

    /// Sampling force on one particle: the negative gradient, projected onto
    /// the domain's tangent space.
    pub fn sampling_gradient(&self, shape: usize, domain: usize, i: usize) -> Point {
        let g = self.raw_sampling_gradient(shape, domain)[i];
        let s = &self.shapes[shape];
        s.geometry[domain].tangent_component(&s.particles[domain][i], &(-g))
    }

    /// Column offset of the first coordinate of `domain` in a shape-matrix row.
    pub fn column_offset(&self, domain: usize) -> usize {
        3 * (0..domain).map(|k| self.count(k)).sum::<usize>()
    }

    pub fn shape_matrix(&self) -> ShapeMatrix {
        let cols = 3 * self.total_particles();
        let mut m = DMatrix::zeros(self.num_shapes(), cols);
        for (n, s) in self.shapes.iter().enumerate() {
            let mut c = 0;
            for ps in &s.particles {
                for p in ps {
                    let x = p.position();
                    m[(n, c)] = x.x;
                    m[(n, c + 1)] = x.y;
                    m[(n, c + 2)] = x.z;
                    c += 3;
                }
            }
        }
        ShapeMatrix(m)
    }

    /// Force on one particle from the full objective: the negative gradient of
    /// `w * H(Z)` plus the sampling term, projected onto the tangent space.
    /// For a single-shape cohort the correspondence term is zero.
    pub fn combined_gradient(&self, shape: usize, domain: usize, i: usize, alpha: f64) -> Result<Point> {
        let mut g = self.raw_sampling_gradient(shape, domain)[i];
        if self.num_shapes() > 1 && self.relative_weighting != 0.0 {
            let cg = correspondence_gradient(self.shape_matrix().matrix(), alpha)?;
            let c = self.column_offset(domain) + 3 * i;
            g += Point::new(cg[(shape, c)], cg[(shape, c + 1)], cg[(shape, c + 2)]) * self.relative_weighting;
        }
        let s = &self.shapes[shape];
        Ok(s.geometry[domain].tangent_component(&s.particles[domain][i], &(-g)))
    }

    /// Places one particle per domain on every shape, at the domain point
    /// closest to the domain centroid. The seed picks a global direction
    /// along which the centroid is nudged by 5% of the domain diameter, so that
    /// symmetric domains resolve the same way on every subject.
    pub fn initialize_particles(&mut self, seed: u64) {
        let g = optimize::seeded_direction(seed, u64::MAX, 0);
        for shape in &mut self.shapes {
            for (j, geom) in shape.geometry.iter().enumerate() {
                let q = geom.centroid() + g * (0.05 * geom.diameter());
                shape.particles[j] = vec![geom.project(&q)];
            }
        }
        self.update_sigma();
    }

    /// Doubles every domain that is below its target count. Particle `i`
    /// becomes `2i` (unchanged) and `2i + 1`, offset by `epsilon` along a
    /// seeded direction shared by all shapes.
    pub fn split_particles(&mut self, epsilon: f64, seed: u64) {
        optimize::split_with(self, seed, |_| true, |_, _, _| epsilon);
    }

    pub(crate) fn shapes_mut(&mut self) -> &mut [MultiDomainShape] {
        &mut self.shapes
    }
}

impl MultiDomainShape {
    pub(crate) fn particles_mut(&mut self) -> &mut Vec<Vec<Particle>> {
        &mut self.particles
    }
}

/// `N x 3P` matrix of flattened particle positions, one row per shape,
/// ordered domain-major, particle-minor, then x, y, z.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMatrix(DMatrix<f64>);

impl ShapeMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.ncols() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "shape matrix has {} columns, not a multiple of 3",
                matrix.ncols()
            )));
        }
        Ok(Self(matrix))
    }

    pub fn from_rows(rows: &[Vec<Point>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidArgument("rows have different particle counts".into()));
        }
        Ok(Self(DMatrix::from_fn(n, 3 * p, |r, c| rows[r][c / 3][c % 3])))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn num_shapes(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_particles(&self) -> usize {
        self.0.ncols() / 3
    }

    /// Row `n` as a list of particle positions.
    pub fn points(&self, n: usize) -> Vec<Point> {
        (0..self.num_particles())
            .map(|i| Point::new(self.0[(n, 3 * i)], self.0[(n, 3 * i + 1)], self.0[(n, 3 * i + 2)]))
            .collect()
    }
}

#[cfg(test)]
mod tests;
