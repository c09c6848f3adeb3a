use std::ops::ControlFlow;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    correspondence_entropy, correspondence_gradient, domain_log_densities, gram_matrix, DomainGeometry,
    DomainKind, Particle, ParticleSystem,
};
use crate::error::{Error, Result};
use crate::mesh::Point;

/// Regularization `alpha` added to the shape-space Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularization {
    /// `max(fraction * trace(G) / N * decay^level, floor)`, re-evaluated every iteration.
    Adaptive { fraction: f64, decay: f64, floor: f64 },
    Fixed(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Adaptive {
            fraction: 1e-2,
            decay: 0.5,
            floor: 1e-6,
        }
    }
}

impl Regularization {
    pub fn alpha(&self, z: &DMatrix<f64>, level: usize) -> f64 {
        match *self {
            Regularization::Fixed(a) => a,
            Regularization::Adaptive { fraction, decay, floor } => {
                if z.nrows() < 2 {
                    return floor;
                }
                let (g, _) = gram_matrix(z);
                let base = fraction * g.trace() / z.nrows() as f64;
                (base * decay.powi(level as i32)).max(floor)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationParams {
    pub regularization: Regularization,
    /// Iteration cap per splitting level.
    pub max_iterations: usize,
    /// A level stops once every domain's mean particle displacement in an
    /// iteration is below this (mm). Defaults to
    /// `1e-4` times the mean domain diameter.
    pub tolerance: Option<f64>,
    pub seed: u64,
    /// Split offset of surface particles as a fraction of their bandwidth.
    /// Contour copies always go to the middle of the forward arc gap.
    pub split_fraction: f64,
    /// Largest single move as a fraction of the particle's bandwidth.
    pub max_step_fraction: f64,
    /// Step halvings tried before a block step is abandoned.
    pub max_halvings: usize,
}

impl Default for OptimizationParams {
    fn default() -> Self {
        Self {
            regularization: Regularization::default(),
            max_iterations: 100,
            tolerance: None,
            seed: 0,
            split_fraction: 0.2,
            max_step_fraction: 0.5,
            max_halvings: 10,
        }
    }
}

/// One block update: all particles of one domain, across every shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub level: usize,
    pub iteration: usize,
    pub domain: usize,
    pub energy_before: f64,
    pub energy: f64,
    pub mean_displacement: f64,
    pub accepted: bool,
}

/// Particle state after a completed splitting level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub level: usize,
    pub particles: Vec<Vec<Vec<Particle>>>,
}

pub enum Progress<'a> {
    Step(&'a LogRow),
    LevelDone(&'a Checkpoint),
}

#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub last_level: usize,
    pub final_energy: f64,
    pub final_alpha: f64,
    pub log: Vec<LogRow>,
    /// The observer asked to stop before the target counts were reached.
    pub stopped: bool,
}

/// Unit vectors for `count` particles from stream `stream` of `seed`.
pub(crate) fn seeded_directions(seed: u64, stream: u64, count: usize) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count)
        .map(|_| loop {
            let v = Point::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            let n2 = v.norm_squared();
            if n2 > 1e-6 && n2 <= 1.0 {
                break v / n2.sqrt();
            }
        })
        .collect()
}

pub(crate) fn seeded_direction(seed: u64, stream: u64, index: usize) -> Point {
    seeded_directions(seed, stream, index + 1)[index]
}

fn perpendicular(n: &Point) -> Point {
    let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Point::x()
    } else if n.y.abs() <= n.z.abs() {
        Point::y()
    } else {
        Point::z()
    };
    n.cross(&axis).normalize()
}

fn arcs(domain: &super::ContourDomain, ps: &[Particle]) -> Vec<f64> {
    ps.iter()
        .map(|p| match p {
            Particle::Contour { location, .. } => domain.arc(location),
            Particle::Surface(_) => unreachable!("surface particle in a contour domain"),
        })
        .collect()
}

/// Forward arc gap from particle `i` to the next one in index order.
fn forward_gap(u: &[f64], i: usize, perimeter: f64) -> f64 {
    if u.len() == 1 {
        return perimeter;
    }
    (u[(i + 1) % u.len()] - u[i]).rem_euclid(perimeter)
}

pub(crate) fn split_with(
    system: &mut ParticleSystem,
    seed: u64,
    include: impl Fn(usize) -> bool,
    epsilon: impl Fn(usize, usize, usize) -> f64,
) {
    for j in 0..system.num_domains() {
        let count = system.count(j);
        if count >= system.specs()[j].particle_count() || !include(j) {
            continue;
        }
        let level = count.trailing_zeros() as u64;
        let dirs = seeded_directions(seed, ((j as u64) << 32) | level, count);
        let eps: Vec<Vec<f64>> = (0..system.num_shapes())
            .map(|n| (0..count).map(|i| epsilon(n, j, i)).collect())
            .collect();
        for (n, shape) in system.shapes_mut().iter_mut().enumerate() {
            let geom = shape.geometry()[j].clone();
            let old = shape.particles(j).to_vec();
            let mut new = Vec::with_capacity(2 * count);
            match &geom {
                DomainGeometry::Surface(q) => {
                    for (i, p) in old.iter().enumerate() {
                        let Particle::Surface(sp) = p else { unreachable!() };
                        let normal = q.normal_at(sp);
                        let mut v = dirs[i] - normal * normal.dot(&dirs[i]);
                        v = if v.norm() > 0.1 { v.normalize() } else { perpendicular(&normal) };
                        new.push(*p);
                        new.push(geom.project(&(sp.position + v * eps[n][i])));
                    }
                }
                DomainGeometry::Contour(c) => {
                    let u = arcs(c, &old);
                    for (i, p) in old.iter().enumerate() {
                        let delta = eps[n][i].min(0.5 * forward_gap(&u, i, c.perimeter()));
                        new.push(*p);
                        new.push(Particle::on_contour(c, c.at_arc(u[i] + delta)));
                    }
                }
            }
            shape.particles_mut()[j] = new;
        }
    }
    system.update_sigma();
}

/// Moves every particle of block `j` on shape `n` by `steps[i] * dirs[i]`,
/// capped at `cap[i]`. Surface particles walk across faces, contour particles move
/// by arc length and never pass their neighbours.
fn propose(geom: &DomainGeometry, old: &[Particle], dirs: &[Point], steps: &[f64], cap: &[f64]) -> Vec<Particle> {
    let scaled = |i: usize| {
        let d = dirs[i] * steps[i];
        let len = d.norm();
        if len > cap[i] {
            d * (cap[i] / len)
        } else {
            d
        }
    };
    match geom {
        DomainGeometry::Surface(q) => old
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let Particle::Surface(sp) = p else { unreachable!("contour particle in a surface domain") };
                Particle::Surface(q.walk(sp, &scaled(i)))
            })
            .collect(),
        DomainGeometry::Contour(c) => {
            let u = arcs(c, old);
            let m = old.len();
            old.iter()
                .enumerate()
                .map(|(i, p)| {
                    let Particle::Contour { location, .. } = p else { unreachable!() };
                    let mut s = scaled(i).dot(&c.tangent(location));
                    let limit = if s >= 0.0 {
                        0.45 * forward_gap(&u, i, c.perimeter())
                    } else {
                        0.45 * forward_gap(&u, (i + m - 1) % m, c.perimeter())
                    };
                    s = s.clamp(-limit, limit);
                    Particle::on_contour(c, c.at_arc(u[i] + s))
                })
                .collect()
        }
    }
}

fn block_order(system: &ParticleSystem) -> Vec<usize> {
    let (mut contours, surfaces): (Vec<usize>, Vec<usize>) =
        (0..system.num_domains()).partition(|&j| system.specs()[j].kind() == DomainKind::Contour);
    contours.extend(surfaces);
    contours
}

fn log_densities(system: &ParticleSystem, j: usize) -> Vec<Vec<f64>> {
    (0..system.num_shapes())
        .into_par_iter()
        .map(|n| {
            let own = system.shapes()[n].positions(j);
            let extra = system.extra_sources(n, j);
            domain_log_densities(&own, &extra, system.sigma(n, j))
        })
        .collect()
}

fn correspondence_weight(system: &ParticleSystem) -> f64 {
    if system.num_shapes() > 1 {
        system.relative_weighting
    } else {
        0.0
    }
}

/// `w * H(Z) + sum_n mean_i log p` for block `j`.
fn block_energy(system: &ParticleSystem, j: usize, alpha: f64) -> Result<f64> {
    let w = correspondence_weight(system);
    let h = if w != 0.0 {
        correspondence_entropy(system.shape_matrix().matrix(), alpha)?
    } else {
        0.0
    };
    let lp = log_densities(system, j);
    let sampling: f64 = lp
        .iter()
        .map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
        .sum();
    Ok(w * h + sampling)
}

/// Total objective `Q` with the current bandwidths.
pub(crate) fn total_energy(system: &ParticleSystem, alpha: f64) -> Result<f64> {
    let w = correspondence_weight(system);
    let h = if w != 0.0 {
        correspondence_entropy(system.shape_matrix().matrix(), alpha)?
    } else {
        0.0
    };
    let sampling: f64 = (0..system.num_shapes())
        .map(|n| -system.sampling_entropy(n))
        .sum();
    Ok(w * h + sampling)
}

struct Level<'a> {
    params: &'a OptimizationParams,
    level: usize,
    // per shape, domain, particle
    steps: Vec<Vec<Vec<f64>>>,
    previous: Vec<Vec<Vec<Point>>>,
}

impl Level<'_> {
    fn block_step(&mut self, system: &mut ParticleSystem, iteration: usize, j: usize, alpha: f64) -> Result<LogRow> {
        let m = system.count(j);
        let n_shapes = system.num_shapes();
        let w = correspondence_weight(system);
        let energy_before = block_energy(system, j, alpha)?;
        let corr = if w != 0.0 {
            Some(correspondence_gradient(system.shape_matrix().matrix(), alpha)?)
        } else {
            None
        };
        let col0 = system.column_offset(j);

        let sys = &*system;
        let grads: Vec<Vec<Point>> = (0..n_shapes)
            .into_par_iter()
            .map(|n| {
                sys.raw_sampling_gradient(n, j)
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut g)| {
                        if let Some(c) = &corr {
                            let k = col0 + 3 * i;
                            g += Point::new(c[(n, k)], c[(n, k + 1)], c[(n, k + 2)]) * w;
                        }
                        if g.iter().all(|x| x.is_finite()) {
                            Ok(g)
                        } else {
                            Err(Error::Divergence {
                                shape: n,
                                domain: j,
                                particle: i,
                                message: "non-finite gradient".into(),
                            })
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;

        // A particle whose last move now points uphill overshot: halve its
        // step. Otherwise let it grow.
        for n in 0..n_shapes {
            for i in 0..m {
                let s = &mut self.steps[n][j][i];
                let prev = &self.previous[n][j][i];
                if *prev != Point::zeros() {
                    *s = if grads[n][i].dot(prev) > 0.0 { *s * 0.5 } else { *s * 1.05 };
                    *s = s.clamp(1e-4, 10.0);
                }
            }
        }

        let dirs: Vec<Vec<Point>> = (0..n_shapes)
            .map(|n| {
                let shape = &system.shapes()[n];
                let sigma = system.sigma(n, j);
                (0..m)
                    .map(|i| {
                        let t = shape.geometry()[j].tangent_component(&shape.particles(j)[i], &(-grads[n][i]));
                        t * (m as f64 * sigma[i] * sigma[i])
                    })
                    .collect()
            })
            .collect();
        let caps: Vec<Vec<f64>> = (0..n_shapes)
            .map(|n| system.sigma(n, j).iter().map(|s| s * self.params.max_step_fraction).collect())
            .collect();

        let old: Vec<Vec<Particle>> = (0..n_shapes).map(|n| system.shapes()[n].particles(j).to_vec()).collect();
        for _ in 0..=self.params.max_halvings {
            let steps = &self.steps;
            let sys = &*system;
            let proposal: Vec<Vec<Particle>> = (0..n_shapes)
                .into_par_iter()
                .map(|n| propose(&sys.shapes()[n].geometry()[j], &old[n], &dirs[n], &steps[n][j], &caps[n]))
                .collect();
            for (shape, p) in system.shapes_mut().iter_mut().zip(&proposal) {
                shape.particles_mut()[j] = p.clone();
            }
            let energy = block_energy(system, j, alpha)?;
            if energy <= energy_before {
                let mut total = 0.0;
                for n in 0..n_shapes {
                    for i in 0..m {
                        let d = proposal[n][i].position() - old[n][i].position();
                        total += d.norm();
                        self.previous[n][j][i] = d;
                    }
                }
                return Ok(LogRow {
                    level: self.level,
                    iteration,
                    domain: j,
                    energy_before,
                    energy,
                    mean_displacement: total / (n_shapes * m) as f64,
                    accepted: true,
                });
            }

            for steps in &mut self.steps {
                for s in &mut steps[j] {
                    *s *= 0.5;
                }
            }
        }
        for (n, (shape, p)) in system.shapes_mut().iter_mut().zip(old).enumerate() {
            shape.particles_mut()[j] = p;
            self.previous[n][j].fill(Point::zeros());
        }
        Ok(LogRow {
            level: self.level,
            iteration,
            domain: j,
            energy_before,
            energy: energy_before,
            mean_displacement: 0.0,
            accepted: false,
        })
    }
}

fn mean_diameter(system: &ParticleSystem) -> f64 {
    let ds: Vec<f64> = system
        .shapes()
        .iter()
        .flat_map(|s| s.geometry().iter().map(DomainGeometry::diameter))
        .collect();
    ds.iter().sum::<f64>() / ds.len() as f64
}

fn run_level(
    system: &mut ParticleSystem,
    params: &OptimizationParams,
    level: usize,
    log: &mut Vec<LogRow>,
    observer: &mut dyn FnMut(Progress<'_>) -> ControlFlow<()>,
) -> Result<bool> {
    let tolerance = params.tolerance.unwrap_or(1e-4 * mean_diameter(system));
    let steps = (0..system.num_shapes())
        .map(|_| (0..system.num_domains()).map(|j| vec![1.0; system.count(j)]).collect())
        .collect();
    let previous = (0..system.num_shapes())
        .map(|_| (0..system.num_domains()).map(|j| vec![Point::zeros(); system.count(j)]).collect())
        .collect();
    let mut state = Level {
        params,
        level,
        steps,
        previous,
    };
    let order = block_order(system);
    for iteration in 0..params.max_iterations {
        system.update_sigma();
        let alpha = params.regularization.alpha(system.shape_matrix().matrix(), level);
        // the level ends once every block has settled, so a nearly fixed
        // contour cannot mask surface domains that are still moving
        let mut moved: f64 = 0.0;
        for &j in &order {
            let row = state.block_step(system, iteration, j, alpha)?;
            moved = moved.max(row.mean_displacement);
            let flow = observer(Progress::Step(&row));
            log.push(row);
            if flow.is_break() {
                return Ok(false);
            }
        }
        if moved < tolerance {
            break;
        }
    }
    system.update_sigma();
    Ok(true)
}

/// Runs the split-then-optimize ladder until every domain reaches its target
/// count. With `resume`, continues after the checkpointed level. The observer
/// sees every block update and every completed level, and may stop the run by
/// returning `ControlFlow::Break`.
pub fn optimize(
    system: &mut ParticleSystem,
    params: &OptimizationParams,
    resume: Option<Checkpoint>,
    mut observer: impl FnMut(Progress<'_>) -> ControlFlow<()>,
) -> Result<OptimizationReport> {
    let mut log = Vec::new();
    let mut level = match resume {
        None => {
            system.initialize_particles(params.seed);
            0
        }
        Some(cp) => {
            system.set_particles(cp.particles)?;
            if system.at_target() {
                return finish(system, params, cp.level, log, false);
            }
            split_level(system, params);
            cp.level + 1
        }
    };
    loop {
        if !run_level(system, params, level, &mut log, &mut observer)? {
            return finish(system, params, level, log, true);
        }
        let checkpoint = Checkpoint {
            level,
            particles: system.particles(),
        };
        let flow = observer(Progress::LevelDone(&checkpoint));
        if system.at_target() {
            return finish(system, params, level, log, false);
        }
        if flow.is_break() {
            return finish(system, params, level, log, true);
        }
        split_level(system, params);
        level += 1;
    }
}

fn split_level(system: &mut ParticleSystem, params: &OptimizationParams) {
    let sigma: Vec<Vec<Vec<f64>>> = (0..system.num_shapes())
        .map(|n| (0..system.num_domains()).map(|j| system.sigma(n, j).to_vec()).collect())
        .collect();
    // contour copies go to the middle of the forward gap, so the refined
    // chain starts evenly spaced and does not drift around the loop
    let half_gaps: Vec<Vec<Vec<f64>>> = system
        .shapes()
        .iter()
        .map(|shape| {
            shape
                .geometry()
                .iter()
                .enumerate()
                .map(|(j, g)| match g {
                    DomainGeometry::Contour(c) => {
                        let u = arcs(c, shape.particles(j));
                        (0..u.len()).map(|i| 0.5 * forward_gap(&u, i, c.perimeter())).collect()
                    }
                    DomainGeometry::Surface(_) => Vec::new(),
                })
                .collect()
        })
        .collect();
    // contours are refined to their targets before any surface splits, so
    // surface particles always see the whole boundary
    let below = |j: usize| system.count(j) < system.specs()[j].particle_count();
    let contours_pending = (0..system.num_domains()).any(|j| system.specs()[j].kind() == DomainKind::Contour && below(j));
    let include: Vec<bool> = (0..system.num_domains())
        .map(|j| !contours_pending || system.specs()[j].kind() == DomainKind::Contour)
        .collect();
    let frac = params.split_fraction;
    split_with(system, params.seed, |j| include[j], |n, j, i| match half_gaps[n][j].get(i) {
        Some(&h) => h,
        None => frac * sigma[n][j][i],
    });
}

fn finish(
    system: &mut ParticleSystem,
    params: &OptimizationParams,
    level: usize,
    log: Vec<LogRow>,
    stopped: bool,
) -> Result<OptimizationReport> {
    system.update_sigma();
    let alpha = params.regularization.alpha(system.shape_matrix().matrix(), level);
    let final_energy = total_energy(system, alpha)?;
    Ok(OptimizationReport {
        last_level: level,
        final_energy,
        final_alpha: alpha,
        log,
        stopped,
    })
}
