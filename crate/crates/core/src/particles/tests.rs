use std::ops::ControlFlow;

use super::*;
use crate::mesh::{boundary_loop, isotropic_remesh, RemeshOptions};
use crate::primitives;

fn sphere_geometry() -> DomainGeometry {
    let m = isotropic_remesh(&primitives::icosphere(1.0, 3), &RemeshOptions::new(0.12)).unwrap();
    DomainGeometry::surface(SurfaceQuery::new(m))
}

fn sphere_system(count: usize, shapes: usize) -> ParticleSystem {
    let g = sphere_geometry();
    let specs = vec![DomainSpec::new("sphere", DomainKind::Surface, count).unwrap()];
    let shapes = (0..shapes)
        .map(|n| MultiDomainShape::new(format!("s{n}"), vec![g.clone()]))
        .collect();
    ParticleSystem::new(specs, shapes).unwrap()
}

/// A flat square patch and its boundary loop as two domains.
fn patch_system(surface: usize, contour: usize, shapes: usize) -> ParticleSystem {
    let grid = primitives::grid(10, 10, 0.1);
    let c = boundary_loop(&grid).unwrap();
    let geometry = vec![
        DomainGeometry::surface(SurfaceQuery::new(grid)),
        DomainGeometry::contour(c).unwrap(),
    ];
    let specs = vec![
        DomainSpec::new("patch", DomainKind::Surface, surface).unwrap(),
        DomainSpec::new("rim", DomainKind::Contour, contour).unwrap(),
    ];
    let shapes = (0..shapes)
        .map(|n| MultiDomainShape::new(format!("s{n}"), geometry.clone()))
        .collect();
    ParticleSystem::new(specs, shapes).unwrap()
}

fn quiet(_: Progress<'_>) -> ControlFlow<()> {
    ControlFlow::Continue(())
}

fn nn_distances(points: &[Point]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn cv(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

fn cyclic_order_ok(system: &ParticleSystem, shape: usize, domain: usize) -> bool {
    let DomainGeometry::Contour(c) = &system.shapes()[shape].geometry()[domain] else {
        panic!("not a contour")
    };
    let u: Vec<f64> = system.shapes()[shape]
        .particles(domain)
        .iter()
        .map(|p| match p {
            Particle::Contour { location, .. } => c.arc(location),
            _ => unreachable!(),
        })
        .collect();
    // increasing around the loop with at most one wrap, in either orientation
    let descents = (0..u.len()).filter(|&i| u[(i + 1) % u.len()] < u[i]).count();
    u.len() < 3 || descents == 1 || descents == u.len() - 1
}

#[test]
fn domain_spec_requires_power_of_two() {
    assert!(DomainSpec::new("a", DomainKind::Surface, 64).is_ok());
    assert!(DomainSpec::new("a", DomainKind::Surface, 1).is_ok());
    assert!(matches!(DomainSpec::new("a", DomainKind::Surface, 48), Err(Error::Config(_))));
    assert!(DomainSpec::new("a", DomainKind::Contour, 0).is_err());
}

#[test]
fn system_rejects_mismatched_domains() {
    let grid = primitives::grid(2, 2, 0.5);
    let shape = MultiDomainShape::new("x", vec![DomainGeometry::surface(SurfaceQuery::new(grid))]);
    let specs = vec![DomainSpec::new("c", DomainKind::Contour, 4).unwrap()];
    assert!(ParticleSystem::new(specs, vec![shape]).is_err());
}

#[test]
fn contour_arc_round_trip() {
    let c = ContourDomain::new(primitives::square_contour(1.0)).unwrap();
    assert!((c.perimeter() - 4.0).abs() < 1e-12);
    for k in 0..40 {
        let u = 0.1 * k as f64 + 0.013;
        let cp = c.at_arc(u);
        assert!((c.arc(&cp) - u.rem_euclid(4.0)).abs() < 1e-12);
    }
    let wrapped = c.at_arc(4.25);
    assert!((c.arc(&wrapped) - 0.25).abs() < 1e-12);
    assert!(ContourDomain::new(crate::mesh::Contour::new(vec![Point::zeros(), Point::x()], false).unwrap()).is_err());
}

#[test]
fn initialization_on_sphere_is_deterministic() {
    let mut a = sphere_system(8, 3);
    a.initialize_particles(5);
    let mut b = sphere_system(8, 3);
    b.initialize_particles(5);
    let pa = a.shapes()[0].positions(0);
    assert_eq!(pa.len(), 1);
    assert!((pa[0].norm() - 1.0).abs() < 0.01);
    assert_eq!(a.particles(), b.particles());
    // identical shapes start identical
    assert!(a.shape_matrix().matrix().row(0) == a.shape_matrix().matrix().row(2));
}

#[test]
fn contour_initialization_reproducible() {
    let mut a = patch_system(4, 4, 1);
    a.initialize_particles(11);
    let mut b = patch_system(4, 4, 1);
    b.initialize_particles(11);
    assert_eq!(a.particles(), b.particles());
    assert!(a.shapes()[0].max_anchor_error() < 1e-9);
    let p = a.shapes()[0].positions(1)[0];
    let c = boundary_loop(&primitives::grid(10, 10, 0.1)).unwrap();
    assert!(crate::mesh::closest_point_on_contour(&c, &p).unwrap().1 < 1e-12);
}

#[test]
fn splitting_keeps_particles_on_domain() {
    let mut s = sphere_system(2, 1);
    s.initialize_particles(1);
    s.split_particles(0.05, 1);
    assert_eq!(s.count(0), 2);
    assert!(s.shapes()[0].max_anchor_error() < 1e-9);
    let p = s.shapes()[0].positions(0);
    assert!((p[0] - p[1]).norm() > 0.01);
    // at target: no-op
    let before = s.particles();
    s.split_particles(0.05, 1);
    assert_eq!(before, s.particles());
}

#[test]
fn splitting_identical_cohort_keeps_zero_variance() {
    let mut s = patch_system(16, 8, 4);
    s.initialize_particles(3);
    for _ in 0..4 {
        s.split_particles(0.02, 3);
    }
    assert_eq!((s.count(0), s.count(1)), (16, 8));
    let ev = correspondence_eigenvalues(s.shape_matrix().matrix());
    assert!(ev.iter().all(|&l| l == 0.0));
    for n in 0..4 {
        assert!(s.shapes()[n].max_anchor_error() < 1e-9);
        assert!(cyclic_order_ok(&s, n, 1));
    }
}

#[test]
fn sigma_after_tiny_split_respects_floor() {
    let mut s = sphere_system(2, 1);
    s.initialize_particles(0);
    s.split_particles(1e-9, 0);
    assert!(s.sigma(0, 0).iter().all(|&x| x >= 1e-4 && x.is_finite()));
}

#[test]
fn plane_pair_forces_point_apart() {
    let grid = primitives::grid(4, 4, 0.25);
    let q = SurfaceQuery::new(grid);
    let g = DomainGeometry::surface(q);
    let specs = vec![DomainSpec::new("p", DomainKind::Surface, 2).unwrap()];
    let mut s = ParticleSystem::new(specs, vec![MultiDomainShape::new("a", vec![g.clone()])]).unwrap();
    let a = g.project(&Point::new(0.4, 0.5, 0.0));
    let b = g.project(&Point::new(0.6, 0.5, 0.0));
    s.set_particles(vec![vec![vec![a, b]]]).unwrap();
    let fa = s.sampling_gradient(0, 0, 0);
    let fb = s.sampling_gradient(0, 0, 1);
    assert!(fa.x < 0.0 && fb.x > 0.0);
    assert!((fa.norm() - fb.norm()).abs() < 1e-12);
    assert!(fa.y.abs() < 1e-12 && fa.z.abs() < 1e-12);
}

#[test]
fn contour_repulsion_only_with_coupling() {
    let mut s = patch_system(2, 4, 1);
    s.kernel_neighbors = 1;
    let geom = s.shapes()[0].geometry().to_vec();
    // two surface particles mirrored about x = 0.5, one contour particle on the
    // left edge near the first of them
    let a = geom[0].project(&Point::new(0.15, 0.5, 0.0));
    let b = geom[0].project(&Point::new(0.85, 0.5, 0.0));
    let rim: Vec<Particle> = [
        Point::new(0.0, 0.5, 0.0),
        Point::new(0.5, 1.0, 0.0),
        Point::new(1.0, 0.9, 0.0),
        Point::new(0.5, 0.0, 0.0),
    ]
    .iter()
    .map(|p| geom[1].project(p))
    .collect();
    s.set_particles(vec![vec![vec![a, b], rim.clone()]]).unwrap();
    let coupled = s.sampling_gradient(0, 0, 0);
    assert!(coupled.x > 0.0, "pushed away from the rim particle at x = 0");
    assert!(coupled.norm() > 0.0);
    s.coupling = Coupling::Independent;
    s.update_sigma();
    let free = s.sampling_gradient(0, 0, 0);
    // only the other surface particle at x = 0.85 acts: push toward -x
    assert!(free.x < 0.0);
    // contour particles never feel surface particles
    s.coupling = Coupling::ContourRepulsion;
    s.update_sigma();
    let with = s.raw_sampling_gradient(0, 1);
    s.coupling = Coupling::Independent;
    s.update_sigma();
    assert_eq!(with, s.raw_sampling_gradient(0, 1));
}

#[test]
fn combined_gradient_degenerate_cases() {
    let mut s = sphere_system(4, 1);
    s.initialize_particles(0);
    s.split_particles(0.1, 0);
    s.split_particles(0.1, 0);
    for i in 0..4 {
        assert_eq!(s.combined_gradient(0, 0, i, 0.1).unwrap(), s.sampling_gradient(0, 0, i));
    }
    let mut c = sphere_system(4, 3);
    c.initialize_particles(0);
    c.split_particles(0.1, 0);
    c.split_particles(0.1, 0);
    c.relative_weighting = 0.0;
    assert_eq!(c.combined_gradient(1, 0, 2, 0.1).unwrap(), c.sampling_gradient(1, 0, 2));
}

#[test]
fn correspondence_pulls_outlier_back() {
    let mut s = patch_system(4, 4, 4);
    s.initialize_particles(0);
    s.split_particles(0.1, 0);
    s.split_particles(0.1, 0);
    let mut ps = s.particles();
    let geom = s.shapes()[2].geometry()[0].clone();
    let target = ps[0][0][1].position();
    ps[2][0][1] = geom.project(&(target + Point::new(0.05, -0.03, 0.0)));
    s.set_particles(ps).unwrap();
    s.relative_weighting = 1.0;
    let sampling = s.sampling_gradient(2, 0, 1);
    let combined = s.combined_gradient(2, 0, 1, 1e-4).unwrap();
    let corr = combined - sampling;
    let toward = target - s.shapes()[2].positions(0)[1];
    assert!(corr.dot(&toward) > 0.0);
    assert!(corr.normalize().dot(&toward.normalize()) > 0.99);
}

#[test]
fn sixty_four_particles_spread_uniformly() {
    let mut s = sphere_system(64, 1);
    s.relative_weighting = 0.0;
    let params = OptimizationParams {
        max_iterations: 200,
        seed: 2,
        ..Default::default()
    };
    let report = optimize(&mut s, &params, None, quiet).unwrap();
    assert!(!report.stopped);
    assert_eq!(s.count(0), 64);
    let nn = nn_distances(&s.shapes()[0].positions(0));
    let c = cv(&nn);
    assert!(c < 0.15, "nearest-neighbour CV {c}");
    assert!(s.shapes()[0].max_anchor_error() < 1e-9);
    for row in &report.log {
        assert!(row.energy <= row.energy_before);
    }
}

#[test]
fn identical_cohort_stays_in_correspondence() {
    let mut s = patch_system(16, 8, 4);
    let params = OptimizationParams {
        max_iterations: 30,
        seed: 4,
        ..Default::default()
    };
    optimize(&mut s, &params, None, quiet).unwrap();
    let z = s.shape_matrix();
    let m = z.matrix();
    for c in 0..m.ncols() {
        let col = m.column(c);
        let mean = col.mean();
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(sd < 1e-3, "column {c} sd {sd}");
    }
    for n in 0..4 {
        assert!(s.shapes()[n].max_anchor_error() < 1e-9);
        assert!(cyclic_order_ok(&s, n, 1));
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let params = OptimizationParams {
        max_iterations: 15,
        seed: 8,
        ..Default::default()
    };
    let mut full = patch_system(8, 4, 2);
    let full_report = optimize(&mut full, &params, None, quiet).unwrap();

    let mut first = patch_system(8, 4, 2);
    let mut saved = None;
    let part = optimize(&mut first, &params, None, |p| match p {
        Progress::LevelDone(cp) if cp.level == 1 => {
            saved = Some(cp.clone());
            ControlFlow::Break(())
        }
        _ => ControlFlow::Continue(()),
    })
    .unwrap();
    assert!(part.stopped);
    let cp = saved.unwrap();
    let json = serde_json::to_string(&cp).unwrap();
    let cp: Checkpoint = serde_json::from_str(&json).unwrap();

    let mut resumed = patch_system(8, 4, 2);
    let report = optimize(&mut resumed, &params, Some(cp), quiet).unwrap();
    assert_eq!(resumed.particles(), full.particles());
    assert_eq!(report.final_energy, full_report.final_energy);
}

#[test]
fn thread_count_does_not_change_results() {
    let params = OptimizationParams {
        max_iterations: 10,
        seed: 1,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut s = patch_system(8, 4, 3);
            optimize(&mut s, &params, None, quiet).unwrap();
            s.particles()
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn system_entropy_ordering() {
    // uniform grid of particles on a patch vs the same count packed in a corner
    let grid = primitives::grid(10, 10, 0.1);
    let g = DomainGeometry::surface(SurfaceQuery::new(grid));
    let specs = vec![DomainSpec::new("p", DomainKind::Surface, 16).unwrap()];
    let mut s = ParticleSystem::new(specs, vec![MultiDomainShape::new("a", vec![g.clone()])]).unwrap();
    let uniform: Vec<Particle> = (0..16)
        .map(|k| g.project(&Point::new(0.125 + 0.25 * (k % 4) as f64, 0.125 + 0.25 * (k / 4) as f64, 0.0)))
        .collect();
    let packed: Vec<Particle> = (0..16)
        .map(|k| g.project(&Point::new(0.02 + 0.03 * (k % 4) as f64, 0.02 + 0.03 * (k / 4) as f64, 0.0)))
        .collect();
    s.set_particles(vec![vec![uniform]]).unwrap();
    let hu = s.sampling_entropy(0);
    s.set_particles(vec![vec![packed]]).unwrap();
    let hp = s.sampling_entropy(0);
    assert!(hu > hp);
}
