//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one PASS/FAIL line.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssm_core::mesh::{closest_point_on_contour, Point, RigidTransform, SurfaceQuery};
use ssm_core::particles::{
    correspondence_entropy, correspondence_gradient, domain_sampling_energy, domain_sampling_gradient, optimize,
    Coupling, DomainGeometry, DomainKind, DomainSpec, MultiDomainShape, OptimizationParams, ParticleSystem,
    ShapeMatrix,
};
use ssm_core::primitives;
use ssm_core::project::{self, OptimizeOptions, ParticleCounts, ProjectConfig};
use ssm_core::shared_boundary::{extract_shared_boundary, SharedBoundaryParams};
use ssm_core::stats::{self, Group, ImbalanceParams};
use ssm_core::synth::{SynthKind, SynthParams};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn shared_boundary_cubes() -> Outcome {
    let start = Instant::now();
    let a = primitives::unit_cube();
    let b = a.transformed(&RigidTransform::from_translation(Point::new(1.0, 0.0, 0.0)));
    let d = extract_shared_boundary(&a, &b, &SharedBoundaryParams::new(1e-3, 0.1, 0)).map_err(|e| e.to_string())?;
    let area = d.shared.area();
    let perimeter = d.contour.perimeter();
    let conservation = ((d.areas.remainder_a + d.areas.shared_a) - d.areas.remeshed_a).abs() / d.areas.remeshed_a;
    let elapsed = start.elapsed();
    check(
        (area - 1.0).abs() <= 0.02 && (perimeter - 4.0).abs() <= 0.08 && conservation <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("area {area:.5}, perimeter {perimeter:.5}, conservation {conservation:.1e}, {elapsed:.2?}"),
    )
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let instances = 100;
    let mut worst_sampling: f64 = 0.0;
    let mut worst_corr: f64 = 0.0;
    for _ in 0..instances {
        let m = rng.random_range(2..=16);
        let extra_n = rng.random_range(0..=8);
        let pt = |rng: &mut ChaCha8Rng| Point::new(rng.random(), rng.random(), rng.random());
        let own: Vec<Point> = (0..m).map(|_| pt(&mut rng)).collect();
        let extra: Vec<Point> = (0..extra_n).map(|_| pt(&mut rng)).collect();
        let sigma: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let analytic = domain_sampling_gradient(&own, &extra, &sigma);
        let mut fd = Vec::with_capacity(3 * m);
        let mut an = Vec::with_capacity(3 * m);
        for i in 0..m {
            let h = 1e-5 * sigma[i];
            for k in 0..3 {
                let mut p = own.clone();
                p[i][k] += h;
                let up = domain_sampling_energy(&p, &extra, &sigma);
                p[i][k] -= 2.0 * h;
                let down = domain_sampling_energy(&p, &extra, &sigma);
                fd.push((up - down) / (2.0 * h));
                an.push(analytic[i][k]);
            }
        }
        worst_sampling = worst_sampling.max(relative_error(&an, &fd));

        let n = rng.random_range(2..=5);
        let cols = 3 * rng.random_range(1..=16);
        let z = DMatrix::from_fn(n, cols, |_, _| rng.random::<f64>());
        let alpha = rng.random_range(1e-3..1e-1);
        let g = correspondence_gradient(&z, alpha).map_err(|e| e.to_string())?;
        let mut fd = Vec::with_capacity(n * cols);
        let mut an = Vec::with_capacity(n * cols);
        let h = 1e-6;
        for r in 0..n {
            for c in 0..cols {
                let mut zp = z.clone();
                zp[(r, c)] += h;
                let up = correspondence_entropy(&zp, alpha).map_err(|e| e.to_string())?;
                zp[(r, c)] -= 2.0 * h;
                let down = correspondence_entropy(&zp, alpha).map_err(|e| e.to_string())?;
                fd.push((up - down) / (2.0 * h));
                an.push(g[(r, c)]);
            }
        }
        worst_corr = worst_corr.max(relative_error(&an, &fd));
    }
    let elapsed = start.elapsed();
    check(
        worst_sampling < 1e-4 && worst_corr < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{instances} instances each; worst relative error sampling {worst_sampling:.1e}, correspondence {worst_corr:.1e}, {elapsed:.2?}"),
    )
}

fn nn_cv(points: &[Point]) -> f64 {
    let d: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    var.sqrt() / mean
}

fn sampling_uniformity() -> Outcome {
    let geometry = DomainGeometry::surface(SurfaceQuery::new(primitives::icosphere(1.0, 3)));
    let specs = vec![DomainSpec::new("sphere", DomainKind::Surface, 64).unwrap()];
    let mut system =
        ParticleSystem::new(specs, vec![MultiDomainShape::new("sphere", vec![geometry])]).map_err(|e| e.to_string())?;
    system.relative_weighting = 0.0;
    optimize(&mut system, &OptimizationParams::default(), None, |_| std::ops::ControlFlow::Continue(()))
        .map_err(|e| e.to_string())?;
    let cv = nn_cv(&system.shapes()[0].positions(0));
    check(cv < 0.15, format!("64 particles, nearest-neighbour CV {cv:.4}"))
}

fn synth_project(dir: &Path, params: &SynthParams, counts: Option<ParticleCounts>) -> Result<ProjectConfig, String> {
    let path = project::synth(params, dir).map_err(|e| e.to_string())?;
    let mut config = ProjectConfig::load(path).map_err(|e| e.to_string())?;
    if let Some(counts) = counts {
        config.optimize.particles = counts;
    }
    Ok(config)
}

fn correspondence_compactness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let params = SynthParams {
        kind: SynthKind::TwoBox,
        count: 6,
        seed: 11,
        range: Some((0.0, 0.0)),
        ..SynthParams::default()
    };
    let config = synth_project(dir.path(), &params, Some(ParticleCounts::uniform(32)))?;
    project::groom(&config).map_err(|e| e.to_string())?;
    project::optimize_project(&config, OptimizeOptions::default()).map_err(|e| e.to_string())?;
    let z = project::load_shape_matrix(&config).map_err(|e| e.to_string())?;

    let groomed = project::load_groomed_system(&config).map_err(|e| e.to_string())?;
    let (mut lo, mut hi) = (Point::repeat(f64::INFINITY), Point::repeat(f64::NEG_INFINITY));
    for g in &groomed.shapes()[0].geometry()[..3] {
        if let DomainGeometry::Surface(q) = g {
            let (a, b) = q.mesh().bounding_box();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
    }
    let diagonal = (hi - lo).norm();
    let mean = stats::mean_shape(&z);
    let mut worst_sd: f64 = 0.0;
    for i in 0..z.num_particles() {
        let var: f64 = (0..z.num_shapes())
            .map(|n| {
                (0..3).map(|k| (z.matrix()[(n, 3 * i + k)] - mean[3 * i + k]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / (z.num_shapes() - 1) as f64;
        worst_sd = worst_sd.max(var.sqrt());
    }
    let model = stats::pca(&z).map_err(|e| e.to_string())?;
    let top = model.eigenvalues[0];
    check(
        worst_sd < 1e-3 * diagonal && top < 1e-6 * diagonal * diagonal,
        format!(
            "6 rigidly moved copies, 32 per domain: max particle SD {:.2e} x diagonal, top eigenvalue {:.2e} x diagonal^2",
            worst_sd / diagonal,
            top / (diagonal * diagonal)
        ),
    )
}

fn min_surface_to_contour(system: &ParticleSystem) -> f64 {
    let mut best = f64::INFINITY;
    for shape in system.shapes() {
        let DomainGeometry::Contour(c) = &shape.geometry()[3] else { unreachable!() };
        for j in 0..3 {
            for p in shape.positions(j) {
                // floating-point residue of a particle sitting on the contour
                let d = closest_point_on_contour(c.contour(), &p).unwrap().1;
                best = best.min(if d < 1e-9 { 0.0 } else { d });
            }
        }
    }
    best
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn contour_repulsion_ablation() -> Outcome {
    let mut coupled = Vec::new();
    let mut independent = Vec::new();
    for seed in 0..10 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let params = SynthParams {
            kind: SynthKind::TwoBox,
            count: 4,
            seed,
            ..SynthParams::default()
        };
        let config = synth_project(dir.path(), &params, None)?;
        project::groom(&config).map_err(|e| e.to_string())?;
        for (coupling, out) in [(Coupling::ContourRepulsion, &mut coupled), (Coupling::Independent, &mut independent)] {
            let mut system = project::load_groomed_system(&config).map_err(|e| e.to_string())?;
            system.coupling = coupling;
            let opt = OptimizationParams {
                seed,
                ..config.optimize.params()
            };
            optimize(&mut system, &opt, None, |_| std::ops::ControlFlow::Continue(())).map_err(|e| e.to_string())?;
            out.push(min_surface_to_contour(&system));
        }
    }
    eprintln!("  per-seed minima with repulsion {coupled:?}\n  without {independent:?}");
    let (mc, mi) = (median(coupled), median(independent));
    check(mc > mi, format!("10 seeds, 128/64/128/64 particles, median min distance with repulsion {mc:.4e}, without {mi:.4e}"))
}

struct SeptumRun {
    config: ProjectConfig,
    z: ShapeMatrix,
    labels: Vec<Group>,
    parameters: Vec<f64>,
    scores_csv: Vec<u8>,
    _dir: tempfile::TempDir,
}

fn septum_pipeline() -> Result<SeptumRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let params = SynthParams {
        kind: SynthKind::CurvedSeptum,
        count: 12,
        seed: 5,
        range: Some((0.05, 0.3)),
        ..SynthParams::default()
    };
    let mut config = synth_project(dir.path(), &params, Some(ParticleCounts::uniform(64)))?;
    for s in &mut config.subjects {
        let flat = s.group.as_deref() == Some("low");
        s.group = Some(if flat { "flat" } else { "curved" }.into());
    }
    config.analyze.groups = Some(["flat".into(), "curved".into()]);
    single_threaded(|| -> Result<(), String> {
        project::groom(&config).map_err(|e| e.to_string())?;
        project::optimize_project(&config, OptimizeOptions::default()).map_err(|e| e.to_string())?;
        project::analyze(&config).map_err(|e| e.to_string())?;
        Ok(())
    })?;
    let z = project::load_shape_matrix(&config).map_err(|e| e.to_string())?;
    let labels = config.group_labels().map_err(|e| e.to_string())?.ok_or("no groups")?;
    let labels_csv = std::fs::read_to_string(dir.path().join("labels.csv")).map_err(|e| e.to_string())?;
    let parameters = labels_csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let scores_csv = std::fs::read(config.stage_dir("analyze").join("scores.csv")).map_err(|e| e.to_string())?;
    Ok(SeptumRun {
        config,
        z,
        labels,
        parameters,
        scores_csv,
        _dir: dir,
    })
}

fn mode_recovery(run: &SeptumRun) -> Outcome {
    let model = stats::pca(&run.z).map_err(|e| e.to_string())?;
    let explained = model.cumulative_explained[0];
    let counts = run.config.optimize.particles.as_array();
    let wall = counts[0]..counts[0] + counts[1];
    let deviations: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0]
        .iter()
        .map(|&sd| {
            let v = stats::mode_walk(&model, 0, sd).unwrap();
            let pts: Vec<Point> = wall.clone().map(|i| Point::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])).collect();
            stats::max_plane_deviation(&pts)
        })
        .collect();
    let increasing = deviations.windows(2).all(|w| w[1] > w[0]);
    let decreasing = deviations.windows(2).all(|w| w[1] < w[0]);
    check(
        explained >= 0.9 && (increasing || decreasing),
        format!(
            "12 subjects: mode 1 explains {:.2}%, wall deviation along -2..+2 SD {:?}",
            100.0 * explained,
            deviations.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn score_calibration(run: &SeptumRun) -> Outcome {
    let s = stats::shape_score(&run.z, &run.labels).map_err(|e| e.to_string())?;
    let mean_of = |g: Group| {
        let v: Vec<f64> = s.scores.iter().zip(&run.labels).filter(|(_, &l)| l == g).map(|(x, _)| *x).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (ma, mb) = (mean_of(Group::A), mean_of(Group::B));
    let signs = s.scores.iter().zip(&run.labels).all(|(x, &g)| (g == Group::A) == (*x < 0.0));
    let t = RigidTransform::from_axis_angle(&Point::new(0.3, -1.0, 0.7), 1.1, Point::new(10.0, -4.0, 2.5));
    let moved: Vec<Vec<Point>> = (0..run.z.num_shapes()).map(|n| run.z.points(n).iter().map(|p| t.apply_point(p)).collect()).collect();
    let s2 = stats::shape_score(&ShapeMatrix::from_rows(&moved).unwrap(), &run.labels).map_err(|e| e.to_string())?;
    let drift = s.scores.iter().zip(&s2.scores).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let monotone = {
        let mut order: Vec<usize> = (0..run.parameters.len()).collect();
        order.sort_by(|&a, &b| run.parameters[a].total_cmp(&run.parameters[b]));
        order.windows(2).filter(|w| s.scores[w[1]] < s.scores[w[0]]).count()
    };
    check(
        (ma + 1.0).abs() < 1e-9 && (mb - 1.0).abs() < 1e-9 && signs && drift < 1e-9,
        format!(
            "group means {ma:.12} / {mb:.12}, signs correct: {signs}, rigid-transform drift {drift:.1e}, order inversions vs curvature {monotone}"
        ),
    )
}

fn imbalance_harness(run: &SeptumRun) -> Outcome {
    let defaults = ImbalanceParams::new(1);
    let size = run.labels.iter().filter(|&&g| g == Group::A).count();
    let balanced = size * 2 == run.labels.len();
    let res = stats::imbalance_test(&run.z, &run.labels, &ImbalanceParams::new(size)).map_err(|e| e.to_string())?;
    let all_exact = res.iter().all(|r| r.exact_match);

    let x = [0.8, 1.3, 0.9, 1.7, 1.05];
    let mu0 = 1.1;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let oracle = (mean - mu0) / (sd / n.sqrt());
    let t = stats::t_statistic(&x, mu0).ok_or("t undefined")?;
    check(
        defaults.trials == 1000 && defaults.alpha == 0.01 && balanced && all_exact && (t - oracle).abs() < 1e-12,
        format!(
            "defaults trials {} alpha {}; {size}+{size} subjects, subsample {size}: exact-match on {}/{} shapes; t {t:.15} vs oracle {oracle:.15}",
            defaults.trials,
            defaults.alpha,
            res.iter().filter(|r| r.exact_match).count(),
            res.len()
        ),
    )
}

fn determinism(first: &SeptumRun) -> Outcome {
    let second = septum_pipeline()?;
    check(
        first.scores_csv == second.scores_csv,
        format!("two single-threaded pipeline runs, scores.csv {} bytes, identical: {}", first.scores_csv.len(), first.scores_csv == second.scores_csv),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        eprintln!("  ({name} took {:.1?})", start.elapsed());
        results.push((name, outcome));
    };
    run("1 shared-boundary extraction", &shared_boundary_cubes);
    run("2 gradient fidelity", &gradient_fidelity);
    run("3 sampling uniformity", &sampling_uniformity);
    run("4 correspondence compactness", &correspondence_compactness);
    run("5 contour repulsion ablation", &contour_repulsion_ablation);
    match septum_pipeline() {
        Ok(septum) => {
            run("6 mode recovery", &|| mode_recovery(&septum));
            run("7 score calibration", &|| score_calibration(&septum));
            run("8 imbalance test harness", &|| imbalance_harness(&septum));
            run("9 determinism", &|| determinism(&septum));
        }
        Err(e) => {
            for name in ["6 mode recovery", "7 score calibration", "8 imbalance test harness", "9 determinism"] {
                results.push((name, Err(format!("pipeline failed: {e}"))));
            }
        }
    }

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
