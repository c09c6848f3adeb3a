//! Batch pipeline over a cohort described by a TOML project file:
//! groom (align + shared-boundary extraction), optimize (particle
//! correspondence), analyze (PCA, group differences, scores, imbalance test),
//! plus synthetic-cohort generation.
//!
//! Output layout under the project's output directory:
//!
//! ```text
//! groom/<id>_Ar.obj  groom/<id>_M.obj  groom/<id>_Br.obj  groom/<id>_C.contour
//! groom/transforms.json
//! optimize/<id>_<domain>.particles  optimize/log.csv  optimize/checkpoint.json
//! analyze/eigenvalues.csv  analyze/mean_<domain>.{particles,obj}
//! analyze/mode<k>_<+/-sd>sd_<domain>.{particles,obj}
//! analyze/group_difference.csv  analyze/scores.csv  analyze/imbalance.csv
//! ```

use std::collections::HashSet;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{
    load_contour, load_mesh, load_particles, rigid_align, save_contour, save_mesh, save_particles, AlignOptions,
    Point, RigidTransform, SurfaceQuery, TriangleMesh,
};
use crate::particles::{
    optimize, Checkpoint, Coupling, DomainGeometry, DomainKind, DomainSpec, LogRow, MultiDomainShape,
    OptimizationParams, ParticleSystem, Progress, Regularization, ShapeMatrix,
};
use crate::shared_boundary::{distance_histogram, extract_shared_boundary, AreaLedger, SharedBoundaryParams};
use crate::stats::{
    group_difference, imbalance_test, mode_walk, pca, shape_score, Group, ImbalanceParams, ThinPlateSpline,
};
use crate::synth::{synth_cohort, SynthKind, SynthParams};

/// File suffixes of the four domains, in shape-vector order.
pub const DOMAIN_SUFFIXES: [&str; 4] = ["Ar", "M", "Br", "C"];
const DOMAIN_KINDS: [DomainKind; 4] = [DomainKind::Surface, DomainKind::Surface, DomainKind::Surface, DomainKind::Contour];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectConfig {
    pub id: String,
    pub organ_a: PathBuf,
    pub organ_b: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroomConfig {
    pub remesh_edge_length: f64,
    #[serde(default = "default_smooth_iterations")]
    pub smooth_iterations: usize,
    pub shared_threshold: f64,
    /// Alignment target. Defaults to the subject whose organ-A centroid is
    /// nearest the cohort centroid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

fn default_smooth_iterations() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleCounts {
    pub organ_a: usize,
    pub shared: usize,
    pub organ_b: usize,
    pub contour: usize,
}

impl Default for ParticleCounts {
    fn default() -> Self {
        Self {
            organ_a: 512,
            shared: 64,
            organ_b: 512,
            contour: 64,
        }
    }
}

impl ParticleCounts {
    pub fn uniform(count: usize) -> Self {
        Self {
            organ_a: count,
            shared: count,
            organ_b: count,
            contour: count,
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.organ_a, self.shared, self.organ_b, self.contour]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub particles: ParticleCounts,
    pub relative_weighting: f64,
    /// Fixed regularization; adaptive when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularization: Option<f64>,
    pub max_iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub coupling: Coupling,
    pub kernel_neighbors: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        let p = OptimizationParams::default();
        Self {
            particles: ParticleCounts::default(),
            relative_weighting: 1.0,
            regularization: None,
            max_iterations: p.max_iterations,
            tolerance: None,
            seed: 0,
            coupling: Coupling::default(),
            kernel_neighbors: 1,
        }
    }
}

impl OptimizeConfig {
    pub fn params(&self) -> OptimizationParams {
        OptimizationParams {
            regularization: self.regularization.map_or_else(Regularization::default, Regularization::Fixed),
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            seed: self.seed,
            ..OptimizationParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub trials: usize,
    /// Members of the larger group drawn per trial; defaults to the size of
    /// the smaller group.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    pub alpha: f64,
    pub seed: u64,
    /// Group labels mapped to score -1 and +1. Defaults to order of first
    /// appearance in the subject list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<[String; 2]>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        let d = ImbalanceParams::new(1);
        Self {
            trials: d.trials,
            subsample: None,
            alpha: d.alpha,
            seed: 0,
            groups: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub groom: GroomConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    pub subjects: Vec<SubjectConfig>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

impl ProjectConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut config: ProjectConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.base_dir = base_dir.into();
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Config("no subjects listed".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.subjects {
            let valid = !s.id.is_empty() && s.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !valid {
                return Err(Error::Config(format!("subject id {:?} must be non-empty [A-Za-z0-9._-]", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate subject id {:?}", s.id)));
            }
            for (organ, p) in [("organ_a", &s.organ_a), ("organ_b", &s.organ_b)] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Config(format!("subject {}: {organ} file {} not found", s.id, full.display())));
                }
            }
        }
        if let Some(r) = &self.groom.reference {
            if !seen.contains(r.as_str()) {
                return Err(Error::Config(format!("reference subject {r:?} is not in the subject list")));
            }
        }
        let g = &self.groom;
        if !(g.remesh_edge_length > 0.0) || !(g.shared_threshold > 0.0) {
            return Err(Error::Config("remesh_edge_length and shared_threshold must be positive".into()));
        }
        self.domain_specs()?;
        let o = &self.optimize;
        if !(o.relative_weighting >= 0.0) || o.kernel_neighbors == 0 {
            return Err(Error::Config("relative_weighting must be >= 0 and kernel_neighbors >= 1".into()));
        }
        if o.regularization.is_some_and(|a| !(a >= 0.0)) || o.tolerance.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("regularization must be >= 0 and tolerance > 0".into()));
        }
        let a = &self.analyze;
        if a.trials < 2 || !(a.alpha > 0.0 && a.alpha < 1.0) || a.subsample == Some(0) {
            return Err(Error::Config("analyze needs trials >= 2, 0 < alpha < 1, subsample >= 1".into()));
        }
        self.group_labels()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_root().join(stage)
    }

    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        DOMAIN_SUFFIXES
            .iter()
            .zip(DOMAIN_KINDS)
            .zip(self.optimize.particles.as_array())
            .map(|((name, kind), count)| DomainSpec::new(*name, kind, count))
            .collect()
    }

    /// Per-subject group, or `None` when the cohort has fewer than two groups.
    pub fn group_labels(&self) -> Result<Option<Vec<Group>>> {
        let labels: Vec<Option<&str>> = self.subjects.iter().map(|s| s.group.as_deref()).collect();
        if labels.iter().all(Option::is_none) {
            return Ok(None);
        }
        if let Some(i) = labels.iter().position(Option::is_none) {
            return Err(Error::Config(format!("subject {} has no group label", self.subjects[i].id)));
        }
        let mut order: Vec<&str> = Vec::new();
        for l in labels.iter().flatten() {
            if !order.contains(l) {
                order.push(l);
            }
        }
        if let Some(explicit) = &self.analyze.groups {
            if let Some(extra) = order.iter().find(|l| !explicit.iter().any(|e| e == *l)) {
                return Err(Error::Config(format!("group {extra:?} is not one of analyze.groups")));
            }
            if order.len() == 2 {
                order = explicit.iter().map(String::as_str).collect();
            }
        }
        match order.len() {
            1 => Ok(None),
            2 => Ok(Some(
                labels.iter().map(|l| if l.unwrap() == order[0] { Group::A } else { Group::B }).collect(),
            )),
            n => Err(Error::Config(format!("expected at most two groups, found {n}"))),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// -------------------------------------------------------------------- groom

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroomRecord {
    pub id: String,
    /// Maps input coordinates to groomed coordinates (centering, then alignment).
    pub transform: RigidTransform,
    pub alignment_converged: bool,
    pub alignment_distance: f64,
    pub threshold_used: f64,
    pub areas: AreaLedger,
    pub warnings: Vec<String>,
    /// Organ-A vertex distances to organ B: `(bin upper edge, count)`.
    pub distance_histogram: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroomManifest {
    pub reference: String,
    pub subjects: Vec<GroomRecord>,
    /// `(subject id, error)` for subjects whose extraction failed.
    pub failed: Vec<(String, String)>,
}

fn groom_path(config: &ProjectConfig, id: &str, domain: usize) -> PathBuf {
    let ext = if DOMAIN_KINDS[domain] == DomainKind::Contour { "contour" } else { "obj" };
    config.stage_dir("groom").join(format!("{id}_{}.{ext}", DOMAIN_SUFFIXES[domain]))
}

fn load_subject_mesh(config: &ProjectConfig, s: &SubjectConfig, path: &Path) -> Result<TriangleMesh> {
    load_mesh(config.resolve(path)).map_err(|e| match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::InvalidMesh(_) => {
            Error::Config(format!("subject {}: {e}", s.id))
        }
        other => other,
    })
}

/// Centers every subject on its organ-A centroid, rotates organ A onto the
/// reference subject's organ A, applies the same transform to organ B, and
/// splits each pair into remainders, shared surface and contour.
///
/// Failing subjects are listed in the manifest; the call then returns
/// [`Error::Subjects`] after writing everything that succeeded.
pub fn groom(config: &ProjectConfig) -> Result<GroomManifest> {
    let dir = config.stage_dir("groom");
    create_dir(&dir)?;
    let meshes: Vec<(TriangleMesh, TriangleMesh)> = config
        .subjects
        .par_iter()
        .map(|s| Ok((load_subject_mesh(config, s, &s.organ_a)?, load_subject_mesh(config, s, &s.organ_b)?)))
        .collect::<Result<_>>()?;

    let centroids: Vec<Point> = meshes.iter().map(|(a, _)| a.vertex_centroid()).collect();
    let reference = match &config.groom.reference {
        Some(r) => config.subjects.iter().position(|s| &s.id == r).expect("validated"),
        None => {
            let c = centroids.iter().sum::<Point>() / centroids.len() as f64;
            (0..centroids.len())
                .min_by(|&i, &j| (centroids[i] - c).norm().total_cmp(&(centroids[j] - c).norm()))
                .expect("non-empty cohort")
        }
    };
    let reference_a = meshes[reference].0.transformed(&RigidTransform::from_translation(-centroids[reference]));
    info!("groom: reference subject {}", config.subjects[reference].id);

    let g = &config.groom;
    let params = SharedBoundaryParams::new(g.shared_threshold, g.remesh_edge_length, g.smooth_iterations);
    let results: Vec<Result<GroomRecord>> = config
        .subjects
        .par_iter()
        .zip(&meshes)
        .enumerate()
        .map(|(n, (s, (a, b)))| {
            let center = RigidTransform::from_translation(-centroids[n]);
            let (rotation, converged, distance) = if n == reference {
                (RigidTransform::identity(), true, 0.0)
            } else {
                let al = rigid_align(&a.transformed(&center), &reference_a, &AlignOptions::default())?;
                (al.transform, al.converged, al.mean_distance)
            };
            let transform = rotation.compose(&center);
            let d = extract_shared_boundary(&a.transformed(&transform), &b.transformed(&transform), &params)?;
            for (j, mesh) in [&d.remainder_a, &d.shared, &d.remainder_b].into_iter().enumerate() {
                save_mesh(mesh, groom_path(config, &s.id, j))?;
            }
            save_contour(&d.contour, groom_path(config, &s.id, 3))?;
            for w in &d.warnings {
                warn!("subject {}: {w}", s.id);
            }
            Ok(GroomRecord {
                id: s.id.clone(),
                transform,
                alignment_converged: converged,
                alignment_distance: distance,
                threshold_used: d.threshold_used,
                areas: d.areas.clone(),
                warnings: d.warnings.clone(),
                distance_histogram: distance_histogram(&d.distances_a, 10),
            })
        })
        .collect();

    let mut manifest = GroomManifest {
        reference: config.subjects[reference].id.clone(),
        subjects: Vec::new(),
        failed: Vec::new(),
    };
    for (s, r) in config.subjects.iter().zip(results) {
        match r {
            Ok(rec) => manifest.subjects.push(rec),
            Err(e) => manifest.failed.push((s.id.clone(), e.to_string())),
        }
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Numerical(e.to_string()))?;
    write_file(&dir.join("transforms.json"), json + "\n")?;
    if manifest.failed.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Subjects(manifest.failed))
    }
}

// ----------------------------------------------------------------- optimize

#[derive(Debug, Clone, Copy, Default)]
pub struct OptimizeOptions {
    /// Continue from `optimize/checkpoint.json`.
    pub resume: bool,
    /// Stop once this splitting level completes (for interrupting runs).
    pub stop_after_level: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    subjects: Vec<String>,
    counts: [usize; 4],
    seed: u64,
    checkpoint: Checkpoint,
    log: Vec<LogRow>,
}

#[derive(Debug, Clone)]
pub struct OptimizeSummary {
    pub last_level: usize,
    pub final_energy: f64,
    /// Stopped on request before the target counts were reached.
    pub stopped: bool,
    pub log_rows: usize,
}

/// Builds the particle system over the groomed domains of every subject.
pub fn load_groomed_system(config: &ProjectConfig) -> Result<ParticleSystem> {
    let shapes: Vec<MultiDomainShape> = config
        .subjects
        .par_iter()
        .map(|s| {
            let missing = |e: Error| Error::Config(format!("subject {}: groom output unavailable ({e}); run groom first", s.id));
            let mut geometry = Vec::with_capacity(4);
            for j in 0..3 {
                let mesh = load_mesh(groom_path(config, &s.id, j)).map_err(missing)?;
                geometry.push(DomainGeometry::surface(SurfaceQuery::new(mesh)));
            }
            let contour = load_contour(groom_path(config, &s.id, 3)).map_err(missing)?;
            geometry.push(DomainGeometry::contour(contour)?);
            Ok(MultiDomainShape::new(s.id.clone(), geometry))
        })
        .collect::<Result<_>>()?;
    let mut system = ParticleSystem::new(config.domain_specs()?, shapes)?;
    system.relative_weighting = config.optimize.relative_weighting;
    system.coupling = config.optimize.coupling;
    system.kernel_neighbors = config.optimize.kernel_neighbors;
    Ok(system)
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    write_csv(
        path,
        &["level", "iteration", "domain", "energy_before", "energy", "mean_displacement", "accepted"],
        log.iter().map(|r| {
            vec![
                r.level.to_string(),
                r.iteration.to_string(),
                DOMAIN_SUFFIXES[r.domain].to_string(),
                r.energy_before.to_string(),
                r.energy.to_string(),
                r.mean_displacement.to_string(),
                r.accepted.to_string(),
            ]
        }),
    )
}

pub fn particles_path(config: &ProjectConfig, id: &str, domain: usize) -> PathBuf {
    config.stage_dir("optimize").join(format!("{id}_{}.particles", DOMAIN_SUFFIXES[domain]))
}

/// Runs the correspondence optimization on the groomed cohort and writes one
/// `.particles` file per subject and domain, the block-update log, and a
/// checkpoint after every completed splitting level.
pub fn optimize_project(config: &ProjectConfig, options: OptimizeOptions) -> Result<OptimizeSummary> {
    let dir = config.stage_dir("optimize");
    create_dir(&dir)?;
    let mut system = load_groomed_system(config)?;
    let params = config.optimize.params();
    let ids: Vec<String> = config.subjects.iter().map(|s| s.id.clone()).collect();
    let counts = config.optimize.particles.as_array();
    let checkpoint_path = dir.join("checkpoint.json");
    let log_path = dir.join("log.csv");

    let (resume, mut log) = if options.resume {
        let text = fs::read_to_string(&checkpoint_path)
            .map_err(|e| Error::Config(format!("cannot resume: {}: {e}", checkpoint_path.display())))?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("corrupt checkpoint: {e}")))?;
        if file.subjects != ids || file.counts != counts || file.seed != params.seed {
            return Err(Error::Config("checkpoint was written for a different subject list, particle counts or seed".into()));
        }
        info!("resuming after level {}", file.checkpoint.level);
        (Some(file.checkpoint), file.log)
    } else {
        (None, Vec::new())
    };

    let mut write_error = None;
    let report = optimize(&mut system, &params, resume, |p| match p {
        Progress::Step(row) => {
            log.push(row.clone());
            ControlFlow::Continue(())
        }
        Progress::LevelDone(cp) => {
            info!("level {} done", cp.level);
            let file = CheckpointFile {
                subjects: ids.clone(),
                counts,
                seed: params.seed,
                checkpoint: cp.clone(),
                log: log.clone(),
            };
            let saved = serde_json::to_string(&file)
                .map_err(|e| Error::Numerical(e.to_string()))
                .and_then(|json| write_file(&checkpoint_path, json))
                .and_then(|_| write_log(&log_path, &log));
            if let Err(e) = saved {
                write_error = Some(e);
                return ControlFlow::Break(());
            }
            if options.stop_after_level == Some(cp.level) {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    write_log(&log_path, &log)?;
    if !report.stopped {
        for (n, s) in system.shapes().iter().enumerate() {
            for j in 0..system.num_domains() {
                save_particles(&s.positions(j), particles_path(config, &ids[n], j))?;
            }
        }
    }
    Ok(OptimizeSummary {
        last_level: report.last_level,
        final_energy: report.final_energy,
        stopped: report.stopped,
        log_rows: log.len(),
    })
}

// ------------------------------------------------------------------ analyze

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub num_subjects: usize,
    pub eigenvalues: Vec<f64>,
    pub cumulative_explained: Vec<f64>,
    pub group_analyses: bool,
    /// Subject whose groomed meshes were warped for the shape exports.
    pub warp_reference: Option<String>,
}

/// Particle rows of every subject, domains concatenated in order.
pub fn load_shape_matrix(config: &ProjectConfig) -> Result<ShapeMatrix> {
    let counts = config.optimize.particles.as_array();
    let rows: Vec<Vec<Point>> = config
        .subjects
        .iter()
        .map(|s| {
            let mut row = Vec::new();
            for (j, &count) in counts.iter().enumerate() {
                let path = particles_path(config, &s.id, j);
                let pts = load_particles(&path)
                    .map_err(|e| Error::Config(format!("subject {}: particles unavailable ({e}); run optimize first", s.id)))?;
                if pts.len() != count {
                    return Err(Error::Config(format!(
                        "subject {}: {} has {} particles, config expects {count}",
                        s.id,
                        path.display(),
                        pts.len()
                    )));
                }
                row.extend(pts);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    ShapeMatrix::from_rows(&rows)
}

fn split_domains(points: &[Point], counts: &[usize; 4]) -> Vec<Vec<Point>> {
    let mut out = Vec::with_capacity(4);
    let mut offset = 0;
    for &c in counts {
        out.push(points[offset..offset + c].to_vec());
        offset += c;
    }
    out
}

fn vector_points(v: &nalgebra::DVector<f64>) -> Vec<Point> {
    (0..v.len() / 3).map(|i| Point::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])).collect()
}

struct ShapeExporter {
    dir: PathBuf,
    counts: [usize; 4],
    // reference subject's groomed surfaces and the spline through its particles
    warp: Option<(Vec<TriangleMesh>, ThinPlateSpline)>,
}

impl ShapeExporter {
    fn export(&self, name: &str, shape: &nalgebra::DVector<f64>) -> Result<()> {
        let points = vector_points(shape);
        for (j, pts) in split_domains(&points, &self.counts).iter().enumerate() {
            save_particles(pts, self.dir.join(format!("{name}_{}.particles", DOMAIN_SUFFIXES[j])))?;
        }
        if let Some((meshes, spline)) = &self.warp {
            let warp = spline.fit(&points)?;
            for (j, mesh) in meshes.iter().enumerate() {
                save_mesh(&warp.apply_mesh(mesh), self.dir.join(format!("{name}_{}.obj", DOMAIN_SUFFIXES[j])))?;
            }
        }
        Ok(())
    }
}

/// PCA, mean and mode-walk exports, and (with two groups) group differences,
/// shape scores and the imbalance test.
pub fn analyze(config: &ProjectConfig) -> Result<AnalyzeSummary> {
    let n = config.subjects.len();
    if n < 2 {
        return Err(Error::Config(format!("analysis needs at least 2 subjects, got {n}")));
    }
    let dir = config.stage_dir("analyze");
    create_dir(&dir)?;
    let z = load_shape_matrix(config)?;
    let counts = config.optimize.particles.as_array();
    let model = pca(&z)?;

    write_csv(
        &dir.join("eigenvalues.csv"),
        &["mode", "eigenvalue", "explained", "cumulative_explained"],
        model.eigenvalues.iter().enumerate().map(|(k, &l)| {
            let total = model.total_variance();
            let explained = if total > 0.0 { l / total } else { 0.0 };
            vec![(k + 1).to_string(), l.to_string(), explained.to_string(), model.cumulative_explained[k].to_string()]
        }),
    )?;

    // warp the subject closest to the mean
    let nearest = (0..n)
        .min_by(|&a, &b| {
            let da = (z.matrix().row(a).transpose() - &model.mean).norm();
            let db = (z.matrix().row(b).transpose() - &model.mean).norm();
            da.total_cmp(&db)
        })
        .expect("n >= 2");
    let ref_id = &config.subjects[nearest].id;
    let meshes: Result<Vec<TriangleMesh>> = (0..3).map(|j| load_mesh(groom_path(config, ref_id, j))).collect();
    let warp = match meshes {
        Ok(meshes) => match ThinPlateSpline::new(&z.points(nearest)) {
            Ok(spline) => Some((meshes, spline)),
            Err(e) => {
                warn!("mesh export skipped: {e}");
                None
            }
        },
        Err(e) => {
            warn!("mesh export skipped, groomed meshes of {ref_id} unavailable: {e}");
            None
        }
    };
    let warp_reference = warp.as_ref().map(|_| ref_id.clone());
    let exporter = ShapeExporter {
        dir: dir.clone(),
        counts,
        warp,
    };
    exporter.export("mean", &model.mean)?;
    for k in 0..model.num_modes().min(4) {
        for sd in [-2.0, -1.0, 1.0, 2.0] {
            exporter.export(&format!("mode{}_{:+}sd", k + 1, sd as i32), &mode_walk(&model, k, sd)?)?;
        }
    }

    let labels = config.group_labels()?;
    let group_analyses = labels.is_some();
    match labels {
        None => warn!("fewer than two groups; group difference, score and imbalance analyses skipped"),
        Some(labels) => group_outputs(config, &dir, &z, &labels, &counts)?,
    }
    Ok(AnalyzeSummary {
        num_subjects: n,
        eigenvalues: model.eigenvalues,
        cumulative_explained: model.cumulative_explained,
        group_analyses,
        warp_reference,
    })
}

fn group_outputs(config: &ProjectConfig, dir: &Path, z: &ShapeMatrix, labels: &[Group], counts: &[usize; 4]) -> Result<()> {
    let name = |g: Group| {
        let i = labels.iter().position(|&l| l == g).expect("both groups present");
        config.subjects[i].group.clone().unwrap_or_default()
    };
    let gd = group_difference(z, labels)?;
    let mean_a = vector_points(&gd.mean_a);
    let mean_b = vector_points(&gd.mean_b);
    let mut rows = Vec::new();
    let mut global = 0;
    for (j, &c) in counts.iter().enumerate() {
        for i in 0..c {
            let (a, b, d) = (mean_a[global], mean_b[global], gd.difference_vectors[global]);
            let mut row = vec![DOMAIN_SUFFIXES[j].to_string(), i.to_string()];
            row.extend([a.x, a.y, a.z, b.x, b.y, b.z, d.x, d.y, d.z, gd.magnitudes[global]].map(|v| v.to_string()));
            rows.push(row);
            global += 1;
        }
    }
    write_csv(
        &dir.join("group_difference.csv"),
        &["domain", "particle", "mean_a_x", "mean_a_y", "mean_a_z", "mean_b_x", "mean_b_y", "mean_b_z", "dx", "dy", "dz", "magnitude"],
        rows,
    )?;

    if gd.magnitudes.iter().all(|&m| m == 0.0) {
        warn!("group means coincide; score and imbalance analyses skipped");
        return Ok(());
    }
    let scores = shape_score(z, labels)?;
    let group_name = |g: Group| if g == Group::A { name(Group::A) } else { name(Group::B) };
    write_csv(
        &dir.join("scores.csv"),
        &["subject", "group", "score"],
        config
            .subjects
            .iter()
            .zip(&scores.scores)
            .zip(labels)
            .map(|((s, score), &g)| vec![s.id.clone(), group_name(g), score.to_string()]),
    )?;

    let a = &config.analyze;
    let smaller = labels.iter().filter(|&&g| g == Group::A).count().min(labels.iter().filter(|&&g| g == Group::B).count());
    let params = ImbalanceParams {
        trials: a.trials,
        subsample: a.subsample.unwrap_or(smaller),
        alpha: a.alpha,
        seed: a.seed,
    };
    let results = imbalance_test(z, labels, &params)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    write_csv(
        &dir.join("imbalance.csv"),
        &["subject", "group", "full_score", "mean", "std_dev", "min", "max", "t", "p_value", "exact_match", "significant"],
        config.subjects.iter().zip(&results).zip(labels).map(|((s, r), &g)| {
            vec![
                s.id.clone(),
                group_name(g),
                r.full_score.to_string(),
                r.mean.to_string(),
                r.std_dev.to_string(),
                r.min.to_string(),
                r.max.to_string(),
                opt(r.t),
                opt(r.p_value),
                r.exact_match.to_string(),
                r.significant.to_string(),
            ]
        }),
    )
}

// -------------------------------------------------------------------- synth

/// Writes a synthetic cohort into `dir` (`meshes/<id>_a.obj`,
/// `meshes/<id>_b.obj`, `labels.csv`) together with a ready-to-run
/// `project.toml`, and returns the project file's path.
pub fn synth(params: &SynthParams, dir: &Path) -> Result<PathBuf> {
    let cohort = synth_cohort(params)?;
    let meshes = dir.join("meshes");
    create_dir(&meshes)?;
    let mut subjects = Vec::with_capacity(cohort.len());
    for s in &cohort {
        let (a, b) = (format!("meshes/{}_a.obj", s.id), format!("meshes/{}_b.obj", s.id));
        save_mesh(&s.organ_a, dir.join(&a))?;
        save_mesh(&s.organ_b, dir.join(&b))?;
        subjects.push(SubjectConfig {
            id: s.id.clone(),
            organ_a: a.into(),
            organ_b: b.into(),
            group: Some(if s.group == Group::A { "low" } else { "high" }.to_string()),
        });
    }
    write_csv(
        &dir.join("labels.csv"),
        &["subject", "parameter", "group"],
        cohort
            .iter()
            .zip(&subjects)
            .map(|(s, c)| vec![s.id.clone(), s.parameter.to_string(), c.group.clone().unwrap_or_default()]),
    )?;
    let config = ProjectConfig {
        output_dir: PathBuf::from("results"),
        groom: GroomConfig {
            remesh_edge_length: 0.1,
            smooth_iterations: default_smooth_iterations(),
            shared_threshold: match params.kind {
                SynthKind::TwoBox => 1e-3,
                SynthKind::TwoEllipsoid | SynthKind::CurvedSeptum => 1e-2,
            },
            reference: None,
        },
        optimize: OptimizeConfig {
            // the contour is sampled at about half the shared surface's
            // spacing; sparser contours let surface particles settle on it
            particles: ParticleCounts {
                organ_a: 128,
                shared: 64,
                organ_b: 128,
                contour: 64,
            },
            seed: params.seed,
            ..OptimizeConfig::default()
        },
        analyze: AnalyzeConfig {
            seed: params.seed,
            groups: Some(["low".to_string(), "high".to_string()]),
            ..AnalyzeConfig::default()
        },
        subjects,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("project.toml");
    write_file(&path, config.to_toml_string()?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn project(dir: &Path, extra: &str, subjects: &[(&str, Option<&str>)]) -> Result<ProjectConfig> {
        fs::write(dir.join("a.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let mut text = format!("[groom]\nremesh_edge_length = 0.1\nshared_threshold = 0.001\n{extra}\n");
        for (id, group) in subjects {
            text += &format!("[[subjects]]\nid = \"{id}\"\norgan_a = \"a.obj\"\norgan_b = \"a.obj\"\n");
            if let Some(g) = group {
                text += &format!("group = \"{g}\"\n");
            }
        }
        ProjectConfig::from_toml_str(&text, dir)
    }

    #[test]
    fn defaults_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = project(dir.path(), "", &[("s1", None), ("s2", None)]).unwrap();
        assert_eq!(c.groom.smooth_iterations, 2);
        assert_eq!(c.optimize.particles.as_array(), [512, 64, 512, 64]);
        assert_eq!(c.output_root(), dir.path().join("output"));
        assert_eq!(c.group_labels().unwrap(), None);
        let again = ProjectConfig::from_toml_str(&c.to_toml_string().unwrap(), dir.path()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let two = [("s1", None), ("s2", None)];
        let is_config = |r: Result<ProjectConfig>| matches!(r, Err(Error::Config(_)));
        assert!(is_config(project(dir.path(), "[optimize.particles]\norgan_a = 100", &two)));
        assert!(is_config(project(dir.path(), "[optimize]\nunknown_key = 1", &two)));
        assert!(is_config(project(dir.path(), "[analyze]\nalpha = 1.5", &two)));
        assert!(is_config(project(dir.path(), "", &[("s1", None), ("s1", None)])));
        assert!(is_config(project(dir.path(), "", &[("bad id", None)])));
        assert!(is_config(project(dir.path(), "", &[])));

        fs::write(dir.path().join("x.toml"), "[groom]\nremesh_edge_length = 0.1\nshared_threshold = 0.001\n[[subjects]]\nid = \"s9\"\norgan_a = \"nope.obj\"\norgan_b = \"nope.obj\"\n").unwrap();
        match ProjectConfig::load(dir.path().join("x.toml")) {
            Err(Error::Config(msg)) => assert!(msg.contains("s9") && msg.contains("nope.obj"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn group_labels_follow_first_appearance_or_explicit_order() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = [("s1", Some("y")), ("s2", Some("x")), ("s3", Some("y"))];
        let c = project(dir.path(), "", &subjects).unwrap();
        assert_eq!(c.group_labels().unwrap(), Some(vec![Group::A, Group::B, Group::A]));
        let c = project(dir.path(), "[analyze]\ngroups = [\"x\", \"y\"]", &subjects).unwrap();
        assert_eq!(c.group_labels().unwrap(), Some(vec![Group::B, Group::A, Group::B]));

        assert!(project(dir.path(), "[analyze]\ngroups = [\"x\", \"z\"]", &subjects).is_err());
        assert!(project(dir.path(), "", &[("s1", Some("x")), ("s2", None)]).is_err());
        assert!(project(dir.path(), "", &[("s1", Some("x")), ("s2", Some("y")), ("s3", Some("z"))]).is_err());
        let one = project(dir.path(), "", &[("s1", Some("x")), ("s2", Some("x"))]).unwrap();
        assert_eq!(one.group_labels().unwrap(), None);
    }
}
