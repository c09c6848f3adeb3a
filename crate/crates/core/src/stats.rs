//! Population statistics over a [`ShapeMatrix`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::mesh::{Point, TriangleMesh};
use crate::particles::ShapeMatrix;

/// Group membership. Group A is calibrated to a score of -1, group B to +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

pub fn mean_shape(z: &ShapeMatrix) -> DVector<f64> {
    z.matrix().row_mean().transpose()
}

#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// Orthonormal modes, one column per retained component.
    pub modes: DMatrix<f64>,
    /// All `N - 1` variances, descending. Entries past `modes.ncols()` are
    /// numerically zero.
    pub eigenvalues: Vec<f64>,
    pub cumulative_explained: Vec<f64>,
}

impl PcaModel {
    pub fn num_modes(&self) -> usize {
        self.modes.ncols()
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Mode coefficients of a shape vector.
    pub fn project(&self, shape: &DVector<f64>) -> DVector<f64> {
        self.modes.tr_mul(&(shape - &self.mean))
    }

    pub fn reconstruct(&self, coefficients: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.modes * coefficients
    }
}

/// PCA of the sample covariance through the `N x N` dual. Modes whose
/// variance is below `1e-12` of the total are dropped.
pub fn pca(z: &ShapeMatrix) -> Result<PcaModel> {
    let n = z.num_shapes();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 shapes, got {n}")));
    }
    let mean = mean_shape(z);
    let (g, y) = crate::particles::gram_matrix(z.matrix());
    let eig = SymmetricEigen::new(g.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order[..n - 1].iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let trace = g.trace();
    let keep = eigenvalues.iter().take_while(|&&l| trace > 0.0 && l > 1e-12 * trace).count();

    let mut modes = DMatrix::zeros(z.matrix().ncols(), keep);
    for (c, &k) in order[..keep].iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut u = y.tr_mul(&v);
        // modified Gram-Schmidt against the modes already accepted
        for prev in 0..c {
            let p = modes.column(prev).clone_owned();
            u -= &p * p.dot(&u);
        }
        let norm = u.norm();
        modes.set_column(c, &(u / norm));
    }

    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    let cumulative_explained = eigenvalues
        .iter()
        .map(|l| {
            acc += l;
            if total > 0.0 {
                (acc / total).min(1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(PcaModel {
        mean,
        modes,
        eigenvalues,
        cumulative_explained,
    })
}

/// `mean + std_devs * sqrt(lambda_k) * mode_k`.
pub fn mode_walk(model: &PcaModel, mode: usize, std_devs: f64) -> Result<DVector<f64>> {
    if mode >= model.num_modes() {
        return Err(Error::InvalidArgument(format!(
            "mode {mode} requested, model has {}",
            model.num_modes()
        )));
    }
    Ok(&model.mean + model.modes.column(mode) * (std_devs * model.eigenvalues[mode].sqrt()))
}

#[derive(Debug, Clone)]
pub struct GroupDifference {
    pub mean_a: DVector<f64>,
    pub mean_b: DVector<f64>,
    /// `mean_b - mean_a` per particle.
    pub difference_vectors: Vec<Point>,
    pub magnitudes: Vec<f64>,
}

fn check_labels(z: &ShapeMatrix, labels: &[Group]) -> Result<()> {
    if labels.len() != z.num_shapes() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} shapes",
            labels.len(),
            z.num_shapes()
        )));
    }
    for g in [Group::A, Group::B] {
        if !labels.contains(&g) {
            return Err(Error::InvalidArgument(format!("group {g:?} is empty")));
        }
    }
    Ok(())
}

// Mean of the listed rows, summed in the given order.
fn rows_mean(m: &DMatrix<f64>, rows: &[usize]) -> DVector<f64> {
    let mut acc = DVector::zeros(m.ncols());
    for &r in rows {
        acc += m.row(r).transpose();
    }
    acc / rows.len() as f64
}

fn group_rows(labels: &[Group], g: Group) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == g).collect()
}

pub fn group_difference(z: &ShapeMatrix, labels: &[Group]) -> Result<GroupDifference> {
    check_labels(z, labels)?;
    let mean_a = rows_mean(z.matrix(), &group_rows(labels, Group::A));
    let mean_b = rows_mean(z.matrix(), &group_rows(labels, Group::B));
    let difference_vectors: Vec<Point> = (0..z.num_particles())
        .map(|i| {
            Point::new(
                mean_b[3 * i] - mean_a[3 * i],
                mean_b[3 * i + 1] - mean_a[3 * i + 1],
                mean_b[3 * i + 2] - mean_a[3 * i + 2],
            )
        })
        .collect();
    let magnitudes = difference_vectors.iter().map(|d| d.norm()).collect();
    Ok(GroupDifference {
        mean_a,
        mean_b,
        difference_vectors,
        magnitudes,
    })
}

/// Linear discriminant along the group-mean difference, calibrated so the
/// group-A mean scores -1 and the group-B mean +1.
#[derive(Debug, Clone)]
pub struct ScoreAxis {
    midpoint: DVector<f64>,
    direction: DVector<f64>,
    half_length: f64,
}

impl ScoreAxis {
    pub fn from_means(mean_a: &DVector<f64>, mean_b: &DVector<f64>) -> Result<Self> {
        let d = mean_b - mean_a;
        let len = d.norm();
        if !(len > 0.0) {
            return Err(Error::Numerical("group means coincide; the score direction is undefined".into()));
        }
        Ok(Self {
            midpoint: (mean_a + mean_b) * 0.5,
            direction: d / len,
            half_length: 0.5 * len,
        })
    }

    pub fn score(&self, shape: &DVector<f64>) -> f64 {
        (shape - &self.midpoint).dot(&self.direction) / self.half_length
    }
}

#[derive(Debug, Clone)]
pub struct ShapeScore {
    pub scores: Vec<f64>,
    pub labels: Vec<Group>,
    pub axis: ScoreAxis,
}

pub fn shape_score(z: &ShapeMatrix, labels: &[Group]) -> Result<ShapeScore> {
    check_labels(z, labels)?;
    let m = z.matrix();
    let axis = ScoreAxis::from_means(
        &rows_mean(m, &group_rows(labels, Group::A)),
        &rows_mean(m, &group_rows(labels, Group::B)),
    )?;
    let scores = (0..z.num_shapes()).map(|r| axis.score(&m.row(r).transpose())).collect();
    Ok(ShapeScore {
        scores,
        labels: labels.to_vec(),
        axis,
    })
}

/// One-sample t statistic of `samples` against `mu0`, or `None` when the
/// samples have zero variance (or fewer than two samples).
pub fn t_statistic(samples: &[f64], mu0: f64) -> Option<f64> {
    let n = samples.len();
    if n < 2 || samples.iter().all(|&s| s == samples[0]) {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean - mu0) / (var / n as f64).sqrt())
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceParams {
    pub trials: usize,
    /// Members drawn from the larger group per trial.
    pub subsample: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl ImbalanceParams {
    pub fn new(subsample: usize) -> Self {
        Self {
            trials: 1000,
            subsample,
            alpha: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceResult {
    pub full_score: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    /// `None` when every trial produced the same score.
    pub t: Option<f64>,
    pub p_value: Option<f64>,
    /// All trial scores identical to each other and to the full-data score.
    pub exact_match: bool,
    pub significant: bool,
}

/// For each trial, rebuild the score axis from `subsample` random members of
/// the larger group plus the whole smaller group, and score every shape. Each
/// shape's trial scores are then t-tested (two-sided, one-sample) against its
/// full-data score.
pub fn imbalance_test(z: &ShapeMatrix, labels: &[Group], params: &ImbalanceParams) -> Result<Vec<ImbalanceResult>> {
    check_labels(z, labels)?;
    if params.trials < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 trials, got {}", params.trials)));
    }
    let rows_a = group_rows(labels, Group::A);
    let rows_b = group_rows(labels, Group::B);
    let a_is_larger = rows_a.len() >= rows_b.len();
    let (larger, smaller) = if a_is_larger { (&rows_a, &rows_b) } else { (&rows_b, &rows_a) };
    if params.subsample == 0 || params.subsample > larger.len() {
        return Err(Error::InvalidArgument(format!(
            "subsample must be in 1..={}, got {}",
            larger.len(),
            params.subsample
        )));
    }
    let full = shape_score(z, labels)?.scores;
    let m = z.matrix();
    let smaller_mean = rows_mean(m, smaller);

    let trials: Vec<Vec<f64>> = (0..params.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, larger.len(), params.subsample)
                .into_iter()
                .map(|k| larger[k])
                .collect();
            picked.sort_unstable();
            let larger_mean = rows_mean(m, &picked);
            let axis = if a_is_larger {
                ScoreAxis::from_means(&larger_mean, &smaller_mean)
            } else {
                ScoreAxis::from_means(&smaller_mean, &larger_mean)
            }?;
            Ok((0..m.nrows()).map(|r| axis.score(&m.row(r).transpose())).collect())
        })
        .collect::<Result<_>>()?;

    let df = (params.trials - 1) as f64;
    Ok((0..m.nrows())
        .map(|r| {
            let samples: Vec<f64> = trials.iter().map(|s| s[r]).collect();
            let t = t_statistic(&samples, full[r]);
            let n = samples.len() as f64;
            let mean = if t.is_none() { samples[0] } else { samples.iter().sum::<f64>() / n };
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let p_value = t.map(|t| two_sided_p(t, df));
            ImbalanceResult {
                full_score: full[r],
                mean,
                std_dev: var.sqrt(),
                min: samples.iter().copied().fold(f64::INFINITY, f64::min),
                max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                t,
                p_value,
                exact_match: t.is_none() && samples.iter().all(|&s| s == full[r]),
                significant: p_value.is_some_and(|p| p < params.alpha),
            }
        })
        .collect())
}

/// Largest distance of `points` from their least-squares plane.
pub fn max_plane_deviation(points: &[Point]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let c = points.iter().sum::<Point>() / points.len() as f64;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    points.iter().map(|p| (p - c).dot(&normal).abs()).fold(0.0, f64::max)
}

/// 3-D thin-plate spline (kernel `|r|` plus an affine part) through a fixed
/// set of source landmarks. The landmark system is factored once, so many
/// target configurations can be fitted cheaply.
pub struct ThinPlateSpline {
    landmarks: Vec<Point>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// A fitted warp carrying the spline's landmarks onto one target configuration.
pub struct Warp<'a> {
    spline: &'a ThinPlateSpline,
    coefficients: DMatrix<f64>,
}

impl ThinPlateSpline {
    /// Fails on fewer than four landmarks or when they are coplanar or repeated.
    pub fn new(landmarks: &[Point]) -> Result<Self> {
        let n = landmarks.len();
        if n < 4 {
            return Err(Error::InvalidArgument(format!("thin-plate spline needs at least 4 landmarks, got {n}")));
        }
        let mut a = DMatrix::zeros(n + 4, n + 4);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = (landmarks[i] - landmarks[j]).norm();
            }
            for k in 0..3 {
                a[(i, n + k)] = landmarks[i][k];
                a[(n + k, i)] = landmarks[i][k];
            }
            a[(i, n + 3)] = 1.0;
            a[(n + 3, i)] = 1.0;
        }
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::Numerical("landmarks are degenerate (coincident or coplanar)".into()));
        }
        Ok(Self {
            landmarks: landmarks.to_vec(),
            lu,
        })
    }

    pub fn fit(&self, targets: &[Point]) -> Result<Warp<'_>> {
        let n = self.landmarks.len();
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!("{} targets for {n} landmarks", targets.len())));
        }
        let mut rhs = DMatrix::zeros(n + 4, 3);
        for (i, (t, s)) in targets.iter().zip(&self.landmarks).enumerate() {
            for k in 0..3 {
                rhs[(i, k)] = t[k] - s[k];
            }
        }
        let coefficients = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("thin-plate spline solve failed".into()))?;
        Ok(Warp {
            spline: self,
            coefficients,
        })
    }
}

impl Warp<'_> {
    pub fn apply(&self, p: &Point) -> Point {
        let c = &self.coefficients;
        let n = self.spline.landmarks.len();
        let mut d = Point::zeros();
        for (i, l) in self.spline.landmarks.iter().enumerate() {
            let r = (p - l).norm();
            for k in 0..3 {
                d[k] += c[(i, k)] * r;
            }
        }
        for k in 0..3 {
            d[k] += c[(n, k)] * p.x + c[(n + 1, k)] * p.y + c[(n + 2, k)] * p.z + c[(n + 3, k)];
        }
        p + d
    }

    pub fn apply_mesh(&self, mesh: &TriangleMesh) -> TriangleMesh {
        mesh.with_vertices(mesh.vertices().par_iter().map(|v| self.apply(v)).collect())
    }
}
