//! Python module `ssm`: the project pipeline, shared-boundary extraction on
//! mesh files, and the shape statistics on plain nested lists.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ssm_core::mesh::{load_mesh, save_contour, save_mesh, Point};
use ssm_core::particles::ShapeMatrix;
use ssm_core::project::{self, OptimizeOptions, ProjectConfig};
use ssm_core::shared_boundary::{extract_shared_boundary, SharedBoundaryParams};
use ssm_core::stats::{self, Group, ImbalanceParams};
use ssm_core::synth::SynthParams;

fn to_py(e: ssm_core::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn shape_matrix(shapes: Vec<Vec<[f64; 3]>>) -> PyResult<ShapeMatrix> {
    let rows: Vec<Vec<Point>> = shapes.into_iter().map(|s| s.into_iter().map(Point::from).collect()).collect();
    ShapeMatrix::from_rows(&rows).map_err(to_py)
}

fn group_labels(labels: &[bool]) -> Vec<Group> {
    labels.iter().map(|&b| if b { Group::B } else { Group::A }).collect()
}

/// Writes a synthetic cohort into `output` and returns the project file path.
#[pyfunction]
#[pyo3(signature = (output, kind = "two-box", count = 8, seed = 0, range = None))]
fn synth(output: PathBuf, kind: &str, count: usize, seed: u64, range: Option<(f64, f64)>) -> PyResult<String> {
    let params = SynthParams {
        kind: kind.parse().map_err(to_py)?,
        count,
        seed,
        range,
        ..SynthParams::default()
    };
    let path = project::synth(&params, &output).map_err(to_py)?;
    Ok(path.display().to_string())
}

/// Grooms the project's subjects; returns the reference subject id.
#[pyfunction]
fn groom(config: PathBuf) -> PyResult<String> {
    let config = ProjectConfig::load(config).map_err(to_py)?;
    Ok(project::groom(&config).map_err(to_py)?.reference)
}

/// Runs the particle optimization; returns the final energy.
#[pyfunction]
#[pyo3(signature = (config, resume = false))]
fn optimize(config: PathBuf, resume: bool) -> PyResult<f64> {
    let config = ProjectConfig::load(config).map_err(to_py)?;
    let options = OptimizeOptions {
        resume,
        stop_after_level: None,
    };
    Ok(project::optimize_project(&config, options).map_err(to_py)?.final_energy)
}

/// Runs the analyses; returns `(eigenvalues, cumulative explained variance)`.
#[pyfunction]
fn analyze(config: PathBuf) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let config = ProjectConfig::load(config).map_err(to_py)?;
    let s = project::analyze(&config).map_err(to_py)?;
    Ok((s.eigenvalues, s.cumulative_explained))
}

/// Splits two touching meshes into `<prefix>_Ar.obj`, `_M.obj`, `_Br.obj`
/// and `_C.contour` and returns the area ledger.
#[pyfunction]
#[pyo3(signature = (organ_a, organ_b, prefix, threshold, edge_length, smooth_iterations = 2))]
fn split_shared_boundary(
    organ_a: PathBuf,
    organ_b: PathBuf,
    prefix: String,
    threshold: f64,
    edge_length: f64,
    smooth_iterations: usize,
) -> PyResult<HashMap<&'static str, f64>> {
    let a = load_mesh(organ_a).map_err(to_py)?;
    let b = load_mesh(organ_b).map_err(to_py)?;
    let params = SharedBoundaryParams::new(threshold, edge_length, smooth_iterations);
    let d = extract_shared_boundary(&a, &b, &params).map_err(to_py)?;
    for (suffix, mesh) in [("Ar", &d.remainder_a), ("M", &d.shared), ("Br", &d.remainder_b)] {
        save_mesh(mesh, format!("{prefix}_{suffix}.obj")).map_err(to_py)?;
    }
    save_contour(&d.contour, format!("{prefix}_C.contour")).map_err(to_py)?;
    let l = &d.areas;
    Ok(HashMap::from([
        ("remeshed_a", l.remeshed_a),
        ("shared_a", l.shared_a),
        ("remainder_a", l.remainder_a),
        ("remeshed_b", l.remeshed_b),
        ("shared_b", l.shared_b),
        ("remainder_b", l.remainder_b),
        ("shared_area", d.shared.area()),
        ("contour_length", d.contour.perimeter()),
    ]))
}

/// PCA of `shapes` (one list of `[x, y, z]` per subject); returns
/// `(eigenvalues, cumulative explained variance)`.
#[pyfunction]
fn pca(shapes: Vec<Vec<[f64; 3]>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let model = stats::pca(&shape_matrix(shapes)?).map_err(to_py)?;
    Ok((model.eigenvalues, model.cumulative_explained))
}

/// Scores on the axis through the two group means (`False` group at -1,
/// `True` group at +1).
#[pyfunction]
fn shape_scores(shapes: Vec<Vec<[f64; 3]>>, in_second_group: Vec<bool>) -> PyResult<Vec<f64>> {
    let z = shape_matrix(shapes)?;
    Ok(stats::shape_score(&z, &group_labels(&in_second_group)).map_err(to_py)?.scores)
}

/// Subsampling test of each shape's score; returns `(mean score, p value)`
/// per shape, with `None` where every trial gave the same score.
#[pyfunction]
#[pyo3(signature = (shapes, in_second_group, trials = 1000, subsample = None, alpha = 0.01, seed = 0))]
fn imbalance_test(
    shapes: Vec<Vec<[f64; 3]>>,
    in_second_group: Vec<bool>,
    trials: usize,
    subsample: Option<usize>,
    alpha: f64,
    seed: u64,
) -> PyResult<Vec<(f64, Option<f64>)>> {
    let z = shape_matrix(shapes)?;
    let labels = group_labels(&in_second_group);
    let smaller = in_second_group.iter().filter(|&&b| b).count().min(in_second_group.iter().filter(|&&b| !b).count());
    let params = ImbalanceParams {
        trials,
        subsample: subsample.unwrap_or(smaller),
        alpha,
        seed,
    };
    let results = stats::imbalance_test(&z, &labels, &params).map_err(to_py)?;
    Ok(results.into_iter().map(|r| (r.mean, r.p_value)).collect())
}

#[pymodule]
fn ssm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(groom, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(split_shared_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(pca, m)?)?;
    m.add_function(wrap_pyfunction!(shape_scores, m)?)?;
    m.add_function(wrap_pyfunction!(imbalance_test, m)?)?;
    Ok(())
}
