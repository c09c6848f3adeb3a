//! Rigid transforms and centroid-anchored iterative-closest-point alignment.

use nalgebra::{Matrix3, Rotation3, Unit};
use serde::{Deserialize, Serialize};

use super::{Point, SurfaceQuery, TriangleMesh};
use crate::error::{Error, Result};

/// `p -> rotation * p + translation`, with `rotation` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Point,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Point::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1 (to 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Point) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "rotation matrix is not a proper rotation".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Point) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` through the origin, then `translation`.
    pub fn from_axis_angle(axis: &Point, angle: f64, translation: Point) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *r.matrix(),
            translation,
        }
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Point) -> Point {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in degrees.
    pub fn angle_degrees(&self) -> f64 {
        rotation_angle(&self.rotation).to_degrees()
    }
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[derive(Debug, Clone)]
pub struct AlignOptions {
    pub max_iterations: usize,
    /// Stop once the per-iteration rotation update is below this angle (radians).
    pub angle_tolerance: f64,
    /// Drop correspondences farther apart than this (mm); `None` keeps all.
    pub rejection_distance: Option<f64>,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            angle_tolerance: 1e-10,
            rejection_distance: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub transform: RigidTransform,
    pub converged: bool,
    pub iterations: usize,
    /// Mean closest-point distance of the transformed moving vertices.
    pub mean_distance: f64,
}

/// Best rotation `R` minimizing `Σ |R a_i - b_i|²` for already-centered pairs.
pub(crate) fn kabsch(pairs: &[(Point, Point)]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (a, b) in pairs {
        h += a * b.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Point::new(1.0, 1.0, d));
    v * fix * u.transpose()
}

/// Aligns `moving` to `reference`: vertex centroids are matched exactly and
/// the rotation about them is refined by ICP against the reference surface,
/// solving an orthogonal Procrustes problem at every iteration.
///
/// On non-convergence the best transform seen is returned with `converged = false`.
pub fn rigid_align(
    moving: &TriangleMesh,
    reference: &TriangleMesh,
    options: &AlignOptions,
) -> Result<Alignment> {
    if moving.num_vertices() == 0 || reference.is_empty() {
        return Err(Error::InvalidArgument("rigid_align needs non-empty meshes".into()));
    }
    let cm = moving.vertex_centroid();
    let cr = reference.vertex_centroid();
    let query = SurfaceQuery::new(reference.clone());
    let centered: Vec<Point> = moving.vertices().iter().map(|v| v - cm).collect();

    let mut rotation = Matrix3::identity();
    let mut best = (f64::INFINITY, rotation);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..options.max_iterations {
        iterations = it + 1;
        let mut pairs = Vec::with_capacity(centered.len());
        let mut total = 0.0;
        for a in &centered {
            let p = rotation * a + cr;
            let (sp, d) = query.closest_point(&p).expect("non-empty reference");
            total += d;
            if options.rejection_distance.is_none_or(|r| d <= r) {
                pairs.push((*a, sp.position - cr));
            }
        }
        let mean = total / centered.len() as f64;
        if mean < best.0 {
            best = (mean, rotation);
        }
        if pairs.len() < 3 {
            break;
        }
        let next = kabsch(&pairs);
        let delta = rotation_angle(&(next * rotation.transpose()));
        rotation = next;
        if delta < options.angle_tolerance {
            converged = true;
            break;
        }
    }
    // score the final rotation too
    let final_mean = centered
        .iter()
        .map(|a| query.distance(&(rotation * a + cr)))
        .sum::<f64>()
        / centered.len() as f64;
    if final_mean <= best.0 {
        best = (final_mean, rotation);
    }
    let (mean_distance, rotation) = best;
    Ok(Alignment {
        transform: RigidTransform {
            rotation,
            translation: cr - rotation * cm,
        },
        converged,
        iterations,
        mean_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives;
    use proptest::prelude::*;

    fn asymmetric_shape() -> TriangleMesh {
        // a box with one bulged corner: no rotational symmetry
        let b = primitives::subdivided_box(Point::new(-1.0, -0.6, -0.3), Point::new(1.0, 0.6, 0.3), 6);
        b.with_vertices(
            b.vertices()
                .iter()
                .map(|p| {
                    let w = ((p.x + 1.0) * (p.y + 0.6)).max(0.0);
                    p + Point::new(0.0, 0.0, 0.15 * w * w)
                })
                .collect(),
        )
    }

    #[test]
    fn self_alignment_is_identity() {
        let m = asymmetric_shape();
        let a = rigid_align(&m, &m, &AlignOptions::default()).unwrap();
        assert!((a.transform.rotation - Matrix3::identity()).abs().max() < 1e-6);
        assert!(a.transform.translation.norm() < 1e-6);
        assert!(a.converged);
    }

    #[test]
    fn recovers_translation() {
        let m = asymmetric_shape();
        let moved = m.transformed(&RigidTransform::from_translation(Point::new(5.0, 0.0, 0.0)));
        let a = rigid_align(&moved, &m, &AlignOptions::default()).unwrap();
        assert!((a.transform.translation - Point::new(-5.0, 0.0, 0.0)).norm() < 1e-4);
        assert!((a.transform.rotation - Matrix3::identity()).abs().max() < 1e-4);
    }

    #[test]
    fn recovers_ten_degree_rotation() {
        let m = asymmetric_shape();
        let t = RigidTransform::from_axis_angle(&Point::z(), 10f64.to_radians(), Point::zeros());
        let moved = m.transformed(&t);
        let a = rigid_align(&moved, &m, &AlignOptions::default()).unwrap();
        let err = a.transform.compose(&t);
        assert!(err.angle_degrees() < 0.1, "{}", err.angle_degrees());
    }

    #[test]
    fn centroids_coincide_after_alignment() {
        let m = asymmetric_shape();
        let other = primitives::icosphere(0.8, 2);
        let other = other.transformed(&RigidTransform::from_translation(Point::new(0.3, -2.0, 1.0)));
        let a = rigid_align(&other, &m, &AlignOptions::default()).unwrap();
        let c = other.transformed(&a.transform).vertex_centroid();
        assert!((c - m.vertex_centroid()).norm() < 1e-6);
    }

    #[test]
    fn apply_transform_basics() {
        let m = asymmetric_shape();
        assert_eq!(m.transformed(&RigidTransform::identity()), m);
        let t = Point::new(1.0, -2.0, 0.5);
        let shifted = m.transformed(&RigidTransform::from_translation(t));
        assert!((shifted.vertex_centroid() - m.vertex_centroid() - t).norm() < 1e-12);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(RigidTransform::new(r, Point::zeros()).is_err());
        assert!(RigidTransform::new(r * 1.1, Point::zeros()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn transforms_are_isometries(ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in 0.1..1.0f64,
                                     angle in -3.0..3.0f64, tx in -5.0..5.0f64) {
            let t = RigidTransform::from_axis_angle(&Point::new(ax, ay, az), angle, Point::new(tx, 1.0, -2.0));
            let rt = t.rotation.transpose() * t.rotation;
            prop_assert!((rt - Matrix3::identity()).abs().max() < 1e-9);
            let id = t.compose(&t.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
            let m = primitives::icosphere(1.0, 1);
            let moved = m.transformed(&t);
            for ((a, b), (c, d)) in m.edges().iter().map(|&(a, b)| (m.vertices()[a], m.vertices()[b]))
                .zip(m.edges().iter().map(|&(a, b)| (moved.vertices()[a], moved.vertices()[b]))) {
                prop_assert!(((a - b).norm() - (c - d).norm()).abs() < 1e-9);
            }
        }
    }
}
