//! Synthetic two-organ cohorts: pairs of solids that meet along a common wall
//! whose size or curvature follows a generating parameter.
//!
//! Both solids of a subject are built from lattice blocks that share their
//! wall lattice, so the contact faces coincide exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Point, RigidTransform, TriangleMesh};
use crate::primitives::lattice_box;
use crate::stats::Group;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Two boxes `[-1,0] x [-s,s]^2` and `[0,1] x [-s,s]^2`, `s = 0.5 + 0.1 t`.
    TwoBox,
    /// Two half-ellipsoids joined at a disk of radius `1 + 0.25 t`.
    TwoEllipsoid,
    /// A box `[-1,1]^3` cut by the wall `x = t (1 - y^2)(1 - z^2)`.
    CurvedSeptum,
}

impl SynthKind {
    pub fn default_range(self) -> (f64, f64) {
        match self {
            SynthKind::TwoBox | SynthKind::TwoEllipsoid => (-1.0, 1.0),
            SynthKind::CurvedSeptum => (-0.3, 0.3),
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-box" => Ok(SynthKind::TwoBox),
            "two-ellipsoid" => Ok(SynthKind::TwoEllipsoid),
            "curved-septum" => Ok(SynthKind::CurvedSeptum),
            other => Err(Error::InvalidArgument(format!(
                "unknown cohort kind {other:?} (expected two-box, two-ellipsoid or curved-septum)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub count: usize,
    pub seed: u64,
    /// Generating-parameter range; `None` uses the kind's default.
    pub range: Option<(f64, f64)>,
    /// Upper bound of the random rotation applied to each subject (degrees).
    pub max_rotation_deg: f64,
    /// Upper bound of each random translation component.
    pub max_translation: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            kind: SynthKind::TwoBox,
            count: 4,
            seed: 0,
            range: None,
            max_rotation_deg: 5.0,
            max_translation: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub id: String,
    pub parameter: f64,
    pub group: Group,
    pub organ_a: TriangleMesh,
    pub organ_b: TriangleMesh,
}

/// Subject `k` draws its parameter from the `k`-th of `count` equal strata
/// of the range, so the cohort spans the range for any seed. Subjects below
/// the middle of the range are group A, the rest group B.
pub fn synth_cohort(params: &SynthParams) -> Result<Vec<SynthSubject>> {
    if params.count == 0 {
        return Err(Error::InvalidArgument("cohort count must be at least 1".into()));
    }
    let (lo, hi) = params.range.unwrap_or_else(|| params.kind.default_range());
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("bad parameter range [{lo}, {hi}]")));
    }
    let mid = 0.5 * (lo + hi);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..params.count)
        .map(|k| {
            let u: f64 = rng.random();
            let t = lo + (hi - lo) * (k as f64 + u) / params.count as f64;
            let (a, b) = synth_pair(params.kind, t)?;
            let pose = random_pose(&mut rng, params.max_rotation_deg, params.max_translation);
            Ok(SynthSubject {
                id: format!("subject_{k:02}"),
                parameter: t,
                group: if t < mid { Group::A } else { Group::B },
                organ_a: a.transformed(&pose),
                organ_b: b.transformed(&pose),
            })
        })
        .collect()
}

fn random_pose(rng: &mut ChaCha8Rng, max_rotation_deg: f64, max_translation: f64) -> RigidTransform {
    let axis = loop {
        let v = Point::new(rng.random(), rng.random(), rng.random()) * 2.0 - Point::repeat(1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let angle = rng.random::<f64>() * max_rotation_deg.to_radians();
    let translation = (Point::new(rng.random(), rng.random(), rng.random()) * 2.0 - Point::repeat(1.0)) * max_translation;
    RigidTransform::from_axis_angle(&axis, angle, translation)
}

/// The two solids of one subject in canonical pose.
pub fn synth_pair(kind: SynthKind, t: f64) -> Result<(TriangleMesh, TriangleMesh)> {
    match kind {
        SynthKind::TwoBox => {
            let s = 0.5 + 0.1 * t;
            if s <= 0.05 {
                return Err(Error::InvalidArgument(format!("two-box parameter {t} collapses the wall")));
            }
            let n = 4;
            let yz = move |j: usize| -s + 2.0 * s * j as f64 / n as f64;
            let a = lattice_box([n, n, n], |i, j, k| Point::new(-1.0 + i as f64 / n as f64, yz(j), yz(k)));
            let b = lattice_box([n, n, n], |i, j, k| Point::new(i as f64 / n as f64, yz(j), yz(k)));
            Ok((a, b))
        }
        SynthKind::TwoEllipsoid => {
            let r = 1.0 + 0.25 * t;
            if r <= 0.1 {
                return Err(Error::InvalidArgument(format!("two-ellipsoid parameter {t} collapses the wall")));
            }
            let n = 8;
            let half = n / 2;
            let axes = Point::new(1.0, r, r);
            let coord = move |i: usize| -1.0 + 2.0 * i as f64 / n as f64;
            let a = lattice_box([half, n, n], |i, j, k| cube_to_ellipsoid(Point::new(coord(i), coord(j), coord(k)), &axes));
            let b = lattice_box([half, n, n], |i, j, k| {
                cube_to_ellipsoid(Point::new(coord(i + half), coord(j), coord(k)), &axes)
            });
            Ok((a, b))
        }
        SynthKind::CurvedSeptum => {
            if t.abs() > 0.6 {
                return Err(Error::InvalidArgument(format!("curved-septum curvature {t} outside [-0.6, 0.6]")));
            }
            let (nx, n) = (4, 8);
            let yz = move |j: usize| -1.0 + 2.0 * j as f64 / n as f64;
            let wall = move |y: f64, z: f64| t * (1.0 - y * y) * (1.0 - z * z);
            let a = lattice_box([nx, n, n], |i, j, k| {
                let (y, z) = (yz(j), yz(k));
                let x = -1.0 + (wall(y, z) + 1.0) * i as f64 / nx as f64;
                Point::new(x, y, z)
            });
            let b = lattice_box([nx, n, n], |i, j, k| {
                let (y, z) = (yz(j), yz(k));
                let h = wall(y, z);
                Point::new(h + (1.0 - h) * i as f64 / nx as f64, y, z)
            });
            Ok((a, b))
        }
    }
}

// Radial map taking the surface of [-1,1]^3 onto the unit sphere, then
// scaled per axis. Planes through the origin stay planes.
fn cube_to_ellipsoid(p: Point, axes: &Point) -> Point {
    let len = p.norm();
    let q = if len == 0.0 { p } else { p * (p.amax() / len) };
    q.component_mul(axes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{boundary_edges, EdgeMap};
    use crate::shared_boundary::find_close_triangles;
    use crate::stats::max_plane_deviation;

    fn watertight(m: &TriangleMesh) -> bool {
        EdgeMap::new(m).check_manifold().is_ok() && boundary_edges(m).is_empty()
    }

    fn signed_volume(m: &TriangleMesh) -> f64 {
        (0..m.num_faces())
            .map(|f| {
                let [a, b, c] = m.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    #[test]
    fn two_box_cohort_is_watertight_with_contact() {
        let cohort = synth_cohort(&SynthParams::default()).unwrap();
        assert_eq!(cohort.len(), 4);
        for s in &cohort {
            for m in [&s.organ_a, &s.organ_b] {
                assert!(watertight(m), "{}", s.id);
                assert!(signed_volume(m) > 0.0);
            }
            assert!(!find_close_triangles(&s.organ_a, &s.organ_b, 1e-6).unwrap().is_empty());
        }
        let groups: Vec<Group> = cohort.iter().map(|s| s.group).collect();
        assert_eq!(groups, [Group::A, Group::A, Group::B, Group::B]);
        assert!(cohort.windows(2).all(|w| w[0].parameter < w[1].parameter));
    }

    #[test]
    fn same_seed_same_cohort() {
        let p = SynthParams {
            kind: SynthKind::CurvedSeptum,
            count: 3,
            seed: 9,
            ..Default::default()
        };
        let a = synth_cohort(&p).unwrap();
        let b = synth_cohort(&p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.parameter, y.parameter);
            assert_eq!(x.organ_a.vertices(), y.organ_a.vertices());
            assert_eq!(x.organ_b.vertices(), y.organ_b.vertices());
        }
        let c = synth_cohort(&SynthParams { seed: 10, ..p }).unwrap();
        assert_ne!(a[0].parameter, c[0].parameter);
    }

    #[test]
    fn flat_septum_wall_is_planar() {
        let (a, b) = synth_pair(SynthKind::CurvedSeptum, 0.0).unwrap();
        let wall: Vec<Point> = a.vertices().iter().filter(|v| v.x.abs() < 1e-9 && v.y.abs() < 1.0 - 1e-9).copied().collect();
        assert!(wall.len() > 20);
        assert!(max_plane_deviation(&wall) < 1e-6);
        assert!(watertight(&a) && watertight(&b));

        let (a, _) = synth_pair(SynthKind::CurvedSeptum, 0.3).unwrap();
        let apex = a.vertices().iter().map(|v| v.x).filter(|&x| x > -0.5).fold(f64::MIN, f64::max);
        assert!((apex - 0.3).abs() < 1e-12);
        assert!(synth_pair(SynthKind::CurvedSeptum, 0.9).is_err());
    }

    #[test]
    fn ellipsoid_halves_share_a_disk() {
        let (a, b) = synth_pair(SynthKind::TwoEllipsoid, 0.0).unwrap();
        assert!(watertight(&a) && watertight(&b));
        assert!(signed_volume(&a) > 0.0 && signed_volume(&b) > 0.0);
        let total = signed_volume(&a) + signed_volume(&b);
        // polyhedral approximation of the unit ball
        assert!((total - 4.0 / 3.0 * std::f64::consts::PI).abs() < 0.6);
        let contact = find_close_triangles(&a, &b, 1e-9).unwrap();
        let area: f64 = contact.iter().map(|&f| a.face_area(f)).sum();
        // inscribed polygon of the unit disk
        assert!(area > 2.5 && area < std::f64::consts::PI);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("two-box".parse::<SynthKind>().unwrap(), SynthKind::TwoBox);
        assert_eq!("curved-septum".parse::<SynthKind>().unwrap(), SynthKind::CurvedSeptum);
        assert!("three-box".parse::<SynthKind>().is_err());
        assert!(synth_cohort(&SynthParams { count: 0, ..Default::default() }).is_err());
    }
}
