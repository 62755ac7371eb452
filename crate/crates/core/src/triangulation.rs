//! Multi-view DLT triangulation and ray geometry.

use nalgebra::{DMatrix, Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scene::Track;

/// Smallest tolerated homogeneous `|w|` of a unit-norm DLT solution.
pub const POINT_AT_INFINITY_EPS: f64 = 1e-12;
/// Smallest tolerated distance between a point and a camera center.
pub const COINCIDENT_EPS: f64 = 1e-12;

/// One view entering a DLT solve.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a Camera,
    pub xy: Vector2<f64>,
    pub sigma: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulated {
    pub point: Vector3<f64>,
    /// `sigma_3 / sigma_1` of the design matrix: 0 when the third direction is unconstrained,
    /// larger is better determined.
    pub condition: f64,
}

/// Homogeneous least-squares triangulation from two or more views.
///
/// Rows are built in focal-normalized coordinates (`u P3 - P1`, `v P3 - P2` with `P = [R | t]`).
/// `|w|` is tested on the unit-norm solution in the canonical frame.
/// With `weighted`, each row is divided by the observation's sigma on that axis.
pub fn triangulate_views(views: &[View<'_>], weighted: bool) -> Result<Triangulated> {
    if views.len() < 2 {
        return Err(Error::Arity {
            what: "triangulate_dlt",
            needed: 2,
            got: views.len(),
        });
    }
    // Solve in the first camera's frame scaled by the largest baseline, which makes the result
    // independent of the world similarity gauge.
    let r1 = views[0].camera.rotation();
    let t1 = views[0].camera.translation();
    let c1 = views[0].camera.center();
    let d = views
        .iter()
        .map(|v| (v.camera.center() - c1).norm())
        .fold(0.0, f64::max);
    let d = if d > 1e-300 { d } else { 1.0 };
    let mut a = DMatrix::<f64>::zeros((2 * views.len()).max(4), 4);
    for (i, view) in views.iter().enumerate() {
        let n = view.camera.normalize_pixel(&view.xy);
        let r = view.camera.rotation() * r1.transpose();
        let t = (view.camera.translation() - r * t1) / d;
        let (wx, wy) = if weighted {
            (1.0 / view.sigma.x, 1.0 / view.sigma.y)
        } else {
            (1.0, 1.0)
        };
        for c in 0..3 {
            a[(2 * i, c)] = wx * (n.x * r[(2, c)] - r[(0, c)]);
            a[(2 * i + 1, c)] = wy * (n.y * r[(2, c)] - r[(1, c)]);
        }
        a[(2 * i, 3)] = wx * (n.x * t.z - t.x);
        a[(2 * i + 1, 3)] = wy * (n.y * t.z - t.y);
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let condition = if largest > 0.0 {
        svd.singular_values[order[2]] / largest
    } else {
        0.0
    };
    let h = v_t.row(order[3]);
    let w = h[3];
    if w.abs() < POINT_AT_INFINITY_EPS {
        return Err(Error::PointAtInfinity { w });
    }
    let z = Vector3::new(h[0] / w, h[1] / w, h[2] / w);
    Ok(Triangulated {
        point: r1.transpose() * (d * z - t1),
        condition,
    })
}

/// DLT over every observation of `track` whose frame has a camera.
pub fn triangulate_dlt(
    track: &Track,
    cameras: &[Option<Camera>],
    weighted: bool,
) -> Result<Triangulated> {
    let views: Vec<View<'_>> = track
        .observations
        .iter()
        .filter_map(|o| {
            let camera = cameras.get(o.frame)?.as_ref()?;
            Some(View {
                camera,
                xy: o.xy,
                sigma: o.sigma,
            })
        })
        .collect();
    triangulate_views(&views, weighted)
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Angle in degrees at `x` between the rays towards the two camera centers.
pub fn triangulation_angle(x: &Vector3<f64>, a: &Camera, b: &Camera) -> Result<f64> {
    let da = a.center() - x;
    let db = b.center() - x;
    if da.norm() < COINCIDENT_EPS || db.norm() < COINCIDENT_EPS {
        return Err(Error::Degenerate(
            "point coincides with a camera center".into(),
        ));
    }
    Ok(angle_between(&da, &db))
}

/// World-frame direction (unit) of the ray through pixel `y`.
pub fn ray_direction(camera: &Camera, y: &Vector2<f64>) -> Vector3<f64> {
    (camera.rotation().transpose() * camera.normalize_pixel(y)).normalize()
}

/// Angle in degrees between the back-projected rays of two observations. Needs no 3D point;
/// for a consistent pair it equals the triangulation angle of the point they intersect at.
pub fn ray_angle(a: &Camera, ya: &Vector2<f64>, b: &Camera, yb: &Vector2<f64>) -> f64 {
    angle_between(&ray_direction(a, ya), &ray_direction(b, yb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPoint {
    pub distance: f64,
    pub nearest: Vector3<f64>,
}

/// Distance from `x` to the camera ray through `y`, and the closest ray point. The ray starts at
/// the camera center, so points behind the camera report the center itself.
pub fn ray_point_geometry(x: &Vector3<f64>, camera: &Camera, y: &Vector2<f64>) -> RayPoint {
    let c = camera.center();
    let d = ray_direction(camera, y);
    let s = (x - c).dot(&d).max(0.0);
    let nearest = c + s * d;
    RayPoint {
        distance: (x - nearest).norm(),
        nearest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Similarity;
    use crate::synthetic::look_at;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn camera_at(center: Vector3<f64>, target: Vector3<f64>) -> Camera {
        let r = look_at(&center, &target, 0.0);
        Camera::from_rotation(&r, -(r * center), 800.0, Vector2::new(320.0, 240.0))
    }

    fn view<'a>(camera: &'a Camera, x: &Vector3<f64>) -> View<'a> {
        View {
            camera,
            xy: camera.project(x).unwrap().pixel,
            sigma: Vector2::new(0.5, 0.5),
        }
    }

    #[test]
    fn two_noiseless_views() {
        let x = Vector3::new(0.3, -0.2, 2.5);
        let a = camera_at(Vector3::new(-1.0, 0.0, -2.0), Vector3::zeros());
        let b = camera_at(Vector3::new(1.5, 0.5, -1.5), Vector3::zeros());
        let tri = triangulate_views(&[view(&a, &x), view(&b, &x)], false).unwrap();
        assert!((tri.point - x).norm() < 1e-9);
        assert!(tri.condition > 1e-3);
        let weighted = triangulate_views(&[view(&a, &x), view(&b, &x)], true).unwrap();
        assert!((weighted.point - x).norm() < 1e-9);
    }

    #[test]
    fn one_view_is_an_arity_error() {
        let a = camera_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros());
        let x = Vector3::new(0.1, 0.1, 0.0);
        assert!(matches!(
            triangulate_views(&[view(&a, &x)], false),
            Err(Error::Arity {
                needed: 2,
                got: 1,
                ..
            })
        ));
    }

    #[test]
    fn zero_baseline_is_flagged() {
        let x = Vector3::new(0.2, 0.1, 0.0);
        let center = Vector3::new(0.0, 0.0, -3.0);
        let a = camera_at(center, Vector3::zeros());
        let b = camera_at(center, Vector3::new(0.3, 0.0, 0.0));
        match triangulate_views(&[view(&a, &x), view(&b, &x)], false) {
            Ok(tri) => assert!(tri.condition < 1e-9, "condition {}", tri.condition),
            Err(e) => assert!(matches!(e, Error::PointAtInfinity { .. })),
        }
    }

    #[test]
    fn noiseless_reprojection_is_exact_in_every_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cams: Vec<Camera> = (0..6)
            .map(|i| {
                let angle = f64::from(i) * 0.2;
                camera_at(
                    Vector3::new(4.0 * angle.sin(), 0.3, -4.0 * angle.cos()),
                    Vector3::zeros(),
                )
            })
            .collect();
        for _ in 0..50 {
            let x = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let views: Vec<View<'_>> = cams.iter().map(|c| view(c, &x)).collect();
            let tri = triangulate_views(&views, false).unwrap();
            for v in &views {
                let err = (v.camera.project(&tri.point).unwrap().pixel - v.xy).norm();
                assert!(err < 1e-7, "reprojection {err}");
            }
        }
    }

    #[test]
    fn more_views_reduce_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cams: Vec<Camera> = (0..10)
            .map(|i| {
                let angle = -0.5 + f64::from(i) * 0.1;
                camera_at(
                    Vector3::new(4.0 * angle.sin(), 0.0, -4.0 * angle.cos()),
                    Vector3::zeros(),
                )
            })
            .collect();
        let (mut two, mut ten) = (0.0, 0.0);
        for _ in 0..100 {
            let x = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let views: Vec<View<'_>> = cams
                .iter()
                .map(|c| {
                    let mut v = view(c, &x);
                    v.xy += Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                    v
                })
                .collect();
            two += (triangulate_views(&views[..2], false).unwrap().point - x).norm();
            ten += (triangulate_views(&views, false).unwrap().point - x).norm();
        }
        assert!(ten < two, "ten-view error {ten} vs two-view {two}");
    }

    #[test]
    fn dlt_follows_a_similarity_of_the_scene() {
        let x = Vector3::new(0.1, 0.25, -0.3);
        let a = camera_at(Vector3::new(-2.0, 0.5, -3.0), Vector3::zeros());
        let b = camera_at(Vector3::new(2.0, -0.5, -3.0), Vector3::zeros());
        let c = camera_at(Vector3::new(0.0, 1.5, -3.5), Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = |cam: &Camera, rng: &mut ChaCha8Rng| {
            cam.project(&x).unwrap().pixel
                + Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        };
        let ys: Vec<Vector2<f64>> = [&a, &b, &c]
            .iter()
            .map(|cam| noisy(cam, &mut rng))
            .collect();
        let g = Similarity {
            rotation: Rotation3::new(Vector3::new(0.3, -0.2, 0.5)).into_inner(),
            translation: Vector3::new(1.0, -2.0, 0.5),
            scale: 2.5,
        };
        let cams = [a, b, c];
        let moved: Vec<Camera> = cams.iter().map(|cam| cam.transformed(&g)).collect();
        let mk = |set: &'_ [Camera]| -> Vector3<f64> {
            let views: Vec<View<'_>> = set
                .iter()
                .zip(&ys)
                .map(|(camera, &xy)| View {
                    camera,
                    xy,
                    sigma: Vector2::new(1.0, 1.0),
                })
                .collect();
            triangulate_views(&views, false).unwrap().point
        };
        let p0 = mk(&cams);
        let p1 = mk(&moved);
        for (cam, moved_cam) in cams.iter().zip(&moved) {
            let r0 = cam.project(&p0).unwrap().pixel;
            let r1 = moved_cam.project(&p1).unwrap().pixel;
            assert!((r0 - r1).norm() < 1e-9);
        }
    }

    #[test]
    fn angle_cases() {
        let a = camera_at(Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0));
        let b = camera_at(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0));
        let x = Vector3::new(0.0, 0.0, 1.0);
        assert!((triangulation_angle(&x, &a, &b).unwrap() - 90.0).abs() < 1e-12);
        assert!((triangulation_angle(&x, &b, &a).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(triangulation_angle(&x, &a, &a).unwrap(), 0.0);
        assert!(triangulation_angle(&a.center(), &a, &b).is_err());
    }

    #[test]
    fn angle_matches_acos_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let mut rv = || {
                Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                )
            };
            let (ca, cb, x) = (rv(), rv(), rv());
            let a = camera_at(ca, x);
            let b = camera_at(cb, x);
            let u = ca - x;
            let v = cb - x;
            let oracle = (u.dot(&v) / (u.norm() * v.norm()))
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees();
            assert!((triangulation_angle(&x, &a, &b).unwrap() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn ray_angle_equals_point_angle_for_consistent_pairs() {
        let x = Vector3::new(0.2, -0.1, 0.3);
        let a = camera_at(Vector3::new(-1.0, 0.2, -3.0), Vector3::zeros());
        let b = camera_at(Vector3::new(1.2, 0.0, -2.8), Vector3::zeros());
        let ya = a.project(&x).unwrap().pixel;
        let yb = b.project(&x).unwrap().pixel;
        let expected = triangulation_angle(&x, &a, &b).unwrap();
        assert!((ray_angle(&a, &ya, &b, &yb) - expected).abs() < 1e-9);
    }

    #[test]
    fn ray_geometry_cases() {
        let cam = camera_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros());
        let x = Vector3::new(0.2, -0.1, 0.4);
        let y = cam.project(&x).unwrap().pixel;
        let on = ray_point_geometry(&x, &cam, &y);
        assert!(on.distance < 1e-12);
        assert!((on.nearest - x).norm() < 1e-12);

        let behind = Vector3::new(0.0, 0.0, -5.0);
        let centre = Vector2::new(320.0, 240.0);
        let rp = ray_point_geometry(&behind, &cam, &centre);
        assert!((rp.nearest - cam.center()).norm() < 1e-12);
        assert!((rp.distance - (behind - cam.center()).norm()).abs() < 1e-12);
    }

    #[test]
    fn ray_geometry_is_orthogonal_when_unclamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cam = camera_at(Vector3::new(0.5, -0.3, -3.0), Vector3::zeros());
        for _ in 0..200 {
            let x = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let y = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let rp = ray_point_geometry(&x, &cam, &y);
            assert!((rp.distance - (x - rp.nearest).norm()).abs() < 1e-12);
            let d = ray_direction(&cam, &y);
            assert!((x - rp.nearest).dot(&d).abs() < 1e-9);
        }
    }
}
