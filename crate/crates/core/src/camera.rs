//! Pinhole camera with the 8-DoF parameterization used throughout the crate.
//!
//! Parameters are a unit quaternion `q = (w, x, y, z)`, a translation `t` and the natural log of
//! the focal length. The principal point is data, never a parameter. The convention is
//! world-to-camera: a world point `x` maps to camera coordinates `R x + t`, and the pixel is
//! `K (R x + t)` dehomogenized with `K = [f 0 cx; 0 f cy; 0 0 1]`.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, SMatrix, Unit, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

/// Column layout of [`Camera::project_jacobian`]: `[qw qx qy qz | tx ty tz | ln f | X Y Z]`.
pub type ProjectionJacobian = SMatrix<f64, 2, 11>;

pub const PARAM_COUNT: usize = 8;

/// Depth magnitude below which a point is treated as lying on the principal plane.
pub const PRINCIPAL_PLANE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    q: [f64; 4],
    t: Vector3<f64>,
    log_f: f64,
    pp: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Normalizes `q` and flips it into the `w >= 0` hemisphere.
pub fn canonical_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-300 {
        return Err(Error::Degenerate(format!(
            "quaternion {q:?} cannot be normalized"
        )));
    }
    let mut out = q.map(|v| v / norm);
    let leading = out.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
    if out[0] < 0.0 || (out[0] == 0.0 && leading < 0.0) {
        out = out.map(|v| -v);
    }
    Ok(out)
}

pub fn quaternion_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn matrix_to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let q = uq.quaternion();
    canonical_quaternion([q.w, q.i, q.j, q.k]).expect("rotation quaternion has unit norm")
}

/// Hamilton product `a * b`, both `(w, x, y, z)`.
pub fn quaternion_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// `exp` of a rotation vector as a unit quaternion.
pub fn quaternion_exp(omega: &Vector3<f64>) -> [f64; 4] {
    let theta = omega.norm();
    let half = 0.5 * theta;
    let (s, c) = if theta < 1e-8 {
        (0.5 - theta * theta / 48.0, 1.0 - theta * theta / 8.0)
    } else {
        (half.sin() / theta, half.cos())
    };
    [c, s * omega.x, s * omega.y, s * omega.z]
}

/// Rotation angle of `r` in radians, robust near 0 and pi.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = 0.5 * skew.norm();
    sin.atan2(cos)
}

impl Camera {
    pub fn new(q: [f64; 4], t: Vector3<f64>, log_f: f64, pp: Vector2<f64>) -> Result<Self> {
        if !log_f.is_finite()
            || !t.iter().all(|v| v.is_finite())
            || !pp.iter().all(|v| v.is_finite())
        {
            return Err(Error::Degenerate("non-finite camera parameter".into()));
        }
        Ok(Self {
            q: canonical_quaternion(q)?,
            t,
            log_f,
            pp,
        })
    }

    pub fn from_rotation(r: &Matrix3<f64>, t: Vector3<f64>, focal: f64, pp: Vector2<f64>) -> Self {
        Self {
            q: matrix_to_quaternion(r),
            t,
            log_f: focal.ln(),
            pp,
        }
    }

    /// Identity pose with the principal point at the image center.
    pub fn from_image_size(width: u32, height: u32, log_f: f64) -> Self {
        Self {
            q: [1.0, 0.0, 0.0, 0.0],
            t: Vector3::zeros(),
            log_f,
            pp: Vector2::new(f64::from(width) / 2.0, f64::from(height) / 2.0),
        }
    }

    /// Rebuilds a camera from `[qw qx qy qz tx ty tz ln_f]`.
    pub fn from_params(params: &[f64; PARAM_COUNT], pp: Vector2<f64>) -> Result<Self> {
        Self::new(
            [params[0], params[1], params[2], params[3]],
            Vector3::new(params[4], params[5], params[6]),
            params[7],
            pp,
        )
    }

    pub fn params(&self) -> [f64; PARAM_COUNT] {
        let [w, x, y, z] = self.q;
        [w, x, y, z, self.t.x, self.t.y, self.t.z, self.log_f]
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.q
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t
    }

    pub fn log_focal(&self) -> f64 {
        self.log_f
    }

    pub fn focal(&self) -> f64 {
        self.log_f.exp()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        self.pp
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quaternion_to_matrix(self.q)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.t)
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let f = self.focal();
        Matrix3::new(f, 0.0, self.pp.x, 0.0, f, self.pp.y, 0.0, 0.0, 1.0)
    }

    /// `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        self.intrinsics() * rt
    }

    pub fn with_quaternion(mut self, q: [f64; 4]) -> Result<Self> {
        self.q = canonical_quaternion(q)?;
        Ok(self)
    }

    pub fn with_translation(mut self, t: Vector3<f64>) -> Self {
        self.t = t;
        self
    }

    pub fn with_log_focal(mut self, log_f: f64) -> Self {
        self.log_f = log_f;
        self
    }

    pub fn with_principal_point(mut self, pp: Vector2<f64>) -> Self {
        self.pp = pp;
        self
    }

    pub fn to_camera_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.t
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Projection> {
        let xc = self.to_camera_frame(x);
        if xc.z.abs() < PRINCIPAL_PLANE_EPS {
            return Err(Error::PrincipalPlane { depth: xc.z });
        }
        let f = self.focal();
        Ok(Projection {
            pixel: Vector2::new(f * xc.x / xc.z + self.pp.x, f * xc.y / xc.z + self.pp.y),
            depth: xc.z,
        })
    }

    /// Pixel back-projected to a normalized camera-frame direction `K^-1 [y; 1]`.
    pub fn normalize_pixel(&self, y: &Vector2<f64>) -> Vector3<f64> {
        let f = self.focal();
        Vector3::new((y.x - self.pp.x) / f, (y.y - self.pp.y) / f, 1.0)
    }

    /// Analytic `d pixel / d [q, t, ln f, x]`.
    ///
    /// The quaternion columns are the derivative of the normalized-quaternion projection, i.e.
    /// the raw gradient projected onto the tangent space of the unit sphere at `q`.
    pub fn project_jacobian(&self, x: &Vector3<f64>) -> Result<ProjectionJacobian> {
        let r = self.rotation();
        let xc = r * x + self.t;
        if xc.z.abs() < PRINCIPAL_PLANE_EPS {
            return Err(Error::PrincipalPlane { depth: xc.z });
        }
        let f = self.focal();
        let inv_z = 1.0 / xc.z;
        let d_pix_d_xc = nalgebra::Matrix2x3::new(
            f * inv_z,
            0.0,
            -f * xc.x * inv_z * inv_z,
            0.0,
            f * inv_z,
            -f * xc.y * inv_z * inv_z,
        );

        let [w, qx, qy, qz] = self.q;
        let v = Vector3::new(qx, qy, qz);
        // R(u) x = (w^2 - v.v) x + 2 (v.x) v + 2 w (v cross x) for unit u = (w, v)
        let d_w = 2.0 * w * x + 2.0 * v.cross(x);
        let d_v = -2.0 * x * v.transpose()
            + 2.0 * v.dot(x) * Matrix3::identity()
            + 2.0 * v * x.transpose()
            - 2.0 * w * x.cross_matrix();
        let mut d_xc_d_q = SMatrix::<f64, 3, 4>::zeros();
        d_xc_d_q.set_column(0, &d_w);
        d_xc_d_q.fixed_view_mut::<3, 3>(0, 1).copy_from(&d_v);
        let qv = nalgebra::Vector4::new(w, qx, qy, qz);
        let tangent = nalgebra::Matrix4::identity() - qv * qv.transpose();
        let d_xc_d_q = d_xc_d_q * tangent;

        let mut j = ProjectionJacobian::zeros();
        j.fixed_view_mut::<2, 4>(0, 0)
            .copy_from(&(d_pix_d_xc * d_xc_d_q));
        j.fixed_view_mut::<2, 3>(0, 4).copy_from(&d_pix_d_xc);
        j[(0, 7)] = f * xc.x * inv_z;
        j[(1, 7)] = f * xc.y * inv_z;
        j.fixed_view_mut::<2, 3>(0, 8).copy_from(&(d_pix_d_xc * r));
        Ok(j)
    }

    /// Re-expresses the camera in a world transformed by `g` so that projections of `g(x)`
    /// equal projections of `x` under the original camera.
    pub fn transformed(&self, g: &Similarity) -> Camera {
        let r = self.rotation() * g.rotation.transpose();
        let t = g.scale * self.t - r * g.translation;
        Camera {
            q: matrix_to_quaternion(&r),
            t,
            log_f: self.log_f,
            pp: self.pp,
        }
    }
}

/// Pose of camera `b` relative to camera `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    /// Unit direction of `t_b - R_rel t_a`; `None` when the baseline is degenerate.
    pub translation: Option<Unit<Vector3<f64>>>,
}

pub const DEGENERATE_BASELINE_EPS: f64 = 1e-12;

pub fn relative_pose(a: &Camera, b: &Camera) -> RelativePose {
    let rotation = b.rotation() * a.rotation().transpose();
    let raw = b.translation() - rotation * a.translation();
    let translation = if raw.norm() < DEGENERATE_BASELINE_EPS {
        None
    } else {
        Some(Unit::new_normalize(raw))
    };
    RelativePose {
        rotation,
        translation,
    }
}

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn rigid(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn identity_camera(f: f64, pp: (f64, f64)) -> Camera {
        Camera::new(
            [1.0, 0.0, 0.0, 0.0],
            Vector3::zeros(),
            f.ln(),
            Vector2::new(pp.0, pp.1),
        )
        .unwrap()
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let cam = identity_camera(100.0, (50.0, 50.0));
        let p = cam.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert!((p.pixel - Vector2::new(50.0, 50.0)).norm() < 1e-12);
        assert_eq!(p.depth, 2.0);
        let p = cam.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert!((p.pixel - Vector2::new(100.0, 50.0)).norm() < 1e-12);
    }

    #[test]
    fn rotated_camera_matches_dense_matrix_product() {
        let cam = Camera::new(
            [FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2, 0.0],
            Vector3::new(0.0, 0.0, 3.0),
            120f64.ln(),
            Vector2::new(64.0, 48.0),
        )
        .unwrap();
        // Dense oracle: Ry(90deg) written out by hand, P = K [R | t].
        let k = Matrix3::new(120.0, 0.0, 64.0, 0.0, 120.0, 48.0, 0.0, 0.0, 1.0);
        let r = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt[(2, 3)] = 3.0;
        let p = k * rt;
        let h = p * nalgebra::Vector4::new(1.0, 0.0, 0.0, 1.0);
        let expected = Vector2::new(h.x / h.z, h.y / h.z);
        let got = cam.project(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(
            (got.pixel - expected).norm() < 1e-12,
            "{got:?} vs {expected}"
        );
        assert!((got.depth - h.z).abs() < 1e-12);
        assert!((got.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn principal_plane_is_an_error() {
        let cam = identity_camera(100.0, (50.0, 50.0));
        assert!(matches!(
            cam.project(&Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::PrincipalPlane { .. })
        ));
        assert!(cam
            .project_jacobian(&Vector3::new(1.0, 1.0, 1e-13))
            .is_err());
    }

    #[test]
    fn jacobian_special_cases() {
        let cam = identity_camera(100.0, (50.0, 50.0));
        let j = cam.project_jacobian(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(j[(0, 7)], 0.0);
        assert_eq!(j[(1, 7)], 0.0);
        assert!((j[(0, 4)] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn quaternion_is_canonical() {
        let cam = Camera::new(
            [-0.5, -0.5, 0.5, 0.5],
            Vector3::zeros(),
            0.0,
            Vector2::zeros(),
        )
        .unwrap();
        assert!(cam.quaternion()[0] >= 0.0);
        let norm: f64 = cam.quaternion().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(Camera::new([0.0; 4], Vector3::zeros(), 0.0, Vector2::zeros()).is_err());
    }

    #[test]
    fn relative_pose_of_identical_cameras_is_degenerate() {
        let cam =
            identity_camera(100.0, (50.0, 50.0)).with_translation(Vector3::new(1.0, 2.0, 3.0));
        let rel = relative_pose(&cam, &cam);
        assert!((rel.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(rel.translation.is_none());
    }

    #[test]
    fn relative_pose_recovers_construction() {
        let theta = 0.3f64;
        let a = identity_camera(100.0, (0.0, 0.0));
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
        let baseline = Vector3::new(0.6, 0.0, 0.8);
        let b = Camera::from_rotation(rz.matrix(), baseline, 100.0, Vector2::zeros());
        let rel = relative_pose(&a, &b);
        assert!((rel.rotation - rz.matrix()).norm() < 1e-12);
        assert!((rel.translation.unwrap().into_inner() - baseline).norm() < 1e-12);
    }

    #[test]
    fn rotation_angle_handles_extremes() {
        assert!(rotation_angle(&Matrix3::identity()).abs() < 1e-15);
        let r = Rotation3::from_axis_angle(&Vector3::x_axis(), 3.0);
        assert!((rotation_angle(r.matrix()) - 3.0).abs() < 1e-12);
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), 1e-7);
        assert!((rotation_angle(r.matrix()) - 1e-7).abs() < 1e-15);
    }
}
