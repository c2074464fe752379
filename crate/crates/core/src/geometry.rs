//! Pinhole cameras, depth unprojection and deterministic view sampling.
//!
//! Conventions used throughout the crate:
//! - camera frame is `+x` right, `+y` down, `+z` forward; image origin is the
//!   top-left corner and pixel `(i, j)` has its centre at `(i + 0.5, j + 0.5)`;
//! - depth is the camera-frame `z` coordinate, not the Euclidean ray length;
//! - [`Pose`] is world-from-camera: `p_world = rotation * p_cam + translation`;
//! - the world up-vector is `+z`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// World up-vector used for every generated camera.
pub const WORLD_UP: [f64; 3] = [0.0, 0.0, 1.0];

/// Default field of view of the evaluation camera, in degrees.
pub const EVAL_FOV_DEG: f64 = 40.0;
/// Default camera distance from the object centre.
pub const EVAL_RADIUS: f64 = 2.0;
/// Default square image size of the evaluation camera.
pub const EVAL_IMAGE_SIZE: u32 = 128;
/// Default number of hemisphere candidates for view planning.
pub const DEFAULT_CANDIDATES: usize = 40;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("pixel ({u}, {v}) outside a {width}x{height} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("negative depth {0}")]
    NegativeDepth(f64),
    #[error("point is behind the camera (camera-frame depth {0})")]
    BehindCamera(f64),
    #[error("degenerate look-at: {0}")]
    DegenerateLookAt(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image must be non-empty".into(),
            ));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square-pixel camera with the given horizontal field of view and the
    /// principal point at the image centre.
    pub fn from_fov(fov_deg: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "field of view {fov_deg} not in (0, 180)"
            )));
        }
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    /// The evaluation camera: 40 degree FOV, square image of side `size`.
    pub fn evaluation(size: u32) -> Result<Self, GeometryError> {
        Self::from_fov(EVAL_FOV_DEG, size, size)
    }

    /// Camera-frame ray direction through image point `(u, v)`, scaled so its
    /// `z` component is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(GeometryError::NonFinite("pose"));
        }
        let deviation = rotation_deviation(&rotation);
        if deviation > ORTHONORMAL_TOL {
            return Err(GeometryError::NotARotation(deviation));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera origin in world coordinates.
    pub fn origin(&self) -> Vec3 {
        self.translation
    }

    /// Camera forward axis (`+z` of the camera frame) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Build a pose from 16 row-major numbers of a 4x4 world-from-camera matrix.
    pub fn from_row_major(values: &[f64]) -> Result<Self, GeometryError> {
        if values.len() != 16 {
            return Err(GeometryError::InvalidArgument(format!(
                "pose needs 16 numbers, got {}",
                values.len()
            )));
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = Vector4::new(m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]);
        if (bottom - Vector4::new(0.0, 0.0, 0.0, 1.0)).amax() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidArgument(
                "last pose row must be [0, 0, 0, 1]".into(),
            ));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let m = self.to_homogeneous();
        (0..4)
            .flat_map(|r| (0..4).map(move |c| m[(r, c)]))
            .collect()
    }
}

/// Max-abs deviation of `RᵀR` from identity, combined with the determinant's
/// deviation from +1.
pub fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho.max((r.determinant() - 1.0).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl Viewpoint {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    /// World-space ray through the centre of pixel `(i, j)`. The direction is
    /// scaled so the ray parameter equals camera-frame depth.
    pub fn pixel_ray(&self, i: u32, j: u32) -> (Vec3, Vec3) {
        let dir = self
            .intrinsics
            .ray_direction(i as f64 + 0.5, j as f64 + 0.5);
        (self.pose.origin(), self.pose.rotation() * dir)
    }
}

/// Map pixel `(u, v)` at depth `d` to world coordinates.
pub fn unproject_pixel(u: f64, v: f64, d: f64, view: &Viewpoint) -> Result<Vec3, GeometryError> {
    if !(u.is_finite() && v.is_finite() && d.is_finite()) {
        return Err(GeometryError::NonFinite("pixel or depth"));
    }
    let k = &view.intrinsics;
    if u < 0.0 || v < 0.0 || u > k.width as f64 || v > k.height as f64 {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            width: k.width,
            height: k.height,
        });
    }
    if d < 0.0 {
        return Err(GeometryError::NegativeDepth(d));
    }
    let cam = Vec3::new((u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d);
    Ok(view.pose.rotation() * cam + view.pose.translation())
}

/// Project a world point to `(u, v, depth)`.
pub fn project_point(p: &Vec3, view: &Viewpoint) -> Result<(f64, f64, f64), GeometryError> {
    if !p.iter().all(|c| c.is_finite()) {
        return Err(GeometryError::NonFinite("point"));
    }
    let cam = view.pose.rotation().transpose() * (p - view.pose.translation());
    if cam.z <= 0.0 {
        return Err(GeometryError::BehindCamera(cam.z));
    }
    let k = &view.intrinsics;
    Ok((
        k.fx * cam.x / cam.z + k.cx,
        k.fy * cam.y / cam.z + k.cy,
        cam.z,
    ))
}

/// Camera pose at `origin` whose forward axis points at `target`, with image
/// "up" (camera `-y`) as close to `up` as possible.
pub fn look_at(origin: &Vec3, target: &Vec3, up: &Vec3) -> Result<Pose, GeometryError> {
    if !origin
        .iter()
        .chain(target.iter())
        .chain(up.iter())
        .all(|c| c.is_finite())
    {
        return Err(GeometryError::NonFinite("look-at input"));
    }
    let delta = target - origin;
    let dist = delta.norm();
    if dist < 1e-12 {
        return Err(GeometryError::DegenerateLookAt("origin equals target"));
    }
    let forward = delta / dist;
    let side = forward.cross(up);
    let side_norm = side.norm();
    if side_norm < 1e-9 * up.norm().max(1e-300) {
        return Err(GeometryError::DegenerateLookAt(
            "up-vector parallel to viewing direction",
        ));
    }
    let right = side / side_norm;
    let down = forward.cross(&right);
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    Pose::new(rotation, *origin)
}

/// [`look_at`] with the world up-vector, falling back to `+y` when the camera
/// looks straight along `±z`.
pub fn look_at_world_up(origin: &Vec3, target: &Vec3) -> Result<Pose, GeometryError> {
    match look_at(origin, target, &Vec3::from(WORLD_UP)) {
        Err(GeometryError::DegenerateLookAt(_)) if origin != target => {
            look_at(origin, target, &Vec3::y())
        }
        other => other,
    }
}

/// Golden angle in radians, `π (3 - √5)`.
pub fn golden_angle() -> f64 {
    std::f64::consts::PI * (3.0 - 5f64.sqrt())
}

/// Unit direction of the `i`-th point of a `k`-point spherical Fibonacci
/// lattice on the upper hemisphere: `z = 1 - i/(k-1)` (pole first, equator
/// last), azimuth `i * golden_angle`.
pub fn hemisphere_direction(i: usize, k: usize) -> Vec3 {
    let z = if k <= 1 {
        1.0
    } else {
        1.0 - i as f64 / (k - 1) as f64
    };
    let ring = (1.0 - z * z).max(0.0).sqrt();
    let phi = i as f64 * golden_angle();
    Vec3::new(ring * phi.cos(), ring * phi.sin(), z)
}

/// `k` cameras on the upper hemisphere of radius `radius` around `target`,
/// all looking at `target`.
pub fn hemisphere_candidates(
    k: usize,
    radius: f64,
    target: &Vec3,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<Viewpoint>, GeometryError> {
    if k == 0 {
        return Err(GeometryError::InvalidArgument(
            "candidate count must be >= 1".into(),
        ));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!(
            "radius {radius} must be positive"
        )));
    }
    (0..k)
        .map(|i| {
            let origin = target + radius * hemisphere_direction(i, k);
            Ok(Viewpoint::new(
                *intrinsics,
                look_at_world_up(&origin, target)?,
            ))
        })
        .collect()
}

/// Cameras on a horizontal ring at `elevation_deg` above the target, starting
/// at azimuth `start_azimuth` and advancing by `360° / k`.
pub fn circular_trajectory(
    k: usize,
    radius: f64,
    elevation_deg: f64,
    start_azimuth: f64,
    target: &Vec3,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<Viewpoint>, GeometryError> {
    if k == 0 {
        return Err(GeometryError::InvalidArgument(
            "trajectory length must be >= 1".into(),
        ));
    }
    let el = elevation_deg.to_radians();
    (0..k)
        .map(|i| {
            let az = start_azimuth + std::f64::consts::TAU * i as f64 / k as f64;
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let origin = target + radius * dir;
            Ok(Viewpoint::new(
                *intrinsics,
                look_at_world_up(&origin, target)?,
            ))
        })
        .collect()
}

/// Van der Corput radical inverse in base 2.
pub fn radical_inverse_base2(i: u32) -> f64 {
    i.reverse_bits() as f64 / 4_294_967_296.0
}

/// Map the unit square to the unit sphere preserving area:
/// `z = 1 - 2a`, `phi = 2π b`.
pub fn equal_area_sphere(a: f64, b: f64) -> Vec3 {
    let z = 1.0 - 2.0 * a;
    let ring = (1.0 - z * z).max(0.0).sqrt();
    let phi = std::f64::consts::TAU * b;
    Vec3::new(ring * phi.cos(), ring * phi.sin(), z)
}

/// `n` directions from the 2D Hammersley set `(i/n, φ₂(i))`.
pub fn hammersley_directions(n: usize) -> Result<Vec<Vec3>, GeometryError> {
    if n == 0 || n > u32::MAX as usize {
        return Err(GeometryError::InvalidArgument(format!(
            "hammersley count {n} out of range"
        )));
    }
    Ok((0..n)
        .map(|i| equal_area_sphere(i as f64 / n as f64, radical_inverse_base2(i as u32)))
        .collect())
}

/// JSON form of a [`Viewpoint`]: intrinsics plus a row-major 4x4
/// world-from-camera matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Vec<f64>,
}

impl From<&Viewpoint> for ViewpointRecord {
    fn from(v: &Viewpoint) -> Self {
        let k = &v.intrinsics;
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            pose: v.pose.to_row_major(),
        }
    }
}

impl TryFrom<&ViewpointRecord> for Viewpoint {
    type Error = GeometryError;

    fn try_from(r: &ViewpointRecord) -> Result<Self, Self::Error> {
        let intrinsics = CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?;
        Ok(Viewpoint::new(intrinsics, Pose::from_row_major(&r.pose)?))
    }
}

impl Serialize for Viewpoint {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ViewpointRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Viewpoint {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let record = ViewpointRecord::deserialize(deserializer)?;
        Viewpoint::try_from(&record).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_view() -> Viewpoint {
        let k = CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 4,
            height: 4,
        };
        Viewpoint::new(k, Pose::identity())
    }

    fn rotated_view() -> Viewpoint {
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let rot = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        Viewpoint::new(k, Pose::new(rot, Vec3::new(1.0, 0.0, 0.0)).unwrap())
    }

    #[test]
    fn identity_camera_unprojects_to_unit_depth() {
        let p = unproject_pixel(0.0, 0.0, 1.0, &identity_view()).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn zero_depth_collapses_to_origin() {
        let view = rotated_view();
        let p = unproject_pixel(17.0, 99.0, 0.0, &view).unwrap();
        assert_eq!(p, *view.pose.translation());
    }

    #[test]
    fn rotated_unprojection_matches_homogeneous_oracle() {
        // 4x4 world-from-camera times K⁻¹ in homogeneous form, built by hand.
        let view = rotated_view();
        let (u, v, d) = (114.0, 64.0, 2.0);
        let k_inv = Matrix4::new(
            1.0 / 100.0,
            0.0,
            -64.0 / 100.0,
            0.0,
            0.0,
            1.0 / 100.0,
            -64.0 / 100.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let t = Matrix4::new(
            0.0, -1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        );
        let h = t * k_inv * Vector4::new(u * d, v * d, d, 1.0);
        // camera point (1, 0, 2) rotated 90° about z is (0, 1, 2), then shifted by (1, 0, 0)
        assert_relative_eq!(h.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(h.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(h.z, 2.0, epsilon = 1e-12);
        let p = unproject_pixel(u, v, d, &view).unwrap();
        assert_relative_eq!(p, Vec3::new(h.x, h.y, h.z), epsilon = 1e-12);
    }

    #[test]
    fn non_finite_and_out_of_bounds_rejected() {
        let view = identity_view();
        assert!(matches!(
            unproject_pixel(f64::NAN, 0.0, 1.0, &view),
            Err(GeometryError::NonFinite(_))
        ));
        assert!(matches!(
            unproject_pixel(0.0, 0.0, f64::INFINITY, &view),
            Err(GeometryError::NonFinite(_))
        ));
        assert!(matches!(
            unproject_pixel(5.0, 0.0, 1.0, &view),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
        assert!(matches!(
            unproject_pixel(1.0, 1.0, -1.0, &view),
            Err(GeometryError::NegativeDepth(_))
        ));
    }

    #[test]
    fn project_identity_and_behind() {
        let view = identity_view();
        assert_eq!(
            project_point(&Vec3::new(0.0, 0.0, 1.0), &view).unwrap(),
            (0.0, 0.0, 1.0)
        );
        assert!(matches!(
            project_point(&Vec3::new(0.0, 0.0, -1.0), &view),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(matches!(
            project_point(&Vec3::new(1.0, 0.0, 0.0), &view),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, -0.1, 4, 4).is_err());
        let k = CameraIntrinsics::evaluation(128).unwrap();
        assert_relative_eq!(k.fx, 64.0 / 20f64.to_radians().tan(), epsilon = 1e-12);
    }

    #[test]
    fn look_at_down_axis() {
        let pose = look_at(&Vec3::new(0.0, 0.0, 2.0), &Vec3::zeros(), &Vec3::y()).unwrap();
        assert_relative_eq!(pose.forward(), Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
        assert!(rotation_deviation(pose.rotation()) < 1e-12);
        assert_eq!(pose.origin(), Vec3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn look_at_matches_gram_schmidt() {
        let origin = Vec3::new(1.3, -0.7, 0.9);
        let target = Vec3::new(-0.2, 0.1, 0.05);
        let up = Vec3::z();
        let pose = look_at(&origin, &target, &up).unwrap();
        // Gram–Schmidt: orthogonalise `up` against forward; image-up is −y.
        let f = (target - origin).normalize();
        let u_perp = (up - f * f.dot(&up)).normalize();
        let down = -u_perp;
        let right = down.cross(&f);
        assert_relative_eq!(
            pose.rotation().column(0).into_owned(),
            right,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            pose.rotation().column(1).into_owned(),
            down,
            epsilon = 1e-12
        );
        assert_relative_eq!(pose.rotation().column(2).into_owned(), f, epsilon = 1e-12);
        let r = pose.rotation();
        assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn look_at_parallel_up_is_error() {
        let err = look_at(&Vec3::new(0.0, 0.0, 2.0), &Vec3::zeros(), &Vec3::z());
        assert!(matches!(err, Err(GeometryError::DegenerateLookAt(_))));
        assert!(look_at(&Vec3::zeros(), &Vec3::zeros(), &Vec3::z()).is_err());
        assert!(look_at_world_up(&Vec3::new(0.0, 0.0, 2.0), &Vec3::zeros()).is_ok());
    }

    #[test]
    fn hemisphere_single_candidate_is_pole() {
        let k = CameraIntrinsics::evaluation(32).unwrap();
        let target = Vec3::new(0.1, 0.2, 0.3);
        let c = hemisphere_candidates(1, 2.0, &target, &k).unwrap();
        assert_eq!(c.len(), 1);
        assert_relative_eq!(
            c[0].pose.origin(),
            target + Vec3::new(0.0, 0.0, 2.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn hemisphere_candidates_on_upper_hemisphere() {
        let k = CameraIntrinsics::evaluation(32).unwrap();
        let target = Vec3::new(0.0, 0.0, 0.0);
        for count in [2, 7, 40, 101] {
            let c = hemisphere_candidates(count, 2.0, &target, &k).unwrap();
            for v in &c {
                let d = v.pose.origin() - target;
                assert!((d.norm() - 2.0).abs() < 1e-9);
                assert!(d.z >= 0.0);
                assert_relative_eq!(v.pose.forward(), -d / 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hemisphere_forty_matches_closed_form() {
        let k = CameraIntrinsics::evaluation(32).unwrap();
        let c = hemisphere_candidates(40, 2.0, &Vec3::zeros(), &k).unwrap();
        let ga = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for (i, v) in c.iter().enumerate() {
            let z = 1.0 - i as f64 / 39.0;
            let rho = (1.0 - z * z).sqrt();
            let phi = ga * i as f64;
            let expected = 2.0 * Vec3::new(rho * phi.cos(), rho * phi.sin(), z);
            assert_relative_eq!(v.pose.origin(), expected, epsilon = 1e-12);
        }
        let again = hemisphere_candidates(40, 2.0, &Vec3::zeros(), &k).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn radical_inverse_bit_reversal() {
        let got: Vec<f64> = (0..8).map(radical_inverse_base2).collect();
        assert_eq!(got, vec![0.0, 0.5, 0.25, 0.75, 0.125, 0.625, 0.375, 0.875]);
    }

    #[test]
    fn hammersley_four_matches_formula() {
        let dirs = hammersley_directions(4).unwrap();
        let radical = [0.0, 0.5, 0.25, 0.75];
        for (i, d) in dirs.iter().enumerate() {
            let z = 1.0 - 2.0 * (i as f64 / 4.0);
            let phi = 2.0 * std::f64::consts::PI * radical[i];
            let s = (1.0 - z * z).sqrt();
            assert_relative_eq!(
                *d,
                Vec3::new(s * phi.cos(), s * phi.sin(), z),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn hammersley_unit_and_distinct() {
        let dirs = hammersley_directions(10_000).unwrap();
        for d in &dirs {
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        let mut keys: Vec<[u64; 3]> = dirs
            .iter()
            .map(|d| [d.x.to_bits(), d.y.to_bits(), d.z.to_bits()])
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), dirs.len());
    }

    #[test]
    fn viewpoint_json_round_trip() {
        let view = rotated_view();
        let json = serde_json::to_string(&view).unwrap();
        let back: Viewpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(view, back);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["pose"].as_array().unwrap().len(), 16);
    }

    #[test]
    fn circular_trajectory_elevation() {
        let k = CameraIntrinsics::evaluation(32).unwrap();
        let ring = circular_trajectory(8, 2.0, 30.0, 0.0, &Vec3::zeros(), &k).unwrap();
        for v in &ring {
            assert_relative_eq!(v.pose.origin().z, 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(ring[0].pose.origin().y, 0.0, epsilon = 1e-12);
    }
}
