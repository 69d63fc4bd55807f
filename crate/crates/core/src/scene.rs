//! Primitives, cameras and scenes.
//!
//! Cameras follow the pinhole model with `+z` pointing into the scene,
//! `+x` right and `+y` down in the image. The derived projection matrix uses
//! OpenGL-style clip conventions: after the perspective divide, depth maps
//! `near -> -1` and `far -> +1`, while `x`/`y` map pixel `0` to `-1` and
//! pixel `width`/`height` to `+1`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_norm, quat_to_matrix, Quat};

/// Tolerance on `|q| - 1` accepted for stored unit quaternions.
pub const UNIT_QUAT_TOL: f64 = 1e-6;

/// One planar 2D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatPrimitive {
    pub mu: Vector3<f64>,
    /// Orientation `(w, x, y, z)`; columns 0 and 1 of its rotation are the
    /// tangential axes.
    pub q: Quat,
    pub s: [f64; 2],
    pub o: f64,
    pub c: [f64; 3],
    /// `0` is background / unlabeled.
    pub label: u32,
}

fn check_ranges(s: &[f64; 2], o: f64, c: &[f64; 3]) -> Result<()> {
    if !(s[0] > 0.0 && s[1] > 0.0) || !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("scales must be positive, got {s:?}")));
    }
    if !(0.0..=1.0).contains(&o) {
        return Err(Error::Domain(format!("opacity {o} outside [0, 1]")));
    }
    if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!("color {c:?} outside [0, 1]")));
    }
    Ok(())
}

impl SplatPrimitive {
    /// Builds a primitive, normalising `q`.
    pub fn new(
        mu: Vector3<f64>,
        q: Quat,
        s: [f64; 2],
        o: f64,
        c: [f64; 3],
        label: u32,
    ) -> Result<Self> {
        check_ranges(&s, o, &c)?;
        if !mu.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("non-finite position {mu:?}")));
        }
        let q = quat_normalize(&q)
            .filter(|q| q.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Domain(format!("zero-norm quaternion {q:?}")))?;
        Ok(Self {
            mu,
            q,
            s,
            o,
            c,
            label,
        })
    }

    /// Like [`SplatPrimitive::new`] but rejects a quaternion that is not
    /// already unit length instead of normalising it. Used by loaders.
    pub fn new_exact(
        mu: Vector3<f64>,
        q: Quat,
        s: [f64; 2],
        o: f64,
        c: [f64; 3],
        label: u32,
    ) -> Result<Self> {
        check_ranges(&s, o, &c)?;
        let n = quat_norm(&q);
        if !((n - 1.0).abs() <= UNIT_QUAT_TOL) {
            return Err(Error::Domain(format!("quaternion {q:?} has norm {n}")));
        }
        Ok(Self {
            mu,
            q,
            s,
            o,
            c,
            label,
        })
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.q)
    }

    /// The two tangential axes `(t_u, t_v)`.
    pub fn tangentials(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.rotation();
        (r.column(0).into_owned(), r.column(1).into_owned())
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.rotation().column(2).into_owned()
    }
}

/// Rigid world-to-camera transform `x_cam = R(q) x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub q: Quat,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            q: crate::math::QUAT_IDENTITY,
            t: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        // stored q may be off unit length by serialization rounding
        quat_to_matrix(&quat_normalize(&self.q).unwrap_or(crate::math::QUAT_IDENTITY))
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.t
    }

    pub fn inverse_apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.t)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.t)
    }

    /// Pose of a camera at `eye` looking at `target`, with `up` pointing
    /// towards the top of the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let f = (target - eye).normalize();
        let right = f.cross(&up).normalize();
        let down = f.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let q = crate::math::matrix_to_quat(&r);
        let t = -(quat_to_matrix(&q) * eye);
        Self { q, t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
    pub near: f64,
    pub far: f64,
    proj: Matrix4<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: Pose,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |msg: String| Error::InvalidCamera {
            id: id.clone(),
            msg,
        };
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty image {width}x{height}")));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(invalid(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if !(near > 0.0) {
            return Err(invalid(format!("near = {near} must be positive")));
        }
        if !(far > near) || !far.is_finite() {
            return Err(invalid(format!("far = {far} must exceed near = {near}")));
        }
        if quat_normalize(&pose.q).is_none() {
            return Err(invalid("zero-norm pose quaternion".into()));
        }
        let mut cam = Self {
            id,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            pose,
            near,
            far,
            proj: Matrix4::zeros(),
        };
        cam.proj = cam.compute_projection();
        Ok(cam)
    }

    /// Symmetric pinhole camera with the principal point at the image centre.
    pub fn looking_at(
        id: impl Into<String>,
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
    ) -> Result<Self> {
        Self::new(
            id,
            width,
            height,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            Pose::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0)),
            0.05,
            100.0,
        )
    }

    /// Intrinsic part of the clip transform (camera space -> clip space).
    pub fn clip_from_camera(&self) -> Matrix4<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        let (n, f) = (self.near, self.far);
        Matrix4::new(
            2.0 * self.fx / w,
            0.0,
            2.0 * self.cx / w - 1.0,
            0.0,
            0.0,
            2.0 * self.fy / h,
            2.0 * self.cy / h - 1.0,
            0.0,
            0.0,
            0.0,
            (f + n) / (f - n),
            -2.0 * f * n / (f - n),
            0.0,
            0.0,
            1.0,
            0.0,
        )
    }

    fn view_matrix(&self) -> Matrix4<f64> {
        let r = self.pose.rotation();
        let mut v = Matrix4::identity();
        v.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        v.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.pose.t);
        v
    }

    fn compute_projection(&self) -> Matrix4<f64> {
        self.clip_from_camera() * self.view_matrix()
    }

    /// The 4x4 projection `P` (world -> clip).
    pub fn projection(&self) -> &Matrix4<f64> {
        &self.proj
    }

    /// World -> homogeneous pixel coordinates `(u w, v w, w)` with `w` the
    /// camera depth.
    pub fn pixel_from_world(&self) -> Matrix3x4<f64> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let r = self.pose.rotation();
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(k * r));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(k * self.pose.t));
        m
    }

    /// Rows x, y and w of `P` (the homogeneous NDC x/y numerators and the
    /// clip w), in the same layout as [`Camera::pixel_from_world`].
    pub fn ndc_xyw_from_world(&self) -> Matrix3x4<f64> {
        let p = &self.proj;
        let mut m = Matrix3x4::zeros();
        for (dst, src) in [(0, 0), (1, 1), (2, 3)] {
            for c in 0..4 {
                m[(dst, c)] = p[(src, c)];
            }
        }
        m
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.apply(p)
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse_apply(p)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// Unit viewing direction (camera +z) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.pose.rotation().row(2).transpose()
    }

    /// Projects a world point to pixel coordinates; `None` behind the camera.
    pub fn project_pixel(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        (c.z > 1e-12).then(|| {
            (
                self.fx * c.x / c.z + self.cx,
                self.fy * c.y / c.z + self.cy,
                c.z,
            )
        })
    }

    pub fn clip(&self, p: &Vector3<f64>) -> Vector4<f64> {
        self.proj * Vector4::new(p.x, p.y, p.z, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Ordered primitives plus the per-primitive dynamic flag. Indices are
/// stable identities; nothing reorders `primitives`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<SplatPrimitive>,
    pub dynamic: Vec<bool>,
}

impl Scene {
    pub fn new(primitives: Vec<SplatPrimitive>) -> Self {
        let n = primitives.len();
        Self {
            primitives,
            dynamic: vec![false; n],
        }
    }

    pub fn with_dynamic(primitives: Vec<SplatPrimitive>, dynamic: Vec<bool>) -> Result<Self> {
        if primitives.len() != dynamic.len() {
            return Err(Error::shape(primitives.len(), dynamic.len()));
        }
        Ok(Self {
            primitives,
            dynamic,
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn push(&mut self, prim: SplatPrimitive, dynamic: bool) -> usize {
        self.primitives.push(prim);
        self.dynamic.push(dynamic);
        self.primitives.len() - 1
    }

    pub fn dynamic_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.dynamic[i]).collect()
    }

    pub fn indices_with_label(&self, label: u32) -> Vec<usize> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Marks exactly the given indices as dynamic.
    pub fn set_dynamic(&mut self, indices: &[usize]) {
        self.dynamic.iter_mut().for_each(|d| *d = false);
        for &i in indices {
            self.dynamic[i] = true;
        }
    }

    pub fn centroid(&self, indices: &[usize]) -> Option<Vector3<f64>> {
        if indices.is_empty() {
            return None;
        }
        let sum = indices
            .iter()
            .fold(Vector3::zeros(), |acc, &i| acc + self.primitives[i].mu);
        Some(sum / indices.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prim(q: Quat) -> Result<SplatPrimitive> {
        SplatPrimitive::new(Vector3::zeros(), q, [1.0, 1.0], 0.5, [1.0, 0.0, 0.0], 3)
    }

    #[test]
    fn make_primitive_normalises_quaternion() {
        let p = prim([2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.q, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.o, 0.5);
        assert_eq!(p.c, [1.0, 0.0, 0.0]);
        assert_eq!(p.label, 3);
    }

    #[test]
    fn make_primitive_rejects_bad_input() {
        let bad_scale =
            SplatPrimitive::new(Vector3::zeros(), [1.0, 0.0, 0.0, 0.0], [0.0, 1.0], 0.5, [0.0; 3], 0);
        assert!(matches!(bad_scale, Err(Error::Domain(_))));
        assert!(matches!(prim([0.0; 4]), Err(Error::Domain(_))));
        let bad_o =
            SplatPrimitive::new(Vector3::zeros(), [1.0, 0.0, 0.0, 0.0], [1.0, 1.0], 1.5, [0.0; 3], 0);
        assert!(bad_o.is_err());
        let bad_c = SplatPrimitive::new(
            Vector3::zeros(),
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0],
            0.5,
            [0.0, -0.1, 0.0],
            0,
        );
        assert!(bad_c.is_err());
    }

    #[test]
    fn tangentials_by_hand() {
        let (tu, tv) = prim([1.0, 0.0, 0.0, 0.0]).unwrap().tangentials();
        assert_eq!(tu, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(tv, Vector3::new(0.0, 1.0, 0.0));

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (tu, tv) = prim([h, 0.0, 0.0, h]).unwrap().tangentials();
        assert!((tu - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((tv - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn tangentials_orthonormal_for_random_quaternions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let Ok(p) = prim(q) else { continue };
            let (tu, tv) = p.tangentials();
            assert!(tu.dot(&tv).abs() < 1e-6);
            assert!((tu.norm() - 1.0).abs() < 1e-6);
            assert!((tv.norm() - 1.0).abs() < 1e-6);
            let r = p.rotation();
            assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-6);
        }
    }

    #[test]
    fn world_to_camera_examples() {
        let cam = Camera::new("c", 8, 8, 4.0, 4.0, 4.0, 4.0, Pose::identity(), 0.1, 10.0).unwrap();
        assert_eq!(
            cam.world_to_camera(&Vector3::new(1.0, 2.0, 3.0)),
            Vector3::new(1.0, 2.0, 3.0)
        );

        let pose = Pose {
            q: [1.0, 0.0, 0.0, 0.0],
            t: Vector3::new(0.0, 0.0, -1.0),
        };
        let cam = Camera::new("c", 8, 8, 4.0, 4.0, 4.0, 4.0, pose, 0.1, 10.0).unwrap();
        assert_eq!(cam.world_to_camera(&Vector3::new(0.0, 0.0, 1.0)), Vector3::zeros());

        let pose = Pose::look_at(
            Vector3::new(1.0, 0.5, 2.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        );
        let cam = Camera::new("c", 8, 8, 4.0, 4.0, 4.0, 4.0, pose, 0.1, 10.0).unwrap();
        let p = Vector3::new(0.3, -0.2, 0.7);
        let back = cam.camera_to_world(&cam.world_to_camera(&p));
        assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let eye = Vector3::new(1.2, 0.4, 2.0);
        let cam = Camera::looking_at("c", 64, 48, 60.0, eye, Vector3::zeros()).unwrap();
        let c = cam.world_to_camera(&Vector3::zeros());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12);
        assert!((c.z - eye.norm()).abs() < 1e-12);
        assert!((cam.center() - eye).norm() < 1e-12);
        // world up projects towards the top of the image
        let (_, v_up, _) = cam.project_pixel(&Vector3::new(0.0, 0.1, 0.0)).unwrap();
        assert!(v_up < 24.0);
    }

    #[test]
    fn camera_rejects_bad_clip_range() {
        let r = Camera::new("c", 8, 8, 4.0, 4.0, 4.0, 4.0, Pose::identity(), 1.0, 1.0);
        assert!(matches!(r, Err(Error::InvalidCamera { .. })));
        let r = Camera::new("c", 8, 8, 4.0, 4.0, 4.0, 4.0, Pose::identity(), 0.0, 1.0);
        assert!(matches!(r, Err(Error::InvalidCamera { .. })));
    }
}
