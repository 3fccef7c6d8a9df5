//! Rigid transforms, pinhole projection and the image-plane hull of a 3D box.
//!
//! Frames: the ego frame is x forward, y left, z up. Camera frames are x
//! right, y down, z along the optical axis. A box is described in the ego
//! frame by its center, `(length, width, height)` and a yaw about +z.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum camera-frame depth for a point to count as in front of the lens (m).
pub const EPS_Z: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z_cam = {0})")]
    BehindCamera(f64),
    #[error("box is not visible in camera")]
    NotVisible,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3([r0.to_array(), r1.to_array(), r2.to_array()])
    }

    /// Rotation about +z by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.0[i])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// True when `RᵀR = I` and `det R = +1`, both within `tol`.
    pub fn is_rotation(&self, tol: f64) -> bool {
        let p = self.transpose() * *self;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (p.0[i][j] - want).abs() > tol {
                    return false;
                }
            }
        }
        (self.det() - 1.0).abs() <= tol
    }
}

impl Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }
}

/// `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fx={} fy={} cx={} cy={}",
                self.fx, self.fy, self.cx, self.cy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub ego_to_cam: RigidTransform,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        ego_to_cam: RigidTransform,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            id: id.into(),
            intrinsics,
            ego_to_cam,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Hard invariants are errors; an off-image principal point only warns.
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "{}: image size {}x{}",
                self.id, self.width, self.height
            )));
        }
        if !self.ego_to_cam.rotation.is_rotation(1e-9) {
            return Err(GeometryError::InvalidCamera(format!(
                "{}: extrinsic rotation is not orthonormal",
                self.id
            )));
        }
        let k = &self.intrinsics;
        if k.cx < 0.0 || k.cx > self.width as f64 || k.cy < 0.0 || k.cy > self.height as f64 {
            log::warn!("camera {}: principal point outside the image", self.id);
        }
        Ok(())
    }

    /// Camera whose optical axis points along ego heading `yaw`, mounted at
    /// `position` with no pitch or roll.
    pub fn looking_along(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        yaw: f64,
        position: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let (s, c) = yaw.sin_cos();
        let right = Vec3::new(s, -c, 0.0);
        let down = Vec3::new(0.0, 0.0, -1.0);
        let forward = Vec3::new(c, s, 0.0);
        let rotation = Mat3::from_rows(right, down, forward);
        let translation = -(rotation * position);
        Self::new(
            id,
            intrinsics,
            RigidTransform::new(rotation, translation),
            width,
            height,
        )
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented box in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    /// `(length, width, height)` in meters.
    pub dims: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
    pub attribute_id: u8,
}

impl Box3D {
    pub fn new(center: Vec3, dims: [f64; 3], yaw: f64) -> Self {
        Self {
            center,
            dims,
            yaw: normalize_angle(yaw),
            velocity: [0.0, 0.0],
            class_id: 0,
            score: 1.0,
            attribute_id: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.dims.iter().all(|d| *d > 0.0 && d.is_finite()) {
            return Err(GeometryError::InvalidBox(format!("dims {:?}", self.dims)));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(GeometryError::InvalidBox(format!("yaw {} not normalized", self.yaw)));
        }
        Ok(())
    }

    /// Parameters optimized by the fine-tuner: `[cx, cy, cz, l, w, h, yaw]`.
    pub fn params(&self) -> [f64; 7] {
        let c = self.center;
        [c.x, c.y, c.z, self.dims[0], self.dims[1], self.dims[2], self.yaw]
    }

    /// Inverse of [`Box3D::params`]. Yaw is stored as given (not wrapped) so
    /// finite-difference probes stay continuous.
    pub fn with_params(&self, p: &[f64; 7]) -> Box3D {
        Box3D {
            center: Vec3::new(p[0], p[1], p[2]),
            dims: [p[3], p[4], p[5]],
            yaw: p[6],
            ..*self
        }
    }
}

/// Local sign pattern of corner `k`: bit 0 → length axis, bit 1 → width
/// axis, bit 2 → height axis; a set bit means the positive half.
pub fn corner_signs(k: usize) -> [f64; 3] {
    let s = |bit: usize| if k & (1 << bit) != 0 { 1.0 } else { -1.0 };
    [s(0), s(1), s(2)]
}

/// The eight vertices, ordered by [`corner_signs`].
pub fn box_corners(b: &Box3D) -> [Vec3; 8] {
    let r = Mat3::rot_z(b.yaw);
    std::array::from_fn(|k| {
        let s = corner_signs(k);
        let local = Vec3::new(
            s[0] * b.dims[0] / 2.0,
            s[1] * b.dims[1] / 2.0,
            s[2] * b.dims[2] / 2.0,
        );
        b.center + r * local
    })
}

/// Projects an ego-frame point: returns `(u, v, z_cam)`.
pub fn project_point(cam: &Camera, p_ego: Vec3) -> Result<(f64, f64, f64), GeometryError> {
    let p = cam.ego_to_cam.apply(p_ego);
    if p.z <= EPS_Z {
        return Err(GeometryError::BehindCamera(p.z));
    }
    let k = &cam.intrinsics;
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

/// Axis-aligned image box with the camera-frame depth of the object center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub depth: f64,
}

impl Box2D {
    pub fn new(x: f64, y: f64, w: f64, h: f64, depth: f64) -> Result<Self, GeometryError> {
        let b = Self { x, y, w, h, depth };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.w > 0.0 && self.h > 0.0 && self.depth > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "2D box w={} h={} depth={}",
                self.w, self.h, self.depth
            )));
        }
        Ok(())
    }

    pub fn x_min(&self) -> f64 {
        self.x - self.w / 2.0
    }
    pub fn x_max(&self) -> f64 {
        self.x + self.w / 2.0
    }
    pub fn y_min(&self) -> f64 {
        self.y - self.h / 2.0
    }
    pub fn y_max(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.w, self.h, self.depth]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
            depth: a[4],
        }
    }

    /// True when the box overlaps `[0,width]×[0,height]` with positive area.
    pub fn intersects_image(&self, width: u32, height: u32) -> bool {
        self.x_max() > 0.0
            && self.x_min() < width as f64
            && self.y_max() > 0.0
            && self.y_min() < height as f64
    }
}

/// Projected corners plus the indices of the extreme ones.
#[derive(Debug, Clone)]
struct Hull {
    cam_pts: [Vec3; 8],
    uv: [(f64, f64); 8],
    u_min: usize,
    u_max: usize,
    v_min: usize,
    v_max: usize,
}

fn hull(cam: &Camera, b: &Box3D) -> Result<Hull, GeometryError> {
    let corners = box_corners(b);
    let k = &cam.intrinsics;
    let mut cam_pts = [Vec3::ZERO; 8];
    let mut uv = [(0.0, 0.0); 8];
    for (i, c) in corners.iter().enumerate() {
        let p = cam.ego_to_cam.apply(*c);
        if p.z <= EPS_Z {
            return Err(GeometryError::NotVisible);
        }
        cam_pts[i] = p;
        uv[i] = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
    }
    // strict comparisons: the lowest corner index wins ties
    let (mut u_min, mut u_max, mut v_min, mut v_max) = (0, 0, 0, 0);
    for i in 1..8 {
        if uv[i].0 < uv[u_min].0 {
            u_min = i;
        }
        if uv[i].0 > uv[u_max].0 {
            u_max = i;
        }
        if uv[i].1 < uv[v_min].1 {
            v_min = i;
        }
        if uv[i].1 > uv[v_max].1 {
            v_max = i;
        }
    }
    Ok(Hull {
        cam_pts,
        uv,
        u_min,
        u_max,
        v_min,
        v_max,
    })
}

fn hull_box(cam: &Camera, b: &Box3D, h: &Hull) -> Box2D {
    let (x0, x1) = (h.uv[h.u_min].0, h.uv[h.u_max].0);
    let (y0, y1) = (h.uv[h.v_min].1, h.uv[h.v_max].1);
    Box2D {
        x: (x0 + x1) / 2.0,
        y: (y0 + y1) / 2.0,
        w: x1 - x0,
        h: y1 - y0,
        depth: cam.ego_to_cam.apply(b.center).z,
    }
}

/// Image-plane hull of the box, or `NotVisible` when any corner is behind
/// the camera or the hull misses the image.
pub fn project_box(cam: &Camera, b: &Box3D) -> Result<Box2D, GeometryError> {
    let h = hull(cam, b)?;
    let out = hull_box(cam, b, &h);
    if !out.intersects_image(cam.width, cam.height) {
        return Err(GeometryError::NotVisible);
    }
    Ok(out)
}

/// Row-major `∂(x, y, w, h, depth) / ∂(cx, cy, cz, l, w, h, yaw)`.
pub type ProjectionJacobian = [[f64; 7]; 5];

fn corner_jacobian(cam: &Camera, b: &Box3D, h: &Hull, k: usize) -> [[f64; 7]; 2] {
    let s = corner_signs(k);
    let (sn, cs) = b.yaw.sin_cos();
    let lx = s[0] * b.dims[0] / 2.0;
    let ly = s[1] * b.dims[1] / 2.0;
    // columns of ∂p_ego/∂param
    let d_ego = [
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(cs, sn, 0.0).scale(s[0] / 2.0),
        Vec3::new(-sn, cs, 0.0).scale(s[1] / 2.0),
        Vec3::new(0.0, 0.0, s[2] / 2.0),
        Vec3::new(-sn * lx - cs * ly, cs * lx - sn * ly, 0.0),
    ];
    let p = h.cam_pts[k];
    let ki = &cam.intrinsics;
    let du = Vec3::new(ki.fx / p.z, 0.0, -ki.fx * p.x / (p.z * p.z));
    let dv = Vec3::new(0.0, ki.fy / p.z, -ki.fy * p.y / (p.z * p.z));
    let mut out = [[0.0; 7]; 2];
    for (col, d) in d_ego.iter().enumerate() {
        let dp = cam.ego_to_cam.rotation * *d;
        out[0][col] = du.dot(dp);
        out[1][col] = dv.dot(dp);
    }
    out
}

/// Projection plus its Jacobian, using the extreme corners chosen by
/// [`project_box`] (lowest index on ties).
pub fn project_box_jacobian(
    cam: &Camera,
    b: &Box3D,
) -> Result<(Box2D, ProjectionJacobian), GeometryError> {
    let h = hull(cam, b)?;
    let out = hull_box(cam, b, &h);
    if !out.intersects_image(cam.width, cam.height) {
        return Err(GeometryError::NotVisible);
    }
    let ju_min = corner_jacobian(cam, b, &h, h.u_min)[0];
    let ju_max = corner_jacobian(cam, b, &h, h.u_max)[0];
    let jv_min = corner_jacobian(cam, b, &h, h.v_min)[1];
    let jv_max = corner_jacobian(cam, b, &h, h.v_max)[1];
    let mut j = [[0.0; 7]; 5];
    for c in 0..7 {
        j[0][c] = (ju_min[c] + ju_max[c]) / 2.0;
        j[1][c] = (jv_min[c] + jv_max[c]) / 2.0;
        j[2][c] = ju_max[c] - ju_min[c];
        j[3][c] = jv_max[c] - jv_min[c];
    }
    let r2 = cam.ego_to_cam.rotation.row(2);
    j[4][0] = r2.x;
    j[4][1] = r2.y;
    j[4][2] = r2.z;
    Ok((out, j))
}

/// Smallest camera-frame depth over the eight corners.
pub fn min_corner_depth(cam: &Camera, b: &Box3D) -> f64 {
    box_corners(b)
        .iter()
        .map(|p| cam.ego_to_cam.apply(*p).z)
        .fold(f64::INFINITY, f64::min)
}

fn same_motion(jac: &[[[f64; 7]; 2]], i: usize, j: usize, axis: usize) -> bool {
    let scale = jac[j][axis].iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    jac[i][axis]
        .iter()
        .zip(&jac[j][axis])
        .all(|(a, c)| (a - c).abs() <= 1e-9 * scale)
}

/// Corners controlling `[u_min, u_max, v_min, v_max]`. A corner that
/// coincides with its lower-index twin and moves identically (the top and
/// bottom of a vertical edge under an upright camera) reports as the twin,
/// so rounding between the pair does not look like a switch.
pub fn extreme_corners(cam: &Camera, b: &Box3D) -> Result<[usize; 4], GeometryError> {
    let h = hull(cam, b)?;
    let jac: Vec<[[f64; 7]; 2]> = (0..8).map(|k| corner_jacobian(cam, b, &h, k)).collect();
    let val = |i: usize, axis: usize| if axis == 0 { h.uv[i].0 } else { h.uv[i].1 };
    let canon = |best: usize, axis: usize| {
        (0..best)
            .find(|&i| (val(i, axis) - val(best, axis)).abs() <= 1e-9 && same_motion(&jac, i, best, axis))
            .unwrap_or(best)
    };
    Ok([canon(h.u_min, 0), canon(h.u_max, 0), canon(h.v_min, 1), canon(h.v_max, 1)])
}

/// Smallest pixel gap between an extreme corner and the runner-up on the
/// same side. Near zero means the hull Jacobian sits on a kink. Twins that
/// move identically with the extreme corner are not a kink and are skipped.
pub fn projection_tie_margin(cam: &Camera, b: &Box3D) -> Result<f64, GeometryError> {
    let h = hull(cam, b)?;
    let jac: Vec<[[f64; 7]; 2]> = (0..8).map(|k| corner_jacobian(cam, b, &h, k)).collect();
    let gap = |best: usize, axis: usize, sign: f64| {
        let val = |i: usize| if axis == 0 { h.uv[i].0 } else { h.uv[i].1 };
        (0..8)
            .filter(|&i| i != best)
            .filter(|&i| !((val(i) - val(best)).abs() <= 1e-9 && same_motion(&jac, i, best, axis)))
            .map(|i| sign * (val(i) - val(best)))
            .fold(f64::INFINITY, f64::min)
    };
    Ok(gap(h.u_min, 0, 1.0)
        .min(gap(h.u_max, 0, -1.0))
        .min(gap(h.v_min, 1, 1.0))
        .min(gap(h.v_max, 1, -1.0)))
}

/// Pixel distance from the hull to the image-intersection boundary; small
/// values mean a tiny motion could flip visibility.
pub fn visibility_margin(cam: &Camera, b: &Box3D) -> Result<f64, GeometryError> {
    let h = hull(cam, b)?;
    let bb = hull_box(cam, b, &h);
    let (w, hgt) = (cam.width as f64, cam.height as f64);
    let z_margin = h
        .cam_pts
        .iter()
        .map(|p| p.z - EPS_Z)
        .fold(f64::INFINITY, f64::min);
    Ok(bb
        .x_max()
        .min(w - bb.x_min())
        .min(bb.y_max())
        .min(hgt - bb.y_min())
        .abs()
        .min(z_margin))
}
