//! Pinhole stereo geometry, quaternion-log rotations and SE(3) poses.
//!
//! Rotations are stored as the logarithm of a unit quaternion using the
//! half-angle convention: a rotation by `θ` about unit `axis` has log
//! `v = (θ/2)·axis`, so `exp(v) = (cos|v|, sin|v|·v/|v|)`. Any 3-vector maps
//! to a valid rotation, so network outputs need no normalization.
//!
//! Camera frames are x right, y down, z forward. Pixel `(u, v)` has its
//! centre at integer coordinates.

use crate::autodiff::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Disparities are clamped to this many pixels before inversion.
pub const MIN_DISPARITY: f32 = 1e-3;

/// Points closer than this (meters, source frame) count as behind the camera.
const MIN_SOURCE_Z: f64 = 1e-3;

/// Focal length as a fraction of image width used by [`StereoRig::for_resolution`].
pub const DEFAULT_FOCAL_FRACTION: f64 = 0.6;

/// Shared-focal pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pinhole {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Which camera of a rectified pair supplies the source image when the
/// other one is the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StereoSource {
    /// Target is the left camera; left pixel `(x, y)` appears at `(x - d, y)`.
    #[default]
    Right,
    /// Target is the right camera; right pixel `(x, y)` appears at `(x + d, y)`.
    Left,
}

/// Rectified stereo camera pair: shared intrinsics plus a horizontal baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
    pub source: StereoSource,
}

impl StereoRig {
    pub fn new(
        focal: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let rig = StereoRig {
            focal,
            cx,
            cy,
            baseline,
            width,
            height,
            source: StereoSource::Right,
        };
        rig.validate()?;
        Ok(rig)
    }

    /// Rig with `focal = 0.6·width` and a centred principal point.
    pub fn for_resolution(height: usize, width: usize, baseline: f64) -> Result<Self> {
        Self::new(
            DEFAULT_FOCAL_FRACTION * width as f64,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            baseline,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.focal > 0.0
            && self.baseline > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid stereo rig (need f > 0, B > 0, principal point inside the image): {self:?}"
            )));
        }
        Ok(())
    }

    pub fn pinhole(&self) -> Pinhole {
        Pinhole {
            focal: self.focal,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    /// `f·B`, the disparity-depth product.
    pub fn focal_baseline(&self) -> f64 {
        self.focal * self.baseline
    }

    /// Relative transform from the target camera to the source camera.
    pub fn stereo_pose(&self) -> Se3Pose {
        let tx = match self.source {
            StereoSource::Right => -self.baseline,
            StereoSource::Left => self.baseline,
        };
        Se3Pose::from_translation([tx, 0.0, 0.0])
    }

    /// Same camera at another resolution (intrinsics scale with width/height).
    pub fn rescaled(&self, height: usize, width: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        if (sx - sy).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "rescaling must preserve aspect ratio".into(),
            ));
        }
        let mut rig = *self;
        rig.focal *= sx;
        rig.cx = (self.cx + 0.5) * sx - 0.5;
        rig.cy = (self.cy + 0.5) * sy - 0.5;
        rig.width = width;
        rig.height = height;
        rig.validate()?;
        Ok(rig)
    }
}

/// `z = f·B / max(d, ε)` elementwise.
pub fn disparity_to_depth(disparity: &Tensor, rig: &StereoRig) -> Tensor {
    let fb = rig.focal_baseline() as f32;
    disparity.map(|d| fb / d.max(MIN_DISPARITY))
}

/// `d = f·B / z`; depths must be positive.
pub fn depth_to_disparity(depth: &Tensor, rig: &StereoRig) -> Result<Tensor> {
    if depth.data().iter().any(|&z| !(z > 0.0)) {
        return Err(Error::InvalidArgument("depth must be positive".into()));
    }
    let fb = rig.focal_baseline() as f32;
    Ok(depth.map(|z| fb / z))
}

/// Differentiable [`disparity_to_depth`] on the tape.
pub fn disparity_to_depth_var(tape: &mut Tape, disparity: Var, rig: &StereoRig) -> Result<Var> {
    let clamped = tape.clamp_min(disparity, MIN_DISPARITY)?;
    let fb = tape.constant(Tensor::scalar(rig.focal_baseline() as f32))?;
    tape.div(fb, clamped)
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn neg(&self) -> Quaternion {
        Quaternion {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self ⊗ other`.
    pub fn mul(&self, o: &Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotation matrix to quaternion (Shepperd's method), `w >= 0`.
    pub fn from_matrix(r: &Mat3) -> Quaternion {
        let tr = r[0][0] + r[1][1] + r[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion {
                w: 0.25 * s,
                x: (r[2][1] - r[1][2]) / s,
                y: (r[0][2] - r[2][0]) / s,
                z: (r[1][0] - r[0][1]) / s,
            }
        } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
            let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
            Quaternion {
                w: (r[2][1] - r[1][2]) / s,
                x: 0.25 * s,
                y: (r[0][1] + r[1][0]) / s,
                z: (r[0][2] + r[2][0]) / s,
            }
        } else if r[1][1] > r[2][2] {
            let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
            Quaternion {
                w: (r[0][2] - r[2][0]) / s,
                x: (r[0][1] + r[1][0]) / s,
                y: 0.25 * s,
                z: (r[1][2] + r[2][1]) / s,
            }
        } else {
            let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
            Quaternion {
                w: (r[1][0] - r[0][1]) / s,
                x: (r[0][2] + r[2][0]) / s,
                y: (r[1][2] + r[2][1]) / s,
                z: 0.25 * s,
            }
        };
        let n = q.norm();
        let q = Quaternion {
            w: q.w / n,
            x: q.x / n,
            y: q.y / n,
            z: q.z / n,
        };
        if q.w < 0.0 {
            q.neg()
        } else {
            q
        }
    }
}

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

fn norm3(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Exponential map from the half-angle log form to a unit quaternion.
pub fn quat_exp(v: Vec3) -> Quaternion {
    let theta = norm3(&v);
    let (w, s) = if theta < 1e-6 {
        (1.0 - theta * theta / 2.0, 1.0 - theta * theta / 6.0)
    } else {
        (theta.cos(), theta.sin() / theta)
    };
    Quaternion {
        w,
        x: s * v[0],
        y: s * v[1],
        z: s * v[2],
    }
}

/// Logarithm of a unit quaternion onto the principal branch `|v| ≤ π/2`.
/// `q` and `-q` give the same result; near-unit inputs are renormalized.
pub fn quat_log(q: Quaternion) -> Result<Vec3> {
    let n = q.norm();
    if !(n > 1e-12) {
        return Err(Error::InvalidArgument(
            "zero quaternion has no logarithm".into(),
        ));
    }
    let mut q = Quaternion {
        w: q.w / n,
        x: q.x / n,
        y: q.y / n,
        z: q.z / n,
    };
    if q.w < 0.0 {
        q = q.neg();
    }
    let vn = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    let scale = if vn < 1e-9 {
        // sin θ ≈ θ
        1.0 / q.w
    } else {
        vn.atan2(q.w) / vn
    };
    Ok([scale * q.x, scale * q.y, scale * q.z])
}

/// Rotation matrix of a log-form rotation.
pub fn rotation_matrix(rot_log: Vec3) -> Mat3 {
    quat_exp(rot_log).to_matrix()
}

/// Rigid transform with quaternion-log rotation.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Se3Pose {
    pub rot_log: Vec3,
    pub trans: Vec3,
}

impl Se3Pose {
    pub const IDENTITY: Se3Pose = Se3Pose {
        rot_log: [0.0; 3],
        trans: [0.0; 3],
    };

    pub fn new(rot_log: Vec3, trans: Vec3) -> Self {
        Se3Pose { rot_log, trans }
    }

    pub fn from_translation(trans: Vec3) -> Self {
        Se3Pose {
            rot_log: [0.0; 3],
            trans,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_matrix(self.rot_log)
    }

    pub fn to_matrix(&self) -> Mat4 {
        let r = self.rotation();
        let t = self.trans;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// From a rigid 4×4 matrix (bottom row ignored).
    pub fn from_matrix(m: &Mat4) -> Result<Self> {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Ok(Se3Pose {
            rot_log: quat_log(Quaternion::from_matrix(&r))?,
            trans: [m[0][3], m[1][3], m[2][3]],
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        let qa = quat_exp(self.rot_log);
        let qb = quat_exp(other.rot_log);
        let t = add3(&mat3_vec(&qa.to_matrix(), &other.trans), &self.trans);
        Se3Pose {
            rot_log: quat_log(qa.mul(&qb)).expect("product of unit quaternions"),
            trans: t,
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let q = quat_exp(self.rot_log).conjugate();
        let t = mat3_vec(&q.to_matrix(), &self.trans);
        Se3Pose {
            rot_log: quat_log(q).expect("unit quaternion"),
            trans: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        add3(&mat3_vec(&self.rotation(), p), &self.trans)
    }

    /// Pose as a `1×6×1×1` tensor `(rot_log, trans)`.
    pub fn to_tensor(&self) -> Tensor {
        let v = [self.rot_log, self.trans].concat();
        Tensor::from_vec([1, 6, 1, 1], v.iter().map(|&x| x as f32).collect()).expect("six values")
    }

    /// Read batch item `n` of an `N×6×1×1` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c() != 6 || s.h() != 1 || s.w() != 1 || n >= s.n() {
            return shape_err("Se3Pose::from_tensor", format!("{s:?}, item {n}"));
        }
        let v: Vec<f64> = t.data()[n * 6..n * 6 + 6]
            .iter()
            .map(|&x| x as f64)
            .collect();
        Ok(Se3Pose {
            rot_log: [v[0], v[1], v[2]],
            trans: [v[3], v[4], v[5]],
        })
    }
}

pub fn mat3_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse of a rigid 4×4 transform.
pub fn mat4_rigid_inverse(m: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    for i in 0..3 {
        out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    out[3][3] = 1.0;
    out
}

/// Poses indexed by frame, world-from-camera.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(usize, Se3Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_poses(poses: Vec<Se3Pose>) -> Self {
        Trajectory {
            entries: poses.into_iter().enumerate().collect(),
        }
    }

    /// Append a pose; indices must strictly increase.
    pub fn push(&mut self, index: usize, pose: Se3Pose) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if index <= last {
                return Err(Error::InvalidArgument(format!(
                    "trajectory index {index} does not follow {last}"
                )));
            }
        }
        self.entries.push((index, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, Se3Pose)] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &Se3Pose> {
        self.entries.iter().map(|(_, p)| p)
    }

    /// Pre-multiply every pose by a fixed world transform.
    pub fn transformed(&self, world: &Se3Pose) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|(i, p)| (*i, world.compose(p)))
                .collect(),
        }
    }

    /// Integrate relative motions `T_{k+1←k}` (target-to-next transforms)
    /// into world-from-camera poses starting at identity.
    pub fn from_relative_motions(motions: &[Se3Pose]) -> Trajectory {
        let mut poses = vec![Se3Pose::IDENTITY];
        for m in motions {
            let last = *poses.last().expect("non-empty");
            poses.push(last.compose(&m.inverse()));
        }
        Trajectory::from_poses(poses)
    }

    /// One line per pose: the 12 row-major entries of the 3×4 matrix.
    pub fn to_kitti_text(&self) -> String {
        let mut out = String::new();
        for p in self.poses() {
            let m = p.to_matrix();
            let row: Vec<String> = m[..3].iter().flatten().map(|v| format!("{v:e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_kitti_text(text: &str) -> Result<Trajectory> {
        let mut poses = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Parse(format!("line {}: bad number {s:?}", n + 1)))
                })
                .collect::<Result<_>>()?;
            if v.len() != 12 {
                return Err(Error::Parse(format!(
                    "line {}: expected 12 values, got {}",
                    n + 1,
                    v.len()
                )));
            }
            let m = [
                [v[0], v[1], v[2], v[3]],
                [v[4], v[5], v[6], v[7]],
                [v[8], v[9], v[10], v[11]],
                [0.0, 0.0, 0.0, 1.0],
            ];
            poses.push(Se3Pose::from_matrix(&m)?);
        }
        Ok(Trajectory::from_poses(poses))
    }
}

/// dR/dq for q = (w, x, y, z), one 3×3 matrix per component.
fn rotation_jacobian_q(q: &Quaternion) -> [Mat3; 4] {
    let Quaternion { w, x, y, z } = *q;
    let t = 2.0;
    [
        [
            [0.0, -t * z, t * y],
            [t * z, 0.0, -t * x],
            [-t * y, t * x, 0.0],
        ],
        [
            [0.0, t * y, t * z],
            [t * y, -2.0 * t * x, -t * w],
            [t * z, t * w, -2.0 * t * x],
        ],
        [
            [-2.0 * t * y, t * x, t * w],
            [t * x, 0.0, t * z],
            [-t * w, t * z, -2.0 * t * y],
        ],
        [
            [-2.0 * t * z, -t * w, t * x],
            [t * w, -2.0 * t * z, t * y],
            [t * x, t * y, 0.0],
        ],
    ]
}

/// dq/dv of [`quat_exp`]: 4 rows (w, x, y, z) × 3 columns.
fn quat_exp_jacobian(v: &Vec3) -> [[f64; 3]; 4] {
    let theta = norm3(v);
    let (s, ds_term, dw_coef) = if theta < 1e-3 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, -1.0 / 3.0 + t2 / 30.0, -(1.0 - t2 / 6.0))
    } else {
        let (sn, cs) = theta.sin_cos();
        (
            sn / theta,
            (theta * cs - sn) / (theta * theta * theta),
            -sn / theta,
        )
    };
    let mut j = [[0.0; 3]; 4];
    for c in 0..3 {
        j[0][c] = dw_coef * v[c];
        for r in 0..3 {
            j[r + 1][c] = ds_term * v[r] * v[c] + if r == c { s } else { 0.0 };
        }
    }
    j
}

struct PoseParams {
    r: Mat3,
    t: Vec3,
    q: Quaternion,
    v: Vec3,
}

fn pose_params(pose: &Tensor, n: usize) -> PoseParams {
    let item = if pose.shape().n() == 1 { 0 } else { n };
    let p = Se3Pose::from_tensor(pose, item).expect("validated pose tensor");
    let q = quat_exp(p.rot_log);
    PoseParams {
        r: q.to_matrix(),
        t: p.trans,
        q,
        v: p.rot_log,
    }
}

fn check_reproject_shapes(depth: Shape, pose: Shape, cam: &Pinhole) -> Result<()> {
    if depth.c() != 1 || depth.h() != cam.height || depth.w() != cam.width {
        return shape_err(
            "reproject",
            format!("depth {depth:?} for a {}x{} camera", cam.height, cam.width),
        );
    }
    if pose.c() != 6 || pose.h() != 1 || pose.w() != 1 || !(pose.n() == 1 || pose.n() == depth.n())
    {
        return shape_err("reproject", format!("pose {pose:?} for depth {depth:?}"));
    }
    Ok(())
}

/// Forward reprojection: returns the sampling grid and validity mask.
fn reproject_forward(depth: &Tensor, pose: &Tensor, cam: &Pinhole) -> (Tensor, Tensor) {
    let [n, _, h, w] = depth.shape().0;
    let p = h * w;
    let mut grid = vec![0f32; n * 2 * p];
    let mut mask = vec![0f32; n * p];
    for i in 0..n {
        let pp = pose_params(pose, i);
        for y in 0..h {
            let ry = (y as f64 - cam.cy) / cam.focal;
            for x in 0..w {
                let q = y * w + x;
                let z = depth.data()[i * p + q] as f64;
                let rx = (x as f64 - cam.cx) / cam.focal;
                let pt = mat3_vec(&pp.r, &[z * rx, z * ry, z]);
                let (px, py, pz) = (pt[0] + pp.t[0], pt[1] + pp.t[1], pt[2] + pp.t[2]);
                if pz <= MIN_SOURCE_Z {
                    grid[i * 2 * p + q] = -1.0;
                    grid[(i * 2 + 1) * p + q] = -1.0;
                    continue;
                }
                let us = cam.focal * px / pz + cam.cx;
                let vs = cam.focal * py / pz + cam.cy;
                grid[i * 2 * p + q] = us as f32;
                grid[(i * 2 + 1) * p + q] = vs as f32;
                let inside = us >= 0.0 && us <= (w - 1) as f64 && vs >= 0.0 && vs <= (h - 1) as f64;
                mask[i * p + q] = if inside { 1.0 } else { 0.0 };
            }
        }
    }
    (
        Tensor::from_vec([n, 2, h, w], grid).expect("sized"),
        Tensor::from_vec([n, 1, h, w], mask).expect("sized"),
    )
}

pub(crate) fn reproject_backward(
    depth: &Tensor,
    pose: &Tensor,
    cam: &Pinhole,
    g: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let [n, _, h, w] = depth.shape().0;
    let p = h * w;
    let mut gd = vec![0f32; depth.numel()];
    let mut gp = vec![0f64; pose.numel()];
    for i in 0..n {
        let pp = pose_params(pose, i);
        let mut g_rot: Mat3 = [[0.0; 3]; 3];
        let mut g_t: Vec3 = [0.0; 3];
        for y in 0..h {
            let ry = (y as f64 - cam.cy) / cam.focal;
            for x in 0..w {
                let q = y * w + x;
                let z = depth.data()[i * p + q] as f64;
                let rx = (x as f64 - cam.cx) / cam.focal;
                let pc = [z * rx, z * ry, z];
                let pt = mat3_vec(&pp.r, &pc);
                let (px, py, pz) = (pt[0] + pp.t[0], pt[1] + pp.t[1], pt[2] + pp.t[2]);
                if pz <= MIN_SOURCE_Z {
                    continue;
                }
                let gu = g[i * 2 * p + q] as f64;
                let gv = g[(i * 2 + 1) * p + q] as f64;
                let f = cam.focal;
                let gpt = [
                    gu * f / pz,
                    gv * f / pz,
                    -(gu * f * px + gv * f * py) / (pz * pz),
                ];
                // d(point)/dz = R·ray
                let dray = mat3_vec(&pp.r, &[rx, ry, 1.0]);
                gd[i * p + q] = (gpt[0] * dray[0] + gpt[1] * dray[1] + gpt[2] * dray[2]) as f32;
                for a in 0..3 {
                    g_t[a] += gpt[a];
                    for b in 0..3 {
                        g_rot[a][b] += gpt[a] * pc[b];
                    }
                }
            }
        }
        let dr_dq = rotation_jacobian_q(&pp.q);
        let dq_dv = quat_exp_jacobian(&pp.v);
        let mut g_q = [0.0; 4];
        for (k, m) in dr_dq.iter().enumerate() {
            g_q[k] = (0..3)
                .flat_map(|a| (0..3).map(move |b| (a, b)))
                .map(|(a, b)| g_rot[a][b] * m[a][b])
                .sum();
        }
        let item = if pose.shape().n() == 1 { 0 } else { i };
        for c in 0..3 {
            gp[item * 6 + c] += (0..4).map(|k| g_q[k] * dq_dv[k][c]).sum::<f64>();
            gp[item * 6 + 3 + c] += g_t[c];
        }
    }
    (gd, gp.into_iter().map(|v| v as f32).collect())
}

impl Tape {
    /// Per-pixel source coordinates for target pixels lifted by `depth`
    /// (`N×1×H×W`, meters) and moved by `pose` (`N×6×1×1` or `1×6×1×1`,
    /// target-to-source). Returns the grid (`N×2×H×W`, for
    /// [`Tape::grid_sample`]) and a constant mask that is 1 where the point
    /// lands in front of the source camera and inside its frame.
    pub fn reproject(&mut self, depth: Var, pose: Var, cam: &Pinhole) -> Result<(Var, Var)> {
        check_reproject_shapes(self.shape(depth), self.shape(pose), cam)?;
        let (grid, mask) = reproject_forward(self.value(depth), self.value(pose), cam);
        let grid = self.push_op(
            grid,
            Op::Reproject {
                depth,
                pose,
                cam: *cam,
            },
        )?;
        let mask = self.constant(mask)?;
        Ok((grid, mask))
    }
}

/// Non-differentiable reprojection, for renderers and checks.
pub fn reproject(depth: &Tensor, pose: &Se3Pose, cam: &Pinhole) -> Result<(Tensor, Tensor)> {
    let pose = pose.to_tensor();
    check_reproject_shapes(depth.shape(), pose.shape(), cam)?;
    Ok(reproject_forward(depth, &pose, cam))
}
