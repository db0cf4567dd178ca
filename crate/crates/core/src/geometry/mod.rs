//! Rigid and similarity transform algebra.
//!
//! Everything here is an immutable value type; the solver in
//! [`solver`] is a pure function over them.

mod solver;

pub use solver::{orientation_objective, solve_absolute_orientation, OrientationSolution};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    /// The pose pair set was empty.
    #[error("degenerate input: at least one pose pair is required")]
    DegenerateInput,
}

/// A rotation stored as a unit quaternion, canonicalized so that `w >= 0`
/// (ties broken by the first non-zero vector component being positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    quat: UnitQuaternion<f64>,
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self {
            quat: UnitQuaternion::identity(),
        }
    }

    /// Builds a rotation from quaternion components, normalizing the input.
    /// Already-unit quaternions pass through bit-exactly, so wire decoding
    /// is the identity. Returns `None` for a (near-)zero quaternion.
    pub fn from_quat(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if norm < 1e-12 || !norm.is_finite() {
            return None;
        }
        let quat = if (norm - 1.0).abs() < 1e-9 {
            UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z))
        } else {
            UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
        };
        Some(Self { quat }.canonicalized())
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self {
            quat: UnitQuaternion::from_axis_angle(&axis, angle_rad),
        }
        .canonicalized()
    }

    /// Projects an arbitrary 3x3 matrix to the closest rotation (Frobenius
    /// sense) via SVD, flipping the smallest singular vector when the
    /// determinant would be negative.
    pub fn project_matrix(m: &Matrix3<f64>) -> Self {
        if m.norm() < 1e-15 {
            return Self::identity();
        }
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd requested u");
        let v_t = svd.v_t.expect("svd requested v_t");
        let det = (u * v_t).determinant();
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
        let r = u * d * v_t;
        Self::from_matrix_unchecked(&r)
    }

    /// Converts a matrix that is already (numerically) a rotation.
    fn from_matrix_unchecked(r: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Self {
            quat: UnitQuaternion::from_rotation_matrix(&rot),
        }
        .canonicalized()
    }

    fn canonicalized(self) -> Self {
        let q = self.quat.quaternion();
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Self {
                quat: UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(-w, -x, -y, -z)),
            }
        } else {
            self
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        self.quat.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.quat * v
    }

    pub fn compose(&self, other: &Rotation3) -> Rotation3 {
        Self {
            quat: self.quat * other.quat,
        }
        .canonicalized()
    }

    pub fn inverse(&self) -> Rotation3 {
        Self {
            quat: self.quat.inverse(),
        }
        .canonicalized()
    }

    /// Geodesic angle to another rotation, in radians.
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        self.quat.angle_to(&other.quat)
    }

    /// Quaternion components as `(w, x, y, z)`.
    pub fn wxyz(&self) -> (f64, f64, f64, f64) {
        let q = self.quat.quaternion();
        (q.w, q.i, q.j, q.k)
    }
}

/// A rigid pose: rotation plus translation. Used both for camera poses
/// (camera-to-frame convention) and relative rigid transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv_rot = self.rotation.inverse();
        SE3Pose {
            rotation: inv_rot,
            translation: -inv_rot.apply(&self.translation),
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }
}

/// A similarity transform `x -> s * R * x + t` with `s > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Rotation3, translation: Vector3<f64>) -> Self {
        assert!(scale > 0.0, "similarity scale must be positive");
        Self {
            scale,
            rotation,
            translation,
        }
    }

    /// `compose(outer, inner)` applies `inner` first:
    /// `(s2*s1, R2*R1, s2*R2*t1 + t2)`.
    pub fn compose(&self, inner: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * inner.scale,
            rotation: self.rotation.compose(&inner.rotation),
            translation: self.scale * self.rotation.apply(&inner.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        Sim3Transform {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -inv_scale * inv_rot.apply(&self.translation),
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation.apply(p) + self.translation
    }

    /// Maps a pose expressed in the source frame into the target frame.
    /// Scale affects the position only, never the rotation.
    pub fn apply_to_pose(&self, p: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation.compose(&p.rotation),
            translation: self.apply_point(&p.translation),
        }
    }

    /// Wire layout: 8 little-endian f64 `s, qw, qx, qy, qz, tx, ty, tz`.
    pub fn to_le_bytes(&self) -> [u8; 64] {
        let (qw, qx, qy, qz) = self.rotation.wxyz();
        let vals = [
            self.scale,
            qw,
            qx,
            qy,
            qz,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ];
        let mut out = [0u8; 64];
        for (i, v) in vals.iter().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8; 64]) -> Option<Self> {
        let mut vals = [0f64; 8];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = f64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        if !(vals[0] > 0.0) || !vals[0].is_finite() {
            return None;
        }
        let rotation = Rotation3::from_quat(vals[1], vals[2], vals[3], vals[4])?;
        Some(Self {
            scale: vals[0],
            rotation,
            translation: Vector3::new(vals[5], vals[6], vals[7]),
        })
    }
}

/// Errors between two similarity transforms: Euclidean translation distance,
/// geodesic rotation angle in degrees, and `|log(sa/sb)|`.
pub fn transform_error(a: &Sim3Transform, b: &Sim3Transform) -> (f64, f64, f64) {
    let translation_err = (a.translation - b.translation).norm();
    let rotation_err_deg = a.rotation.angle_to(&b.rotation).to_degrees();
    let scale_err = (a.scale / b.scale).ln().abs();
    (translation_err, rotation_err_deg, scale_err)
}

/// One source/target correspondence for the absolute orientation solver.
#[derive(Debug, Clone, Copy)]
pub struct PosePair {
    pub source: SE3Pose,
    pub target: SE3Pose,
}

/// The `W` correspondences handed to the solver.
#[derive(Debug, Clone, Default)]
pub struct PosePairSet {
    pairs: Vec<PosePair>,
}

impl PosePairSet {
    pub fn new(pairs: Vec<PosePair>) -> Self {
        Self { pairs }
    }

    pub fn from_poses(sources: &[SE3Pose], targets: &[SE3Pose]) -> Self {
        assert_eq!(sources.len(), targets.len());
        Self {
            pairs: sources
                .iter()
                .zip(targets)
                .map(|(s, t)| PosePair {
                    source: *s,
                    target: *t,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PosePair] {
        &self.pairs
    }
}
