//! The MASH data model: anchors carrying a masked spherical distance
//! function, plus the closed-form evaluators the rest of the crate builds on
//! (mask opening angle, spherical distance, rotation from a rotation vector,
//! and flat parameter-vector packing for the optimizer).

use crate::error::{Error, Result};
use crate::sh::{self, ShEvaluator};
use nalgebra::{Matrix3, Vector3};
use std::f64::consts::PI;

/// One masked anchored spherical distance function.
///
/// `mask_coeffs` is ordered `[a_0, a_1, b_1, ..., a_K, b_K]`; `sh_coeffs` is
/// band-major as produced by the `sh` module.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub position: Vector3<f64>,
    pub rotvec: Vector3<f64>,
    pub sh_coeffs: Vec<f64>,
    pub mask_coeffs: Vec<f64>,
}

impl Anchor {
    /// Anchor at the origin with identity rotation and all coefficients zero.
    pub fn zeroed(sh_degree: u32, mask_degree: u32) -> Self {
        Anchor {
            position: Vector3::zeros(),
            rotvec: Vector3::zeros(),
            sh_coeffs: vec![0.0; sh::basis_len(sh_degree)],
            mask_coeffs: vec![0.0; mask_len(mask_degree)],
        }
    }

    /// First spherical-harmonic coefficient, which also fixes the inversion
    /// sphere (center -c00 * z, radius 2 * c00).
    pub fn c00(&self) -> f64 {
        self.sh_coeffs[0]
    }
}

/// An ordered set of anchors with the shared hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MashModel {
    pub anchors: Vec<Anchor>,
    pub sh_degree: u32,
    pub mask_degree: u32,
    pub n_dir: u32,
}

impl MashModel {
    pub fn new(
        anchors: Vec<Anchor>,
        sh_degree: u32,
        mask_degree: u32,
        n_dir: u32,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one anchor".into()));
        }
        if n_dir < 16 {
            return Err(Error::InvalidConfig(format!(
                "n_dir must be at least 16, got {n_dir}"
            )));
        }
        let nsh = sh::basis_len(sh_degree);
        let nmask = mask_len(mask_degree);
        for (i, a) in anchors.iter().enumerate() {
            if a.sh_coeffs.len() != nsh || a.mask_coeffs.len() != nmask {
                return Err(Error::InvalidConfig(format!(
                    "anchor {i}: coefficient lengths {}/{} do not match degrees L={sh_degree}, K={mask_degree}",
                    a.sh_coeffs.len(),
                    a.mask_coeffs.len()
                )));
            }
        }
        Ok(MashModel {
            anchors,
            sh_degree,
            mask_degree,
            n_dir,
        })
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    /// Scalar parameters per anchor: 3 position + 3 rotation + SH + mask.
    pub fn params_per_anchor(&self) -> usize {
        6 + sh::basis_len(self.sh_degree) + mask_len(self.mask_degree)
    }

    pub fn param_count(&self) -> usize {
        self.anchor_count() * self.params_per_anchor()
    }

    /// Pack every parameter into one vector, anchor-major, each anchor as
    /// `[position, rotvec, sh_coeffs, mask_coeffs]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for a in &self.anchors {
            out.extend_from_slice(a.position.as_slice());
            out.extend_from_slice(a.rotvec.as_slice());
            out.extend_from_slice(&a.sh_coeffs);
            out.extend_from_slice(&a.mask_coeffs);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); bit-exact round trip.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let per = self.params_per_anchor();
        let nsh = sh::basis_len(self.sh_degree);
        for (i, a) in self.anchors.iter_mut().enumerate() {
            let base = i * per;
            a.position = Vector3::new(flat[base], flat[base + 1], flat[base + 2]);
            a.rotvec = Vector3::new(flat[base + 3], flat[base + 4], flat[base + 5]);
            a.sh_coeffs.copy_from_slice(&flat[base + 6..base + 6 + nsh]);
            a.mask_coeffs
                .copy_from_slice(&flat[base + 6 + nsh..base + per]);
        }
    }

    /// Wrap every rotation vector to an angle below 2 pi, keeping the axis.
    pub fn canonicalize_rotations(&mut self) {
        for a in &mut self.anchors {
            canonicalize_rotvec(&mut a.rotvec);
        }
    }

    /// Re-express the model under the uniform similarity
    /// `x -> scale * x + offset`. Positions and SH coefficients scale
    /// (distances are linear in the coefficients), rotations and mask
    /// coefficients are unaffected, so sampled geometry maps exactly.
    pub fn transformed(&self, scale: f64, offset: Vector3<f64>) -> MashModel {
        let mut out = self.clone();
        for a in &mut out.anchors {
            a.position = a.position * scale + offset;
            for c in &mut a.sh_coeffs {
                *c *= scale;
            }
        }
        out
    }
}

/// A pre-sampled direction in mask-local coordinates. `omega` and `phi` are
/// held fixed by the optimizer within an iteration; `theta_pre` is the polar
/// angle the direction had on the pre-sample sphere, so
/// `theta_pre = omega * alpha(phi)` exactly at filter time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayParam {
    pub omega: f64,
    pub phi: f64,
    pub theta_pre: f64,
}

/// Number of mask coefficients for degree `k_max`.
pub fn mask_len(k_max: u32) -> usize {
    2 * k_max as usize + 1
}

/// Total scalar parameter count for M anchors at mask degree K and SH
/// degree L.
pub fn param_count(m: usize, k_max: u32, l_max: u32) -> usize {
    m * (mask_len(k_max) + sh::basis_len(l_max) + 6)
}

/// Keep the opening angle strictly inside (0, pi): the sigmoid saturates to
/// exactly 0.0 or 1.0 in floating point around |s| = 38 even though it never
/// reaches them mathematically. The clamped region propagates zero gradient,
/// matching the vanishing true derivative there.
const ALPHA_MARGIN: f64 = 1e-9;

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Mask opening angle `alpha(phi) = pi * sigmoid(a_0 + sum a_k cos k phi +
/// b_k sin k phi)`, strictly inside (0, pi).
pub fn mask_angle(anchor: &Anchor, phi: f64) -> f64 {
    mask_eval(anchor, phi).alpha
}

pub(crate) struct MaskEval {
    pub alpha: f64,
    /// d alpha / d s where s is the trigonometric series value; zero when the
    /// angle sits on a clamp margin.
    pub dalpha_ds: f64,
}

pub(crate) fn mask_eval(anchor: &Anchor, phi: f64) -> MaskEval {
    let s = mask_series(anchor, phi);
    let sig = sigmoid(s);
    let raw = PI * sig;
    if raw <= ALPHA_MARGIN {
        MaskEval {
            alpha: ALPHA_MARGIN,
            dalpha_ds: 0.0,
        }
    } else if raw >= PI - ALPHA_MARGIN {
        MaskEval {
            alpha: PI - ALPHA_MARGIN,
            dalpha_ds: 0.0,
        }
    } else {
        MaskEval {
            alpha: raw,
            dalpha_ds: PI * sig * (1.0 - sig),
        }
    }
}

pub(crate) fn mask_series(anchor: &Anchor, phi: f64) -> f64 {
    let v = &anchor.mask_coeffs;
    let mut s = v[0];
    for k in 1..=(v.len() / 2) {
        let (sk, ck) = (k as f64 * phi).sin_cos();
        s += v[2 * k - 1] * ck + v[2 * k] * sk;
    }
    s
}

/// d/dphi of the trigonometric series (for tangents along the azimuth).
pub(crate) fn mask_series_dphi(anchor: &Anchor, phi: f64) -> f64 {
    let v = &anchor.mask_coeffs;
    let mut d = 0.0;
    for k in 1..=(v.len() / 2) {
        let kf = k as f64;
        let (sk, ck) = (kf * phi).sin_cos();
        d += kf * (-v[2 * k - 1] * sk + v[2 * k] * ck);
    }
    d
}

/// Distance along direction (theta, phi) in the anchor's local frame:
/// the SH expansion evaluated with the anchor's coefficients. May be negative
/// for unconstrained coefficients.
pub fn spherical_distance(anchor: &Anchor, theta: f64, phi: f64) -> f64 {
    let l_max = (anchor.sh_coeffs.len() as f64).sqrt() as u32 - 1;
    debug_assert_eq!(sh::basis_len(l_max), anchor.sh_coeffs.len());
    let mut ev = ShEvaluator::new(l_max);
    let mut y = vec![0.0; anchor.sh_coeffs.len()];
    ev.values_into(theta, phi, &mut y);
    y.iter().zip(&anchor.sh_coeffs).map(|(a, b)| a * b).sum()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix for a rotation vector (axis * angle). The series form
/// `I + a K + b K^2` with `K = skew(v)` is exact and smooth through the
/// zero-rotation point, where it returns the identity.
pub fn rotation_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = v.norm_squared();
    let (a, b) = if t2 < 1e-8 {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
        )
    } else {
        let t = t2.sqrt();
        ((t.sin()) / t, (1.0 - t.cos()) / t2)
    };
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Right Jacobian of the rotation: for a fixed local vector f,
/// d(R(v) f)/dv = -R(v) skew(f) J_r(v). Smooth through zero rotation, where
/// it is the identity (the small-angle expansion R = I + skew(v)).
pub(crate) fn rotation_right_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = v.norm_squared();
    let (b, c) = if t2 < 1e-8 {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t = t2.sqrt();
        ((1.0 - t.cos()) / t2, (t - t.sin()) / (t2 * t))
    };
    let k = skew(v);
    Matrix3::identity() - k * b + k * k * c
}

/// Wrap the rotation angle into [0, 2 pi), keeping the axis.
pub fn canonicalize_rotvec(v: &mut Vector3<f64>) {
    let n = v.norm();
    if n >= 2.0 * PI {
        let wrapped = n % (2.0 * PI);
        *v *= wrapped / n;
    }
}
