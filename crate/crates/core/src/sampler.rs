//! Differentiable surface sampling: Fibonacci directions, mask filtering,
//! spherical-distance evaluation, the anchored sphere inversion, and the
//! rigid pose, together with the hand-written reverse pass used by fitting.
//!
//! The forward map per kept ray (ω, φ) is
//!
//! ```text
//! θ = ω·α(φ)            mask angle α from the anchor's Fourier mask
//! d = Σ C_lm·Y_lm(θ,φ)  spherical distance
//! q = d·r(θ,φ)          anchor-local point on the parametric patch
//! f = O + (R²/‖q−O‖²)(q−O)   sphere inversion, O = (0,0,−h), R = 2h, h = C_0^0
//! p̂ = p + R_v·f         world point
//! ```
//!
//! Ray selection (which presamples survive the mask) is recomputed whenever
//! the mask changes and is not differentiated; within an evaluation the kept
//! (ω, φ) are constants and gradients reach the mask through θ = ω·α(φ).

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::f64::consts::{PI, TAU};

use crate::model::{
    mask_angle, mask_eval, mask_series_dphi, rotation_matrix, rotation_right_jacobian, Anchor,
    MashModel, RayParam,
};
use crate::sh::ShEvaluator;

/// Floor on the inversion denominator ‖q − O‖.
pub const INV_EPS: f64 = 1e-8;

/// Near-uniform directions on the unit sphere: (θ_j, φ_j) for j = 1..=n_dir
/// with θ_j = arccos(1 − (2j−1)/n_dir) and φ_j the golden-angle sequence
/// (1+√5)·π·(j−1/2) wrapped to [0, 2π).
pub fn fibonacci_presample(n_dir: u32) -> Vec<(f64, f64)> {
    assert!(n_dir >= 1);
    let n = n_dir as f64;
    let golden = (1.0 + 5.0f64.sqrt()) * PI;
    (1..=n_dir)
        .map(|j| {
            let jf = j as f64;
            let theta = (1.0 - (2.0 * jf - 1.0) / n).acos();
            let phi = (golden * (jf - 0.5)).rem_euclid(TAU);
            (theta, phi)
        })
        .collect()
}

/// Keep the presampled directions that fall inside the anchor's mask,
/// reparameterized as (ω, φ) with ω = θ_pre/α(φ) ∈ [0, 1].
pub fn filter_in_mask(anchor: &Anchor, presamples: &[(f64, f64)]) -> Vec<RayParam> {
    presamples
        .iter()
        .filter_map(|&(theta_pre, phi)| {
            let omega = theta_pre / mask_angle(anchor, phi);
            (omega <= 1.0).then_some(RayParam {
                omega,
                phi,
                theta_pre,
            })
        })
        .collect()
}

/// Constant-speed geodesic interpolation between unit vectors, falling back
/// to normalized linear interpolation when the endpoints are nearly parallel.
/// Antiparallel endpoints are the caller's problem (the geodesic is not
/// unique there).
pub fn slerp(a: &Vector3<f64>, b: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let angle = a.dot(b).clamp(-1.0, 1.0).acos();
    if angle < 1e-7 {
        return (a * (1.0 - t) + b * t).normalize();
    }
    (a * ((1.0 - t) * angle).sin() + b * (t * angle).sin()) / angle.sin()
}

/// Anchor-local unit direction of a ray: the geodesic from +z (ω = 0) to the
/// mask-boundary direction (ω = 1), which has polar angle exactly ω·α(φ) and
/// azimuth φ.
pub fn ray_direction(anchor: &Anchor, ray: &RayParam) -> Vector3<f64> {
    let theta = ray.omega * mask_angle(anchor, ray.phi);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = ray.phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// Reflect an anchor-local point through the sphere centered at O = (0,0,−h)
/// with radius 2h, where h is the anchor's constant-band coefficient. Bends
/// low-curvature geometry toward a sphere so low-degree harmonics can
/// represent it.
pub fn inverse_transform_point(anchor: &Anchor, q_local: &Vector3<f64>) -> Vector3<f64> {
    invert(anchor.c00(), q_local)
}

pub(crate) fn invert(h: f64, q: &Vector3<f64>) -> Vector3<f64> {
    let o = Vector3::new(0.0, 0.0, -h);
    let u = q - o;
    let denom = u.norm_squared().max(INV_EPS * INV_EPS);
    o + (4.0 * h * h / denom) * u
}

/// Knobs for the sampling pipeline. The inversion bypass exists for oracle
/// tests that need the raw parametric patch; fitting and export keep it on.
#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub apply_inversion: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            apply_inversion: true,
        }
    }
}

/// Samples generated from one anchor.
#[derive(Clone, Debug, Default)]
pub struct AnchorSamples {
    pub points: Vec<Vector3<f64>>,
    pub rays: Vec<RayParam>,
    pub boundary: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

/// Per-anchor surface and boundary samples for a whole model.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub per_anchor: Vec<AnchorSamples>,
}

impl SampleSet {
    pub fn surface_point_count(&self) -> usize {
        self.per_anchor.iter().map(|a| a.points.len()).sum()
    }

    /// Surface points concatenated anchor-major, ray order preserved.
    pub fn collect_surface_points(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.surface_point_count());
        for a in &self.per_anchor {
            out.extend_from_slice(&a.points);
        }
        out
    }
}

/// Per-thread workspace: the SH evaluator plus basis/derivative buffers.
pub(crate) struct SampleScratch {
    pub sh: ShEvaluator,
    pub y: Vec<f64>,
    pub dy_dtheta: Vec<f64>,
    pub dy_dphi: Vec<f64>,
}

impl SampleScratch {
    pub fn new(sh_degree: u32) -> Self {
        let sh = ShEvaluator::new(sh_degree);
        let n = sh.len();
        SampleScratch {
            sh,
            y: vec![0.0; n],
            dy_dtheta: vec![0.0; n],
            dy_dphi: vec![0.0; n],
        }
    }
}

/// Pose matrices of one anchor, computed once per iteration.
pub(crate) struct AnchorFrame {
    pub rot: Matrix3<f64>,
    pub jr: Matrix3<f64>,
}

impl AnchorFrame {
    pub fn new(anchor: &Anchor) -> Self {
        AnchorFrame {
            rot: rotation_matrix(&anchor.rotvec),
            jr: rotation_right_jacobian(&anchor.rotvec),
        }
    }
}

pub(crate) fn forward_point(
    anchor: &Anchor,
    rot: &Matrix3<f64>,
    scratch: &mut SampleScratch,
    ray: &RayParam,
    opts: SampleOptions,
) -> Vector3<f64> {
    let theta = ray.omega * mask_eval(anchor, ray.phi).alpha;
    scratch.sh.values_into(theta, ray.phi, &mut scratch.y);
    let d: f64 = anchor
        .sh_coeffs
        .iter()
        .zip(&scratch.y)
        .map(|(c, y)| c * y)
        .sum();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = ray.phi.sin_cos();
    let q = d * Vector3::new(st * cp, st * sp, ct);
    let local = if opts.apply_inversion {
        invert(anchor.c00(), &q)
    } else {
        q
    };
    anchor.position + rot * local
}

/// Accumulate ∂⟨g, p̂⟩/∂(anchor parameters) into `grad`, the anchor's slice
/// of the flat parameter vector laid out [position, rotvec, sh, mask]. The
/// ray's (ω, φ) are held fixed; the mask receives gradient through
/// θ = ω·α(φ).
pub(crate) fn pullback_point(
    anchor: &Anchor,
    frame: &AnchorFrame,
    scratch: &mut SampleScratch,
    ray: &RayParam,
    g: &Vector3<f64>,
    grad: &mut [f64],
) {
    let nsh = anchor.sh_coeffs.len();
    let mask = mask_eval(anchor, ray.phi);
    let theta = ray.omega * mask.alpha;
    scratch.sh.grads_into(
        theta,
        ray.phi,
        &mut scratch.y,
        &mut scratch.dy_dtheta,
        &mut scratch.dy_dphi,
    );
    let mut d = 0.0;
    let mut dd_dtheta = 0.0;
    for i in 0..nsh {
        d += anchor.sh_coeffs[i] * scratch.y[i];
        dd_dtheta += anchor.sh_coeffs[i] * scratch.dy_dtheta[i];
    }
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = ray.phi.sin_cos();
    let r = Vector3::new(st * cp, st * sp, ct);
    let dr_dtheta = Vector3::new(ct * cp, ct * sp, -st);
    let q = d * r;

    let h = anchor.c00();
    let big_r = 2.0 * h;
    let o = Vector3::new(0.0, 0.0, -h);
    let u = q - o;
    let n2 = u.norm_squared();
    let eps2 = INV_EPS * INV_EPS;
    let clamped = n2 < eps2;
    let denom = if clamped { eps2 } else { n2 };
    let s = big_r * big_r / denom;
    let f = o + s * u;

    grad[0] += g.x;
    grad[1] += g.y;
    grad[2] += g.z;

    let g_f = frame.rot.transpose() * g;
    let gv = frame.jr.transpose() * f.cross(&g_f);
    grad[3] += gv.x;
    grad[4] += gv.y;
    grad[5] += gv.z;

    // Inversion pullback. h enters through the center O, the radius R = 2h,
    // and u = q − O; when the denominator is clamped, s loses its dependence
    // on q and on u's length.
    let z = Vector3::z();
    let (g_q, df_dh) = if clamped {
        (s * g_f, (s - 1.0) * z)
    } else {
        let proj = u.dot(&g_f);
        (
            s * (g_f - (2.0 * proj / n2) * u),
            (s - 1.0) * z - (2.0 * s / n2) * u.z * u,
        )
    };
    let g_c00_inversion = g_f.dot(&df_dh) + (4.0 * big_r / denom) * g_f.dot(&u);

    let g_d = g_q.dot(&r);
    for i in 0..nsh {
        grad[6 + i] += g_d * scratch.y[i];
    }
    grad[6] += g_c00_inversion;

    let g_theta = g_d * dd_dtheta + d * g_q.dot(&dr_dtheta);
    let g_s = g_theta * ray.omega * mask.dalpha_ds;
    if g_s != 0.0 {
        let mbase = 6 + nsh;
        grad[mbase] += g_s;
        let kmax = anchor.mask_coeffs.len() / 2;
        for k in 1..=kmax {
            let (sk, ck) = (k as f64 * ray.phi).sin_cos();
            grad[mbase + 2 * k - 1] += g_s * ck;
            grad[mbase + 2 * k] += g_s * sk;
        }
    }
}

/// Analytic surface tangents (∂p̂/∂ω, ∂p̂/∂φ) at a ray.
pub(crate) fn tangents(
    anchor: &Anchor,
    rot: &Matrix3<f64>,
    scratch: &mut SampleScratch,
    ray: &RayParam,
    opts: SampleOptions,
) -> (Vector3<f64>, Vector3<f64>) {
    let nsh = anchor.sh_coeffs.len();
    let mask = mask_eval(anchor, ray.phi);
    let theta = ray.omega * mask.alpha;
    scratch.sh.grads_into(
        theta,
        ray.phi,
        &mut scratch.y,
        &mut scratch.dy_dtheta,
        &mut scratch.dy_dphi,
    );
    let mut d = 0.0;
    let mut dd_dtheta = 0.0;
    let mut dd_dphi_basis = 0.0;
    for i in 0..nsh {
        d += anchor.sh_coeffs[i] * scratch.y[i];
        dd_dtheta += anchor.sh_coeffs[i] * scratch.dy_dtheta[i];
        dd_dphi_basis += anchor.sh_coeffs[i] * scratch.dy_dphi[i];
    }
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = ray.phi.sin_cos();
    let r = Vector3::new(st * cp, st * sp, ct);
    let dr_dtheta = Vector3::new(ct * cp, ct * sp, -st);
    let q = d * r;

    let theta_w = mask.alpha;
    let theta_p = ray.omega * mask.dalpha_ds * mask_series_dphi(anchor, ray.phi);
    let dq_dtheta = dd_dtheta * r + d * dr_dtheta;
    let dr_dphi_explicit = Vector3::new(-st * sp, st * cp, 0.0);
    let dq_dw = dq_dtheta * theta_w;
    let dq_dp =
        (dd_dtheta * theta_p + dd_dphi_basis) * r + d * (dr_dtheta * theta_p + dr_dphi_explicit);

    let (jw, jp) = if opts.apply_inversion {
        let h = anchor.c00();
        let o = Vector3::new(0.0, 0.0, -h);
        let u = q - o;
        let n2 = u.norm_squared();
        let eps2 = INV_EPS * INV_EPS;
        let s = 4.0 * h * h / n2.max(eps2);
        let apply = |t: Vector3<f64>| {
            if n2 < eps2 {
                s * t
            } else {
                s * (t - (2.0 * u.dot(&t) / n2) * u)
            }
        };
        (apply(dq_dw), apply(dq_dp))
    } else {
        (dq_dw, dq_dp)
    };
    (rot * jw, rot * jp)
}

pub(crate) fn raw_normal(
    anchor: &Anchor,
    rot: &Matrix3<f64>,
    scratch: &mut SampleScratch,
    ray: &RayParam,
    opts: SampleOptions,
) -> Vector3<f64> {
    let (tw, tp) = tangents(anchor, rot, scratch, ray, opts);
    let c = tw.cross(&tp);
    let n = c.norm();
    if n < 1e-12 {
        // Degenerate tangents (patch pole or collapsed distance): the surface
        // is locally a sphere cap around the view axis, so fall back to the
        // radial direction.
        let theta = ray.omega * mask_eval(anchor, ray.phi).alpha;
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = ray.phi.sin_cos();
        return -(rot * Vector3::new(st * cp, st * sp, ct));
    }
    c / n
}

/// Unit normal of the sampled surface at one ray, from the analytic tangent
/// cross product. Returns the raw cross-product orientation; batch sampling
/// fixes signs per patch (see [`patch_normals`]).
pub fn surface_normal(model: &MashModel, anchor_index: usize, ray: &RayParam) -> Vector3<f64> {
    surface_normal_with(model, anchor_index, ray, SampleOptions::default())
}

pub fn surface_normal_with(
    model: &MashModel,
    anchor_index: usize,
    ray: &RayParam,
    opts: SampleOptions,
) -> Vector3<f64> {
    let anchor = &model.anchors[anchor_index];
    let mut scratch = SampleScratch::new(model.sh_degree);
    let rot = rotation_matrix(&anchor.rotvec);
    raw_normal(anchor, &rot, &mut scratch, ray, opts)
}

fn patch_normals_inner(
    anchor: &Anchor,
    rot: &Matrix3<f64>,
    scratch: &mut SampleScratch,
    rays: &[RayParam],
    points: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    let mut normals: Vec<Vector3<f64>> = rays
        .iter()
        .map(|ray| raw_normal(anchor, rot, scratch, ray, SampleOptions::default()))
        .collect();
    let mut away = 0.0;
    for (n, p) in normals.iter().zip(points) {
        away += n.dot(&(p - anchor.position));
    }
    if away < 0.0 {
        for n in &mut normals {
            *n = -*n;
        }
    }
    normals
}

/// Normals for all rays of one anchor with a patch-consistent sign: flipped,
/// if needed, so they point away from the anchor position on average.
pub fn patch_normals(
    model: &MashModel,
    anchor_index: usize,
    rays: &[RayParam],
    points: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    assert_eq!(rays.len(), points.len());
    let anchor = &model.anchors[anchor_index];
    let mut scratch = SampleScratch::new(model.sh_degree);
    let rot = rotation_matrix(&anchor.rotvec);
    patch_normals_inner(anchor, &rot, &mut scratch, rays, points)
}

/// World-space surface points for the given rays of one anchor.
pub fn sample_surface(
    model: &MashModel,
    anchor_index: usize,
    rays: &[RayParam],
) -> Vec<Vector3<f64>> {
    sample_surface_with(model, anchor_index, rays, SampleOptions::default())
}

pub fn sample_surface_with(
    model: &MashModel,
    anchor_index: usize,
    rays: &[RayParam],
    opts: SampleOptions,
) -> Vec<Vector3<f64>> {
    let anchor = &model.anchors[anchor_index];
    let mut scratch = SampleScratch::new(model.sh_degree);
    let rot = rotation_matrix(&anchor.rotvec);
    rays.iter()
        .map(|ray| forward_point(anchor, &rot, &mut scratch, ray, opts))
        .collect()
}

pub(crate) fn boundary_rays(anchor: &Anchor, n_bd: usize) -> Vec<RayParam> {
    (0..n_bd)
        .map(|i| {
            let phi = TAU * i as f64 / n_bd as f64;
            RayParam {
                omega: 1.0,
                phi,
                theta_pre: mask_angle(anchor, phi),
            }
        })
        .collect()
}

/// World-space points on the anchor's mask boundary (ω = 1) at `n_bd` evenly
/// spaced azimuths.
pub fn sample_boundary(model: &MashModel, anchor_index: usize, n_bd: usize) -> Vec<Vector3<f64>> {
    assert!(n_bd >= 3);
    let rays = boundary_rays(&model.anchors[anchor_index], n_bd);
    sample_surface(model, anchor_index, &rays)
}

/// Sample every anchor: mask-filtered surface points, boundary rings
/// (skipped when `n_bd` is 0), and optionally patch-signed normals.
pub fn sample_model(model: &MashModel, n_bd: usize, with_normals: bool) -> SampleSet {
    let pre = fibonacci_presample(model.n_dir);
    let per_anchor: Vec<AnchorSamples> = (0..model.anchors.len())
        .into_par_iter()
        .map(|i| {
            let anchor = &model.anchors[i];
            let mut scratch = SampleScratch::new(model.sh_degree);
            let rot = rotation_matrix(&anchor.rotvec);
            let rays = filter_in_mask(anchor, &pre);
            let points: Vec<Vector3<f64>> = rays
                .iter()
                .map(|ray| forward_point(anchor, &rot, &mut scratch, ray, SampleOptions::default()))
                .collect();
            let boundary: Vec<Vector3<f64>> = if n_bd >= 3 {
                boundary_rays(anchor, n_bd)
                    .iter()
                    .map(|ray| {
                        forward_point(anchor, &rot, &mut scratch, ray, SampleOptions::default())
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let normals =
                with_normals.then(|| patch_normals_inner(anchor, &rot, &mut scratch, &rays, &points));
            AnchorSamples {
                points,
                rays,
                boundary,
                normals,
            }
        })
        .collect();
    SampleSet { per_anchor }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_count;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_anchor(rng: &mut impl Rng, l: u32, k: u32) -> Anchor {
        let mut a = Anchor::zeroed(l, k);
        a.position = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        a.rotvec = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        a.sh_coeffs[0] = rng.gen_range(0.25..0.6);
        for c in a.sh_coeffs.iter_mut().skip(1) {
            *c = rng.gen_range(-0.04..0.04);
        }
        for c in a.mask_coeffs.iter_mut() {
            *c = rng.gen_range(-0.5..0.5);
        }
        a
    }

    fn model_of(anchor: Anchor, l: u32, k: u32) -> MashModel {
        MashModel::new(vec![anchor], l, k, 64).unwrap()
    }

    fn random_ray(rng: &mut impl Rng) -> RayParam {
        let phi = rng.gen_range(0.0..TAU);
        RayParam {
            omega: rng.gen_range(0.05..0.9),
            phi,
            theta_pre: 0.0,
        }
    }

    #[test]
    fn fibonacci_small_cases() {
        let one = fibonacci_presample(1);
        assert_eq!(one.len(), 1);
        assert!((one[0].0 - FRAC_PI_2).abs() < 1e-15);
        assert!((one[0].1 - 5.0832).abs() < 1e-4);
        let two = fibonacci_presample(2);
        assert!((two[0].0 - PI / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fibonacci_cap_count_matches_area() {
        let pre = fibonacci_presample(4000);
        let in_cap = pre.iter().filter(|(t, _)| *t < PI / 3.0).count();
        // Cap area fraction (1 − cos(π/3))/2 = 1/4 of 4000.
        assert_eq!(in_cap, 1000);
    }

    #[test]
    fn fibonacci_covers_both_hemispheres() {
        let pre = fibonacci_presample(101);
        let north = pre.iter().filter(|(t, _)| *t < FRAC_PI_2).count();
        assert!((north as i64 - 50).abs() <= 1);
        for (t, p) in pre {
            assert!((0.0..PI).contains(&t));
            assert!((0.0..TAU).contains(&p));
        }
    }

    #[test]
    fn constant_mask_keeps_upper_cone() {
        let anchor = Anchor::zeroed(2, 3);
        let rays = filter_in_mask(&anchor, &[(std::f64::consts::FRAC_PI_4, 0.3)]);
        assert_eq!(rays.len(), 1);
        assert_eq!(rays[0].omega, 0.5);
        assert_eq!(rays[0].phi, 0.3);
        // Below the hemisphere boundary, dropped.
        let dropped = filter_in_mask(&anchor, &[(2.0, 0.3)]);
        assert!(dropped.is_empty());
    }

    #[test]
    fn saturated_mask_keeps_everything() {
        let mut anchor = Anchor::zeroed(2, 3);
        anchor.mask_coeffs[0] = 50.0;
        let pre = fibonacci_presample(500);
        assert_eq!(filter_in_mask(&anchor, &pre).len(), 500);
    }

    #[test]
    fn filter_matches_per_sample_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let anchor = random_anchor(&mut rng, 2, 3);
        let pre = fibonacci_presample(1000);
        let kept = filter_in_mask(&anchor, &pre);
        let mut expect = Vec::new();
        for &(theta, phi) in &pre {
            if theta <= mask_angle(&anchor, phi) {
                expect.push((theta, phi));
            }
        }
        assert_eq!(kept.len(), expect.len());
        for (ray, (theta, phi)) in kept.iter().zip(expect) {
            assert_eq!(ray.theta_pre.to_bits(), theta.to_bits());
            assert_eq!(ray.phi.to_bits(), phi.to_bits());
        }
    }

    #[test]
    fn ray_selection_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let anchor = random_anchor(&mut rng, 2, 3);
        let pre = fibonacci_presample(777);
        let a = filter_in_mask(&anchor, &pre);
        let b = filter_in_mask(&anchor, &pre);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.omega.to_bits(), y.omega.to_bits());
            assert_eq!(x.phi.to_bits(), y.phi.to_bits());
        }
    }

    #[test]
    fn ray_direction_endpoints() {
        let anchor = Anchor::zeroed(2, 3);
        let pole = ray_direction(
            &anchor,
            &RayParam {
                omega: 0.0,
                phi: 1.7,
                theta_pre: 0.0,
            },
        );
        assert!((pole - Vector3::z()).norm() < 1e-15);
        let phi = 0.9;
        let rim = ray_direction(
            &anchor,
            &RayParam {
                omega: 1.0,
                phi,
                theta_pre: 0.0,
            },
        );
        let alpha = mask_angle(&anchor, phi);
        let expect = Vector3::new(
            alpha.sin() * phi.cos(),
            alpha.sin() * phi.sin(),
            alpha.cos(),
        );
        assert!((rim - expect).norm() < 1e-15);
    }

    #[test]
    fn ray_direction_midpoint() {
        let anchor = Anchor::zeroed(2, 3);
        let mid = ray_direction(
            &anchor,
            &RayParam {
                omega: 0.5,
                phi: 0.0,
                theta_pre: 0.0,
            },
        );
        let quarter = std::f64::consts::FRAC_PI_4;
        assert!((mid - Vector3::new(quarter.sin(), 0.0, quarter.cos())).norm() < 1e-15);
    }

    #[test]
    fn ray_angle_is_linear_in_omega() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let anchor = random_anchor(&mut rng, 2, 3);
            let ray = RayParam {
                omega: rng.gen_range(0.0..1.0),
                phi: rng.gen_range(0.0..TAU),
                theta_pre: 0.0,
            };
            let dir = ray_direction(&anchor, &ray);
            let angle = Vector3::z().cross(&dir).norm().atan2(Vector3::z().dot(&dir));
            assert!((angle - ray.omega * mask_angle(&anchor, ray.phi)).abs() < 1e-10);
        }
    }

    #[test]
    fn ray_direction_agrees_with_generic_slerp() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..500 {
            let anchor = random_anchor(&mut rng, 2, 3);
            let ray = RayParam {
                omega: rng.gen_range(0.0..1.0),
                phi: rng.gen_range(0.0..TAU),
                theta_pre: 0.0,
            };
            let alpha = mask_angle(&anchor, ray.phi);
            let rim = Vector3::new(
                alpha.sin() * ray.phi.cos(),
                alpha.sin() * ray.phi.sin(),
                alpha.cos(),
            );
            let via_slerp = slerp(&Vector3::z(), &rim, ray.omega);
            assert!((via_slerp - ray_direction(&anchor, &ray)).norm() < 1e-12);
        }
    }

    #[test]
    fn inversion_fixes_its_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut anchor = Anchor::zeroed(2, 3);
        anchor.sh_coeffs[0] = 0.5 / crate::sh::eval_basis(0, 0.0, 0.0)[0];
        let h = anchor.c00();
        let o = Vector3::new(0.0, 0.0, -h);
        for _ in 0..100 {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let q = o + 2.0 * h * dir;
            let p = inverse_transform_point(&anchor, &q);
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn inversion_closed_form_case() {
        let mut anchor = Anchor::zeroed(0, 0);
        anchor.sh_coeffs[0] = 0.5;
        let p = inverse_transform_point(&anchor, &Vector3::new(0.0, 0.0, 1.5));
        assert!(p.norm() < 1e-15);
    }

    #[test]
    fn inversion_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..10_000 {
            let mut anchor = Anchor::zeroed(0, 0);
            anchor.sh_coeffs[0] = rng.gen_range(0.1..1.0);
            let h = anchor.c00();
            let o = Vector3::new(0.0, 0.0, -h);
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let q = o + rng.gen_range(1e-3..3.0) * dir;
            let twice = inverse_transform_point(&anchor, &inverse_transform_point(&anchor, &q));
            assert!((twice - q).norm() < 1e-9, "involution broke: {q:?}");
        }
    }

    #[test]
    fn samples_match_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..50 {
            let anchor = random_anchor(&mut rng, 2, 3);
            let model = model_of(anchor.clone(), 2, 3);
            let rays: Vec<RayParam> = (0..20).map(|_| random_ray(&mut rng)).collect();
            let got = sample_surface(&model, 0, &rays);
            for (ray, p) in rays.iter().zip(&got) {
                // Straight-line recomputation with independent pieces.
                let mut series = anchor.mask_coeffs[0];
                for k in 1..=3usize {
                    series += anchor.mask_coeffs[2 * k - 1] * (k as f64 * ray.phi).cos()
                        + anchor.mask_coeffs[2 * k] * (k as f64 * ray.phi).sin();
                }
                let alpha = PI / (1.0 + (-series).exp());
                let theta = ray.omega * alpha;
                let y = crate::sh::eval_basis(2, theta, ray.phi);
                let d: f64 = anchor.sh_coeffs.iter().zip(&y).map(|(c, v)| c * v).sum();
                let q = d * Vector3::new(
                    theta.sin() * ray.phi.cos(),
                    theta.sin() * ray.phi.sin(),
                    theta.cos(),
                );
                let h = anchor.sh_coeffs[0];
                let o = Vector3::new(0.0, 0.0, -h);
                let f = o + (4.0 * h * h / (q - o).norm_squared()) * (q - o);
                let expect = Rotation3::new(anchor.rotvec) * f + anchor.position;
                assert!((p - expect).norm() < 1e-12 * (1.0 + expect.norm()));
            }
        }
    }

    #[test]
    fn translation_shifts_samples_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let anchor = random_anchor(&mut rng, 2, 3);
        let delta = Vector3::new(0.3, -1.2, 0.7);
        let mut moved = anchor.clone();
        moved.position += delta;
        let rays: Vec<RayParam> = (0..30).map(|_| random_ray(&mut rng)).collect();
        let a = sample_surface(&model_of(anchor, 2, 3), 0, &rays);
        let b = sample_surface(&model_of(moved, 2, 3), 0, &rays);
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pb - pa - delta).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_distance_patch_is_inverted_sphere_cap() {
        let mut anchor = Anchor::zeroed(2, 3);
        anchor.sh_coeffs[0] = 0.4;
        let model = model_of(anchor.clone(), 2, 3);
        let rays = filter_in_mask(&anchor, &fibonacci_presample(200));
        let raw = sample_surface_with(
            &model,
            0,
            &rays,
            SampleOptions {
                apply_inversion: false,
            },
        );
        let inverted = sample_surface(&model, 0, &rays);
        let radius = anchor.c00() * crate::sh::eval_basis(0, 0.0, 0.0)[0];
        for (r, p) in raw.iter().zip(&inverted) {
            assert!((r.norm() - radius).abs() < 1e-12);
            let expect = inverse_transform_point(&anchor, r);
            assert!((p - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn samples_round_trip_to_their_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let anchor = random_anchor(&mut rng, 2, 3);
            let model = model_of(anchor.clone(), 2, 3);
            let rays: Vec<RayParam> = (0..20)
                .map(|_| {
                    let mut r = random_ray(&mut rng);
                    r.omega = rng.gen_range(0.1..1.0);
                    r
                })
                .collect();
            let pts = sample_surface(&model, 0, &rays);
            let rot = rotation_matrix(&anchor.rotvec);
            for (ray, p) in rays.iter().zip(&pts) {
                let local = rot.transpose() * (p - anchor.position);
                let q = inverse_transform_point(&anchor, &local);
                let theta = (q.z / q.norm()).acos();
                let phi = q.y.atan2(q.x).rem_euclid(TAU);
                assert!((theta - ray.omega * mask_angle(&anchor, ray.phi)).abs() < 1e-8);
                let dphi = (phi - ray.phi + PI).rem_euclid(TAU) - PI;
                assert!(dphi.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn boundary_ring_of_constant_patch_is_planar() {
        let mut anchor = Anchor::zeroed(2, 3);
        anchor.sh_coeffs[0] = 0.4;
        let model = model_of(anchor, 2, 3);
        let ring = sample_boundary(&model, 0, 64);
        let z0 = ring[0].z;
        let r0 = (ring[0].x * ring[0].x + ring[0].y * ring[0].y).sqrt();
        for p in &ring {
            assert!((p.z - z0).abs() < 1e-12);
            assert!(((p.x * p.x + p.y * p.y).sqrt() - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_azimuths_are_evenly_spaced() {
        let anchor = Anchor::zeroed(2, 3);
        let rays = boundary_rays(&anchor, 36);
        assert_eq!(rays.len(), 36);
        let step = TAU / 36.0;
        for w in rays.windows(2) {
            assert!((w[1].phi - w[0].phi - step).abs() < 4e-15);
        }
        assert!(rays.iter().all(|r| r.omega == 1.0));
    }

    #[test]
    fn boundary_equals_surface_at_rim() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let anchor = random_anchor(&mut rng, 2, 3);
        let model = model_of(anchor.clone(), 2, 3);
        let ring = sample_boundary(&model, 0, 17);
        let rays = boundary_rays(&anchor, 17);
        let direct = sample_surface(&model, 0, &rays);
        for (a, b) in ring.iter().zip(&direct) {
            assert_eq!((a - b).norm(), 0.0);
        }
    }

    #[test]
    fn pullback_matches_parameter_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (l, k) = (2u32, 3u32);
        let nparams = param_count(1, k, l);
        for case in 0..20 {
            let anchor = random_anchor(&mut rng, l, k);
            let model = model_of(anchor.clone(), l, k);
            let ray = random_ray(&mut rng);
            let g = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let frame = AnchorFrame::new(&anchor);
            let mut scratch = SampleScratch::new(l);
            let mut grad = vec![0.0; nparams];
            pullback_point(&anchor, &frame, &mut scratch, &ray, &g, &mut grad);

            let flat = model.flatten();
            let h = 1e-5;
            for j in 0..nparams {
                let eval = |delta: f64| {
                    let mut pert = flat.clone();
                    pert[j] += delta;
                    let mut m = model.clone();
                    m.set_from_flat(&pert);
                    let rot = rotation_matrix(&m.anchors[0].rotvec);
                    let mut s = SampleScratch::new(l);
                    g.dot(&forward_point(
                        &m.anchors[0],
                        &rot,
                        &mut s,
                        &ray,
                        SampleOptions::default(),
                    ))
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (grad[j] - fd).abs();
                assert!(
                    err <= 1e-4 * grad[j].abs().max(fd.abs()) + 1e-8,
                    "case {case} param {j}: analytic {} vs fd {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn tangents_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for &apply_inversion in &[true, false] {
            let opts = SampleOptions { apply_inversion };
            for _ in 0..50 {
                let anchor = random_anchor(&mut rng, 2, 3);
                let model = model_of(anchor.clone(), 2, 3);
                let ray = random_ray(&mut rng);
                let rot = rotation_matrix(&anchor.rotvec);
                let mut scratch = SampleScratch::new(2);
                let (tw, tp) = tangents(&anchor, &rot, &mut scratch, &ray, opts);
                let h = 1e-6;
                let eval = |omega: f64, phi: f64| {
                    sample_surface_with(
                        &model,
                        0,
                        &[RayParam {
                            omega,
                            phi,
                            theta_pre: 0.0,
                        }],
                        opts,
                    )[0]
                };
                let fw = (eval(ray.omega + h, ray.phi) - eval(ray.omega - h, ray.phi)) / (2.0 * h);
                let fp = (eval(ray.omega, ray.phi + h) - eval(ray.omega, ray.phi - h)) / (2.0 * h);
                assert!(
                    (tw - fw).norm() <= 1e-4 * tw.norm().max(fw.norm()) + 1e-8,
                    "omega tangent {tw:?} vs {fw:?}"
                );
                assert!(
                    (tp - fp).norm() <= 1e-4 * tp.norm().max(fp.norm()) + 1e-8,
                    "phi tangent {tp:?} vs {fp:?}"
                );
            }
        }
    }

    #[test]
    fn normals_are_unit_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..1000 {
            let anchor = random_anchor(&mut rng, 2, 3);
            let model = model_of(anchor, 2, 3);
            let n = surface_normal(&model, 0, &random_ray(&mut rng));
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cap_normal_at_pole_is_axial() {
        let mut anchor = Anchor::zeroed(2, 3);
        anchor.sh_coeffs[0] = 0.4;
        let model = model_of(anchor, 2, 3);
        let n = surface_normal_with(
            &model,
            0,
            &RayParam {
                omega: 0.0,
                phi: 0.0,
                theta_pre: 0.0,
            },
            SampleOptions {
                apply_inversion: false,
            },
        );
        assert!((n.z.abs() - 1.0).abs() < 1e-12);
        assert!(n.x.abs() < 1e-12 && n.y.abs() < 1e-12);
    }

    #[test]
    fn patch_normals_point_away_from_anchor_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..20 {
            let anchor = random_anchor(&mut rng, 2, 3);
            let model = model_of(anchor.clone(), 2, 3);
            let rays = filter_in_mask(&anchor, &fibonacci_presample(300));
            let points = sample_surface(&model, 0, &rays);
            let normals = patch_normals(&model, 0, &rays, &points);
            let away: f64 = normals
                .iter()
                .zip(&points)
                .map(|(n, p)| n.dot(&(p - anchor.position)))
                .sum();
            assert!(away >= 0.0);
        }
    }

    #[test]
    fn sample_model_assembles_all_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let anchors: Vec<Anchor> = (0..5).map(|_| random_anchor(&mut rng, 2, 3)).collect();
        let model = MashModel::new(anchors, 2, 3, 128).unwrap();
        let set = sample_model(&model, 12, true);
        assert_eq!(set.per_anchor.len(), 5);
        let mut total = 0;
        for (i, a) in set.per_anchor.iter().enumerate() {
            assert_eq!(a.points.len(), a.rays.len());
            assert_eq!(a.boundary.len(), 12);
            let normals = a.normals.as_ref().unwrap();
            assert_eq!(normals.len(), a.points.len());
            for n in normals {
                assert!((n.norm() - 1.0).abs() < 1e-9);
            }
            let direct = sample_surface(&model, i, &a.rays);
            for (x, y) in a.points.iter().zip(&direct) {
                assert_eq!((x - y).norm(), 0.0);
            }
            total += a.points.len();
        }
        assert_eq!(set.surface_point_count(), total);
        assert_eq!(set.collect_surface_points().len(), total);
        let skipped = sample_model(&model, 0, false);
        assert!(skipped.per_anchor.iter().all(|a| a.boundary.is_empty()));
    }
}
