//! Real orthonormal spherical harmonics and their angular derivatives.
//!
//! Basis values are ordered band-major: (l=0,m=0), (l=1,m=-1), (l=1,m=0),
//! (l=1,m=1), ..., so band l occupies indices l*l ..= l*l + 2l. Negative m
//! selects the sin(|m| phi) form, positive m the cos(m phi) form, and the
//! normalization is orthonormal over the sphere: the surface integral of
//! Y_i * Y_j equals the Kronecker delta.
//!
//! The associated Legendre terms are built with the standard three-term
//! recurrences, carrying d/dtheta alongside the values so no expression ever
//! divides by sin(theta); everything stays finite at the poles.

use std::f64::consts::PI;

/// Number of basis functions through degree `l_max`.
pub fn basis_len(l_max: u32) -> usize {
    let n = l_max as usize + 1;
    n * n
}

/// Evaluate the basis at (`theta`, `phi`).
pub fn eval_basis(l_max: u32, theta: f64, phi: f64) -> Vec<f64> {
    let mut ev = ShEvaluator::new(l_max);
    let mut y = vec![0.0; basis_len(l_max)];
    ev.values_into(theta, phi, &mut y);
    y
}

/// Evaluate the partial derivatives of the basis at (`theta`, `phi`).
/// Returns (d/dtheta, d/dphi).
pub fn eval_basis_grad(l_max: u32, theta: f64, phi: f64) -> (Vec<f64>, Vec<f64>) {
    let mut ev = ShEvaluator::new(l_max);
    let n = basis_len(l_max);
    let mut y = vec![0.0; n];
    let mut dt = vec![0.0; n];
    let mut dp = vec![0.0; n];
    ev.grads_into(theta, phi, &mut y, &mut dt, &mut dp);
    (dt, dp)
}

/// Reusable evaluator holding the associated-Legendre scratch buffers, for
/// callers that evaluate the basis many times at a fixed degree.
pub struct ShEvaluator {
    l_max: usize,
    p: Vec<f64>,
    dp: Vec<f64>,
}

impl ShEvaluator {
    pub fn new(l_max: u32) -> Self {
        let l = l_max as usize;
        let tri = (l + 1) * (l + 2) / 2;
        ShEvaluator {
            l_max: l,
            p: vec![0.0; tri],
            dp: vec![0.0; tri],
        }
    }

    pub fn l_max(&self) -> u32 {
        self.l_max as u32
    }

    pub fn len(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Basis values only; `y` must have length `(l_max+1)^2`.
    pub fn values_into(&mut self, theta: f64, phi: f64, y: &mut [f64]) {
        assert_eq!(y.len(), self.len());
        self.legendre(theta);
        for l in 0..=self.l_max {
            let base = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
            let center = l * l + l;
            let mut ratio = 1.0;
            for m in 0..=l {
                let plm = self.p[tri(l, m)];
                if m == 0 {
                    y[center] = base * plm;
                } else {
                    ratio /= ((l + m) * (l - m + 1)) as f64;
                    let k = std::f64::consts::SQRT_2 * base * ratio.sqrt();
                    let (sm, cm) = (m as f64 * phi).sin_cos();
                    y[center + m] = k * plm * cm;
                    y[center - m] = k * plm * sm;
                }
            }
        }
    }

    /// Basis values plus both angular derivatives; all slices must have
    /// length `(l_max+1)^2`.
    pub fn grads_into(
        &mut self,
        theta: f64,
        phi: f64,
        y: &mut [f64],
        dy_dtheta: &mut [f64],
        dy_dphi: &mut [f64],
    ) {
        assert_eq!(y.len(), self.len());
        assert_eq!(dy_dtheta.len(), self.len());
        assert_eq!(dy_dphi.len(), self.len());
        self.legendre(theta);
        for l in 0..=self.l_max {
            let base = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
            let center = l * l + l;
            let mut ratio = 1.0;
            for m in 0..=l {
                let plm = self.p[tri(l, m)];
                let dplm = self.dp[tri(l, m)];
                if m == 0 {
                    y[center] = base * plm;
                    dy_dtheta[center] = base * dplm;
                    dy_dphi[center] = 0.0;
                } else {
                    ratio /= ((l + m) * (l - m + 1)) as f64;
                    let k = std::f64::consts::SQRT_2 * base * ratio.sqrt();
                    let mf = m as f64;
                    let (sm, cm) = (mf * phi).sin_cos();
                    y[center + m] = k * plm * cm;
                    y[center - m] = k * plm * sm;
                    dy_dtheta[center + m] = k * dplm * cm;
                    dy_dtheta[center - m] = k * dplm * sm;
                    dy_dphi[center + m] = -mf * k * plm * sm;
                    dy_dphi[center - m] = mf * k * plm * cm;
                }
            }
        }
    }

    /// Fill `p` with P_l^m(cos theta) (no Condon-Shortley phase) and `dp`
    /// with the theta-derivatives, for 0 <= m <= l <= l_max.
    ///
    /// ```text
    /// P_m^m     = (2m-1)!! sin^m
    /// P_{m+1}^m = (2m+1) cos P_m^m
    /// (l-m) P_l^m = (2l-1) cos P_{l-1}^m - (l+m-1) P_{l-2}^m
    /// ```
    fn legendre(&mut self, theta: f64) {
        let (s, c) = theta.sin_cos();
        let p = &mut self.p;
        let dp = &mut self.dp;
        p[0] = 1.0;
        dp[0] = 0.0;
        for m in 1..=self.l_max {
            let prev = tri(m - 1, m - 1);
            let cur = tri(m, m);
            let f = (2 * m - 1) as f64;
            p[cur] = f * s * p[prev];
            dp[cur] = f * (c * p[prev] + s * dp[prev]);
        }
        for m in 0..self.l_max {
            let diag = tri(m, m);
            let cur = tri(m + 1, m);
            let f = (2 * m + 1) as f64;
            p[cur] = f * c * p[diag];
            dp[cur] = f * (c * dp[diag] - s * p[diag]);
        }
        for m in 0..=self.l_max {
            for l in (m + 2)..=self.l_max {
                let a = (2 * l - 1) as f64;
                let b = (l + m - 1) as f64;
                let inv = 1.0 / (l - m) as f64;
                let i1 = tri(l - 1, m);
                let i2 = tri(l - 2, m);
                let cur = tri(l, m);
                p[cur] = (a * c * p[i1] - b * p[i2]) * inv;
                dp[cur] = (a * (c * dp[i1] - s * p[i1]) - b * dp[i2]) * inv;
            }
        }
    }
}

#[inline]
fn tri(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Closed-form real orthonormal harmonics through degree 2, written out
    /// from the standard table. Independent of the recurrence path above.
    fn table_l2(theta: f64, phi: f64) -> [f64; 9] {
        let (s, c) = theta.sin_cos();
        let sqrt_pi = PI.sqrt();
        [
            0.5 / sqrt_pi,
            (3.0 / (4.0 * PI)).sqrt() * s * phi.sin(),
            (3.0 / (4.0 * PI)).sqrt() * c,
            (3.0 / (4.0 * PI)).sqrt() * s * phi.cos(),
            0.25 * (15.0 / PI).sqrt() * s * s * (2.0 * phi).sin(),
            0.5 * (15.0 / PI).sqrt() * s * c * phi.sin(),
            0.25 * (5.0 / PI).sqrt() * (3.0 * c * c - 1.0),
            0.5 * (15.0 / PI).sqrt() * s * c * phi.cos(),
            0.25 * (15.0 / PI).sqrt() * s * s * (2.0 * phi).cos(),
        ]
    }

    #[test]
    fn constant_band() {
        let y = eval_basis(0, 1.1, 2.2);
        assert_eq!(y.len(), 1);
        assert!((y[0] - 0.28209479177387814).abs() < 1e-15);
    }

    #[test]
    fn degree_one_at_pole() {
        let y = eval_basis(1, 0.0, 0.0);
        assert_eq!(y.len(), 4);
        assert_eq!(y[1], 0.0);
        assert_eq!(y[3], 0.0);
        assert!((y[2] - 0.4886025119029199).abs() < 1e-12);
    }

    #[test]
    fn degree_two_matches_closed_forms() {
        let mut worst = 0.0f64;
        for &theta in &[0.0, 1e-9, PI / 3.0, 1.1, PI / 2.0, 2.5, PI] {
            for &phi in &[0.0, PI / 5.0, 1.0, 2.0, 4.0, 6.2] {
                let y = eval_basis(2, theta, phi);
                let t = table_l2(theta, phi);
                for i in 0..9 {
                    worst = worst.max((y[i] - t[i]).abs());
                }
            }
        }
        assert!(worst < 1e-13, "max deviation from closed forms: {worst:e}");
    }

    #[test]
    fn gradient_of_constant_band_is_zero() {
        let (dt, dp) = eval_basis_grad(0, 0.7, 1.3);
        assert_eq!(dt[0], 0.0);
        assert_eq!(dp[0], 0.0);
    }

    #[test]
    fn polar_derivative_closed_form() {
        let (dt, _) = eval_basis_grad(1, PI / 4.0, 0.0);
        let expected = -(3.0 / (4.0 * PI)).sqrt() * (PI / 4.0).sin();
        assert!((dt[2] - expected).abs() < 1e-14);
    }

    fn check_grads_against_fd(l_max: u32, theta: f64, phi: f64, tol_rel: f64) {
        let n = basis_len(l_max);
        let h = 1e-6;
        let (dt, dp) = eval_basis_grad(l_max, theta, phi);
        let tp = eval_basis(l_max, theta + h, phi);
        let tm = eval_basis(l_max, theta - h, phi);
        let pp = eval_basis(l_max, theta, phi + h);
        let pm = eval_basis(l_max, theta, phi - h);
        for i in 0..n {
            let fd_t = (tp[i] - tm[i]) / (2.0 * h);
            let fd_p = (pp[i] - pm[i]) / (2.0 * h);
            let et = (dt[i] - fd_t).abs();
            let ep = (dp[i] - fd_p).abs();
            assert!(
                et <= tol_rel * dt[i].abs().max(fd_t.abs()) + 1e-8,
                "d/dtheta[{i}] analytic {} vs fd {} at ({theta},{phi})",
                dt[i],
                fd_t
            );
            assert!(
                ep <= tol_rel * dp[i].abs().max(fd_p.abs()) + 1e-8,
                "d/dphi[{i}] analytic {} vs fd {} at ({theta},{phi})",
                dp[i],
                fd_p
            );
        }
    }

    #[test]
    fn degree_two_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let theta = rng.gen_range(0.05..PI - 0.05);
            let phi = rng.gen_range(0.0..2.0 * PI);
            check_grads_against_fd(2, theta, phi, 1e-6);
        }
    }

    #[test]
    fn higher_degree_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let l = rng.gen_range(0..=4);
            let theta = rng.gen_range(0.05..PI - 0.05);
            let phi = rng.gen_range(0.0..2.0 * PI);
            check_grads_against_fd(l, theta, phi, 1e-5);
        }
    }

    #[test]
    fn continuous_across_phi_wrap() {
        for l in 0..=3u32 {
            for &theta in &[0.3, 1.2, 2.8] {
                let a = eval_basis(l, theta, 0.0);
                let b = eval_basis(l, theta, 2.0 * PI - 1e-12);
                for i in 0..basis_len(l) {
                    assert!((a[i] - b[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn poles_stay_finite() {
        for &theta in &[0.0, PI] {
            let y = eval_basis(4, theta, 1.0);
            let (dt, dp) = eval_basis_grad(4, theta, 1.0);
            for i in 0..basis_len(4) {
                assert!(y[i].is_finite() && dt[i].is_finite() && dp[i].is_finite());
            }
        }
    }

    #[test]
    fn gram_matrix_is_identity_under_quadrature() {
        // Deterministic near-uniform directions; equal-weight quadrature over
        // the sphere converges fast for these smooth integrands.
        let n = 200_000usize;
        let golden = (1.0 + 5.0f64.sqrt()) * PI;
        let mut gram = [[0.0f64; 9]; 9];
        let mut ev = ShEvaluator::new(2);
        let mut y = [0.0f64; 9];
        for j in 1..=n {
            let theta = (1.0 - (2.0 * j as f64 - 1.0) / n as f64).acos();
            let phi = (golden * (j as f64 - 0.5)) % (2.0 * PI);
            ev.values_into(theta, phi, &mut y);
            for a in 0..9 {
                for b in a..9 {
                    gram[a][b] += y[a] * y[b];
                }
            }
        }
        let w = 4.0 * PI / n as f64;
        for a in 0..9 {
            for b in a..9 {
                let g = gram[a][b] * w;
                let target = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (g - target).abs() < 5e-3,
                    "gram[{a}][{b}] = {g} off identity"
                );
            }
        }
    }
}
