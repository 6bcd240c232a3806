//! Right-triangle hyperbolic trigonometry.
//!
//! A right geodesic triangle in the hyperbolic plane with hypotenuse `s`,
//! legs `t` (adjacent to the vertex `o`) and `r` (opposite to it) and angle
//! `beta` at `o` satisfies
//!
//! ```text
//! sinh r          = sin(beta) sinh s
//! cosh r sinh t   = cos(beta) sinh s
//! cosh s          = cosh r cosh t
//! ```
//!
//! The same relation between a side and the hypotenuse drives the
//! reparametrization `lambda = asinh(sinh(lambda') sin(theta))`.
//!
//! Every formula is evaluated in logarithmic form once its arguments leave
//! the range where `sinh` is representable, so lengths of several hundred
//! units are fine. The hyperboloid model of `H^2` is included as an
//! independent oracle for the closed forms.

use std::f64::consts::{FRAC_PI_2, LN_2};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this argument `sinh` and `asinh` are evaluated through logarithms.
const LOG_BRANCH: f64 = 20.0;

/// Allowed relative drift of the Minkowski normalization in the oracle.
const MINKOWSKI_DRIFT: f64 = 1e-9;

/// Side lengths and angles of a right geodesic triangle with the right angle
/// at the foot `y` of the leg `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleData {
    /// Hypotenuse, the distance from `o` to `p`.
    pub s: f64,
    /// Leg from `o` to the foot `y`.
    pub t: f64,
    /// Leg from `y` to `p`.
    pub r: f64,
    /// Interior angle at `p`.
    pub alpha: f64,
    /// Interior angle at `o`.
    pub beta: f64,
}

impl TriangleData {
    /// Relative residuals of the three closing identities, in the order
    /// (sine rule, cosine/sine mixed rule, Pythagoras).
    ///
    /// Each residual is `|lhs - rhs| / max(1, |lhs|)`; the sides reach
    /// `cosh 10` for legs of length 5, so an absolute comparison would only
    /// measure the magnitude of the numbers involved.
    pub fn invariant_residuals(&self) -> [f64; 3] {
        let rel = |lhs: f64, rhs: f64| (lhs - rhs).abs() / lhs.abs().max(1.0);
        [
            rel(self.r.sinh(), self.beta.sin() * self.s.sinh()),
            rel(self.r.cosh() * self.t.sinh(), self.s.sinh() * self.beta.cos()),
            rel(self.s.cosh(), self.r.cosh() * self.t.cosh()),
        ]
    }

    pub fn max_invariant_residual(&self) -> f64 {
        self.invariant_residuals().into_iter().fold(0.0, f64::max)
    }
}

/// Parameters of the theta-reparametrization and of the uniformity claim
/// near `beta = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamParams {
    /// Angle of the reparametrization, in `(0, pi/2]`.
    pub theta: f64,
    /// Cut offset.
    pub b: f64,
    /// Offset up to which the family is hyperbolic around the origin.
    pub origin_bound: f64,
    /// Right end of the interval on which the base family has cut limits.
    pub c: f64,
    /// Right end of the interval claimed for the extended family.
    pub c_prime: f64,
}

impl ReparamParams {
    pub fn new(theta: f64, b: f64) -> Result<Self> {
        check_theta("ReparamParams", theta)?;
        Ok(Self {
            theta,
            b,
            origin_bound: 0.0,
            c: 0.0,
            c_prime: -1.0,
        })
    }

    /// `c' < c + ln sin(theta)`, the hypothesis under which the extended
    /// family has cut limits on `(-inf, c']`.
    pub fn c_prime_admissible(&self) -> bool {
        self.c_prime < self.c + self.theta.sin().ln()
    }
}

/// `ln sinh(a)` for `a >= 0`; `-inf` at zero.
pub fn ln_sinh(a: f64) -> f64 {
    if a > LOG_BRANCH {
        a - LN_2 + (-(-2.0 * a).exp()).ln_1p()
    } else {
        a.sinh().ln()
    }
}

/// `ln cosh(a)`.
pub fn ln_cosh(a: f64) -> f64 {
    let a = a.abs();
    a - LN_2 + (-2.0 * a).exp().ln_1p()
}

/// `asinh(exp(ln_y))` without forming `exp(ln_y)` when it would overflow.
fn asinh_exp(ln_y: f64) -> f64 {
    if ln_y > LOG_BRANCH {
        // asinh(y) = ln(2y) + ln((1 + sqrt(1 + y^-2)) / 2)
        let z = (-2.0 * ln_y).exp();
        ln_y + LN_2 + (z / (2.0 * ((1.0 + z).sqrt() + 1.0))).ln_1p()
    } else {
        ln_y.exp().asinh()
    }
}

/// `asinh(sinh(a) * factor)` for `a >= 0`, `factor >= 0`.
fn asinh_sinh_scaled(a: f64, factor: f64) -> f64 {
    if a <= LOG_BRANCH && factor <= 1.0 {
        (a.sinh() * factor).asinh()
    } else {
        asinh_exp(ln_sinh(a) + factor.ln())
    }
}

fn check_angle(op: &'static str, beta: f64) -> Result<()> {
    if (0.0..=FRAC_PI_2).contains(&beta) {
        Ok(())
    } else {
        Err(Error::domain(op, format!("beta = {beta} not in [0, pi/2]")))
    }
}

fn check_theta(op: &'static str, theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= FRAC_PI_2 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("theta = {theta} not in (0, pi/2]")))
    }
}

/// Leg opposite to `beta` in a right triangle with hypotenuse `s`:
/// `asinh(sinh(s) sin(beta))`.
pub fn r_of(s: f64, beta: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::domain("r_of", format!("s = {s} < 0")));
    }
    check_angle("r_of", beta)?;
    Ok(asinh_sinh_scaled(s, beta.sin()))
}

/// Angle at `o` of the right triangle with hypotenuse `s` and opposite leg
/// `r`.
///
/// Evaluated as `atan2(sinh r, sqrt(sinh(s-r) sinh(s+r)))`, which stays
/// accurate at both ends of `[0, pi/2]`.
pub fn beta_of(r: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !(r >= 0.0) {
        return Err(Error::domain("beta_of", format!("need 0 <= r and s > 0, got r = {r}, s = {s}")));
    }
    if r > s {
        return Err(Error::domain("beta_of", format!("r = {r} exceeds s = {s}")));
    }
    if s + r <= LOG_BRANCH {
        let opp = r.sinh();
        let adj = ((s - r).sinh() * (s + r).sinh()).sqrt();
        Ok(opp.atan2(adj))
    } else {
        let ln_opp = ln_sinh(r);
        let ln_adj = 0.5 * (ln_sinh(s - r) + ln_sinh(s + r));
        let m = ln_opp.max(ln_adj);
        Ok((ln_opp - m).exp().atan2((ln_adj - m).exp()))
    }
}

/// Leg adjacent to `beta`: `asinh(sinh(s) cos(beta) / cosh(r_of(s, beta)))`.
pub fn t_of(s: f64, beta: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::domain("t_of", format!("s = {s} < 0")));
    }
    check_angle("t_of", beta)?;
    let r = r_of(s, beta)?;
    let cos_beta = beta.cos();
    if s <= LOG_BRANCH {
        Ok((s.sinh() * cos_beta / r.cosh()).asinh())
    } else {
        Ok(asinh_exp(ln_sinh(s) + cos_beta.ln() - ln_cosh(r)))
    }
}

/// The theta-reparametrization `lambda(lambda') = asinh(sinh(lambda') sin(theta))`.
pub fn lambda_of(lambda_prime: f64, theta: f64) -> Result<f64> {
    check_theta("lambda_of", theta)?;
    if lambda_prime.is_nan() {
        return Err(Error::domain("lambda_of", "lambda' is NaN"));
    }
    let v = asinh_sinh_scaled(lambda_prime.abs(), theta.sin());
    Ok(v.copysign(lambda_prime))
}

/// Inverse of [`lambda_of`]: `asinh(sinh(lambda) / sin(theta))`.
pub fn lambda_prime_of(lambda: f64, theta: f64) -> Result<f64> {
    check_theta("lambda_prime_of", theta)?;
    if lambda.is_nan() {
        return Err(Error::domain("lambda_prime_of", "lambda is NaN"));
    }
    let a = lambda.abs();
    let v = if a <= LOG_BRANCH {
        (a.sinh() / theta.sin()).asinh()
    } else {
        asinh_exp(ln_sinh(a) - theta.sin().ln())
    };
    Ok(v.copysign(lambda))
}

/// `r(lambda'(lambda) + b, beta)`: the radius at which the base metric
/// `h_lambda` is cut when the extended family is cut at `lambda' + b`.
pub fn vartheta(lambda: f64, beta: f64, params: &ReparamParams) -> Result<f64> {
    let s = lambda_prime_of(lambda, params.theta)? + params.b;
    if !(s > 0.0) {
        return Err(Error::domain(
            "vartheta",
            format!("lambda'(lambda) + b = {s} is not positive"),
        ));
    }
    r_of(s, beta)
}

/// Limit of `vartheta(lambda, beta, b) - lambda` as `lambda -> inf`.
pub fn vartheta_offset(beta: f64, params: &ReparamParams) -> f64 {
    params.b + (beta.sin() / params.theta.sin()).ln()
}

/// Minkowski form of signature (-, +, +) on R^3.
fn minkowski(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    -a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Hyperbolic distance between two points of the hyperboloid.
fn hyperboloid_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = -minkowski(a, b);
    if c > 2.0 {
        c.acosh()
    } else {
        let d = a - b;
        2.0 * (minkowski(&d, &d).max(0.0).sqrt() / 2.0).asinh()
    }
}

/// Angle at `at` between the geodesics towards `a` and towards `b`.
fn hyperboloid_angle(at: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ta = a + at * minkowski(at, a);
    let tb = b + at * minkowski(at, b);
    let c = minkowski(&ta, &tb) / (minkowski(&ta, &ta) * minkowski(&tb, &tb)).sqrt();
    c.clamp(-1.0, 1.0).acos()
}

fn check_on_hyperboloid(x: &Vector3<f64>) -> Result<()> {
    let drift = (minkowski(x, x) + 1.0).abs() / x[0].powi(2).max(1.0);
    if drift > MINKOWSKI_DRIFT {
        Err(Error::Numerical(format!(
            "hyperboloid normalization drifted by {drift:e}"
        )))
    } else {
        Ok(())
    }
}

/// Point of `H^2` (hyperboloid model) with signed Fermi coordinates `(t, r)`
/// relative to the geodesic `x2 = 0` through `o = (1, 0, 0)`.
pub fn fermi_point(t: f64, r: f64) -> Vector3<f64> {
    Vector3::new(r.cosh() * t.cosh(), r.cosh() * t.sinh(), r.sinh())
}

/// Builds the right triangle with legs `t` and `r` in the hyperboloid model
/// and measures the hypotenuse and both acute angles.
///
/// `o = (1,0,0)`, the foot `y` is reached from `o` along the geodesic
/// `x2 = 0`, and `p` is reached from `y` along the geodesic orthogonal to
/// `[o, y]`.
pub fn build_right_triangle(t: f64, r: f64) -> Result<TriangleData> {
    if !(t >= 0.0 && r >= 0.0) {
        return Err(Error::domain(
            "build_right_triangle",
            format!("legs must be non-negative, got t = {t}, r = {r}"),
        ));
    }
    let o = Vector3::new(1.0, 0.0, 0.0);
    let y = Vector3::new(t.cosh(), t.sinh(), 0.0);
    // unit normal at y to the geodesic [o, y]
    let normal = Vector3::new(0.0, 0.0, 1.0);
    let p = y * r.cosh() + normal * r.sinh();
    check_on_hyperboloid(&y)?;
    check_on_hyperboloid(&p)?;

    let s = hyperboloid_distance(&o, &p);
    // The tangent plane at o is the spatial plane, where the Minkowski form
    // is Euclidean; the 2D cross product keeps small angles accurate.
    let (uy, up) = ((y[1], y[2]), (p[1], p[2]));
    let beta = if t == 0.0 {
        // y = o; the fiber direction is orthogonal to H^k by continuity
        FRAC_PI_2
    } else {
        (uy.0 * up.1 - uy.1 * up.0).atan2(uy.0 * up.0 + uy.1 * up.1)
    };
    let alpha = if r == 0.0 {
        // p = y: the angle at p degenerates to the angle between the legs
        FRAC_PI_2
    } else if t == 0.0 {
        0.0
    } else {
        hyperboloid_angle(&p, &o, &y)
    };
    Ok(TriangleData {
        s,
        t,
        r,
        alpha,
        beta,
    })
}

/// Distance from `o` and polar angle of the point with Fermi coordinates
/// `(t, r)`.
fn fermi_to_polar(t: f64, r: f64) -> (f64, f64) {
    let o = Vector3::new(1.0, 0.0, 0.0);
    let p = fermi_point(t, r);
    (hyperboloid_distance(&o, &p), p[2].atan2(p[1]))
}

/// Compares the hyperbolic metric in polar coordinates,
/// `sinh^2(s) dbeta^2 + ds^2`, with its Fermi form `cosh^2(r) dt^2 + dr^2` at
/// the point with Fermi coordinates `(t, r)`.
///
/// `s` and `beta` are measured on the hyperboloid and differentiated with
/// central differences of width `step`. Returns the largest absolute entry
/// of the difference of the two Gram matrices in the `(dt, dr)` basis.
pub fn fermi_polar_residual(t: f64, r: f64, step: f64) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::domain("fermi_polar_residual", format!("step = {step}")));
    }
    if t == 0.0 && r == 0.0 {
        return Err(Error::domain(
            "fermi_polar_residual",
            "polar coordinates are singular at the origin",
        ));
    }
    let (s, _) = fermi_to_polar(t, r);
    let (s_tp, b_tp) = fermi_to_polar(t + step, r);
    let (s_tm, b_tm) = fermi_to_polar(t - step, r);
    let (s_rp, b_rp) = fermi_to_polar(t, r + step);
    let (s_rm, b_rm) = fermi_to_polar(t, r - step);
    let h2 = 2.0 * step;
    let ds = [(s_tp - s_tm) / h2, (s_rp - s_rm) / h2];
    let db = [(b_tp - b_tm) / h2, (b_rp - b_rm) / h2];
    let w = s.sinh().powi(2);
    let lhs = |i: usize, j: usize| w * db[i] * db[j] + ds[i] * ds[j];
    let rhs = [[r.cosh().powi(2), 0.0], [0.0, 1.0]];
    let mut worst = 0.0_f64;
    for i in 0..2 {
        for j in 0..2 {
            worst = worst.max((lhs(i, j) - rhs[i][j]).abs());
        }
    }
    Ok(worst)
}
