//! The hyperbolic extension `f = cosh^2(r) sigma_{H^k} + h` on `H^k x M`
//! and its geodesic-sphere cuts in join coordinates.
//!
//! A point of the geodesic sphere of radius `s` about `(o, o_M)` has
//! coordinates `(w, u, beta)` in `S^{k-1} x S^{n-1} x (0, pi/2)`: `w` and
//! `u` are the directions of its projections to `H^k` and `M`, and `beta`
//! the angle at `o` of the right triangle with legs `t` (in `H^k`) and `r`
//! (in the fiber). These are identified with the point
//! `(cos(beta) w, sin(beta) u)` of `S^{n+k-1}`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyptrig::{beta_of, r_of, t_of};
use crate::radial::{spherical_cut, sinh2, CutField, RadialMetric};
use crate::spheres::{
    make_atlas, AmbientMat, AmbientVec, Atlas, Chart, ChartPoint, FormMatrix, JoinBand, SphereForm,
};

/// Default half-width of the excluded bands around `beta = 0` and `pi/2`.
pub const DEFAULT_MASK: f64 = 0.05;

/// Join coordinates of a point of a geodesic sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinPoint {
    /// Unit vector of `R^k`.
    pub w: Vec<f64>,
    /// Unit vector of `R^n`.
    pub u: Vec<f64>,
    pub beta: f64,
    /// Radius of the geodesic sphere.
    pub s: Option<f64>,
}

/// A point of `H^k x M` in polar coordinates on each factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductPoint {
    pub t: f64,
    pub w: Vec<f64>,
    pub r: f64,
    pub u: Vec<f64>,
}

/// Inverse of the join coordinates: the product point with join data `jp`.
pub fn join_point_to_product(jp: &JoinPoint) -> Result<ProductPoint> {
    let s = jp
        .s
        .ok_or_else(|| Error::InvalidParameter("join point needs a radius s".into()))?;
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("radius must be positive, got {s}")));
    }
    Ok(ProductPoint {
        t: t_of(s, jp.beta)?,
        w: jp.w.clone(),
        r: r_of(s, jp.beta)?,
        u: jp.u.clone(),
    })
}

/// Join coordinates of a product point off the two axes.
pub fn product_to_join_point(pp: &ProductPoint) -> Result<JoinPoint> {
    // cosh s - 1 = 2 sinh^2(r/2) cosh t + 2 sinh^2(t/2)
    let half = ((pp.r / 2.0).sinh().powi(2) * pp.t.cosh() + (pp.t / 2.0).sinh().powi(2)).sqrt();
    let s = 2.0 * half.asinh();
    Ok(JoinPoint {
        w: pp.w.clone(),
        u: pp.u.clone(),
        beta: beta_of(pp.r, s)?,
        s: Some(s),
    })
}

type Scalar = dyn Fn(f64) -> f64 + Send + Sync;
type BlockField = dyn Fn(f64) -> Result<SphereForm> + Send + Sync;

/// Block form `a(beta) sigma_{S^{k-1}} + b(beta) + c(beta) dbeta^2` in join
/// coordinates; the three blocks are orthogonal by construction.
#[derive(Clone)]
pub struct JoinForm {
    pub k: usize,
    pub n: usize,
    pub a: Arc<Scalar>,
    pub b_field: Arc<BlockField>,
    pub c: Arc<Scalar>,
}

impl fmt::Debug for JoinForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JoinForm")
            .field("k", &self.k)
            .field("n", &self.n)
            .finish_non_exhaustive()
    }
}

fn check_dims(k: usize, n: usize) -> Result<()> {
    if k == 0 || n < 2 || k + n > crate::spheres::MAX_AMBIENT {
        return Err(Error::InvalidParameter(format!(
            "extension dimensions k = {k}, n = {n} outside 1 <= k, 2 <= n, k + n <= {}",
            crate::spheres::MAX_AMBIENT
        )));
    }
    Ok(())
}

fn check_s(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sphere radius must be positive, got {s}")))
    }
}

/// Spherical cut `f_s` of the extension in join coordinates:
/// `sinh^2(s) cos^2(beta) sigma + h_{r(s, beta)} + sinh^2(s) dbeta^2`.
pub fn extension_cut(h: &RadialMetric, k: usize, s: f64) -> Result<JoinForm> {
    check_dims(k, h.n)?;
    check_s(s)?;
    let sh2 = sinh2(s);
    let h = h.clone();
    Ok(JoinForm {
        k,
        n: h.n,
        a: Arc::new(move |beta: f64| sh2 * beta.cos().powi(2)),
        b_field: Arc::new(move |beta| spherical_cut(&h, r_of(s, beta)?)),
        c: Arc::new(move |_| sh2),
    })
}

/// Normalized cut `f_s / sinh^2(s)` in join coordinates:
/// `cos^2(beta) sigma + sin^2(beta) hhat_{r(s, beta)} + dbeta^2`.
pub fn extension_normalized_cut(hhat: Arc<CutField>, n: usize, k: usize, s: f64) -> Result<JoinForm> {
    check_dims(k, n)?;
    check_s(s)?;
    Ok(JoinForm {
        k,
        n,
        a: Arc::new(|beta: f64| beta.cos().powi(2)),
        b_field: Arc::new(move |beta: f64| Ok(hhat(r_of(s, beta)?)?.scaled(beta.sin().powi(2)))),
        c: Arc::new(|_| 1.0),
    })
}

/// Join data of the round metric of `S^{n+k-1}`.
pub fn round_join_form(k: usize, n: usize) -> Result<JoinForm> {
    check_dims(k, n)?;
    let sigma = crate::spheres::round_metric_on(Arc::new(make_atlas(n)?));
    Ok(JoinForm {
        k,
        n,
        a: Arc::new(|beta: f64| beta.cos().powi(2)),
        b_field: Arc::new(move |beta: f64| Ok(sigma.scaled(beta.sin().powi(2)))),
        c: Arc::new(|_| 1.0),
    })
}

/// Splits a unit vector of `R^{k+n}` into `(w, u, beta)`; `w` and `u` are
/// returned in the leading slots of ambient vectors.
pub fn split_join(p: &AmbientVec, k: usize, n: usize) -> (AmbientVec, AmbientVec, f64) {
    let mut w = AmbientVec::zeros();
    let mut u = AmbientVec::zeros();
    for i in 0..k {
        w[i] = p[i];
    }
    for i in 0..n {
        u[i] = p[k + i];
    }
    let (cb, sb) = (w.norm(), u.norm());
    if cb > 0.0 {
        w /= cb;
    }
    if sb > 0.0 {
        u /= sb;
    }
    (w, u, sb.atan2(cb))
}

/// The point `(cos(beta) w, sin(beta) u)`.
pub fn join_embed(w: &[f64], u: &[f64], beta: f64) -> AmbientVec {
    let mut p = AmbientVec::zeros();
    for (i, x) in w.iter().enumerate() {
        p[i] = beta.cos() * x;
    }
    for (i, x) in u.iter().enumerate() {
        p[w.len() + i] = beta.sin() * x;
    }
    p
}

/// Ambient representative of the join form at `p`.
fn join_ambient(jf: &JoinForm, p: &AmbientVec) -> Result<AmbientMat> {
    let (k, n) = (jf.k, jf.n);
    let (w, u, beta) = split_join(p, k, n);
    let (cb, sb) = (beta.cos(), beta.sin());
    let (a, c) = ((jf.a)(beta), (jf.c)(beta));
    let bu = jf.b_field.as_ref()(beta)?.eval_ambient(&u)?;
    let mut g = AmbientMat::zeros();
    // S^{k-1} block and the beta direction restricted to R^k
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { 1.0 } else { 0.0 };
            g[(i, j)] = a / (cb * cb) * (delta - w[i] * w[j]) + c * sb * sb * w[i] * w[j];
        }
    }
    // S^{n-1} block: project the ambient representative onto T_u
    let mut proj = AmbientMat::zeros();
    for i in 0..n {
        for j in 0..n {
            proj[(i, j)] = if i == j { 1.0 } else { 0.0 } - u[i] * u[j];
        }
    }
    let bt = proj * bu * proj;
    for i in 0..n {
        for j in 0..n {
            g[(k + i, k + j)] = bt[(i, j)] / (sb * sb) + c * cb * cb * u[i] * u[j];
        }
    }
    for i in 0..k {
        for j in 0..n {
            let x = -c * sb * cb * w[i] * u[j];
            g[(i, k + j)] = x;
            g[(k + j, i)] = x;
        }
    }
    Ok(g)
}

/// The join form as a field on `S^{n+k-1}`, defined on the band
/// `delta <= beta <= pi/2 - delta`.
pub fn join_to_sphereform(jf: &JoinForm, atlas: Arc<Atlas>, delta: f64) -> Result<SphereForm> {
    check_dims(jf.k, jf.n)?;
    if atlas.m != jf.k + jf.n {
        return Err(Error::AtlasMismatch(atlas.m - 1, jf.k + jf.n - 1));
    }
    if !(delta > 0.0 && delta < std::f64::consts::FRAC_PI_4) {
        return Err(Error::InvalidParameter(format!("mask delta = {delta} outside (0, pi/4)")));
    }
    let probe = (jf.b_field)(std::f64::consts::FRAC_PI_4)?;
    if probe.m() != jf.n {
        return Err(Error::AtlasMismatch(probe.m() - 1, jf.n - 1));
    }
    let band = JoinBand {
        k: jf.k,
        lo: delta,
        hi: std::f64::consts::FRAC_PI_2 - delta,
    };
    let jf = jf.clone();
    Ok(SphereForm::from_ambient(atlas, move |p| join_ambient(&jf, p)).restricted(band))
}

/// Central first-derivative stencils over chart coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stencil {
    /// Three points, second order.
    Central2,
    /// Five points, fourth order.
    Central4,
}

impl Stencil {
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central2 => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::Central4 => &[
                (2.0, -1.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (-2.0, 1.0 / 12.0),
            ],
        }
    }
}

/// Finite-difference settings for the pullback oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PullbackSpec {
    pub step: f64,
    pub stencil: Stencil,
}

impl Default for PullbackSpec {
    fn default() -> Self {
        Self {
            step: 1e-4,
            stencil: Stencil::Central4,
        }
    }
}

#[derive(Clone, Copy)]
struct Parametrized {
    t: f64,
    r: f64,
    w: AmbientVec,
    u: AmbientVec,
}

fn parametrize(chart: &Chart, y: &ChartPoint, k: usize, n: usize, s: f64) -> Result<Parametrized> {
    let p = chart.embed(y)?;
    let (w, u, beta) = split_join(&p, k, n);
    Ok(Parametrized {
        t: t_of(s, beta)?,
        r: r_of(s, beta)?,
        w,
        u,
    })
}

struct Derivatives {
    center: Parametrized,
    dt: [f64; 5],
    dr: [f64; 5],
    dw: [AmbientVec; 5],
    du: [AmbientVec; 5],
}

fn differentiate(
    chart: &Chart,
    x: &ChartPoint,
    k: usize,
    n: usize,
    s: f64,
    spec: &PullbackSpec,
) -> Result<Derivatives> {
    let center = parametrize(chart, x, k, n, s)?;
    let d = chart.dim();
    let mut out = Derivatives {
        center,
        dt: [0.0; 5],
        dr: [0.0; 5],
        dw: [AmbientVec::zeros(); 5],
        du: [AmbientVec::zeros(); 5],
    };
    for l in 0..d {
        for &(offset, weight) in spec.stencil.taps() {
            let mut y = *x;
            y[l] += offset * spec.step;
            let q = parametrize(chart, &y, k, n, s)?;
            let wgt = weight / spec.step;
            out.dt[l] += wgt * q.t;
            out.dr[l] += wgt * q.r;
            out.dw[l] += q.w * wgt;
            out.du[l] += q.u * wgt;
        }
        // exact derivatives of unit vectors are tangent; drop the FD normal part
        out.dw[l] -= center.w * center.w.dot(&out.dw[l]);
        out.du[l] -= center.u * center.u.dot(&out.du[l]);
    }
    Ok(out)
}

/// Independent construction of the spherical cut `f_s`: parametrizes the
/// geodesic sphere by join coordinates, evaluates
/// `cosh^2(r) (sinh^2(t) sigma_{S^{k-1}} + dt^2) + h_r + dr^2` at the image
/// point and pulls it back through finite-difference Jacobians.
pub fn pullback_oracle_cut(
    h: &RadialMetric,
    k: usize,
    s: f64,
    atlas: Arc<Atlas>,
    delta: f64,
    spec: PullbackSpec,
) -> Result<SphereForm> {
    let n = h.n;
    check_dims(k, n)?;
    check_s(s)?;
    if atlas.m != k + n {
        return Err(Error::AtlasMismatch(atlas.m - 1, k + n - 1));
    }
    if !(spec.step > 0.0 && spec.step < 0.05) {
        return Err(Error::InvalidParameter(format!("pullback step {} outside (0, 0.05)", spec.step)));
    }
    let h = h.clone();
    let band = JoinBand {
        k,
        lo: delta,
        hi: std::f64::consts::FRAC_PI_2 - delta,
    };
    let form = SphereForm::from_chart_fn(atlas, move |chart, x| {
        let dv = differentiate(chart, x, k, n, s, &spec)?;
        let Parametrized { t, r, u, .. } = dv.center;
        let hr = spherical_cut(&h, r)?.eval_ambient(&u)?;
        let (ch2, sh2t) = (r.cosh().powi(2), t.sinh().powi(2));
        let d = chart.dim();
        let mut c = FormMatrix::zeros();
        for i in 0..d {
            for j in i..d {
                let v = ch2 * (sh2t * dv.dw[i].dot(&dv.dw[j]) + dv.dt[i] * dv.dt[j])
                    + dv.du[i].dot(&(hr * dv.du[j]))
                    + dv.dr[i] * dv.dr[j];
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        Ok(c)
    });
    Ok(form.restricted(band))
}

/// Largest finite-difference derivative of the distance `s` to the base
/// point along the parametrized sphere of radius `s`; vanishes exactly.
pub fn ds_annihilation_residual(
    k: usize,
    n: usize,
    s: f64,
    samples: &[(usize, ChartPoint)],
    spec: PullbackSpec,
) -> Result<f64> {
    check_dims(k, n)?;
    check_s(s)?;
    let atlas = make_atlas(k + n)?;
    let dist = |q: &Parametrized| {
        let (ch_r, ch_t) = (q.r.cosh(), q.t.cosh());
        (ch_r * ch_t).acosh()
    };
    let mut worst = 0.0_f64;
    for (id, x) in samples {
        let chart = atlas.chart(*id)?;
        for l in 0..chart.dim() {
            let mut ds = 0.0;
            for &(offset, weight) in spec.stencil.taps() {
                let mut y = *x;
                y[l] += offset * spec.step;
                ds += weight / spec.step * dist(&parametrize(chart, &y, k, n, s)?);
            }
            worst = worst.max(ds.abs());
        }
    }
    Ok(worst)
}

/// Checks `sinh^2(s) dbeta^2 + ds^2 = cosh^2(r) dt^2 + dr^2` on the plane
/// spanned by `d/ds, d/dbeta`, with `t(s, beta)` and `r(s, beta)` from the
/// right-triangle relations and central differences of width `step`.
/// Returns the largest entry of the Gram-matrix difference relative to
/// `max(1, sinh^2 s)`.
pub fn verify_polar_fermi_on_extension(samples: &[(f64, f64)], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let mut worst = 0.0_f64;
    for &(s, beta) in samples {
        let tr = |s: f64, b: f64| -> Result<(f64, f64)> { Ok((t_of(s, b)?, r_of(s, b)?)) };
        let (tp, rp) = tr(s + step, beta)?;
        let (tm, rm) = tr(s - step, beta)?;
        let (tq, rq) = tr(s, beta + step)?;
        let (tn, rn) = tr(s, beta - step)?;
        let j = [
            [(tp - tm) / (2.0 * step), (tq - tn) / (2.0 * step)],
            [(rp - rm) / (2.0 * step), (rq - rn) / (2.0 * step)],
        ];
        let r = r_of(s, beta)?;
        let ch2 = r.cosh().powi(2);
        let lhs = [[1.0, 0.0], [0.0, sinh2(s)]];
        let scale = sinh2(s).max(1.0);
        for a in 0..2 {
            for b in 0..2 {
                let rhs = ch2 * j[0][a] * j[0][b] + j[1][a] * j[1][b];
                worst = worst.max((lhs[a][b] - rhs).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Adapted frame at the join point: unit tangent vectors along `S^{k-1}`,
/// along `S^{n-1}` and the `beta` direction.
pub fn adapted_frame(w: &[f64], u: &[f64], beta: f64) -> (Vec<AmbientVec>, Vec<AmbientVec>, AmbientVec) {
    let (k, n) = (w.len(), u.len());
    let tangents = |v: &[f64], offset: usize| {
        let dim = v.len();
        let mut out = Vec::new();
        for e in 0..dim {
            let mut x = vec![0.0; dim];
            x[e] = 1.0;
            let dot: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
            for (xi, vi) in x.iter_mut().zip(v) {
                *xi -= dot * vi;
            }
            for prev in &out {
                let prev: &Vec<f64> = prev;
                let d: f64 = x.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (xi, pi) in x.iter_mut().zip(prev) {
                    *xi -= d * pi;
                }
            }
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                out.push(x.iter().map(|a| a / norm).collect::<Vec<f64>>());
            }
        }
        out.into_iter()
            .map(|x| {
                let mut a = AmbientVec::zeros();
                for (i, xi) in x.iter().enumerate() {
                    a[offset + i] = *xi;
                }
                a
            })
            .collect::<Vec<_>>()
    };
    let fw = tangents(w, 0);
    let fu = tangents(u, k);
    let mut fb = AmbientVec::zeros();
    for i in 0..k {
        fb[i] = -beta.sin() * w[i];
    }
    for i in 0..n {
        fb[k + i] = beta.cos() * u[i];
    }
    (fw, fu, fb)
}

/// Largest cross term between the three blocks of an embedded join form at
/// the join point, in the adapted frame.
pub fn block_cross_residual(form: &SphereForm, w: &[f64], u: &[f64], beta: f64) -> Result<f64> {
    let p = join_embed(w, u, beta);
    let (fw, fu, fb) = adapted_frame(w, u, beta);
    let g = form.eval_ambient(&p)?;
    let mut worst = 0.0_f64;
    for a in &fw {
        for b in &fu {
            worst = worst.max(a.dot(&(g * b)).abs());
        }
        worst = worst.max(a.dot(&(g * fb)).abs());
    }
    for b in &fu {
        worst = worst.max(b.dot(&(g * fb)).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyptrig::build_right_triangle;
    use crate::radial::{make_bump_family, make_euclidean, make_hyperbolic, normalized_cut, BumpParams};
    use crate::spheres::{c0_distance, c2_distance, perturbation_form, round_metric_on, GridSpec};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn grid() -> GridSpec {
        GridSpec {
            points_per_axis: 7,
            max_points_per_chart: 400,
            fd_step: 1e-3,
        }
    }

    #[test]
    fn product_round_trip() {
        let jp = JoinPoint {
            w: vec![0.6, 0.8],
            u: vec![0.0, 0.0, 1.0],
            beta: 0.7,
            s: Some(3.0),
        };
        let pp = join_point_to_product(&jp).unwrap();
        let tri = build_right_triangle(pp.t, pp.r).unwrap();
        assert!((tri.s - 3.0).abs() < 1e-10);
        assert!((tri.beta - 0.7).abs() < 1e-10);
        let back = product_to_join_point(&pp).unwrap();
        assert!((back.beta - 0.7).abs() < 1e-10);
        assert!((back.s.unwrap() - 3.0).abs() < 1e-10);

        let edge = join_point_to_product(&JoinPoint { beta: FRAC_PI_2, ..jp.clone() }).unwrap();
        assert!(edge.t.abs() < 1e-15 && (edge.r - 3.0).abs() < 1e-14);
        let edge = join_point_to_product(&JoinPoint { beta: 0.0, ..jp.clone() }).unwrap();
        assert!(edge.r == 0.0 && (edge.t - 3.0).abs() < 1e-14);
        assert!(join_point_to_product(&JoinPoint { s: None, ..jp }).is_err());
    }

    #[test]
    fn round_join_data_is_the_round_metric() {
        for (k, n) in [(1, 2), (2, 2), (2, 3), (1, 3)] {
            let atlas = Arc::new(make_atlas(k + n).unwrap());
            let jf = round_join_form(k, n).unwrap();
            let embedded = join_to_sphereform(&jf, atlas.clone(), DEFAULT_MASK).unwrap();
            let d = c0_distance(&embedded, &round_metric_on(atlas), &grid()).unwrap();
            assert!(d.d0 < 1e-10, "{k} {n}: {d:?}");
        }
    }

    #[test]
    fn three_sphere_against_hand_jacobian() {
        // x = (cos b cos phi, cos b sin phi, sin b cos psi, sin b sin psi)
        let atlas = Arc::new(make_atlas(4).unwrap());
        let s1 = Arc::new(make_atlas(2).unwrap());
        let p = perturbation_form(s1.clone());
        let sigma = round_metric_on(s1);
        let jf = JoinForm {
            k: 2,
            n: 2,
            a: Arc::new(|b: f64| 0.7 + b.cos().powi(2)),
            b_field: Arc::new(move |b: f64| {
                SphereForm::linear_combination(&[(b.sin().powi(2) + 0.3, &sigma), (0.2 * b, &p)])
            }),
            c: Arc::new(|b: f64| 1.5 + b),
        };
        let form = join_to_sphereform(&jf, atlas, 0.05).unwrap();
        let p_s1 = perturbation_form(Arc::new(make_atlas(2).unwrap()));
        for (phi, psi, b) in [(0.3_f64, 1.1_f64, 0.4_f64), (2.0, -0.7, 1.2), (4.0, 3.0, 0.8)] {
            let (cb, sb) = (f64::cos(b), f64::sin(b));
            let v = |a: [f64; 4]| AmbientVec::from_fn(|i, _| if i < 4 { a[i] } else { 0.0 });
            let x = v([cb * phi.cos(), cb * phi.sin(), sb * psi.cos(), sb * psi.sin()]);
            let d_phi = v([-cb * phi.sin(), cb * phi.cos(), 0.0, 0.0]);
            let d_psi = v([0.0, 0.0, -sb * psi.sin(), sb * psi.cos()]);
            let d_b = v([-sb * phi.cos(), -sb * phi.sin(), cb * psi.cos(), cb * psi.sin()]);
            let u = AmbientVec::from_fn(|i, _| [psi.cos(), psi.sin(), 0.0, 0.0, 0.0, 0.0][i]);
            let du = AmbientVec::from_fn(|i, _| [-psi.sin(), psi.cos(), 0.0, 0.0, 0.0, 0.0][i]);
            let b_uu = (sb * sb + 0.3) + 0.2 * b * p_s1.bilinear(&u, &du, &du).unwrap();
            let expect = [[0.7 + cb * cb, 0.0, 0.0], [0.0, b_uu, 0.0], [0.0, 0.0, 1.5 + b]];
            let frame = [d_phi, d_psi, d_b];
            for i in 0..3 {
                for j in 0..3 {
                    let got = form.bilinear(&x, &frame[i], &frame[j]).unwrap();
                    assert!((got - expect[i][j]).abs() < 1e-9, "{i}{j}: {got} vs {}", expect[i][j]);
                }
            }
        }
    }

    #[test]
    fn hyperbolic_extension_is_round() {
        for (k, n) in [(1, 2), (2, 2)] {
            let atlas = Arc::new(make_atlas(k + n).unwrap());
            let h = make_hyperbolic(n).unwrap();
            let sigma = round_metric_on(atlas.clone());
            for s in [2.0, 5.0] {
                let jf = extension_normalized_cut(h.normalized_field(), n, k, s).unwrap();
                let f = join_to_sphereform(&jf, atlas.clone(), DEFAULT_MASK).unwrap();
                let d = c2_distance(&f, &sigma, &grid()).unwrap();
                assert!(d.d0 < 1e-8 && d.total() < 1e-5, "{d:?}");
                let unnorm = join_to_sphereform(&extension_cut(&h, k, s).unwrap(), atlas.clone(), DEFAULT_MASK).unwrap();
                let d = c0_distance(&unnorm, &sigma.scaled(sinh2(s)), &grid()).unwrap();
                assert!(d.d0 < 1e-9 * sinh2(s));
            }
        }
    }

    #[test]
    fn normalization_coherence() {
        let fam = make_bump_family(3, BumpParams::default()).unwrap();
        let h = fam.at(2.5).unwrap();
        let atlas = Arc::new(make_atlas(5).unwrap());
        for s in [2.0, 5.0] {
            let a = join_to_sphereform(&extension_cut(&h, 2, s).unwrap(), atlas.clone(), DEFAULT_MASK).unwrap();
            let b = join_to_sphereform(
                &extension_normalized_cut(h.normalized_field(), 3, 2, s).unwrap(),
                atlas.clone(),
                DEFAULT_MASK,
            )
            .unwrap()
            .scaled(sinh2(s));
            let d = c0_distance(&a, &b, &grid()).unwrap();
            assert!(d.d0 < 1e-9 * sinh2(s), "{d:?}");
        }
    }

    #[test]
    fn collapsing_k_block() {
        let h = make_hyperbolic(2).unwrap();
        let jf = extension_cut(&h, 1, 2.0).unwrap();
        assert!((jf.a)(FRAC_PI_2).abs() < 1e-30 * sinh2(2.0) + 1e-15);
        assert!(((jf.c)(0.3) - sinh2(2.0)).abs() == 0.0);
    }

    #[test]
    fn pullback_matches_closed_form() {
        let atlas = Arc::new(make_atlas(4).unwrap());
        let metrics = [make_hyperbolic(2).unwrap(), make_euclidean(2).unwrap()];
        for h in &metrics {
            for s in [2.0, 5.0] {
                let closed = join_to_sphereform(&extension_cut(h, 2, s).unwrap(), atlas.clone(), 0.1).unwrap();
                let oracle = pullback_oracle_cut(h, 2, s, atlas.clone(), 0.1, PullbackSpec::default()).unwrap();
                let d = c0_distance(&closed, &oracle, &grid()).unwrap();
                assert!(d.d0 < 1e-4, "{} s={s}: {d:?}", h.name);
            }
        }
    }

    #[test]
    fn pullback_annihilates_ds() {
        let atlas = make_atlas(5).unwrap();
        let samples: Vec<_> = crate::spheres::atlas_grid(&atlas, &grid())
            .into_iter()
            .filter(|(id, x)| {
                let p = atlas.charts[*id].embed(x).unwrap();
                let (_, _, b) = split_join(&p, 2, 3);
                b > 0.1 && b < FRAC_PI_2 - 0.1
            })
            .take(300)
            .collect();
        let r = ds_annihilation_residual(2, 3, 5.0, &samples, PullbackSpec::default()).unwrap();
        assert!(r < 1e-8, "{r}");
    }

    #[test]
    fn polar_fermi_on_extension_samples() {
        let mut samples = Vec::new();
        for s in [0.5, 1.0, 2.0, 4.0, 6.0] {
            for b in [0.1, 0.5, 1.0, 1.4] {
                samples.push((s, b));
            }
        }
        let r1 = verify_polar_fermi_on_extension(&samples, 1e-4).unwrap();
        assert!(r1 < 1e-6, "{r1}");
        let coarse = verify_polar_fermi_on_extension(&[(1.5, 0.6)], 2e-2).unwrap();
        let fine = verify_polar_fermi_on_extension(&[(1.5, 0.6)], 1e-2).unwrap();
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
        assert!(verify_polar_fermi_on_extension(&samples, 0.0).is_err());
    }

    #[test]
    fn blocks_stay_orthogonal() {
        let fam = make_bump_family(3, BumpParams::default()).unwrap();
        let h = fam.at(1.0).unwrap();
        let atlas = Arc::new(make_atlas(5).unwrap());
        let f = join_to_sphereform(&extension_normalized_cut(h.normalized_field(), 3, 2, 3.0).unwrap(), atlas, 0.05)
            .unwrap();
        for (phi, beta) in [(0.2_f64, 0.3), (1.9, 1.0), (PI, 1.4)] {
            let w = [f64::cos(phi), f64::sin(phi)];
            let u = [0.48, -0.6, 0.64];
            assert!(block_cross_residual(&f, &w, &u, beta).unwrap() < 1e-9);
        }
    }

    #[test]
    fn bump_member_b_field_matches_vartheta() {
        use crate::hyptrig::{lambda_of, vartheta, ReparamParams};
        let params = BumpParams::default();
        let fam = make_bump_family(3, params).unwrap();
        let theta = PI / 4.0;
        let (lp, b) = (8.0, -0.5);
        let lambda = lambda_of(lp, theta).unwrap();
        let h = fam.at(lambda).unwrap();
        let jf = extension_normalized_cut(h.normalized_field(), 3, 2, lp + b).unwrap();
        let sigma = fam.sigma();
        let p = perturbation_form(fam.atlas().clone());
        for beta in [0.3, 0.9, 1.4] {
            let rp = ReparamParams::new(theta, b).unwrap();
            let arg = vartheta(lambda, beta, &rp).unwrap() - lambda;
            let coef = params.profile().eval(arg) * params.amp;
            let expect = SphereForm::linear_combination(&[(1.0, &sigma), (coef, &p)]).unwrap().scaled(f64::sin(beta).powi(2));
            let d = c0_distance(&(jf.b_field)(beta).unwrap(), &expect, &grid()).unwrap();
            assert!(d.d0 < 1e-12, "{d:?}");
        }
        // the normalized member cut is unchanged by going through the join form
        let direct = normalized_cut(&h, r_of(lp + b, 1.0).unwrap()).unwrap().scaled(f64::sin(1.0).powi(2));
        assert!(c0_distance(&direct, &(jf.b_field)(1.0).unwrap(), &grid()).unwrap().d0 == 0.0);
    }

    #[test]
    fn dimension_and_mask_errors() {
        let h = make_hyperbolic(3).unwrap();
        assert!(extension_cut(&h, 0, 1.0).is_err());
        assert!(extension_cut(&h, 4, 1.0).is_err());
        assert!(extension_cut(&h, 1, 0.0).is_err());
        let jf = extension_cut(&h, 2, 1.0).unwrap();
        assert!(join_to_sphereform(&jf, Arc::new(make_atlas(4).unwrap()), 0.05).is_err());
        assert!(join_to_sphereform(&jf, Arc::new(make_atlas(5).unwrap()), 0.0).is_err());
    }
}
