//! Cut limits of reparametrized hyperbolic extensions.
//!
//! For an `⊙`-family `h_lambda` on `R^n` and an angle `theta`, the family
//! `f_{lambda(lambda')}` of hyperbolic extensions is scanned along the
//! normalized cuts at radius `lambda' + b`, which in join coordinates read
//! `cos^2(beta) sigma + sin^2(beta) hhat_{lambda, r(lambda' + b, beta)} + dbeta^2`.
//! Their predicted limit replaces the middle block by
//! `sin^2(beta) hhat_inf^{b + ln(sin(beta) / sin(theta))}`.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::{extension_normalized_cut, join_embed, join_to_sphereform, JoinForm};
use crate::hyptrig::{lambda_of, lambda_prime_of, r_of};
use crate::radial::{check_hyperbolic_origin, BumpParams, LimitField, OdotFamily};
use crate::spheres::{
    c2_distance, make_atlas, min_eigenvalue_of, perturbation_form, AmbientVec, Atlas, C2Distance,
    FormMatrix, GridSamples, GridSpec, SphereForm, sample_grid, sampled_c2_distance,
};

/// Convergence thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Final `C^2` distance bound.
    pub eps_c2: f64,
    /// Final `C^0` distance bound.
    pub eps_c0: f64,
    /// `C^2` distances at or below this level are indistinguishable from
    /// zero on the finite-difference grid.
    pub noise_floor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eps_c2: 1e-3,
            eps_c0: 1e-5,
            noise_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Converged,
    CauchyOnly,
    Diverged,
}

/// How the limit candidate was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Analytic,
    Extrapolated,
}

/// One scan cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub lambda_prime: f64,
    /// Second parameter of a Cauchy pair.
    pub lambda_prime_2: Option<f64>,
    pub b: f64,
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Row {
    pub fn c2(&self) -> f64 {
        self.d0 + self.d1 + self.d2
    }
}

/// Per-offset summary of a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetSummary {
    pub b: f64,
    /// Steps among the last three values that strictly decrease.
    pub strict_decreases: usize,
    /// Steps among the last three values where both ends are at the noise floor.
    pub floor_steps: usize,
    pub eventually_decreasing: bool,
    pub final_c0: f64,
    pub final_c2: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub family: String,
    pub theta: f64,
    pub k: usize,
    pub n: usize,
    pub grid: GridSpec,
    pub mask: f64,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<Row>,
    pub meta: ReportMeta,
    pub thresholds: Thresholds,
    pub offsets: Vec<OffsetSummary>,
    pub verdict: Verdict,
}

/// Scan parameters shared by convergence and Cauchy scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub theta: f64,
    pub k: usize,
    pub b_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub grid: GridSpec,
    pub mask: f64,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Skip the check that the family is hyperbolic around the origin.
    #[serde(default)]
    pub skip_origin_check: bool,
}

impl ScanSpec {
    pub fn validate(&self) -> Result<()> {
        check_theta(self.theta)?;
        if self.b_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(Error::InvalidParameter("scan grids must be non-empty".into()));
        }
        if self.b_grid.iter().chain(&self.lambda_grid).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("scan grids must be finite".into()));
        }
        self.grid.validate()
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= FRAC_PI_2 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("theta = {theta} outside (0, pi/2]")))
    }
}

/// Default offset grid `[-4, 2]` in steps of `1/2`.
pub fn default_b_grid() -> Vec<f64> {
    (0..=12).map(|i| -4.0 + 0.5 * i as f64).collect()
}

/// Default parameter grid `6, 8, ..., 24`.
pub fn default_lambda_grid() -> Vec<f64> {
    (3..=12).map(|i| 2.0 * i as f64).collect()
}

/// Normalized cut of `f_{lambda(lambda')}` at radius `lambda' + b` in join
/// coordinates.
pub fn normalized_extension_join(fam: &OdotFamily, theta: f64, k: usize, lambda_prime: f64, b: f64) -> Result<JoinForm> {
    check_theta(theta)?;
    let s = lambda_prime + b;
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("cut radius lambda' + b = {s} must be positive")));
    }
    let lambda = lambda_of(lambda_prime, theta)?;
    let h = fam.at(lambda)?;
    extension_normalized_cut(h.normalized_field(), fam.n, k, s)
}

/// [`normalized_extension_join`] embedded in `S^{n+k-1}`.
pub fn normalized_extension_cut(
    fam: &OdotFamily,
    theta: f64,
    k: usize,
    lambda_prime: f64,
    b: f64,
    atlas: Arc<Atlas>,
    mask: f64,
) -> Result<SphereForm> {
    join_to_sphereform(&normalized_extension_join(fam, theta, k, lambda_prime, b)?, atlas, mask)
}

/// Predicted limit of the normalized cuts at offset `b`:
/// `cos^2(beta) sigma + sin^2(beta) hhat_inf^{b + ln(sin(beta)/sin(theta))} + dbeta^2`.
pub fn predicted_limit_cut(
    hhat_inf: Arc<LimitField>,
    n: usize,
    theta: f64,
    k: usize,
    b: f64,
    atlas: Arc<Atlas>,
    mask: f64,
) -> Result<SphereForm> {
    check_theta(theta)?;
    let sin_theta = theta.sin();
    let jf = JoinForm {
        k,
        n,
        a: Arc::new(|beta: f64| beta.cos().powi(2)),
        b_field: Arc::new(move |beta: f64| {
            let offset = b + (beta.sin() / sin_theta).ln();
            Ok(hhat_inf(offset)?.scaled(beta.sin().powi(2)))
        }),
        c: Arc::new(|_| 1.0),
    };
    join_to_sphereform(&jf, atlas, mask)
}

fn check_origin(fam: &OdotFamily, spec: &ScanSpec) -> Result<()> {
    if spec.skip_origin_check {
        return Ok(());
    }
    let bound = fam.hyperbolic_origin_b.ok_or_else(|| {
        Error::InvalidParameter(format!(
            "family {} carries no hyperbolic-around-origin constant; set skip_origin_check to scan anyway",
            fam.name
        ))
    })?;
    let lambdas = [spec.lambda_grid[0], *spec.lambda_grid.last().unwrap_or(&spec.lambda_grid[0])];
    let samples: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&lp| {
            [bound, bound - 1.0]
                .into_iter()
                .filter_map(move |b| lambda_of(lp, spec.theta).ok().map(|l| (l, b)))
        })
        .filter(|&(l, b)| l > fam.lambda0.max(-b))
        .collect();
    let grid = GridSpec {
        points_per_axis: 5,
        max_points_per_chart: 256,
        fd_step: spec.grid.fd_step,
    };
    let check = check_hyperbolic_origin(fam, bound, &samples, &grid)?;
    if !check.holds {
        return Err(Error::InvalidParameter(format!(
            "family {} is not hyperbolic around the origin with B = {bound} (residual {:e})",
            fam.name, check.max_residual
        )));
    }
    Ok(())
}

fn ambient_atlas(fam: &OdotFamily, k: usize) -> Result<Arc<Atlas>> {
    Ok(Arc::new(make_atlas(fam.n + k)?))
}

/// Summarizes a sequence of distances ordered by increasing parameter.
pub fn summarize(b: f64, seq: &[C2Distance], thresholds: &Thresholds) -> OffsetSummary {
    let totals: Vec<f64> = seq.iter().map(C2Distance::total).collect();
    let tail = &totals[totals.len().saturating_sub(3)..];
    let mut strict = 0;
    let mut floor = 0;
    for w in tail.windows(2) {
        if w[1] < w[0] {
            strict += 1;
        } else if w[0] <= thresholds.noise_floor && w[1] <= thresholds.noise_floor {
            floor += 1;
        }
    }
    let steps = tail.len().saturating_sub(1);
    let eventually_decreasing = tail.len() == 3 && strict + floor == steps;
    let last = seq.last().copied().unwrap_or(C2Distance {
        d0: f64::INFINITY,
        d1: f64::INFINITY,
        d2: f64::INFINITY,
        samples: 0,
    });
    let (final_c0, final_c2) = (last.d0, last.total());
    OffsetSummary {
        b,
        strict_decreases: strict,
        floor_steps: floor,
        eventually_decreasing,
        final_c0,
        final_c2,
        passed: eventually_decreasing && final_c2 < thresholds.eps_c2 && final_c0 < thresholds.eps_c0,
    }
}

fn sorted_grid(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Limit candidate at offset `b` for the scan.
pub struct LimitCandidate {
    pub form: SphereForm,
    pub provenance: Provenance,
}

/// Analytic limit when the family has one, otherwise the average of the
/// normalized cuts at the two largest grid parameters.
pub fn limit_candidate(fam: &OdotFamily, spec: &ScanSpec, b: f64, atlas: Arc<Atlas>) -> Result<LimitCandidate> {
    if let Some(limit) = fam.cut_limit() {
        return Ok(LimitCandidate {
            form: predicted_limit_cut(limit, fam.n, spec.theta, spec.k, b, atlas, spec.mask)?,
            provenance: Provenance::Analytic,
        });
    }
    let lps = sorted_grid(&spec.lambda_grid);
    if lps.len() < 2 {
        return Err(Error::InvalidParameter("extrapolation needs two lambda' values".into()));
    }
    let cut = |lp| normalized_extension_cut(fam, spec.theta, spec.k, lp, b, atlas.clone(), spec.mask);
    let (a, c) = (cut(lps[lps.len() - 1])?, cut(lps[lps.len() - 2])?);
    Ok(LimitCandidate {
        form: SphereForm::linear_combination(&[(0.5, &a), (0.5, &c)])?,
        provenance: Provenance::Extrapolated,
    })
}

/// Distances of the normalized cuts to the limit candidate over the
/// `(b, lambda')` grid.
pub fn convergence_scan(fam: &OdotFamily, spec: &ScanSpec) -> Result<ConvergenceReport> {
    spec.validate()?;
    check_origin(fam, spec)?;
    let atlas = ambient_atlas(fam, spec.k)?;
    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    let mut provenance = None;
    for b in sorted_grid(&spec.b_grid) {
        let limit = limit_candidate(fam, spec, b, atlas.clone())?;
        provenance = Some(limit.provenance);
        let limit_samples = sample_grid(&limit.form, &spec.grid)?;
        let mut seq = Vec::new();
        for lp in sorted_grid(&spec.lambda_grid) {
            let cut = normalized_extension_cut(fam, spec.theta, spec.k, lp, b, atlas.clone(), spec.mask)?;
            let d = sampled_c2_distance(&sample_grid(&cut, &spec.grid)?, &limit_samples)?;
            rows.push(Row {
                lambda_prime: lp,
                lambda_prime_2: None,
                b,
                d0: d.d0,
                d1: d.d1,
                d2: d.d2,
            });
            seq.push(d);
        }
        offsets.push(summarize(b, &seq, &spec.thresholds));
    }
    let verdict = if offsets.iter().all(|o| o.passed) {
        Verdict::Converged
    } else {
        Verdict::Diverged
    };
    Ok(ConvergenceReport {
        rows,
        meta: meta(fam, spec, provenance),
        thresholds: spec.thresholds,
        offsets,
        verdict,
    })
}

fn meta(fam: &OdotFamily, spec: &ScanSpec, provenance: Option<Provenance>) -> ReportMeta {
    ReportMeta {
        family: fam.name.clone(),
        theta: spec.theta,
        k: spec.k,
        n: fam.n,
        grid: spec.grid,
        mask: spec.mask,
        provenance,
    }
}

/// Consecutive pairs of the sorted parameter grid.
pub fn consecutive_pairs(lambda_grid: &[f64]) -> Vec<(f64, f64)> {
    sorted_grid(lambda_grid).windows(2).map(|w| (w[0], w[1])).collect()
}

/// Pairwise distances between normalized cuts at `lambda'_1` and
/// `lambda'_2` for each offset; no limit is used.
pub fn cauchy_scan(fam: &OdotFamily, spec: &ScanSpec, pairs: &[(f64, f64)]) -> Result<ConvergenceReport> {
    spec.validate()?;
    check_origin(fam, spec)?;
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("Cauchy scan needs at least one pair".into()));
    }
    let mut pairs = pairs.to_vec();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let atlas = ambient_atlas(fam, spec.k)?;
    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    for b in sorted_grid(&spec.b_grid) {
        let mut seq = Vec::new();
        let mut cache: Vec<(f64, Arc<GridSamples>)> = Vec::new();
        let mut sampled = |lp: f64| -> Result<Arc<GridSamples>> {
            if let Some((_, s)) = cache.iter().find(|(l, _)| *l == lp) {
                return Ok(s.clone());
            }
            let cut = normalized_extension_cut(fam, spec.theta, spec.k, lp, b, atlas.clone(), spec.mask)?;
            let s = Arc::new(sample_grid(&cut, &spec.grid)?);
            cache.push((lp, s.clone()));
            if cache.len() > 2 {
                cache.remove(0);
            }
            Ok(s)
        };
        for &(l1, l2) in &pairs {
            let (s1, s2) = (sampled(l1)?, sampled(l2)?);
            let d = sampled_c2_distance(&s1, &s2)?;
            rows.push(Row {
                lambda_prime: l1,
                lambda_prime_2: Some(l2),
                b,
                d0: d.d0,
                d1: d.d1,
                d2: d.d2,
            });
            seq.push(d);
        }
        offsets.push(summarize(b, &seq, &spec.thresholds));
    }
    let verdict = if offsets.iter().all(|o| o.passed) {
        Verdict::CauchyOnly
    } else {
        Verdict::Diverged
    };
    Ok(ConvergenceReport {
        rows,
        meta: meta(fam, spec, None),
        thresholds: spec.thresholds,
        offsets,
        verdict,
    })
}

/// Result of [`beta1_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beta1 {
    pub beta1: f64,
    /// First sweep parameter from which the inequality is checked.
    pub onset: f64,
    /// Largest angle allowed by the `lambda' -> inf` limit of both sides.
    pub asymptotic: f64,
    /// Largest value of `r(lambda' + c', beta1) - lambda(lambda') - B` on the sweep.
    pub worst_gap: f64,
}

/// Upper end of the `beta_1` verification sweep.
pub const BETA1_SWEEP_END: f64 = 60.0;
const BETA1_SWEEP_STEP: f64 = 0.25;
const BETA1_RESOLUTION: f64 = 1e-6;

fn beta1_gap(beta: f64, c_prime: f64, b_bound: f64, theta: f64, sweep: &[f64]) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for &lp in sweep {
        let gap = r_of(lp + c_prime, beta)? - lambda_of(lp, theta)? - b_bound;
        worst = worst.max(gap);
    }
    Ok(worst)
}

/// Largest `beta_1` with `r(lambda' + c', beta_1) <= lambda(lambda') + B` on
/// the sweep `[onset, 60]`.
///
/// Both sides grow like `lambda'`, so the inequality can only hold for
/// large `lambda'` when `sin(beta_1) <= sin(theta) e^{B - c'}`. The onset is
/// the first sweep point from which the inequality holds at half that
/// sine, and `beta_1` is then found by bisection.
pub fn beta1_threshold(b_bound: f64, c: f64, c_prime: f64, theta: f64) -> Result<Beta1> {
    check_theta(theta)?;
    if !(c_prime < c + theta.sin().ln()) {
        return Err(Error::InvalidParameter(format!(
            "c' = {c_prime} must be below c + ln sin(theta) = {}",
            c + theta.sin().ln()
        )));
    }
    let asymptotic = (theta.sin() * (b_bound - c_prime).exp()).min(1.0).asin();
    let probe = (0.5 * asymptotic.sin()).asin();
    let start = (-c_prime).max(lambda_prime_of(-b_bound, theta).unwrap_or(0.0)).max(0.0);
    let first = (start / BETA1_SWEEP_STEP).floor() as i64 + 1;
    let last = (BETA1_SWEEP_END / BETA1_SWEEP_STEP).round() as i64;
    let sweep_all: Vec<f64> = (first..=last).map(|i| i as f64 * BETA1_SWEEP_STEP).collect();
    if sweep_all.is_empty() {
        return Err(Error::InvalidParameter("beta_1 sweep is empty".into()));
    }
    // onset: the shortest tail of the sweep on which the probe angle works
    let mut onset_idx = sweep_all.len();
    for i in (0..sweep_all.len()).rev() {
        let lp = sweep_all[i];
        let gap = r_of(lp + c_prime, probe)? - lambda_of(lp, theta)? - b_bound;
        if gap > 0.0 {
            break;
        }
        onset_idx = i;
    }
    if onset_idx >= sweep_all.len().saturating_sub(1) {
        return Err(Error::Numerical(format!(
            "no onset below {BETA1_SWEEP_END} for B = {b_bound}, c' = {c_prime}, theta = {theta}"
        )));
    }
    let sweep = &sweep_all[onset_idx..];
    let (mut lo, mut hi) = (probe, asymptotic);
    if beta1_gap(hi, c_prime, b_bound, theta, sweep)? <= 0.0 {
        lo = hi;
    }
    while hi - lo > BETA1_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if beta1_gap(mid, c_prime, b_bound, theta, sweep)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if !(lo > 0.0) {
        return Err(Error::Numerical("no positive beta_1".into()));
    }
    Ok(Beta1 {
        beta1: lo,
        onset: sweep[0],
        asymptotic,
        worst_gap: beta1_gap(lo, c_prime, b_bound, theta, sweep)?,
    })
}

/// Largest `C^2` grid distance between the `S^{n-1}` block of the
/// normalized cut and `sin^2(beta) sigma` over the cells
/// `(b, beta, lambda')` with `lambda' + b > 0`.
pub fn uniformity_near_zero(
    fam: &OdotFamily,
    theta: f64,
    k: usize,
    cells: &[(f64, f64, f64)],
    grid: &GridSpec,
) -> Result<(f64, usize)> {
    let sigma = fam.sigma();
    let mut worst = 0.0_f64;
    let mut used = 0;
    for &(b, beta, lp) in cells {
        if lp + b <= 0.0 {
            continue;
        }
        let jf = normalized_extension_join(fam, theta, k, lp, b)?;
        let block = (jf.b_field)(beta)?;
        let d = c2_distance(&block, &sigma.scaled(beta.sin().powi(2)), grid)?;
        worst = worst.max(d.total());
        used += 1;
    }
    Ok((worst, used))
}

/// Sample direction used to read the perturbation coefficient of a block.
fn probe_direction(n: usize) -> (AmbientVec, AmbientVec) {
    let mut u = AmbientVec::zeros();
    let mut v = AmbientVec::zeros();
    u[0] = 0.6;
    u[n - 1] += 0.8;
    if n == 2 {
        v[0] = -0.8;
        v[1] = 0.6;
    } else {
        v[0] = 0.8;
        v[n - 1] = -0.6;
        v[1] = 0.0;
    }
    (u / u.norm(), v / v.norm())
}

/// For the bump family: the argument of the profile realized by the
/// `S^{n-1}` block at `(lambda', b, beta)`, read off by projecting onto the
/// perturbation field and inverting the profile. `None` when the profile is
/// saturated there (value outside `[0.02, 0.98]`).
pub fn measured_profile_argument(
    fam: &OdotFamily,
    params: &BumpParams,
    theta: f64,
    k: usize,
    lambda_prime: f64,
    b: f64,
    beta: f64,
) -> Result<Option<f64>> {
    let jf = normalized_extension_join(fam, theta, k, lambda_prime, b)?;
    let block = (jf.b_field)(beta)?;
    let (u, v) = probe_direction(fam.n);
    let p = perturbation_form(fam.atlas().clone());
    let pvv = p.bilinear(&u, &v, &v)?;
    if pvv.abs() < 1e-3 {
        return Err(Error::Numerical("probe direction misses the perturbation field".into()));
    }
    let svv = fam.sigma().bilinear(&u, &v, &v)?;
    let chi = (block.bilinear(&u, &v, &v)? / beta.sin().powi(2) - svv) / (params.amp * pvv);
    if !(0.02..=0.98).contains(&chi) {
        return Ok(None);
    }
    let profile = params.profile();
    let (mut lo, mut hi) = (profile.start, profile.start + profile.width);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if profile.eval(mid) < chi {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Boundary positive-definiteness report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub lambda_prime: f64,
    pub b: f64,
    /// `coth^2(lambda' + b)` obtained as `cosh^2 / sinh^2`.
    pub coth2: f64,
    /// Deviation from the closed form `1 / tanh^2`.
    pub coth2_error: f64,
    /// The excess `coth^2 - 1 = 1 / sinh^2` decreases strictly and stays
    /// positive along the parameter sweep.
    pub coth2_decreasing: bool,
    /// Smallest eigenvalue of `coth^2 I_k (+) hhat` on the `S^{n-1}` side.
    pub sphere_n_min_eig: f64,
    /// `(delta, smallest eigenvalue at beta = delta)` on the `S^{k-1}` side.
    pub sphere_k_min_eig: Vec<(f64, f64)>,
    pub margin: f64,
    pub passed: bool,
}

/// Mask widths probed on the `S^{k-1}` side.
pub const BOUNDARY_DELTAS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Boundary checks at parameter `lambda'` and offset `b`.
///
/// On `S^{n-1}` (`beta = pi/2`) the normalized cut splits as
/// `coth^2(s) sigma_{H^k} (+) hhat_{lambda, s}` with `s = lambda' + b`; on the
/// `S^{k-1}` side the limit candidate is evaluated at `beta = delta`.
pub fn boundary_checks(
    fam: &OdotFamily,
    theta: f64,
    k: usize,
    b: f64,
    lambda_prime: f64,
    grid: &GridSpec,
    margin: f64,
) -> Result<BoundaryReport> {
    check_theta(theta)?;
    let s = lambda_prime + b;
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda' + b = {s} must be positive")));
    }
    let coth2_at = |s: f64| s.cosh().powi(2) / s.sinh().powi(2);
    let coth2 = coth2_at(s);
    let coth2_error = (coth2 - 1.0 / s.tanh().powi(2)).abs();
    let sweep: Vec<f64> = (0..=8).map(|i| s * (i as f64 + 1.0) / 9.0).collect();
    let excess = |s: f64| 1.0 / crate::radial::sinh2(s);
    let coth2_decreasing = sweep.windows(2).all(|w| excess(w[1]) < excess(w[0])) && excess(s) > 0.0;

    let lambda = lambda_of(lambda_prime, theta)?;
    let hhat = crate::radial::normalized_cut(&fam.at(lambda)?, s)?;
    let atlas = hhat.atlas().clone();
    let mut n_min = f64::INFINITY;
    for (id, x) in crate::spheres::atlas_grid(&atlas, grid) {
        let c = hhat.eval(id, &x)?;
        n_min = n_min.min(min_eigenvalue_of(&c, fam.n - 1));
    }
    n_min = n_min.min(coth2);

    let big = ambient_atlas(fam, k)?;
    let limit_spec = ScanSpec {
        theta,
        k,
        b_grid: vec![b],
        lambda_grid: vec![lambda_prime - 2.0, lambda_prime],
        grid: *grid,
        mask: 0.5 * BOUNDARY_DELTAS[3],
        thresholds: Thresholds::default(),
        skip_origin_check: true,
    };
    let limit = limit_candidate(fam, &limit_spec, b, big.clone())?.form;
    let mut k_side = Vec::new();
    for delta in BOUNDARY_DELTAS {
        let mut worst = f64::INFINITY;
        for (w, u) in boundary_directions(k, fam.n) {
            let p = join_embed(&w, &u, delta);
            let chart = big.best_chart(&p);
            let c: FormMatrix = limit.eval(chart.id, &chart.coords(&p))?;
            worst = worst.min(min_eigenvalue_of(&c, chart.dim()));
        }
        k_side.push((delta, worst));
    }
    let passed = coth2_error < 1e-6
        && coth2_decreasing
        && n_min >= margin
        && k_side.iter().all(|&(_, e)| e >= margin);
    Ok(BoundaryReport {
        lambda_prime,
        b,
        coth2,
        coth2_error,
        coth2_decreasing,
        sphere_n_min_eig: n_min,
        sphere_k_min_eig: k_side,
        margin,
        passed,
    })
}

/// Sample `(w, u)` pairs on `S^{k-1} x S^{n-1}`.
fn boundary_directions(k: usize, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let unit = |dim: usize, seed: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|i| ((seed * 7 + i * 3 + 1) as f64 * 0.9).sin()).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter().map(|a| a / norm).collect()
    };
    let mut out = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            out.push((unit(k, i), unit(n, j + 11)));
        }
    }
    out
}
