//! Metrics with a center, `g = g_r + dr^2`, described by their cut fields,
//! and one-parameter families of such metrics.
//!
//! A [`RadialMetric`] stores the normalized cut `r -> g_r / sinh^2(r)`; the
//! spherical cut is recovered by rescaling. Every catalog member is a
//! `sinh^2` warp of a bounded field, so this keeps cuts at large radii free
//! of overflow.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyptrig::ln_sinh;
use crate::spheres::{
    c0_distance, make_atlas, min_eigenvalue_on_grid, perturbation_form, round_metric_on, Atlas,
    GridSpec, SphereForm,
};

/// `r -> form on S^{n-1}`.
pub type CutField = dyn Fn(f64) -> Result<SphereForm> + Send + Sync;

/// A metric `g_r + dr^2` on `R^n - {0}`.
#[derive(Clone)]
pub struct RadialMetric {
    pub n: usize,
    pub name: String,
    normalized: Arc<CutField>,
}

impl fmt::Debug for RadialMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialMetric")
            .field("n", &self.n)
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

fn check_radius(r0: f64) -> Result<()> {
    if r0 > 0.0 && r0.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("cut radius must be positive, got {r0}")))
    }
}

/// `sinh^2(r)` for `r > 0`, through the log form once it would overflow.
pub fn sinh2(r: f64) -> f64 {
    if r < 300.0 {
        r.sinh().powi(2)
    } else {
        (2.0 * ln_sinh(r)).exp()
    }
}

impl RadialMetric {
    /// Metric given by its spherical cuts `g_r`.
    pub fn from_cut<F>(n: usize, name: impl Into<String>, cut: F) -> Self
    where
        F: Fn(f64) -> Result<SphereForm> + Send + Sync + 'static,
    {
        Self {
            n,
            name: name.into(),
            normalized: Arc::new(move |r| Ok(cut(r)?.scaled(1.0 / sinh2(r)))),
        }
    }

    /// Metric given by its normalized cuts `g_r / sinh^2(r)`.
    pub fn from_normalized_cut<F>(n: usize, name: impl Into<String>, hat: F) -> Self
    where
        F: Fn(f64) -> Result<SphereForm> + Send + Sync + 'static,
    {
        Self {
            n,
            name: name.into(),
            normalized: Arc::new(hat),
        }
    }

    /// Same metric multiplied by a constant `c2 > 0`.
    pub fn scaled(&self, c2: f64) -> Self {
        let inner = self.normalized.clone();
        Self {
            n: self.n,
            name: format!("{}*{c2}", self.name),
            normalized: Arc::new(move |r| Ok(inner(r)?.scaled(c2))),
        }
    }

    /// The normalized cut as a shareable closure.
    pub fn normalized_field(&self) -> Arc<CutField> {
        self.normalized.clone()
    }
}

/// The spherical cut `g_{r0}` on `S^{n-1}`.
pub fn spherical_cut(g: &RadialMetric, r0: f64) -> Result<SphereForm> {
    check_radius(r0)?;
    Ok((g.normalized)(r0)?.scaled(sinh2(r0)))
}

/// The normalized spherical cut `g_{r0} / sinh^2(r0)`.
pub fn normalized_cut(g: &RadialMetric, r0: f64) -> Result<SphereForm> {
    check_radius(r0)?;
    (g.normalized)(r0)
}

/// Hyperbolic space: `g_r = sinh^2(r) sigma`.
pub fn make_hyperbolic(n: usize) -> Result<RadialMetric> {
    let sigma = round_metric_on(Arc::new(make_atlas(n)?));
    Ok(hyperbolic_on(sigma))
}

fn hyperbolic_on(sigma: SphereForm) -> RadialMetric {
    RadialMetric::from_normalized_cut(sigma.m(), "hyperbolic", move |_| Ok(sigma.clone()))
}

/// Euclidean space: `g_r = r^2 sigma`.
pub fn make_euclidean(n: usize) -> Result<RadialMetric> {
    let sigma = round_metric_on(Arc::new(make_atlas(n)?));
    Ok(RadialMetric::from_cut(n, "euclidean", move |r| Ok(sigma.scaled(r * r))))
}

/// `C^2` smoothstep `6x^5 - 15x^4 + 10x^3` clamped to `[0, 1]`.
pub fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

/// Profile rising from 0 at `start` to 1 at `start + width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub start: f64,
    pub width: f64,
}

impl BumpProfile {
    pub fn eval(&self, x: f64) -> f64 {
        smoothstep((x - self.start) / self.width)
    }

    /// Argument at which the profile takes the value `1/2`.
    pub fn midpoint(&self) -> f64 {
        self.start + 0.5 * self.width
    }
}

/// `b -> limit of the normalized cuts at lambda + b`.
pub type LimitField = dyn Fn(f64) -> Result<SphereForm> + Send + Sync;
type MemberFn = dyn Fn(f64) -> Result<RadialMetric> + Send + Sync;

/// A one-parameter family `lambda -> h_lambda` sharing center and spheres.
#[derive(Clone)]
pub struct OdotFamily {
    pub name: String,
    pub n: usize,
    pub lambda0: f64,
    /// `B` such that the normalized cut at `lambda + b` is round for `b <= B`.
    pub hyperbolic_origin_b: Option<f64>,
    at: Arc<MemberFn>,
    limit: Option<Arc<LimitField>>,
    atlas: Arc<Atlas>,
}

impl fmt::Debug for OdotFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdotFamily")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("lambda0", &self.lambda0)
            .field("hyperbolic_origin_b", &self.hyperbolic_origin_b)
            .field("analytic_limit", &self.limit.is_some())
            .finish_non_exhaustive()
    }
}

impl OdotFamily {
    /// Family member `h_lambda`.
    pub fn at(&self, lambda: f64) -> Result<RadialMetric> {
        if !(lambda > self.lambda0) {
            return Err(Error::InvalidParameter(format!(
                "family {} is defined for lambda > {}, got {lambda}",
                self.name, self.lambda0
            )));
        }
        (self.at)(lambda)
    }

    /// Analytic cut limit `b -> hhat_inf^b`, when known.
    pub fn cut_limit(&self) -> Option<Arc<LimitField>> {
        self.limit.clone()
    }

    pub fn atlas(&self) -> &Arc<Atlas> {
        &self.atlas
    }

    /// Round metric on the atlas of the family.
    pub fn sigma(&self) -> SphereForm {
        round_metric_on(self.atlas.clone())
    }
}

/// The constant family `lambda -> g`.
pub fn constant_family(g: RadialMetric, limit: Option<Arc<LimitField>>) -> Result<OdotFamily> {
    let atlas = Arc::new(make_atlas(g.n)?);
    let name = format!("constant-{}", g.name);
    Ok(OdotFamily {
        name,
        n: g.n,
        lambda0: 0.0,
        hyperbolic_origin_b: None,
        at: Arc::new(move |_| Ok(g.clone())),
        limit,
        atlas,
    })
}

/// Constant hyperbolic family; hyperbolic around the origin for every `B`.
pub fn hyperbolic_family(n: usize, b: f64) -> Result<OdotFamily> {
    let atlas = Arc::new(make_atlas(n)?);
    let sigma = round_metric_on(atlas.clone());
    let g = hyperbolic_on(sigma.clone());
    let mut fam = constant_family(g, Some(Arc::new(move |_| Ok(sigma.clone()))))?;
    fam.atlas = atlas;
    fam.hyperbolic_origin_b = Some(b);
    Ok(fam)
}

/// Constant Euclidean family; its normalized cuts tend to zero.
pub fn euclidean_family(n: usize) -> Result<OdotFamily> {
    let g = make_euclidean(n)?;
    let sigma = round_metric_on(Arc::new(make_atlas(n)?));
    constant_family(g, Some(Arc::new(move |_| Ok(sigma.scaled(0.0)))))
}

/// Parameters of the bump family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BumpParams {
    #[serde(rename = "B")]
    pub b: f64,
    pub amp: f64,
    #[serde(rename = "L")]
    pub width: f64,
}

impl Default for BumpParams {
    fn default() -> Self {
        Self {
            b: -1.0,
            amp: 0.1,
            width: 2.0,
        }
    }
}

impl BumpParams {
    pub fn profile(&self) -> BumpProfile {
        BumpProfile {
            start: self.b,
            width: self.width,
        }
    }
}

fn perturbed(sigma: &SphereForm, p: &SphereForm, coef: f64) -> Result<SphereForm> {
    if coef == 0.0 {
        return Ok(sigma.clone());
    }
    SphereForm::linear_combination(&[(1.0, sigma), (coef, p)])
}

fn check_positivity(sigma: &SphereForm, p: &SphereForm, amp: f64) -> Result<()> {
    // the smallest eigenvalue of sigma + c P is concave in c, so the
    // endpoints of [0, amp] bound it from below
    let top = perturbed(sigma, p, amp)?;
    let grid = GridSpec {
        points_per_axis: 9,
        max_points_per_chart: 4096,
        fd_step: 1e-3,
    };
    let lo = min_eigenvalue_on_grid(&top, &grid)?;
    if lo <= 0.0 {
        return Err(Error::NotPositiveDefinite(lo));
    }
    Ok(())
}

/// Synthetic family with exact cut limits: the normalized cut of `h_lambda`
/// at radius `rho` is `sigma + chi(rho - lambda) amp P`, with `chi` the
/// smoothstep rising over `[B, B + L]` and `P` the built-in perturbation
/// field. Hyperbolic around the origin with constant `B`; the cut limit at
/// `b` is `sigma + chi(b) amp P`.
pub fn make_bump_family(n: usize, params: BumpParams) -> Result<OdotFamily> {
    if !(params.width > 0.0) || !params.b.is_finite() || !params.amp.is_finite() {
        return Err(Error::InvalidParameter(format!("invalid bump parameters {params:?}")));
    }
    let atlas = Arc::new(make_atlas(n)?);
    let sigma = round_metric_on(atlas.clone());
    let p = perturbation_form(atlas.clone());
    check_positivity(&sigma, &p, params.amp)?;
    let chi = params.profile();
    let amp = params.amp;
    let (s1, p1) = (sigma.clone(), p.clone());
    let at = move |lambda: f64| -> Result<RadialMetric> {
        let (s2, p2) = (s1.clone(), p1.clone());
        Ok(RadialMetric::from_normalized_cut(n, format!("bump@{lambda}"), move |rho| {
            perturbed(&s2, &p2, chi.eval(rho - lambda) * amp)
        }))
    };
    let limit = move |b: f64| perturbed(&sigma, &p, chi.eval(b) * amp);
    Ok(OdotFamily {
        name: "bump".into(),
        n,
        lambda0: 0.0,
        hyperbolic_origin_b: Some(params.b),
        at: Arc::new(at),
        limit: Some(Arc::new(limit)),
        atlas,
    })
}

/// Counterexample without cut limits: normalized cut at `rho` equal to
/// `sigma + chi(rho - lambda) sin^2(lambda) amp P`. Still hyperbolic around
/// the origin with constant `B`.
pub fn make_oscillating_family(n: usize, params: BumpParams) -> Result<OdotFamily> {
    let mut fam = make_bump_family(n, params)?;
    let sigma = fam.sigma();
    let p = perturbation_form(fam.atlas.clone());
    let chi = params.profile();
    let amp = params.amp;
    fam.name = "oscillating".into();
    fam.limit = None;
    fam.at = Arc::new(move |lambda: f64| {
        let (s2, p2) = (sigma.clone(), p.clone());
        let wobble = lambda.sin().powi(2) * amp;
        Ok(RadialMetric::from_normalized_cut(n, format!("oscillating@{lambda}"), move |rho| {
            perturbed(&s2, &p2, chi.eval(rho - lambda) * wobble)
        }))
    });
    Ok(fam)
}

/// Outcome of [`check_hyperbolic_origin`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginCheck {
    pub holds: bool,
    /// Largest grid `C^0` distance to the round metric.
    pub max_residual: f64,
}

/// Threshold below which a normalized cut counts as round.
pub const ROUND_TOLERANCE: f64 = 1e-9;

/// Checks that the normalized cut of `h_lambda` at `lambda + b` is the round
/// metric for every sample `(lambda, b)`; samples need `b <= B` and
/// `lambda > max(lambda0, -b)`.
pub fn check_hyperbolic_origin(
    fam: &OdotFamily,
    b_bound: f64,
    samples: &[(f64, f64)],
    grid: &GridSpec,
) -> Result<OriginCheck> {
    let sigma = fam.sigma();
    let mut worst = 0.0_f64;
    for &(lambda, b) in samples {
        if b > b_bound {
            return Err(Error::InvalidParameter(format!("sample offset {b} exceeds B = {b_bound}")));
        }
        if !(lambda > fam.lambda0.max(-b)) {
            return Err(Error::InvalidParameter(format!(
                "sample lambda {lambda} must exceed max(lambda0, -b) = {}",
                fam.lambda0.max(-b)
            )));
        }
        let cut = normalized_cut(&fam.at(lambda)?, lambda + b)?;
        worst = worst.max(c0_distance(&cut, &sigma, grid)?.d0);
    }
    Ok(OriginCheck {
        holds: worst < ROUND_TOLERANCE,
        max_residual: worst,
    })
}
