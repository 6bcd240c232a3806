//! Chart atlases on round spheres, symmetric bilinear form fields and the
//! grid C^0/C^1/C^2 distance between them.
//!
//! `S^{m-1}` is covered by the `2m` orthographic hemisphere charts: chart
//! `(axis, sign)` uses the remaining `m-1` ambient coordinates as chart
//! coordinates on the ball `|x| < rho`, with
//! `embed(x) = (x, sign * sqrt(1 - |x|^2))` (the last entry placed in slot
//! `axis`). Because chart coordinates are a linear projection of the ambient
//! point, a field given ambiently as an `m x m` matrix restricts to the
//! tangent spaces consistently on every overlap.
//!
//! Matrices are stored in fixed `6 x 6` (ambient) and `5 x 5` (chart)
//! buffers; only the leading block of the actual dimension is meaningful
//! and the rest stays zero.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest ambient dimension `m` (sphere `S^5`).
pub const MAX_AMBIENT: usize = 6;
/// Largest chart dimension.
pub const MAX_CHART: usize = MAX_AMBIENT - 1;

pub type AmbientVec = SVector<f64, MAX_AMBIENT>;
pub type AmbientMat = SMatrix<f64, MAX_AMBIENT, MAX_AMBIENT>;
pub type ChartPoint = SVector<f64, MAX_CHART>;
pub type FormMatrix = SMatrix<f64, MAX_CHART, MAX_CHART>;
pub type ChartJacobian = SMatrix<f64, MAX_AMBIENT, MAX_CHART>;

/// Chart radius for `S^{m-1}`; strictly above the covering radius
/// `sqrt((m-1)/m)` of the orthographic family.
pub fn chart_radius(m: usize) -> f64 {
    (m as f64 / (m as f64 + 1.0)).sqrt()
}

/// One orthographic hemisphere chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chart {
    pub id: usize,
    /// Ambient slot solved for by the chart.
    pub axis: usize,
    pub positive: bool,
    /// Radius of the coordinate ball.
    pub radius: f64,
    /// Ambient dimension.
    pub m: usize,
}

impl Chart {
    pub fn dim(&self) -> usize {
        self.m - 1
    }

    fn sign(&self) -> f64 {
        if self.positive {
            1.0
        } else {
            -1.0
        }
    }

    /// Ambient index of chart coordinate `l`.
    fn slot(&self, l: usize) -> usize {
        if l < self.axis {
            l
        } else {
            l + 1
        }
    }

    /// Point of the sphere with chart coordinates `x`; defined on the open
    /// unit ball, which contains the closure of the chart domain.
    pub fn embed(&self, x: &ChartPoint) -> Result<AmbientVec> {
        let norm2: f64 = (0..self.dim()).map(|l| x[l] * x[l]).sum();
        if norm2 >= 1.0 {
            return Err(Error::OutsideChart {
                chart: self.id,
                point: x.iter().take(self.dim()).copied().collect(),
            });
        }
        let mut p = AmbientVec::zeros();
        for l in 0..self.dim() {
            p[self.slot(l)] = x[l];
        }
        p[self.axis] = self.sign() * (1.0 - norm2).sqrt();
        Ok(p)
    }

    /// Derivative of [`Chart::embed`], an `m x (m-1)` block.
    pub fn jacobian(&self, x: &ChartPoint, p: &AmbientVec) -> ChartJacobian {
        let mut j = ChartJacobian::zeros();
        for l in 0..self.dim() {
            j[(self.slot(l), l)] = 1.0;
            j[(self.axis, l)] = -x[l] / p[self.axis];
        }
        j
    }

    /// Chart coordinates of an ambient point (no domain check).
    pub fn coords(&self, p: &AmbientVec) -> ChartPoint {
        let mut x = ChartPoint::zeros();
        for l in 0..self.dim() {
            x[l] = p[self.slot(l)];
        }
        x
    }

    /// Whether the unit vector `p` lies in the chart domain.
    pub fn contains(&self, p: &AmbientVec) -> bool {
        if p[self.axis] * self.sign() <= 0.0 {
            return false;
        }
        let x = self.coords(p);
        x.norm() < self.radius
    }

    /// Lifts chart components `c` to an ambient matrix whose restriction to
    /// tangent vectors reproduces `c`.
    fn lift(&self, c: &FormMatrix) -> AmbientMat {
        let mut g = AmbientMat::zeros();
        for a in 0..self.dim() {
            for b in 0..self.dim() {
                g[(self.slot(a), self.slot(b))] = c[(a, b)];
            }
        }
        g
    }
}

/// The fixed orthographic atlas of `S^{m-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub m: usize,
    pub charts: Vec<Chart>,
}

/// Builds the `2m` hemisphere charts of `S^{m-1}`. Chart `2 * axis` is the
/// positive hemisphere, `2 * axis + 1` the negative one.
pub fn make_atlas(m: usize) -> Result<Atlas> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "sphere atlas needs ambient dimension m >= 2, got {m}"
        )));
    }
    if m > MAX_AMBIENT {
        return Err(Error::InvalidParameter(format!(
            "ambient dimension {m} exceeds the desk cap {MAX_AMBIENT}"
        )));
    }
    let radius = chart_radius(m);
    let charts = (0..m)
        .flat_map(|axis| [true, false].map(|positive| (axis, positive)))
        .enumerate()
        .map(|(id, (axis, positive))| Chart {
            id,
            axis,
            positive,
            radius,
            m,
        })
        .collect();
    Ok(Atlas { m, charts })
}

impl Atlas {
    pub fn chart(&self, id: usize) -> Result<&Chart> {
        self.charts
            .get(id)
            .ok_or_else(|| Error::InvalidParameter(format!("no chart {id} on S^{}", self.m - 1)))
    }

    /// The chart whose axis carries the largest component of `p`; `p` is
    /// deepest inside that chart.
    pub fn best_chart(&self, p: &AmbientVec) -> &Chart {
        let mut axis = 0;
        for i in 1..self.m {
            if p[i].abs() > p[axis].abs() {
                axis = i;
            }
        }
        let id = 2 * axis + usize::from(p[axis] < 0.0);
        &self.charts[id]
    }

    /// Whether some chart domain contains `p`.
    pub fn covers(&self, p: &AmbientVec) -> bool {
        self.charts.iter().any(|c| c.contains(p))
    }
}

/// Coordinates in chart `b` of the point with coordinates `x` in chart `a`.
pub fn transition(atlas: &Atlas, a: usize, b: usize, x: &ChartPoint) -> Result<ChartPoint> {
    let (ca, cb) = (atlas.chart(a)?, atlas.chart(b)?);
    let p = ca.embed(x)?;
    if !cb.contains(&p) {
        return Err(Error::OutsideChart {
            chart: b,
            point: x.iter().take(ca.dim()).copied().collect(),
        });
    }
    Ok(cb.coords(&p))
}

/// Angular band `lo <= beta <= hi` of `S^{k+n-1}`, where `beta` is the
/// spherical distance to the great subsphere `S^{k-1}` spanned by the first
/// `k` ambient axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JoinBand {
    pub k: usize,
    pub lo: f64,
    pub hi: f64,
}

impl JoinBand {
    pub fn contains(&self, p: &AmbientVec, m: usize) -> bool {
        let beta = join_angle(p, self.k, m);
        beta >= self.lo && beta <= self.hi
    }
}

/// Spherical distance from `p` to the subsphere of the first `k` axes.
pub fn join_angle(p: &AmbientVec, k: usize, m: usize) -> f64 {
    let head: f64 = (0..k).map(|i| p[i] * p[i]).sum::<f64>().sqrt();
    let tail: f64 = (k..m).map(|i| p[i] * p[i]).sum::<f64>().sqrt();
    tail.atan2(head)
}

type AmbientFn = dyn Fn(&AmbientVec) -> Result<AmbientMat> + Send + Sync;
type ChartFn = dyn Fn(&Chart, &ChartPoint) -> Result<FormMatrix> + Send + Sync;

#[derive(Clone)]
enum Field {
    Ambient(Arc<AmbientFn>),
    Chart(Arc<ChartFn>),
    Combination(Arc<Vec<(f64, SphereForm)>>),
}

/// A field of symmetric bilinear forms on `S^{m-1}`.
///
/// Positive definiteness is not required; candidates for limits are checked
/// separately with [`min_eigenvalue_on_grid`].
#[derive(Clone)]
pub struct SphereForm {
    atlas: Arc<Atlas>,
    field: Field,
    scale: f64,
    bands: Vec<JoinBand>,
}

impl fmt::Debug for SphereForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SphereForm")
            .field("m", &self.atlas.m)
            .field("scale", &self.scale)
            .field("bands", &self.bands)
            .finish_non_exhaustive()
    }
}

impl SphereForm {
    /// Form given by an ambient symmetric matrix field; only its restriction
    /// to the tangent spaces matters.
    pub fn from_ambient<F>(atlas: Arc<Atlas>, f: F) -> Self
    where
        F: Fn(&AmbientVec) -> Result<AmbientMat> + Send + Sync + 'static,
    {
        Self {
            atlas,
            field: Field::Ambient(Arc::new(f)),
            scale: 1.0,
            bands: Vec::new(),
        }
    }

    /// Form given chart by chart. The caller is responsible for tensor
    /// compatibility on overlaps (see [`compatibility_residual`]).
    pub fn from_chart_fn<F>(atlas: Arc<Atlas>, f: F) -> Self
    where
        F: Fn(&Chart, &ChartPoint) -> Result<FormMatrix> + Send + Sync + 'static,
    {
        Self {
            atlas,
            field: Field::Chart(Arc::new(f)),
            scale: 1.0,
            bands: Vec::new(),
        }
    }

    /// `sum_i c_i * form_i`; all forms must share the atlas.
    pub fn linear_combination(terms: &[(f64, &SphereForm)]) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty linear combination".into()))?;
        let atlas = first.1.atlas.clone();
        let mut bands = Vec::new();
        for (_, f) in terms {
            if f.atlas.m != atlas.m {
                return Err(Error::AtlasMismatch(atlas.m - 1, f.atlas.m - 1));
            }
            bands.extend(f.bands.iter().copied());
        }
        let owned = terms.iter().map(|(c, f)| (*c, (*f).clone())).collect();
        Ok(Self {
            atlas,
            field: Field::Combination(Arc::new(owned)),
            scale: 1.0,
            bands,
        })
    }

    /// The same field multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale *= c;
        out
    }

    /// Restricts the form to a band around a join decomposition.
    pub fn restricted(&self, band: JoinBand) -> Self {
        let mut out = self.clone();
        out.bands.push(band);
        out
    }

    pub fn atlas(&self) -> &Arc<Atlas> {
        &self.atlas
    }

    pub fn m(&self) -> usize {
        self.atlas.m
    }

    pub fn bands(&self) -> &[JoinBand] {
        &self.bands
    }

    /// Whether the form is defined at the unit vector `p`.
    pub fn defined_at(&self, p: &AmbientVec) -> bool {
        self.bands.iter().all(|b| b.contains(p, self.atlas.m))
    }

    fn check_defined(&self, chart: &Chart, x: &ChartPoint, p: &AmbientVec) -> Result<()> {
        if self.defined_at(p) {
            Ok(())
        } else {
            Err(Error::OutsideChart {
                chart: chart.id,
                point: x.iter().take(chart.dim()).copied().collect(),
            })
        }
    }

    /// Components in chart `chart` at chart point `x`.
    pub fn eval(&self, chart: usize, x: &ChartPoint) -> Result<FormMatrix> {
        let chart = *self.atlas.chart(chart)?;
        let p = chart.embed(x)?;
        self.check_defined(&chart, x, &p)?;
        self.eval_unchecked(&chart, x, &p)
    }

    fn eval_unchecked(&self, chart: &Chart, x: &ChartPoint, p: &AmbientVec) -> Result<FormMatrix> {
        let c = match &self.field {
            Field::Ambient(f) => {
                let j = chart.jacobian(x, p);
                j.transpose() * f(p)? * j
            }
            Field::Chart(f) => f(chart, x)?,
            Field::Combination(terms) => {
                let mut acc = FormMatrix::zeros();
                for (c, form) in terms.iter() {
                    acc += form.eval_unchecked(chart, x, p)? * *c;
                }
                acc
            }
        };
        Ok(c * self.scale)
    }

    /// Ambient `m x m` representative at the unit vector `p`: its
    /// restriction to `T_p S^{m-1}` is the form at `p`.
    pub fn eval_ambient(&self, p: &AmbientVec) -> Result<AmbientMat> {
        let g = match &self.field {
            Field::Ambient(f) => f(p)?,
            Field::Chart(f) => {
                let chart = self.atlas.best_chart(p);
                chart.lift(&f(chart, &chart.coords(p))?)
            }
            Field::Combination(terms) => {
                let mut acc = AmbientMat::zeros();
                for (c, form) in terms.iter() {
                    acc += form.eval_ambient(p)? * *c;
                }
                acc
            }
        };
        Ok(g * self.scale)
    }

    /// `form(v, w)` for ambient tangent vectors at `p`.
    pub fn bilinear(&self, p: &AmbientVec, v: &AmbientVec, w: &AmbientVec) -> Result<f64> {
        Ok(v.dot(&(self.eval_ambient(p)? * w)))
    }
}

/// The round metric of `S^{m-1}`; in chart coordinates
/// `delta_ij + x_i x_j / (1 - |x|^2)`.
pub fn round_metric(m: usize) -> Result<SphereForm> {
    let atlas = Arc::new(make_atlas(m)?);
    Ok(round_metric_on(atlas))
}

/// Round metric on an existing atlas.
pub fn round_metric_on(atlas: Arc<Atlas>) -> SphereForm {
    let m = atlas.m;
    let mut id = AmbientMat::zeros();
    for i in 0..m {
        id[(i, i)] = 1.0;
    }
    SphereForm::from_ambient(atlas, move |_| Ok(id))
}

/// The fixed smooth, non-round symmetric field `P` on `S^{m-1}` used to
/// perturb round metrics. Ambiently `P(p) = H + (p . v) K` with a constant
/// trigonometric matrix `H`, `v = (1, 1/2, 0, ...)` and `K` coupling the
/// first and last axes. Its tangential restriction has operator norm below
/// 2.5 for every `m <= 6`.
pub fn perturbation_form(atlas: Arc<Atlas>) -> SphereForm {
    let m = atlas.m;
    let mut h = AmbientMat::zeros();
    for i in 0..m {
        for j in 0..m {
            let (a, b) = (i as f64, j as f64);
            h[(i, j)] = 0.25 * ((1.0 + a + 2.0 * b).cos() + (1.0 + 2.0 * a + b).cos());
        }
    }
    let mut k = AmbientMat::zeros();
    k[(0, m - 1)] = 1.0;
    k[(m - 1, 0)] = 1.0;
    if m == 1 {
        k[(0, 0)] = 2.0;
    }
    SphereForm::from_ambient(atlas, move |p| {
        let lin = p[0] + 0.5 * p[1];
        Ok(h + k * lin)
    })
}

/// Sampling spec for grid norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Grid points per chart axis before capping.
    pub points_per_axis: usize,
    /// Cap on the number of grid points per chart.
    pub max_points_per_chart: usize,
    /// Finite-difference step in chart coordinates.
    pub fd_step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_axis: 17,
            max_points_per_chart: 2401,
            fd_step: 1e-3,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_axis < 2 || self.max_points_per_chart < 1 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 points per axis, got {}",
                self.points_per_axis
            )));
        }
        if !(self.fd_step > 0.0 && self.fd_step < 0.05) {
            return Err(Error::InvalidParameter(format!(
                "fd_step = {} must lie in (0, 0.05)",
                self.fd_step
            )));
        }
        Ok(())
    }

    /// Points per axis actually used on a chart of dimension `dim`.
    pub fn effective_points_per_axis(&self, dim: usize) -> usize {
        let mut n = self.points_per_axis;
        while n > 2 && n.pow(dim as u32) > self.max_points_per_chart {
            n -= 1;
        }
        n
    }

    /// Same spec with `factor` times as many points per axis and no cap.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            points_per_axis: (self.points_per_axis - 1) * factor + 1,
            max_points_per_chart: usize::MAX,
            fd_step: self.fd_step,
        }
    }
}

/// Grid points of one chart: a uniform grid on the cube `[-1, 1]^d`, pushed
/// radially onto the chart ball so that the boundary sphere is sampled.
pub fn chart_grid(chart: &Chart, grid: &GridSpec) -> Vec<ChartPoint> {
    let d = chart.dim();
    let n = grid.effective_points_per_axis(d);
    let total = n.pow(d as u32);
    let step = 2.0 / (n - 1) as f64;
    (0..total)
        .map(|mut idx| {
            let mut u = ChartPoint::zeros();
            for l in 0..d {
                u[l] = -1.0 + step * (idx % n) as f64;
                idx /= n;
            }
            let l2 = u.norm();
            if l2 > 0.0 {
                let linf = u.amax();
                u *= chart.radius * linf / l2;
            }
            u
        })
        .collect()
}

/// All `(chart id, point)` samples of the atlas.
pub fn atlas_grid(atlas: &Atlas, grid: &GridSpec) -> Vec<(usize, ChartPoint)> {
    atlas
        .charts
        .iter()
        .flat_map(|c| chart_grid(c, grid).into_iter().map(move |x| (c.id, x)))
        .collect()
}

/// Grid distances between two forms: sup of component differences (`d0`)
/// and of their first (`d1`) and second (`d2`) central differences in chart
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C2Distance {
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    /// Grid points whose whole stencil lies where both forms are defined.
    pub samples: usize,
}

impl C2Distance {
    /// The reported C^2 distance `d0 + d1 + d2`.
    pub fn total(&self) -> f64 {
        self.d0 + self.d1 + self.d2
    }
}

fn max_abs(c: &FormMatrix, d: usize) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..d {
        for j in 0..d {
            worst = worst.max(c[(i, j)].abs());
        }
    }
    worst
}

fn check_same_atlas(a: &SphereForm, b: &SphereForm) -> Result<()> {
    if a.atlas.m != b.atlas.m {
        return Err(Error::AtlasMismatch(a.atlas.m - 1, b.atlas.m - 1));
    }
    Ok(())
}

struct Stencil {
    center: FormMatrix,
    plus: [FormMatrix; MAX_CHART],
    minus: [FormMatrix; MAX_CHART],
}

/// Difference `a - b` on the central stencil around `x`, or `None` when some
/// stencil point leaves the common domain.
fn diff_stencil(
    a: &SphereForm,
    b: &SphereForm,
    chart: &Chart,
    x: &ChartPoint,
    h: f64,
    mixed: &mut Vec<[FormMatrix; 4]>,
) -> Result<Option<Stencil>> {
    let d = chart.dim();
    let diff_at = |y: &ChartPoint| -> Result<Option<FormMatrix>> {
        let p = match chart.embed(y) {
            Ok(p) => p,
            Err(_) => return Ok(None),
        };
        if !a.defined_at(&p) || !b.defined_at(&p) {
            return Ok(None);
        }
        Ok(Some(a.eval_unchecked(chart, y, &p)? - b.eval_unchecked(chart, y, &p)?))
    };
    let offset = |i: usize, si: f64, j: usize, sj: f64| {
        let mut y = *x;
        y[i] += si * h;
        y[j] += sj * h;
        y
    };
    let Some(center) = diff_at(x)? else {
        return Ok(None);
    };
    let mut plus = [FormMatrix::zeros(); MAX_CHART];
    let mut minus = [FormMatrix::zeros(); MAX_CHART];
    for i in 0..d {
        let mut y = *x;
        y[i] += h;
        let Some(p) = diff_at(&y)? else { return Ok(None) };
        y[i] -= 2.0 * h;
        let Some(m) = diff_at(&y)? else { return Ok(None) };
        plus[i] = p;
        minus[i] = m;
    }
    mixed.clear();
    for i in 0..d {
        for j in (i + 1)..d {
            let mut corners = [FormMatrix::zeros(); 4];
            for (slot, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .into_iter()
                .enumerate()
            {
                let Some(v) = diff_at(&offset(i, si, j, sj))? else {
                    return Ok(None);
                };
                corners[slot] = v;
            }
            mixed.push(corners);
        }
    }
    Ok(Some(Stencil {
        center,
        plus,
        minus,
    }))
}

fn point_distances(
    a: &SphereForm,
    b: &SphereForm,
    chart: &Chart,
    x: &ChartPoint,
    h: f64,
) -> Result<Option<(f64, f64, f64)>> {
    let d = chart.dim();
    let mut mixed = Vec::with_capacity(d * d);
    let Some(st) = diff_stencil(a, b, chart, x, h, &mut mixed)? else {
        return Ok(None);
    };
    let d0 = max_abs(&st.center, d);
    let mut d1 = 0.0_f64;
    let mut d2 = 0.0_f64;
    for i in 0..d {
        d1 = d1.max(max_abs(&((st.plus[i] - st.minus[i]) / (2.0 * h)), d));
        d2 = d2.max(max_abs(
            &((st.plus[i] - st.center * 2.0 + st.minus[i]) / (h * h)),
            d,
        ));
    }
    for c in &mixed {
        d2 = d2.max(max_abs(&((c[0] - c[1] - c[2] + c[3]) / (4.0 * h * h)), d));
    }
    Ok(Some((d0, d1, d2)))
}

/// Grid C^2 distance between two forms on the same sphere.
///
/// Only grid points whose whole stencil lies where both forms are defined
/// contribute; an empty sample set is an error rather than a zero distance.
pub fn c2_distance(a: &SphereForm, b: &SphereForm, grid: &GridSpec) -> Result<C2Distance> {
    check_same_atlas(a, b)?;
    grid.validate()?;
    let atlas = a.atlas.clone();
    let points = atlas_grid(&atlas, grid);
    let per_point: Vec<Option<(f64, f64, f64)>> = points
        .par_iter()
        .map(|(id, x)| point_distances(a, b, &atlas.charts[*id], x, grid.fd_step))
        .collect::<Result<_>>()?;
    reduce(per_point.into_iter().map(|v| v.map(|(d0, d1, d2)| [d0, d1, d2])))
        .map(|([d0, d1, d2], samples)| C2Distance { d0, d1, d2, samples })
}

/// Values of one form on every stencil point of a grid, for repeated
/// distance evaluations against several forms.
pub struct GridSamples {
    m: usize,
    grid: GridSpec,
    /// Per grid point: center, then `(+h, -h)` per axis, then the four
    /// corners per axis pair; `None` when a stencil point leaves the domain.
    values: Vec<Option<Vec<FormMatrix>>>,
    dims: Vec<usize>,
}

fn stencil_points(x: &ChartPoint, d: usize, h: f64) -> Vec<ChartPoint> {
    let mut pts = vec![*x];
    for i in 0..d {
        let mut y = *x;
        y[i] += h;
        pts.push(y);
        y[i] -= 2.0 * h;
        pts.push(y);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut y = *x;
                y[i] += si * h;
                y[j] += sj * h;
                pts.push(y);
            }
        }
    }
    pts
}

/// Samples `form` on the stencils of `grid`.
pub fn sample_grid(form: &SphereForm, grid: &GridSpec) -> Result<GridSamples> {
    grid.validate()?;
    let atlas = form.atlas.clone();
    let points = atlas_grid(&atlas, grid);
    let values = points
        .par_iter()
        .map(|(id, x)| -> Result<Option<Vec<FormMatrix>>> {
            let chart = &atlas.charts[*id];
            let mut out = Vec::new();
            for y in stencil_points(x, chart.dim(), grid.fd_step) {
                let Ok(p) = chart.embed(&y) else { return Ok(None) };
                if !form.defined_at(&p) {
                    return Ok(None);
                }
                out.push(form.eval_unchecked(chart, &y, &p)?);
            }
            Ok(Some(out))
        })
        .collect::<Result<_>>()?;
    Ok(GridSamples {
        m: atlas.m,
        grid: *grid,
        values,
        dims: points.iter().map(|(id, _)| atlas.charts[*id].dim()).collect(),
    })
}

/// [`c2_distance`] between two sampled forms; bit-identical to the direct
/// evaluation on the same grid.
pub fn sampled_c2_distance(a: &GridSamples, b: &GridSamples) -> Result<C2Distance> {
    if a.m != b.m {
        return Err(Error::AtlasMismatch(a.m - 1, b.m - 1));
    }
    if a.grid != b.grid {
        return Err(Error::InvalidParameter("samples taken on different grids".into()));
    }
    let h = a.grid.fd_step;
    let per_point = a.values.iter().zip(&b.values).zip(&a.dims).map(|((va, vb), &d)| {
        let (Some(va), Some(vb)) = (va, vb) else { return None };
        let diff: Vec<FormMatrix> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        let center = diff[0];
        let d0 = max_abs(&center, d);
        let (mut d1, mut d2) = (0.0_f64, 0.0_f64);
        for i in 0..d {
            let (plus, minus) = (diff[1 + 2 * i], diff[2 + 2 * i]);
            d1 = d1.max(max_abs(&((plus - minus) / (2.0 * h)), d));
            d2 = d2.max(max_abs(&((plus - center * 2.0 + minus) / (h * h)), d));
        }
        for c in diff[1 + 2 * d..].chunks(4) {
            d2 = d2.max(max_abs(&((c[0] - c[1] - c[2] + c[3]) / (4.0 * h * h)), d));
        }
        Some([d0, d1, d2])
    });
    reduce(per_point).map(|([d0, d1, d2], samples)| C2Distance { d0, d1, d2, samples })
}

/// Grid C^0 distance only (no stencils); `d1` and `d2` are reported as zero.
pub fn c0_distance(a: &SphereForm, b: &SphereForm, grid: &GridSpec) -> Result<C2Distance> {
    check_same_atlas(a, b)?;
    grid.validate()?;
    let atlas = a.atlas.clone();
    let points = atlas_grid(&atlas, grid);
    let per_point: Vec<Option<f64>> = points
        .par_iter()
        .map(|(id, x)| -> Result<Option<f64>> {
            let chart = &atlas.charts[*id];
            let p = chart.embed(x)?;
            if !a.defined_at(&p) || !b.defined_at(&p) {
                return Ok(None);
            }
            let diff = a.eval_unchecked(chart, x, &p)? - b.eval_unchecked(chart, x, &p)?;
            Ok(Some(max_abs(&diff, chart.dim())))
        })
        .collect::<Result<_>>()?;
    reduce(per_point.into_iter().map(|v| v.map(|d0| [d0, 0.0, 0.0])))
        .map(|([d0, d1, d2], samples)| C2Distance { d0, d1, d2, samples })
}

fn reduce(values: impl Iterator<Item = Option<[f64; 3]>>) -> Result<([f64; 3], usize)> {
    let mut acc = [0.0_f64; 3];
    let mut samples = 0;
    for v in values.flatten() {
        samples += 1;
        for (a, x) in acc.iter_mut().zip(v) {
            if x.is_nan() {
                return Err(Error::Numerical("NaN in grid distance".into()));
            }
            *a = a.max(x);
        }
    }
    if samples == 0 {
        return Err(Error::InvalidParameter(
            "no grid point lies in the common domain of the forms".into(),
        ));
    }
    Ok((acc, samples))
}

/// Smallest eigenvalue of the chart components at one point.
pub fn min_eigenvalue(form: &SphereForm, chart: usize, x: &ChartPoint) -> Result<f64> {
    let c = form.eval(chart, x)?;
    Ok(min_eigenvalue_of(&c, form.m() - 1))
}

/// Smallest eigenvalue of the leading `d x d` block.
pub fn min_eigenvalue_of(c: &FormMatrix, d: usize) -> f64 {
    let block = DMatrix::from_fn(d, d, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
    block
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Smallest chart eigenvalue over the grid points where the form is defined.
pub fn min_eigenvalue_on_grid(form: &SphereForm, grid: &GridSpec) -> Result<f64> {
    let atlas = form.atlas.clone();
    let points = atlas_grid(&atlas, grid);
    let mins: Vec<Option<f64>> = points
        .par_iter()
        .map(|(id, x)| -> Result<Option<f64>> {
            let chart = &atlas.charts[*id];
            let p = chart.embed(x)?;
            if !form.defined_at(&p) {
                return Ok(None);
            }
            let c = form.eval_unchecked(chart, x, &p)?;
            Ok(Some(min_eigenvalue_of(&c, chart.dim())))
        })
        .collect::<Result<_>>()?;
    Ok(mins.into_iter().flatten().fold(f64::INFINITY, f64::min))
}

/// Largest asymmetry `|c_ij - c_ji|` over the grid.
pub fn symmetry_residual(form: &SphereForm, grid: &GridSpec) -> Result<f64> {
    let atlas = form.atlas.clone();
    let mut worst = 0.0_f64;
    for (id, x) in atlas_grid(&atlas, grid) {
        let chart = &atlas.charts[id];
        let p = chart.embed(&x)?;
        if !form.defined_at(&p) {
            continue;
        }
        let c = form.eval_unchecked(chart, &x, &p)?;
        worst = worst.max(max_abs(&(c - c.transpose()), chart.dim()));
    }
    Ok(worst)
}

/// Tensor compatibility on overlaps: for random points of each ordered chart
/// pair, compares the components in the first chart with the congruence
/// `T^T C_b T` of the components in the second, `T` the transition
/// Jacobian. Returns the largest absolute residual.
pub fn compatibility_residual(form: &SphereForm, samples_per_pair: usize, seed: u64) -> Result<f64> {
    let atlas = form.atlas.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for ca in &atlas.charts {
        for cb in &atlas.charts {
            if ca.id == cb.id || (ca.axis == cb.axis) {
                continue;
            }
            let d = ca.dim();
            let mut found = 0;
            let mut attempts = 0;
            while found < samples_per_pair && attempts < 200 * samples_per_pair {
                attempts += 1;
                let mut x = ChartPoint::zeros();
                for l in 0..d {
                    x[l] = rng.gen_range(-ca.radius..ca.radius);
                }
                if x.norm() >= ca.radius {
                    continue;
                }
                let p = ca.embed(&x)?;
                if !cb.contains(&p) || !form.defined_at(&p) {
                    continue;
                }
                found += 1;
                let xb = cb.coords(&p);
                let ja = ca.jacobian(&x, &p);
                // T = d(coords_b)/d(x) = projection of the embedding Jacobian
                let mut t = FormMatrix::zeros();
                for l in 0..d {
                    for c in 0..d {
                        t[(l, c)] = ja[(cb.slot(l), c)];
                    }
                }
                let ca_comp = form.eval_unchecked(ca, &x, &p)?;
                let cb_comp = form.eval_unchecked(cb, &xb, &p)?;
                let pulled = t.transpose() * cb_comp * t;
                worst = worst.max(max_abs(&(ca_comp - pulled), d));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn point(v: &[f64]) -> ChartPoint {
        let mut x = ChartPoint::zeros();
        for (i, a) in v.iter().enumerate() {
            x[i] = *a;
        }
        x
    }

    fn small_grid() -> GridSpec {
        GridSpec {
            points_per_axis: 9,
            max_points_per_chart: 4096,
            fd_step: 1e-3,
        }
    }

    #[test]
    fn atlas_sizes() {
        assert_eq!(make_atlas(2).unwrap().charts.len(), 4);
        assert_eq!(make_atlas(3).unwrap().charts.len(), 6);
        assert_eq!(make_atlas(5).unwrap().charts.len(), 10);
        assert!(make_atlas(1).is_err());
        assert!(make_atlas(7).is_err());
        assert_eq!(make_atlas(4).unwrap(), make_atlas(4).unwrap());
    }

    #[test]
    fn atlas_covers_s2() {
        let atlas = make_atlas(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut accepted = 0;
        while accepted < 100_000 {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n2 = v.iter().map(|a| a * a).sum::<f64>();
            if n2 > 1.0 || n2 < 1e-6 {
                continue;
            }
            accepted += 1;
            let n = n2.sqrt();
            let p = AmbientVec::from_fn(|i, _| if i < 3 { v[i] / n } else { 0.0 });
            assert!(atlas.covers(&p), "{p:?} uncovered");
        }
        // the worst direction for the orthographic family
        let c = 1.0 / 3.0_f64.sqrt();
        assert!(atlas.covers(&AmbientVec::from_fn(|i, _| if i < 3 { c } else { 0.0 })));
    }

    #[test]
    fn transition_identity_and_inverse() {
        let atlas = make_atlas(4).unwrap();
        let x = point(&[0.2, -0.3, 0.1]);
        let same = transition(&atlas, 3, 3, &x).unwrap();
        assert!((same - x).norm() < 1e-15);
        // chart 0 is +axis0; the point has a large component along axis 1
        let x = point(&[0.6, 0.1, 0.2]);
        let y = transition(&atlas, 0, 2, &x).unwrap();
        let back = transition(&atlas, 2, 0, &y).unwrap();
        assert!((back - x).norm() < 1e-12);
        let pa = atlas.charts[0].embed(&x).unwrap();
        let pb = atlas.charts[2].embed(&y).unwrap();
        assert!((pa - pb).norm() < 1e-12);
        // a point on the wrong hemisphere
        assert!(transition(&atlas, 0, 3, &x).is_err());
    }

    #[test]
    fn circle_transition_matches_angles() {
        let atlas = make_atlas(2).unwrap();
        // chart 0: p0 > 0, coordinate p1 = sin(phi); chart 2: p1 > 0, coordinate p0 = cos(phi)
        for phi in [0.7_f64, 1.0, 1.3] {
            let y = transition(&atlas, 0, 2, &point(&[phi.sin()])).unwrap();
            assert!((y[0] - phi.cos()).abs() < 1e-12);
        }
        // chart 1: p0 < 0, coordinate p1 = sin(phi) with phi in (pi/2, 3pi/2)
        let phi = 2.4_f64;
        let y = transition(&atlas, 1, 2, &point(&[phi.sin()])).unwrap();
        assert!((y[0] - phi.cos()).abs() < 1e-12);
    }

    #[test]
    fn round_metric_components() {
        let g = round_metric(4).unwrap();
        let c = g.eval(5, &ChartPoint::zeros()).unwrap();
        assert!((c - FormMatrix::from_fn(|i, j| if i == j && i < 3 { 1.0 } else { 0.0 })).norm() < 1e-15);
        let x = point(&[0.3, -0.2, 0.5]);
        let c = g.eval(1, &x).unwrap();
        let n2 = x.norm_squared();
        for i in 0..3 {
            for j in 0..3 {
                let expect = f64::from(u8::from(i == j)) + x[i] * x[j] / (1.0 - n2);
                assert!((c[(i, j)] - expect).abs() < 1e-14);
            }
        }
        assert!(min_eigenvalue_on_grid(&g, &small_grid()).unwrap() >= 1.0 - 1e-12);
    }

    #[test]
    fn great_circle_length_by_quadrature() {
        let g = round_metric(3).unwrap();
        let atlas = g.atlas().clone();
        let speed = |phi: f64| {
            let p = AmbientVec::from_fn(|i, _| match i {
                0 => phi.cos(),
                1 => phi.sin(),
                _ => 0.0,
            });
            let dp = AmbientVec::from_fn(|i, _| match i {
                0 => -phi.sin(),
                1 => phi.cos(),
                _ => 0.0,
            });
            let chart = atlas.best_chart(&p);
            let x = chart.coords(&p);
            let dx = chart.coords(&dp);
            let c = g.eval(chart.id, &x).unwrap();
            (dx.transpose() * c * dx)[(0, 0)].sqrt()
        };
        let n = 4000;
        let h = 2.0 * PI / n as f64;
        let mut sum = speed(0.0) + speed(2.0 * PI);
        for i in 1..n {
            sum += if i % 2 == 1 { 4.0 } else { 2.0 } * speed(i as f64 * h);
        }
        let length = sum * h / 3.0;
        assert!((length - 2.0 * PI).abs() < 1e-6, "{length}");
    }

    #[test]
    fn library_forms_are_compatible() {
        for m in [2, 3, 5] {
            let atlas = Arc::new(make_atlas(m).unwrap());
            let g = round_metric_on(atlas.clone());
            assert!(compatibility_residual(&g, 100, 1).unwrap() < 1e-8);
            let p = perturbation_form(atlas);
            assert!(compatibility_residual(&p, 100, 2).unwrap() < 1e-8);
        }
    }

    #[test]
    fn chart_defined_form_lifts_consistently() {
        let atlas = Arc::new(make_atlas(3).unwrap());
        let amb = perturbation_form(atlas.clone());
        let inner = amb.clone();
        let by_chart = SphereForm::from_chart_fn(atlas, move |c, x| inner.eval(c.id, x));
        let p = AmbientVec::from_fn(|i, _| [0.48, 0.6, 0.64, 0.0, 0.0, 0.0][i]);
        let tangent = AmbientVec::from_fn(|i, _| [0.8, -0.64, 0.0, 0.0, 0.0, 0.0][i]);
        let other = AmbientVec::from_fn(|i, _| [0.0, -0.64, 0.6, 0.0, 0.0, 0.0][i]);
        let a = amb.bilinear(&p, &tangent, &other).unwrap();
        let b = by_chart.bilinear(&p, &tangent, &other).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn distance_to_itself_is_zero() {
        let atlas = Arc::new(make_atlas(3).unwrap());
        let p = perturbation_form(atlas);
        let d = c2_distance(&p, &p, &small_grid()).unwrap();
        assert_eq!((d.d0, d.d1, d.d2), (0.0, 0.0, 0.0));
        assert!(d.samples > 0);
    }

    #[test]
    fn distance_scales_linearly() {
        let g = round_metric(3).unwrap();
        let grid = small_grid();
        let zero = g.scaled(0.0);
        let base = c2_distance(&g, &zero, &grid).unwrap();
        for c in [0.5, 1.5, 3.0] {
            let d = c2_distance(&g.scaled(c), &g, &grid).unwrap();
            let f = (c - 1.0_f64).abs();
            assert!((d.d0 - f * base.d0).abs() < 1e-12 * base.d0);
            assert!((d.d1 - f * base.d1).abs() < 1e-6 * base.d1);
            assert!((d.d2 - f * base.d2).abs() < 1e-6 * base.d2);
        }
    }

    #[test]
    fn distance_is_stable_under_refinement() {
        let atlas = Arc::new(make_atlas(3).unwrap());
        let g = round_metric_on(atlas.clone());
        let p = perturbation_form(atlas);
        let perturbed = SphereForm::linear_combination(&[(1.0, &g), (0.05, &p)]).unwrap();
        let grid = GridSpec::default();
        let coarse = c2_distance(&g, &perturbed, &grid).unwrap();
        let fine = c2_distance(&g, &perturbed, &grid.refined(4)).unwrap();
        let doubled = c2_distance(&g, &perturbed, &grid.refined(2)).unwrap();
        for (a, b) in [(coarse.total(), fine.total()), (coarse.total(), doubled.total())] {
            assert!((a - b).abs() <= 0.05 * b, "{a} vs {b}");
        }
        assert!(coarse.d0 > 0.0 && coarse.d1 > 0.0 && coarse.d2 > 0.0);
    }

    #[test]
    fn mismatched_atlases_are_rejected() {
        let a = round_metric(3).unwrap();
        let b = round_metric(4).unwrap();
        assert_eq!(c2_distance(&a, &b, &small_grid()).unwrap_err(), Error::AtlasMismatch(2, 3));
    }

    #[test]
    fn band_restriction_masks_points() {
        let g = round_metric(4).unwrap();
        let band = JoinBand { k: 2, lo: 0.3, hi: 1.2 };
        let masked = g.restricted(band);
        let full = c0_distance(&g, &g.scaled(2.0), &small_grid()).unwrap();
        let part = c0_distance(&masked, &g.scaled(2.0), &small_grid()).unwrap();
        assert!(part.samples < full.samples && part.samples > 0);
        // the point (1, 0, 0, 0) has beta = 0
        assert!(masked.eval(0, &ChartPoint::zeros()).is_err());
        let empty = g.restricted(JoinBand { k: 2, lo: 2.0, hi: 3.0 });
        assert!(c0_distance(&empty, &g, &small_grid()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn distance_is_a_pseudometric(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, c3 in -2.0f64..2.0) {
            let atlas = Arc::new(make_atlas(3).unwrap());
            let g = round_metric_on(atlas.clone());
            let p = perturbation_form(atlas);
            let grid = GridSpec { points_per_axis: 5, max_points_per_chart: 64, fd_step: 1e-3 };
            let f = |c: f64| SphereForm::linear_combination(&[(1.0, &g), (c, &p)]).unwrap();
            let (a, b, c) = (f(c1), f(c2), f(c3));
            let ab = c2_distance(&a, &b, &grid).unwrap();
            let ba = c2_distance(&b, &a, &grid).unwrap();
            let bc = c2_distance(&b, &c, &grid).unwrap();
            let ac = c2_distance(&a, &c, &grid).unwrap();
            proptest::prop_assert_eq!(ab, ba);
            let slack = 1e-9 * (ab.total() + bc.total()).max(1.0);
            proptest::prop_assert!(ac.d0 <= ab.d0 + bc.d0 + slack);
            proptest::prop_assert!(ac.d1 <= ab.d1 + bc.d1 + slack);
            proptest::prop_assert!(ac.d2 <= ab.d2 + bc.d2 + slack);
        }
    }

    #[test]
    fn sampled_distance_matches_direct() {
        let atlas = Arc::new(make_atlas(4).unwrap());
        let sigma = round_metric_on(atlas.clone());
        let p = perturbation_form(atlas.clone());
        let a = SphereForm::linear_combination(&[(1.0, &sigma), (0.3, &p)]).unwrap();
        let b = a.restricted(JoinBand { k: 2, lo: 0.2, hi: 1.3 });
        let grid = GridSpec { points_per_axis: 7, max_points_per_chart: 400, fd_step: 1e-3 };
        for (x, y) in [(&a, &sigma), (&b, &sigma), (&b, &a)] {
            let direct = c2_distance(x, y, &grid).unwrap();
            let sampled = sampled_c2_distance(&sample_grid(x, &grid).unwrap(), &sample_grid(y, &grid).unwrap()).unwrap();
            assert_eq!(direct, sampled);
        }
    }
}
