//! Experiment configuration, the verification suites behind each command,
//! and report emission (CSV rows plus a JSON summary).

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::extension::{
    extension_cut, join_to_sphereform, pullback_oracle_cut, verify_polar_fermi_on_extension, PullbackSpec,
    Stencil,
};
use crate::hyptrig::{
    beta_of, build_right_triangle, fermi_polar_residual, lambda_of, lambda_prime_of, r_of, vartheta,
    vartheta_offset, ReparamParams,
};
use crate::limits::{
    beta1_threshold, boundary_checks, cauchy_scan, consecutive_pairs, convergence_scan, default_b_grid,
    default_lambda_grid, uniformity_near_zero, ConvergenceReport, ScanSpec,
    Thresholds, Verdict, BOUNDARY_DELTAS,
};
use crate::radial::{
    euclidean_family, hyperbolic_family, make_bump_family, make_oscillating_family, normalized_cut,
    spherical_cut, BumpParams, OdotFamily,
};
use crate::spheres::{
    atlas_grid, c2_distance, make_atlas, min_eigenvalue_on_grid, round_metric_on, GridSpec,
};

/// Subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    VerifyIdentities,
    Cut,
    ExtendCut,
    Converge,
    Cauchy,
    Beta1,
    Boundary,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::VerifyIdentities => "verify-identities",
            Command::Cut => "cut",
            Command::ExtendCut => "extend-cut",
            Command::Converge => "converge",
            Command::Cauchy => "cauchy",
            Command::Beta1 => "beta1",
            Command::Boundary => "boundary",
        }
    }
}

/// Family catalog entry, tagged by `name`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum FamilySpec {
    Hyperbolic,
    Euclidean,
    Bump(BumpParams),
    Oscillating(BumpParams),
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec::Bump(BumpParams::default())
    }
}

impl FamilySpec {
    pub fn name(&self) -> &'static str {
        match self {
            FamilySpec::Hyperbolic => "hyperbolic",
            FamilySpec::Euclidean => "euclidean",
            FamilySpec::Bump(_) => "bump",
            FamilySpec::Oscillating(_) => "oscillating",
        }
    }

    /// Catalog entry with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "hyperbolic" => FamilySpec::Hyperbolic,
            "euclidean" => FamilySpec::Euclidean,
            "bump" => FamilySpec::Bump(BumpParams::default()),
            "oscillating" => FamilySpec::Oscillating(BumpParams::default()),
            other => {
                return Err(Error::Config(format!(
                    "family.name: unknown family `{other}` (expected hyperbolic, euclidean, bump, oscillating)"
                )))
            }
        })
    }

    /// Builds the family on `R^n`. The hyperbolic family is registered as
    /// hyperbolic around the origin with `B = 0`.
    pub fn build(&self, n: usize) -> Result<OdotFamily> {
        match self {
            FamilySpec::Hyperbolic => hyperbolic_family(n, 0.0),
            FamilySpec::Euclidean => euclidean_family(n),
            FamilySpec::Bump(p) => make_bump_family(n, *p),
            FamilySpec::Oscillating(p) => make_oscillating_family(n, *p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub k: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { n: 3, k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub b_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub sphere: GridSpec,
    /// Half-width of the excluded bands around `beta = 0, pi/2`.
    pub mask: f64,
    /// Sphere radii for `extend-cut`.
    pub s_values: Vec<f64>,
    pub pullback_step: f64,
    pub fermi_step: f64,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            b_grid: default_b_grid(),
            lambda_grid: default_lambda_grid(),
            sphere: GridSpec::default(),
            mask: 0.05,
            s_values: vec![2.0, 5.0, 8.0],
            pullback_step: 1e-4,
            fermi_step: 1e-4,
        }
    }
}

/// Constants of the uniformity claim: `c'` defaults to `c + ln sin(theta) - 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reparam {
    pub c: f64,
    pub c_prime: Option<f64>,
}

impl Default for Reparam {
    fn default() -> Self {
        Self { c: 1.0, c_prime: None }
    }
}

/// Single-member probes for `cut` and `extend-cut`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Probe {
    pub lambda: f64,
    pub radius: f64,
    /// Also build the finite-difference pullback in `extend-cut`.
    pub oracle: bool,
}

impl Default for Probe {
    fn default() -> Self {
        Self {
            lambda: 2.5,
            radius: 3.0,
            oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("hypext-out"),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default)]
    pub family: FamilySpec,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub reparam: Reparam,
    #[serde(default)]
    pub probe: Probe,
    #[serde(default)]
    pub output: Output,
    #[serde(default)]
    pub skip_origin_check: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_theta() -> f64 {
    FRAC_PI_2
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub family: Option<String>,
    pub theta: Option<f64>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub out: Option<PathBuf>,
    pub grid_points: Option<usize>,
    pub grid_cap: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            family: FamilySpec::default(),
            dims: Dims::default(),
            theta: default_theta(),
            grids: Grids::default(),
            thresholds: Thresholds::default(),
            reparam: Reparam::default(),
            probe: Probe::default(),
            output: Output::default(),
            skip_origin_check: false,
            seed: 0,
        }
    }

    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(name) = &o.family {
            if name != self.family.name() {
                self.family = FamilySpec::from_name(name)?;
            }
        }
        if let Some(t) = o.theta {
            self.theta = t;
        }
        if let Some(n) = o.n {
            self.dims.n = n;
        }
        if let Some(k) = o.k {
            self.dims.k = k;
        }
        if let Some(dir) = &o.out {
            self.output.dir = dir.clone();
        }
        if let Some(p) = o.grid_points {
            self.grids.sphere.points_per_axis = p;
        }
        if let Some(c) = o.grid_cap {
            self.grids.sphere.max_points_per_chart = c;
        }
        self.validate()
    }

    /// Semantic checks; messages start with the offending field path.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::Config(format!("{path}: {msg}")));
        if !(self.theta > 0.0 && self.theta <= FRAC_PI_2) {
            return bad("theta", format!("{} must lie in (0, pi/2]", self.theta));
        }
        let Dims { n, k } = self.dims;
        if n < 2 {
            return bad("dims.n", format!("{n} must be at least 2"));
        }
        if k < 1 {
            return bad("dims.k", format!("{k} must be at least 1"));
        }
        if n + k - 1 > 5 {
            return bad("dims", format!("n + k - 1 = {} exceeds the cap 5", n + k - 1));
        }
        let g = &self.grids;
        for (path, v) in [("grids.b_grid", &g.b_grid), ("grids.lambda_grid", &g.lambda_grid), ("grids.s_values", &g.s_values)] {
            if v.is_empty() {
                return bad(path, "must be non-empty".into());
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return bad(&format!("{path}[{i}]"), "must be finite".into());
            }
        }
        if let Some(i) = g.lambda_grid.iter().position(|&x| x <= 0.0) {
            return bad(&format!("grids.lambda_grid[{i}]"), "must be positive".into());
        }
        if let Some(i) = g.s_values.iter().position(|&x| x <= 0.0) {
            return bad(&format!("grids.s_values[{i}]"), "must be positive".into());
        }
        if g.sphere.points_per_axis < 2 {
            return bad("grids.sphere.points_per_axis", "must be at least 2".into());
        }
        if g.sphere.max_points_per_chart < 1 {
            return bad("grids.sphere.max_points_per_chart", "must be at least 1".into());
        }
        if !(g.sphere.fd_step > 0.0 && g.sphere.fd_step < 0.05) {
            return bad("grids.sphere.fd_step", format!("{} must lie in (0, 0.05)", g.sphere.fd_step));
        }
        if !(g.mask > 0.0 && g.mask < FRAC_PI_4) {
            return bad("grids.mask", format!("{} must lie in (0, pi/4)", g.mask));
        }
        for (path, v) in [("grids.pullback_step", g.pullback_step), ("grids.fermi_step", g.fermi_step)] {
            if !(v > 0.0 && v < 0.05) {
                return bad(path, format!("{v} must lie in (0, 0.05)"));
            }
        }
        let t = &self.thresholds;
        for (path, v) in [
            ("thresholds.eps_c2", t.eps_c2),
            ("thresholds.eps_c0", t.eps_c0),
            ("thresholds.noise_floor", t.noise_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(path, format!("{v} must be positive"));
            }
        }
        if let FamilySpec::Bump(p) | FamilySpec::Oscillating(p) = &self.family {
            if !(p.width > 0.0 && p.width.is_finite()) {
                return bad("family.L", format!("{} must be positive", p.width));
            }
            if !p.b.is_finite() {
                return bad("family.B", "must be finite".into());
            }
            if !(p.amp.is_finite() && p.amp >= 0.0) {
                return bad("family.amp", format!("{} must be non-negative", p.amp));
            }
        }
        if !(self.probe.lambda > 0.0 && self.probe.radius > 0.0) {
            return bad("probe", "lambda and radius must be positive".into());
        }
        if let Some(cp) = self.reparam.c_prime {
            if !(cp < self.reparam.c + self.theta.sin().ln()) {
                return bad("reparam.c_prime", format!("{cp} must be below c + ln sin(theta)"));
            }
        }
        Ok(())
    }

    pub fn c_prime(&self) -> f64 {
        self.reparam
            .c_prime
            .unwrap_or(self.reparam.c + self.theta.sin().ln() - 0.5)
    }

    pub fn scan_spec(&self) -> ScanSpec {
        ScanSpec {
            theta: self.theta,
            k: self.dims.k,
            b_grid: self.grids.b_grid.clone(),
            lambda_grid: self.grids.lambda_grid.clone(),
            grid: self.grids.sphere,
            mask: self.grids.mask,
            thresholds: self.thresholds,
            skip_origin_check: self.skip_origin_check,
        }
    }
}

/// JSON Schema of [`ExperimentConfig`].
pub const CONFIG_SCHEMA: &str = r##"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "hypext experiment",
  "type": "object",
  "additionalProperties": false,
  "required": ["command"],
  "properties": {
    "command": {"enum": ["verify-identities", "cut", "extend-cut", "converge", "cauchy", "beta1", "boundary"]},
    "family": {
      "type": "object",
      "required": ["name"],
      "properties": {
        "name": {"enum": ["hyperbolic", "euclidean", "bump", "oscillating"]},
        "B": {"type": "number"},
        "amp": {"type": "number", "minimum": 0},
        "L": {"type": "number", "exclusiveMinimum": 0}
      },
      "additionalProperties": false
    },
    "dims": {
      "type": "object",
      "additionalProperties": false,
      "properties": {"n": {"type": "integer", "minimum": 2}, "k": {"type": "integer", "minimum": 1}}
    },
    "theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1.5707963267948966},
    "grids": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "b_grid": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "lambda_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "sphere": {
          "type": "object",
          "additionalProperties": false,
          "required": ["points_per_axis", "max_points_per_chart", "fd_step"],
          "properties": {
            "points_per_axis": {"type": "integer", "minimum": 2},
            "max_points_per_chart": {"type": "integer", "minimum": 1},
            "fd_step": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.05}
          }
        },
        "mask": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.7853981633974483},
        "s_values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "pullback_step": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.05},
        "fermi_step": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.05}
      }
    },
    "thresholds": {
      "type": "object",
      "additionalProperties": false,
      "required": ["eps_c2", "eps_c0", "noise_floor"],
      "properties": {
        "eps_c2": {"type": "number", "exclusiveMinimum": 0},
        "eps_c0": {"type": "number", "exclusiveMinimum": 0},
        "noise_floor": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "reparam": {
      "type": "object",
      "additionalProperties": false,
      "properties": {"c": {"type": "number"}, "c_prime": {"type": ["number", "null"]}}
    },
    "probe": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "oracle": {"type": "boolean"}
      }
    },
    "output": {"type": "object", "additionalProperties": false, "properties": {"dir": {"type": "string"}}},
    "skip_origin_check": {"type": "boolean"},
    "seed": {"type": "integer", "minimum": 0}
  }
}
"##;

/// Float formatting used in every CSV: 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_line(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

/// Result of one command: report bytes and the verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub command: Command,
    pub csv: String,
    pub summary: serde_json::Value,
    pub passed: bool,
}

impl Artifacts {
    /// Writes `<command>.csv` and `<command>.summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.command.as_str()));
        let json = dir.join(format!("{}.summary.json", self.command.as_str()));
        std::fs::write(&csv, &self.csv)?;
        let mut text = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        text.push('\n');
        std::fs::write(&json, text)?;
        Ok(vec![csv, json])
    }
}

/// One residual suite of `verify-identities`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub samples: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn suite(name: &str, samples: usize, max_residual: f64, tolerance: f64) -> SuiteResult {
    SuiteResult {
        suite: name.into(),
        samples,
        max_residual,
        tolerance,
        passed: max_residual < tolerance,
    }
}

/// Random right triangles with legs in `(0, 5]`; worst relative residual of
/// the three closing identities.
pub fn triangle_suite(samples: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let t = 5.0 - rng.gen_range(0.0..5.0);
        let r = 5.0 - rng.gen_range(0.0..5.0);
        worst = worst.max(build_right_triangle(t, r)?.max_invariant_residual());
    }
    Ok(suite("triangle_closure", samples, worst, 1e-9))
}

/// Fermi versus polar form of the hyperbolic metric at random points of
/// `[-2, 2]^2` away from the origin.
pub fn fermi_suite(samples: usize, step: f64, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < samples {
        let (t, r) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        if f64::hypot(t, r) < 0.1 {
            continue;
        }
        worst = worst.max(fermi_polar_residual(t, r, step)?);
        done += 1;
    }
    Ok(suite("fermi_polar", samples, worst, 1e-6))
}

/// Every residual suite of `verify-identities`.
pub fn identity_suites(seed: u64, fermi_step: f64) -> Result<Vec<SuiteResult>> {
    let mut out = vec![triangle_suite(10_000, seed)?, fermi_suite(1_000, fermi_step, seed)?];

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe7a);
    let mut worst = 0.0_f64;
    let mut worst_l = 0.0_f64;
    for _ in 0..2_000 {
        let s = rng.gen_range(0.1..40.0);
        let beta = rng.gen_range(0.0..FRAC_PI_2 - 1e-3);
        worst = worst.max((beta_of(r_of(s, beta)?, s)? - beta).abs());
        let theta = rng.gen_range(0.1..FRAC_PI_2);
        let lp = rng.gen_range(0.1..40.0);
        worst_l = worst_l.max((lambda_prime_of(lambda_of(lp, theta)?, theta)? - lp).abs());
    }
    out.push(suite("beta_round_trip", 2_000, worst, 1e-10));
    out.push(suite("lambda_round_trip", 2_000, worst_l, 1e-10));

    let mut worst = 0.0_f64;
    let mut count = 0;
    for theta in [std::f64::consts::FRAC_PI_6, FRAC_PI_4, FRAC_PI_2] {
        for i in 0..=10 {
            let b = -5.0 + i as f64;
            for j in 0..=8 {
                let beta = 0.2 + (FRAC_PI_2 - 0.2) * j as f64 / 8.0;
                for lambda in [30.0, 45.0, 90.0] {
                    let p = ReparamParams::new(theta, b)?;
                    let gap = vartheta(lambda, beta, &p)? - lambda - vartheta_offset(beta, &p);
                    worst = worst.max(gap.abs());
                    count += 1;
                }
            }
        }
    }
    out.push(suite("vartheta_offset", count, worst, 1e-6));

    let mut samples = Vec::new();
    for i in 0..20 {
        for j in 0..10 {
            samples.push((0.25 + 0.25 * i as f64, 0.1 + 0.137 * j as f64));
        }
    }
    let res = verify_polar_fermi_on_extension(&samples, 1e-4)?;
    out.push(suite("polar_fermi_on_extension", samples.len(), res, 1e-6));
    Ok(out)
}

fn identities_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let suites = identity_suites(cfg.seed, cfg.grids.fermi_step)?;
    let mut csv = String::from("suite,samples,max_residual,tolerance,passed\n");
    for s in &suites {
        csv_line(
            &mut csv,
            &[
                s.suite.clone(),
                s.samples.to_string(),
                fmt_float(s.max_residual),
                fmt_float(s.tolerance),
                s.passed.to_string(),
            ],
        );
    }
    let passed = suites.iter().all(|s| s.passed);
    Ok(Artifacts {
        command: Command::VerifyIdentities,
        csv,
        summary: json!({"command": "verify-identities", "passed": passed, "suites": suites}),
        passed,
    })
}

fn cut_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let fam = cfg.family.build(cfg.dims.n)?;
    let g = fam.at(cfg.probe.lambda)?;
    let r0 = cfg.probe.radius;
    let cut = spherical_cut(&g, r0)?;
    let hat = normalized_cut(&g, r0)?;
    let d = cfg.dims.n - 1;
    let mut header = vec!["chart".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    for i in 0..d {
        for j in i..d {
            header.push(format!("c{i}{j}"));
        }
    }
    let mut csv = String::new();
    csv_line(&mut csv, &header);
    let atlas = hat.atlas().clone();
    for (id, x) in atlas_grid(&atlas, &cfg.grids.sphere) {
        let c = hat.eval(id, &x)?;
        let mut fields = vec![id.to_string()];
        fields.extend((0..d).map(|i| fmt_float(x[i])));
        for i in 0..d {
            for j in i..d {
                fields.push(fmt_float(c[(i, j)]));
            }
        }
        csv_line(&mut csv, &fields);
    }
    let sigma = round_metric_on(atlas);
    let to_round = c2_distance(&hat, &sigma, &cfg.grids.sphere)?;
    let min_eig = min_eigenvalue_on_grid(&hat, &cfg.grids.sphere)?;
    let min_eig_cut = min_eigenvalue_on_grid(&cut, &cfg.grids.sphere)?;
    let passed = min_eig > 0.0;
    Ok(Artifacts {
        command: Command::Cut,
        csv,
        summary: json!({
            "command": "cut",
            "family": fam.name,
            "lambda": cfg.probe.lambda,
            "radius": r0,
            "normalized_min_eigenvalue": min_eig,
            "spherical_min_eigenvalue": min_eig_cut,
            "normalized_distance_to_round": to_round,
            "passed": passed,
        }),
        passed,
    })
}

/// One `extend-cut` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendRow {
    pub s: f64,
    /// Grid `C^0` distance between the closed-form cut and the pullback.
    pub oracle_c0: Option<f64>,
    /// Distances of the normalized cut to the round metric.
    pub round_d0: f64,
    pub round_d1: f64,
    pub round_d2: f64,
}

/// Closed-form extension cuts of the member `h_lambda` at every radius:
/// distance of the normalized cut to the round metric of `S^{n+k-1}` and,
/// optionally, agreement with the finite-difference pullback.
pub fn extend_cut_rows(
    fam: &OdotFamily,
    lambda: f64,
    k: usize,
    s_values: &[f64],
    grid: &GridSpec,
    mask: f64,
    pullback: Option<PullbackSpec>,
) -> Result<Vec<ExtendRow>> {
    let h = fam.at(lambda)?;
    let atlas = Arc::new(make_atlas(fam.n + k)?);
    let sigma = round_metric_on(atlas.clone());
    let mut rows = Vec::new();
    for &s in s_values {
        let hat = join_to_sphereform(
            &crate::extension::extension_normalized_cut(h.normalized_field(), fam.n, k, s)?,
            atlas.clone(),
            mask,
        )?;
        let d = c2_distance(&hat, &sigma, grid)?;
        let oracle_c0 = match pullback {
            Some(spec) => {
                let closed = join_to_sphereform(&extension_cut(&h, k, s)?, atlas.clone(), mask)?;
                let oracle = pullback_oracle_cut(&h, k, s, atlas.clone(), mask, spec)?;
                Some(crate::spheres::c0_distance(&closed, &oracle, grid)?.d0)
            }
            None => None,
        };
        rows.push(ExtendRow {
            s,
            oracle_c0,
            round_d0: d.d0,
            round_d1: d.d1,
            round_d2: d.d2,
        });
    }
    Ok(rows)
}

/// CSV of [`extend_cut_rows`].
pub fn extend_rows_csv(rows: &[ExtendRow]) -> String {
    let mut csv = String::from("s,oracle_c0,round_d0,round_d1,round_d2\n");
    for r in rows {
        csv_line(
            &mut csv,
            &[
                fmt_float(r.s),
                r.oracle_c0.map(fmt_float).unwrap_or_default(),
                fmt_float(r.round_d0),
                fmt_float(r.round_d1),
                fmt_float(r.round_d2),
            ],
        );
    }
    csv
}

/// Oracle agreement bound for the closed-form cut.
pub const ORACLE_TOLERANCE: f64 = 1e-4;
/// Round-closure bounds for the hyperbolic family.
pub const ROUND_C0_TOLERANCE: f64 = 1e-8;
pub const ROUND_C2_TOLERANCE: f64 = 1e-5;

fn extend_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let fam = cfg.family.build(cfg.dims.n)?;
    let pullback = cfg.probe.oracle.then_some(PullbackSpec {
        step: cfg.grids.pullback_step,
        stencil: Stencil::Central4,
    });
    let rows = extend_cut_rows(
        &fam,
        cfg.probe.lambda,
        cfg.dims.k,
        &cfg.grids.s_values,
        &cfg.grids.sphere,
        cfg.grids.mask,
        pullback,
    )?;
    let oracle_ok = rows.iter().all(|r| r.oracle_c0.map_or(true, |d| d < ORACLE_TOLERANCE));
    let round = matches!(cfg.family, FamilySpec::Hyperbolic);
    let round_ok = !round
        || rows
            .iter()
            .all(|r| r.round_d0 < ROUND_C0_TOLERANCE && r.round_d0 + r.round_d1 + r.round_d2 < ROUND_C2_TOLERANCE);
    let passed = oracle_ok && round_ok;
    Ok(Artifacts {
        command: Command::ExtendCut,
        csv: extend_rows_csv(&rows),
        summary: json!({
            "command": "extend-cut",
            "family": fam.name,
            "lambda": cfg.probe.lambda,
            "k": cfg.dims.k,
            "n": cfg.dims.n,
            "oracle_tolerance": ORACLE_TOLERANCE,
            "round_closure_checked": round,
            "rows": rows,
            "passed": passed,
        }),
        passed,
    })
}

/// CSV of a scan report; Cauchy reports carry a `lambda_prime_2` column.
pub fn report_csv(report: &ConvergenceReport) -> String {
    let cauchy = report.rows.iter().any(|r| r.lambda_prime_2.is_some());
    let mut csv = String::from(if cauchy {
        "lambda_prime,lambda_prime_2,b,d0,d1,d2\n"
    } else {
        "lambda_prime,b,d0,d1,d2\n"
    });
    for r in &report.rows {
        let mut fields = vec![fmt_float(r.lambda_prime)];
        if cauchy {
            fields.push(r.lambda_prime_2.map(fmt_float).unwrap_or_default());
        }
        fields.extend([fmt_float(r.b), fmt_float(r.d0), fmt_float(r.d1), fmt_float(r.d2)]);
        csv_line(&mut csv, &fields);
    }
    csv
}

fn report_summary(command: &str, report: &ConvergenceReport) -> serde_json::Value {
    json!({
        "command": command,
        "verdict": report.verdict,
        "meta": report.meta,
        "thresholds": report.thresholds,
        "offsets": report.offsets,
    })
}

fn converge_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let fam = cfg.family.build(cfg.dims.n)?;
    let report = convergence_scan(&fam, &cfg.scan_spec())?;
    Ok(Artifacts {
        command: Command::Converge,
        csv: report_csv(&report),
        summary: report_summary("converge", &report),
        passed: report.verdict == Verdict::Converged,
    })
}

fn cauchy_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let fam = cfg.family.build(cfg.dims.n)?;
    let spec = cfg.scan_spec();
    let report = cauchy_scan(&fam, &spec, &consecutive_pairs(&spec.lambda_grid))?;
    Ok(Artifacts {
        command: Command::Cauchy,
        csv: report_csv(&report),
        summary: report_summary("cauchy", &report),
        passed: report.verdict == Verdict::CauchyOnly,
    })
}

/// Bound for the `S^{n-1}` block to count as exactly round.
pub const UNIFORMITY_TOLERANCE: f64 = 1e-12;

/// Cells `(b, beta, lambda')` for the uniformity check: offsets
/// `c' - {0, 1/2, ..., 3}`, angles in `(0, beta_1]` and parameters from the
/// onset up to the sweep end.
pub fn uniformity_cells(c_prime: f64, beta1: f64, onset: f64) -> Vec<(f64, f64, f64)> {
    let mut cells = Vec::new();
    for i in 0..=6 {
        let b = c_prime - 0.5 * i as f64;
        for j in 1..=8 {
            let beta = beta1 * j as f64 / 8.0;
            for lp in [onset, onset + 1.0, onset + 4.0, 24.0_f64.max(onset), 40.0_f64.max(onset)] {
                cells.push((b, beta, lp));
            }
        }
    }
    cells
}

fn beta1_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let fam = cfg.family.build(cfg.dims.n)?;
    let bound = fam.hyperbolic_origin_b.ok_or_else(|| {
        Error::Config(format!("family.name: `{}` is not hyperbolic around the origin", fam.name))
    })?;
    let cp = cfg.c_prime();
    let b1 = beta1_threshold(bound, cfg.reparam.c, cp, cfg.theta)?;
    let cells = uniformity_cells(cp, b1.beta1, b1.onset);
    let grid = GridSpec {
        points_per_axis: cfg.grids.sphere.points_per_axis.min(9),
        ..cfg.grids.sphere
    };
    let mut csv = String::from("b,beta,lambda_prime,c2_distance\n");
    let mut worst = 0.0_f64;
    let mut used = 0;
    for &cell in &cells {
        let (d, n) = uniformity_near_zero(&fam, cfg.theta, cfg.dims.k, &[cell], &grid)?;
        if n == 0 {
            continue;
        }
        used += 1;
        worst = worst.max(d);
        csv_line(&mut csv, &[fmt_float(cell.0), fmt_float(cell.1), fmt_float(cell.2), fmt_float(d)]);
    }
    let passed = b1.beta1 > 0.0 && worst < UNIFORMITY_TOLERANCE && used > 0;
    Ok(Artifacts {
        command: Command::Beta1,
        csv,
        summary: json!({
            "command": "beta1",
            "B": bound,
            "c": cfg.reparam.c,
            "c_prime": cp,
            "theta": cfg.theta,
            "beta1": b1,
            "cells": used,
            "max_distance": worst,
            "tolerance": UNIFORMITY_TOLERANCE,
            "passed": passed,
        }),
        passed,
    })
}

/// Smallest admissible boundary eigenvalue.
pub const BOUNDARY_MARGIN: f64 = 0.5;

fn boundary_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let fam = cfg.family.build(cfg.dims.n)?;
    let lp = cfg.grids.lambda_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut header = vec![
        "b".to_string(),
        "lambda_prime".into(),
        "coth2".into(),
        "coth2_error".into(),
        "min_eig_n_side".into(),
    ];
    header.extend(BOUNDARY_DELTAS.iter().map(|d| format!("min_eig_k_side_{d}")));
    let mut csv = String::new();
    csv_line(&mut csv, &header);
    let mut reports = Vec::new();
    for &b in &cfg.grids.b_grid {
        if lp + b <= 0.0 {
            continue;
        }
        let r = boundary_checks(&fam, cfg.theta, cfg.dims.k, b, lp, &cfg.grids.sphere, BOUNDARY_MARGIN)?;
        let mut fields = vec![
            fmt_float(b),
            fmt_float(lp),
            fmt_float(r.coth2),
            fmt_float(r.coth2_error),
            fmt_float(r.sphere_n_min_eig),
        ];
        fields.extend(r.sphere_k_min_eig.iter().map(|&(_, e)| fmt_float(e)));
        csv_line(&mut csv, &fields);
        reports.push(r);
    }
    let passed = !reports.is_empty() && reports.iter().all(|r| r.passed);
    Ok(Artifacts {
        command: Command::Boundary,
        csv,
        summary: json!({"command": "boundary", "margin": BOUNDARY_MARGIN, "reports": reports, "passed": passed}),
        passed,
    })
}

/// Runs the configured command without touching the file system.
pub fn execute(cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    match cfg.command {
        Command::VerifyIdentities => identities_artifacts(cfg),
        Command::Cut => cut_artifacts(cfg),
        Command::ExtendCut => extend_artifacts(cfg),
        Command::Converge => converge_artifacts(cfg),
        Command::Cauchy => cauchy_artifacts(cfg),
        Command::Beta1 => beta1_artifacts(cfg),
        Command::Boundary => boundary_artifacts(cfg),
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    /// Process exit status: 0 on verdict success, 2 on verdict failure.
    pub fn exit_code(&self) -> u8 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

/// Runs the command and writes the CSV report, the JSON summary and the
/// resolved config into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let art = execute(cfg)?;
    let mut files = art.write(&cfg.output.dir)?;
    let path = cfg.output.dir.join(format!("{}.config.json", cfg.command.as_str()));
    std::fs::write(&path, cfg.to_json() + "\n")?;
    files.push(path);
    Ok(RunOutcome {
        passed: art.passed,
        files,
    })
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<26} n={:<6} max={:.3e} tol={:.0e} {}",
            self.suite,
            self.samples,
            self.max_residual,
            self.tolerance,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(command: Command) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(command);
        cfg.dims = Dims { n: 2, k: 1 };
        cfg.grids.sphere = GridSpec {
            points_per_axis: 5,
            max_points_per_chart: 64,
            fd_step: 1e-3,
        };
        cfg.grids.b_grid = vec![-2.0, 0.0, 1.0];
        cfg.grids.lambda_grid = vec![10.0, 14.0, 18.0, 22.0];
        cfg.grids.s_values = vec![2.0, 4.0];
        cfg
    }

    #[test]
    fn parse_minimal_and_full() {
        let cfg = ExperimentConfig::from_json(r#"{"command": "converge"}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::new(Command::Converge));
        let text = r#"{
            "command": "cauchy",
            "family": {"name": "bump", "B": -2.0, "amp": 0.05, "L": 1.5},
            "dims": {"n": 2, "k": 1},
            "theta": 0.7,
            "grids": {"b_grid": [0.0], "lambda_grid": [6.0, 8.0]}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.family, FamilySpec::Bump(BumpParams { b: -2.0, amp: 0.05, width: 1.5 }));
        assert_eq!(cfg.grids.sphere, GridSpec::default());
        let cfg = ExperimentConfig::from_json(r#"{"command": "cut", "family": {"name": "bump"}}"#).unwrap();
        assert_eq!(cfg.family, FamilySpec::Bump(BumpParams::default()));
    }

    #[test]
    fn errors_carry_field_paths() {
        let err = |t: &str| ExperimentConfig::from_json(t).unwrap_err().to_string();
        assert!(err(r#"{"command": "converge", "theta": 0}"#).starts_with("theta:"));
        assert!(err(r#"{"command": "converge", "grids": {"sphere": {"points_per_axis": "x"}}}"#)
            .starts_with("grids.sphere.points_per_axis"));
        assert!(err(r#"{"command": "converge", "family": {"name": "bump", "amp": 0.1, "width": 2}}"#)
            .starts_with("family"));
        assert!(err(r#"{"command": "converge", "dims": {"n": 5, "k": 2}}"#).starts_with("dims:"));
        assert!(err(r#"{"command": "converge", "grids": {"lambda_grid": [6, -1]}}"#)
            .starts_with("grids.lambda_grid[1]"));
        assert!(err(r#"{"command": "converge", "grids": {"b_grid": []}}"#).starts_with("grids.b_grid"));
        assert!(err(r#"{"command": "fly"}"#).starts_with("command"));
        assert!(err(r#"{"command": "converge", "colour": 1}"#).contains("colour"));
        assert!(err(r#"{"command": "beta1", "reparam": {"c": 0, "c_prime": 1}}"#).starts_with("reparam.c_prime"));
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::new(Command::Converge);
        cfg.apply(&Overrides {
            family: Some("hyperbolic".into()),
            theta: Some(1.0),
            n: Some(2),
            k: Some(1),
            grid_cap: Some(100),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.family, FamilySpec::Hyperbolic);
        assert_eq!((cfg.theta, cfg.dims), (1.0, Dims { n: 2, k: 1 }));
        assert_eq!(cfg.grids.sphere.max_points_per_chart, 100);
        assert!(cfg.apply(&Overrides { family: Some("torus".into()), ..Overrides::default() }).is_err());
        assert!(cfg.apply(&Overrides { theta: Some(0.0), ..Overrides::default() }).is_err());
    }

    #[test]
    fn small_commands() {
        let mut cfg = tiny(Command::Converge);
        let art = execute(&cfg).unwrap();
        assert!(art.passed, "{}", art.summary);
        assert!(art.csv.starts_with("lambda_prime,b,d0,d1,d2\n"));
        assert_eq!(art.csv.lines().count(), 1 + 3 * 4);

        cfg.command = Command::Cauchy;
        let art = execute(&cfg).unwrap();
        assert!(art.passed);
        assert!(art.csv.starts_with("lambda_prime,lambda_prime_2,b,d0,d1,d2\n"));

        cfg.family = FamilySpec::Oscillating(BumpParams::default());
        assert!(!execute(&cfg).unwrap().passed);

        let mut cfg = tiny(Command::ExtendCut);
        cfg.family = FamilySpec::Hyperbolic;
        let art = execute(&cfg).unwrap();
        assert!(art.passed, "{}", art.summary);

        let art = execute(&tiny(Command::Cut)).unwrap();
        assert!(art.passed);
        assert!(art.csv.starts_with("chart,x0,c00\n"));

        let art = execute(&tiny(Command::Boundary)).unwrap();
        assert!(art.passed, "{}", art.summary);

        let art = execute(&tiny(Command::Beta1)).unwrap();
        assert!(art.passed, "{}", art.summary);
    }

    #[test]
    fn csv_floats_have_17_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(-2.0), "-2.0000000000000000e0");
    }

    #[test]
    fn schema_is_json() {
        let v: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        let props = v["properties"].as_object().unwrap();
        let sample = serde_json::to_value(ExperimentConfig::new(Command::Beta1)).unwrap();
        for key in sample.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema misses {key}");
        }
    }

    fn arb_family() -> impl Strategy<Value = FamilySpec> {
        let bump = (-3.0f64..1.0, 0.0f64..0.2, 0.5f64..3.0).prop_map(|(b, amp, width)| BumpParams { b, amp, width });
        prop_oneof![
            Just(FamilySpec::Hyperbolic),
            Just(FamilySpec::Euclidean),
            bump.clone().prop_map(FamilySpec::Bump),
            bump.prop_map(FamilySpec::Oscillating),
        ]
    }

    proptest! {
        #[test]
        fn config_round_trip(
            family in arb_family(),
            theta in 0.01f64..FRAC_PI_2,
            n in 2usize..4,
            k in 1usize..3,
            b_grid in proptest::collection::vec(-5.0f64..5.0, 1..5),
            seed in any::<u64>(),
            cap in 1usize..5000,
            oracle in any::<bool>(),
        ) {
            let mut cfg = ExperimentConfig::new(Command::Boundary);
            cfg.family = family;
            cfg.theta = theta;
            cfg.dims = Dims { n, k };
            cfg.grids.b_grid = b_grid;
            cfg.grids.sphere.max_points_per_chart = cap;
            cfg.probe.oracle = oracle;
            cfg.seed = seed;
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
