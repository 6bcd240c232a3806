//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use hypext::extension::{extension_cut, join_to_sphereform, pullback_oracle_cut, PullbackSpec};
use hypext::hyptrig::{lambda_of, vartheta, ReparamParams};
use hypext::limits::{
    boundary_checks, cauchy_scan, consecutive_pairs, convergence_scan, default_b_grid, default_lambda_grid,
    measured_profile_argument, ScanSpec, Thresholds, Verdict,
};
use hypext::radial::{euclidean_family, hyperbolic_family, make_bump_family, make_oscillating_family, BumpParams};
use hypext::runner::{
    extend_cut_rows, extend_rows_csv, identity_suites, report_csv, uniformity_cells, Command, ExperimentConfig,
    FamilySpec, Dims, BOUNDARY_MARGIN, ORACLE_TOLERANCE, ROUND_C0_TOLERANCE, ROUND_C2_TOLERANCE,
    UNIFORMITY_TOLERANCE,
};
use hypext::spheres::{c0_distance, make_atlas, GridSpec};

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: u32, name: &str, budget: Duration, started: Instant, out: hypext::Result<Outcome>) -> bool {
    let elapsed = started.elapsed();
    let (passed, detail) = match out {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let over = if elapsed > budget { " (over runtime budget)" } else { "" };
    println!(
        "criterion {id} [{name}]: {} | {detail} | {:.1}s of {}s{over}",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    passed
}

fn identities() -> hypext::Result<Outcome> {
    let suites = identity_suites(0, 1e-4)?;
    for s in &suites {
        println!("    {s}");
    }
    let detail = suites
        .iter()
        .map(|s| format!("{}={:.2e}", s.suite, s.max_residual))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Outcome {
        passed: suites.iter().all(|s| s.passed),
        detail,
    })
}

const ROUND_PAIRS: [(usize, usize); 3] = [(1, 2), (2, 2), (2, 3)];
const S_VALUES: [f64; 3] = [2.0, 5.0, 8.0];

fn round_closure_csv() -> hypext::Result<(String, f64, f64)> {
    let mut csv = String::new();
    let (mut worst0, mut worst2) = (0.0_f64, 0.0_f64);
    for (k, n) in ROUND_PAIRS {
        let fam = hyperbolic_family(n, 0.0)?;
        let rows = extend_cut_rows(&fam, 2.5, k, &S_VALUES, &GridSpec::default(), 0.05, None)?;
        for r in &rows {
            worst0 = worst0.max(r.round_d0);
            worst2 = worst2.max(r.round_d0 + r.round_d1 + r.round_d2);
        }
        csv.push_str(&format!("# k={k} n={n}\n"));
        csv.push_str(&extend_rows_csv(&rows));
    }
    Ok((csv, worst0, worst2))
}

fn round_closure(csv_out: &mut Option<String>) -> hypext::Result<Outcome> {
    let (csv, d0, d2) = round_closure_csv()?;
    *csv_out = Some(csv);
    Ok(Outcome {
        passed: d0 < ROUND_C0_TOLERANCE && d2 < ROUND_C2_TOLERANCE,
        detail: format!("max C0={d0:.2e} (<{ROUND_C0_TOLERANCE:.0e}) max C2={d2:.2e} (<{ROUND_C2_TOLERANCE:.0e})"),
    })
}

fn oracle_equivalence() -> hypext::Result<Outcome> {
    let (k, n) = (2, 3);
    let atlas = Arc::new(make_atlas(n + k)?);
    let families = [
        hyperbolic_family(n, 0.0)?,
        euclidean_family(n)?,
        make_bump_family(n, BumpParams::default())?,
    ];
    let grid = GridSpec::default();
    let mut worst = 0.0_f64;
    let mut parts = Vec::new();
    for fam in &families {
        let h = fam.at(2.5)?;
        let mut fam_worst = 0.0_f64;
        for s in S_VALUES {
            let closed = join_to_sphereform(&extension_cut(&h, k, s)?, atlas.clone(), 0.1)?;
            let oracle = pullback_oracle_cut(&h, k, s, atlas.clone(), 0.1, PullbackSpec::default())?;
            fam_worst = fam_worst.max(c0_distance(&closed, &oracle, &grid)?.d0);
        }
        parts.push(format!("{}={fam_worst:.2e}", fam.name));
        worst = worst.max(fam_worst);
    }
    Ok(Outcome {
        passed: worst < ORACLE_TOLERANCE,
        detail: format!("C0 {} (<{ORACLE_TOLERANCE:.0e})", parts.join(" ")),
    })
}

const THETAS: [f64; 2] = [FRAC_PI_2, FRAC_PI_4];

fn bump_limit_scan(theta: f64) -> hypext::Result<hypext::limits::ConvergenceReport> {
    let fam = make_bump_family(3, BumpParams::default())?;
    let spec = ScanSpec {
        theta,
        k: 2,
        b_grid: default_b_grid(),
        lambda_grid: default_lambda_grid(),
        grid: GridSpec::default(),
        mask: 0.05,
        thresholds: Thresholds::default(),
        skip_origin_check: false,
    };
    convergence_scan(&fam, &spec)
}

fn cut_limits(csv_out: &mut Vec<String>) -> hypext::Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for theta in THETAS {
        let report = bump_limit_scan(theta)?;
        csv_out.push(report_csv(&report));
        let strict: usize = report.offsets.iter().map(|o| o.strict_decreases).sum();
        let floor: usize = report.offsets.iter().map(|o| o.floor_steps).sum();
        let worst_c2 = report.offsets.iter().map(|o| o.final_c2).fold(0.0, f64::max);
        for o in &report.offsets {
            println!(
                "    theta={theta:.4} b={:+.1} strict={} floor={} final C0={:.2e} C2={:.2e} {}",
                o.b,
                o.strict_decreases,
                o.floor_steps,
                o.final_c0,
                o.final_c2,
                if o.passed { "ok" } else { "FAIL" }
            );
        }
        passed &= report.verdict == Verdict::Converged && report.offsets.iter().all(|o| o.passed);
        parts.push(format!(
            "theta={theta:.4} verdict={:?} strict steps={strict} floor steps={floor} max final C2={worst_c2:.2e}",
            report.verdict
        ));
    }

    let params = BumpParams::default();
    let fam = make_bump_family(3, params)?;
    let (mut measured, mut worst_gap, mut worst_vartheta) = (0, 0.0_f64, 0.0_f64);
    for theta in THETAS {
        for lp in [20.0, 22.0, 24.0] {
            for b in default_b_grid() {
                for j in 1..=12 {
                    let beta = FRAC_PI_2 * j as f64 / 13.0;
                    let Some(x) = measured_profile_argument(&fam, &params, theta, 2, lp, b, beta)? else {
                        continue;
                    };
                    let expect = b + (beta.sin() / theta.sin()).ln();
                    worst_gap = worst_gap.max((x - expect).abs());
                    let lambda = lambda_of(lp, theta)?;
                    let exact = vartheta(lambda, beta, &ReparamParams::new(theta, b)?)? - lambda;
                    worst_vartheta = worst_vartheta.max((x - exact).abs());
                    measured += 1;
                }
            }
        }
    }
    let offsets_ok = measured > 0 && worst_gap < 1e-2;
    println!(
        "    transition offsets: {measured} measured, max |x - (b + ln(sin beta / sin theta))| = {worst_gap:.2e}, \
         max gap to exact vartheta - lambda = {worst_vartheta:.2e}"
    );
    parts.push(format!("offsets n={measured} max gap={worst_gap:.2e} (<1e-2)"));
    Ok(Outcome {
        passed: passed && offsets_ok,
        detail: parts.join("; "),
    })
}

fn bump_config(command: Command, theta: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(command);
    cfg.family = FamilySpec::Bump(BumpParams::default());
    cfg.dims = Dims { n: 3, k: 2 };
    cfg.theta = theta;
    cfg.reparam.c = 1.0;
    cfg.reparam.c_prime = Some(1.0 + theta.sin().ln() - 0.5);
    cfg
}

fn uniformity() -> hypext::Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for theta in THETAS {
        let cfg = bump_config(Command::Beta1, theta);
        let fam = cfg.family.build(cfg.dims.n)?;
        let c_prime = cfg.c_prime();
        let b1 = hypext::limits::beta1_threshold(fam.hyperbolic_origin_b.unwrap_or(-1.0), cfg.reparam.c, c_prime, theta)?;
        let cells = uniformity_cells(c_prime, b1.beta1, b1.onset);
        let grid = GridSpec {
            points_per_axis: 9,
            ..GridSpec::default()
        };
        let (worst, used) = hypext::limits::uniformity_near_zero(&fam, theta, cfg.dims.k, &cells, &grid)?;
        passed &= b1.beta1 > 0.0 && used > 0 && worst < UNIFORMITY_TOLERANCE;
        parts.push(format!(
            "theta={theta:.4} beta1={:.4} onset={:.2} cells={used} max dist={worst:.2e}",
            b1.beta1, b1.onset
        ));
    }
    Ok(Outcome {
        passed,
        detail: format!("{} (<{UNIFORMITY_TOLERANCE:.0e})", parts.join("; ")),
    })
}

fn boundary() -> hypext::Result<Outcome> {
    let fam = make_bump_family(3, BumpParams::default())?;
    let (mut min_eig, mut worst_coth, mut passed) = (f64::INFINITY, 0.0_f64, true);
    let mut count = 0;
    for theta in THETAS {
        for b in default_b_grid() {
            let r = boundary_checks(&fam, theta, 2, b, 24.0, &GridSpec::default(), BOUNDARY_MARGIN)?;
            min_eig = r
                .sphere_k_min_eig
                .iter()
                .map(|&(_, e)| e)
                .fold(min_eig.min(r.sphere_n_min_eig), f64::min);
            worst_coth = worst_coth.max(r.coth2_error);
            passed &= r.passed;
            count += 1;
        }
    }
    Ok(Outcome {
        passed: passed && min_eig >= BOUNDARY_MARGIN && worst_coth < 1e-6,
        detail: format!(
            "{count} offsets, min eigenvalue={min_eig:.4} (>={BOUNDARY_MARGIN}), coth2 error={worst_coth:.2e} (<1e-6)"
        ),
    })
}

fn negative_control() -> hypext::Result<Outcome> {
    let fam = make_oscillating_family(3, BumpParams::default())?;
    let spec = ScanSpec {
        theta: FRAC_PI_2,
        k: 2,
        b_grid: default_b_grid(),
        lambda_grid: default_lambda_grid(),
        grid: GridSpec::default(),
        mask: 0.05,
        thresholds: Thresholds::default(),
        skip_origin_check: false,
    };
    let report = cauchy_scan(&fam, &spec, &consecutive_pairs(&spec.lambda_grid))?;
    let failing = report.offsets.iter().filter(|o| !o.passed).count();
    Ok(Outcome {
        passed: report.verdict == Verdict::Diverged,
        detail: format!(
            "verdict={:?}, {failing} of {} offsets fail the Cauchy test",
            report.verdict,
            report.offsets.len()
        ),
    })
}

fn determinism(round: &Option<String>, scans: &[String]) -> hypext::Result<Outcome> {
    let (again, _, _) = round_closure_csv()?;
    let round_same = round.as_deref() == Some(again.as_str());
    let mut scans_same = scans.len() == THETAS.len();
    for (theta, first) in THETAS.iter().zip(scans) {
        scans_same &= report_csv(&bump_limit_scan(*theta)?) == *first;
    }
    Ok(Outcome {
        passed: round_same && scans_same,
        detail: format!("round-closure CSV identical={round_same}, scan CSVs identical={scans_same}"),
    })
}

fn main() -> ExitCode {
    let mut all = true;
    let mut round_csv = None;
    let mut scan_csvs = Vec::new();

    let t = Instant::now();
    all &= report(1, "identity suite", Duration::from_secs(10), t, identities());
    let t = Instant::now();
    all &= report(2, "round closure", Duration::from_secs(60), t, round_closure(&mut round_csv));
    let t = Instant::now();
    all &= report(3, "oracle equivalence", Duration::from_secs(300), t, oracle_equivalence());
    let t = Instant::now();
    all &= report(4, "cut-limit convergence", Duration::from_secs(900), t, cut_limits(&mut scan_csvs));
    let t = Instant::now();
    all &= report(5, "uniformity near beta = 0", Duration::from_secs(60), t, uniformity());
    let t = Instant::now();
    all &= report(6, "boundary positive definiteness", Duration::from_secs(30), t, boundary());
    let t = Instant::now();
    all &= report(7, "negative control", Duration::from_secs(120), t, negative_control());
    let t = Instant::now();
    all &= report(8, "determinism", Duration::from_secs(960), t, determinism(&round_csv, &scan_csvs));

    println!("acceptance: {}", if all { "all criteria pass" } else { "FAILURES" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
