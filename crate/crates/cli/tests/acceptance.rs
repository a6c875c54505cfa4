//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line with
//! its measurements. A FAIL is reported, not raised.

use evanskit_core::evans::{half_sphere_samples, low_freq_checks, stability_scan, ScanOptions};
use evanskit_core::evolution::{damping_energy, nonlinear_deviation, simulate, InitialCondition, SimGrid, SimKind, SimOptions, SimResult};
use evanskit_core::hypotheses::{run_all, Side};
use evanskit_core::linalg::C64;
use evanskit_core::model::{builtin_model, ShockData};
use evanskit_core::profile::{solve_profile, Profile, ProfileOptions};
use evanskit_core::radau::OdeOptions;
use evanskit_core::resolvent::{bound_envelope_check, oracle_error, BoundFamily, GreenSolver, GridSpec, SampleSpec};
use evanskit_core::spectral_ode::{asymptotic_modes, SpectralContext, SpectralPoint};
use evanskit_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

struct Line {
    id: u32,
    pass: bool,
    detail: String,
}

fn report(id: u32, limit_s: f64, t0: Instant, body: Result<(bool, String)>) -> Line {
    let secs = t0.elapsed().as_secs_f64();
    let (pass, detail) = match body {
        Ok((ok, d)) => (ok && secs < limit_s, format!("{d}; {secs:.1} s (limit {limit_s:.0} s)")),
        Err(e) => (false, format!("error: {e}; {secs:.1} s")),
    };
    let line = Line { id, pass, detail };
    println!("criterion {:>2}: {}  {}", line.id, if line.pass { "PASS" } else { "FAIL" }, line.detail);
    line
}

fn profile(name: &str, eps: f64) -> Result<(evanskit_core::model::ModelSystem, Profile)> {
    let m = builtin_model(name)?;
    let sh = ShockData::from_eps(&m, eps)?;
    let p = solve_profile(&m, &sh, &ProfileOptions::default())?;
    Ok((m, p))
}

fn context(name: &str, eps: f64) -> Result<SpectralContext> {
    let (m, p) = profile(name, eps)?;
    SpectralContext::new(&m, &p, OdeOptions::default())
}

fn c1_hypotheses() -> Result<(bool, String)> {
    let mut ok = true;
    let mut failed = Vec::new();
    for name in ["hamer2d", "coupled2x2"] {
        let m = builtin_model(name)?;
        let sh = ShockData::from_eps(&m, 0.1)?;
        for r in run_all(&m, &sh.u_minus, &sh.u_plus, sh.s, 200, 42)? {
            if !r.passed() {
                ok = false;
                failed.push(format!("{name}:{}", r.check_id));
            }
        }
    }
    Ok((ok, if failed.is_empty() { "all checks pass on both models".into() } else { format!("failed {}", failed.join(", ")) }))
}

fn c2_profile() -> Result<(bool, String)> {
    let (_, p) = profile("hamer2d", 0.1)?;
    let at = p.at(0.0);
    let du0 = at.du[0];
    let q0 = at.q;
    let ok = p.residual < 1e-8
        && (du0 + 0.005).abs() <= 0.1 * 0.005
        && (q0 - 0.005).abs() <= 0.1 * 0.005
        && (p.eta - 0.099).abs() <= 0.15 * 0.099;
    Ok((ok, format!("residual {:.2e}, U'(0) {du0:.6}, Q1(0) {q0:.6}, eta {:.5}", p.residual, p.eta)))
}

fn c3_modes() -> Result<(bool, String)> {
    let m = builtin_model("hamer2d")?;
    let sh = ShockData::from_eps(&m, 0.1)?;
    let am = asymptotic_modes(&m, &sh, Side::Plus, &SpectralPoint::new(C64::new(0.0, 0.0), vec![0.0]))?;
    let b = 1.0 / sh.u_plus[0];
    let mut want = vec![0.0, (-b - (b * b + 4.0).sqrt()) / 2.0, (-b + (b * b + 4.0).sqrt()) / 2.0];
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut got: Vec<C64> = am.eigenvalues.clone();
    got.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
    let err = got.iter().zip(&want).map(|(z, w)| (z - C64::new(*w, 0.0)).norm()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut bad = 0;
    for _ in 0..200 {
        let pt = SpectralPoint::new(C64::new(rng.random_range(1e-3..3.0), rng.random_range(-3.0..3.0)), vec![rng.random_range(-3.0..3.0)]);
        let plus = asymptotic_modes(&m, &sh, Side::Plus, &pt);
        let minus = asymptotic_modes(&m, &sh, Side::Minus, &pt);
        match (plus, minus) {
            (Ok(a), Ok(b)) if a.dim_u == sh.p + 1 && b.dim_u == sh.p && a.dim_u + a.dim_s == m.n + 2 => {}
            _ => bad += 1,
        }
    }
    Ok((err < 1e-5 && bad == 0, format!("eigenvalue error {err:.2e} vs {want:.5?}; {bad}/200 count mismatches")))
}

fn c4_scan() -> Result<(bool, String)> {
    let ctx = context("hamer2d", 0.05)?;
    let opts = ScanOptions { xi_slices: vec![0.0, 0.1, 0.5], rho_max: 5.0, rho_punch: 1e-2, ..Default::default() };
    let zhat = half_sphere_samples(2, 8, 42);
    let rep = stability_scan(&ctx, &zhat, &opts)?;
    let zero = !rep.windings.is_empty() && rep.windings.iter().all(|w| *w == 0);
    let stable = rep.contours.iter().all(|c| c.winding.is_some() && c.winding == c.winding_fine);
    let spread_ok = rep.first_order_ratio_spread < 0.1;
    Ok((
        zero && stable && spread_ok,
        format!(
            "windings {:?} (refined identical: {stable}); ratio spread {:.3} over rho in [1e-4, 1e-2] (needs < 0.1)",
            rep.windings, rep.first_order_ratio_spread
        ),
    ))
}

fn c5_consistency() -> Result<(bool, String)> {
    let ctx = context("hamer2d", 0.1)?;
    let grid: Vec<f64> = (0..8).map(|k| 1e-3 * 10f64.powf(2.0 * k as f64 / 7.0)).collect();
    let r = low_freq_checks(&ctx, &[1.0, 0.0, 0.0], &grid)?;
    let cons_ok = (r.consistency_exact || r.slope_consistency >= 1.8) && r.m_hat.norm() > 1e-6;
    let lop_ok = r.lop_relation_slope >= 1.8;
    let cons = if r.consistency_exact {
        format!("D+ - m D- at round-off (max {:.1e})", r.consistency_residual.iter().cloned().fold(0.0, f64::max))
    } else {
        format!("consistency slope {:.3}", r.slope_consistency)
    };
    Ok((cons_ok && lop_ok, format!("|m| {:.6}; {cons}; Lopatinski relation slope {:.3} (needs >= 1.8)", r.m_hat.norm(), r.lop_relation_slope)))
}

fn c6_green() -> Result<(bool, String)> {
    let ctx = context("hamer2d", 0.1)?;
    let grid = GridSpec::for_context(&ctx);
    let targets = [-6.0, -3.0, -0.5, 0.7, 2.5, 5.0];
    let pts = [(0.2, 0.3, 0.1), (0.05, -0.2, 0.4), (0.5, 0.0, 0.0), (1.0, 1.0, 0.2), (0.1, 0.05, 0.0)];
    let mut worst: f64 = 0.0;
    for (re, im, xi) in pts {
        worst = worst.max(oracle_error(&ctx, &SpectralPoint::new(C64::new(re, im), vec![xi]), &grid, &targets)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut jump_err: f64 = 0.0;
    for _ in 0..20 {
        let pt = SpectralPoint::new(C64::new(rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0)), vec![rng.random_range(-0.5..0.5)]);
        let y = rng.random_range(0.2..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let gs = GreenSolver::new(&ctx, &pt, &[y])?;
        let j = gs.jump(&gs.source(y)?)?;
        let (mm, _, _) = ctx.regular_coeffs(y, &pt);
        let want = mm.try_inverse().expect("mass matrix invertible off the singular point");
        let scale = want.iter().map(|z| z.norm()).fold(0.0, f64::max);
        jump_err = jump_err.max((j - &want).iter().map(|z| z.norm()).fold(0.0, f64::max) / scale);
    }
    Ok((worst < 1e-4 && jump_err < 1e-8, format!("oracle error {worst:.2e} at 5 frequencies (N=400); jump error {jump_err:.2e} at 20 samples")))
}

fn c7_high_freq() -> Result<(bool, String)> {
    let ctx = context("hamer2d", 0.1)?;
    let chk = bound_envelope_check(&ctx, BoundFamily::HighFreq, &SampleSpec::for_family(BoundFamily::HighFreq))?;
    let e = chk.exponent.unwrap_or(f64::NAN);
    Ok((e <= -0.4, format!("exponent {e:.3} over |lambda| in [10, 200]")))
}

fn c8_decay(store: &mut Option<SimResult>) -> Result<(bool, String)> {
    let (m, p) = profile("hamer2d", 0.1)?;
    let opts = SimOptions { ic: InitialCondition::gaussian(4.0, 1e-2), ..Default::default() };
    let r = simulate(&m, &p, &opts)?;
    let l2 = r.series.fitted_exponents.get("L2").map(|f| f.exponent).unwrap_or(f64::NAN);
    let li = r.series.fitted_exponents.get("Linf").map(|f| f.exponent).unwrap_or(f64::NAN);
    let rates = (l2 + 0.25).abs() <= 0.10 && (li + 0.5).abs() <= 0.15;
    *store = Some(r);
    // nonlinear: bounded small-data run and quadratic deviation from the linearized run
    let small = SimGrid { n1: 256, n2: 128, half_width: 60.0, width: 128.0 };
    let nl = SimOptions { kind: SimKind::Nonlinear, grid: small, ic: InitialCondition::gaussian(4.0, 1e-2), ..Default::default() };
    let run = simulate(&m, &p, &nl)?;
    let l2n = &run.series.norms["L2"];
    let bounded = l2n.iter().all(|x| x.is_finite()) && l2n.last().unwrap() <= &l2n[0];
    let dv = SimOptions { grid: small, t_end: 20.0, ..nl.clone() };
    let d1 = nonlinear_deviation(&m, &p, &dv)?;
    let d2 = nonlinear_deviation(&m, &p, &SimOptions { ic: dv.ic.scaled(0.5), ..dv.clone() })?;
    let ratio = d1 / d2;
    let quad = (ratio - 4.0).abs() <= 0.3 * 4.0;
    Ok((
        rates && bounded && quad,
        format!(
            "L2 exponent {l2:.3} (target -0.25 +- 0.10), Linf {li:.3} (target -0.50 +- 0.15) over t in [20, 200]; nonlinear bounded {bounded}; deviation ratio under halving {ratio:.3}"
        ),
    ))
}

fn c9_damping(store: &Option<SimResult>) -> Result<(bool, String)> {
    let Some(r) = store else {
        return Ok((false, "no stored trajectory".into()));
    };
    let d = damping_energy(&r.series)?;
    let ok = d.inequality_pass && d.ratio_min >= 0.1 && d.ratio_max <= 10.0;
    Ok((
        ok,
        format!(
            "theta3 {:.3}, C {:.3}, holding {:.3}, Gronwall {:.3}, E/|u|^2_H2 in [{:.3}, {:.3}]",
            d.theta3_fit, d.c_fit, d.holding_fraction, d.gronwall_fraction, d.ratio_min, d.ratio_max
        ),
    ))
}

fn pipeline(dir: &Path) -> std::io::Result<()> {
    let bin = env!("CARGO_BIN_EXE_evanskit");
    std::fs::write(dir.join("c.toml"), "model = \"hamer2d\"\namplitude = 0.1\nseed = 42\n[sim]\ngrid = [128, 32]\nT_end = 30.0\n")?;
    let runs: [&[&str]; 5] = [
        &["check", "--json", "check.json"],
        &["evans", "--xi2", "0.1", "--contour", "semicircle:2", "--punch", "0.05", "--json", "evans.json"],
        &["bounds", "--family", "high_freq", "--json", "bounds.json"],
        &["simulate", "--ic", "gaussian:3,0.01", "--csv", "norms.csv", "--json", "sim.json"],
        &["report", "check.manifest.json", "evans.manifest.json", "bounds.manifest.json", "sim.manifest.json", "--json", "report.json"],
    ];
    for args in runs {
        Command::new(bin).current_dir(dir).arg("--config").arg("c.toml").args(args).output()?;
    }
    Ok(())
}

fn c10_determinism() -> Result<(bool, String)> {
    let io = |e: std::io::Error| evanskit_core::Error::InvalidInput(e.to_string());
    let a = tempfile::tempdir().map_err(io)?;
    let b = tempfile::tempdir().map_err(io)?;
    pipeline(a.path()).map_err(io)?;
    pipeline(b.path()).map_err(io)?;
    let files = ["check.json", "evans.json", "bounds.json", "sim.json", "report.json", "norms.csv"];
    let mut differ = Vec::new();
    for f in files {
        let x = std::fs::read(a.path().join(f)).map_err(io)?;
        let y = std::fs::read(b.path().join(f)).map_err(io)?;
        if x != y {
            differ.push(f);
        }
    }
    Ok((differ.is_empty(), if differ.is_empty() { format!("{} artifacts byte-identical", files.len()) } else { format!("differ: {differ:?}") }))
}

fn main() {
    let mut lines = Vec::new();
    let t = Instant::now();
    lines.push(report(1, 60.0, t, c1_hypotheses()));
    let t = Instant::now();
    lines.push(report(2, 60.0, t, c2_profile()));
    let t = Instant::now();
    lines.push(report(3, 60.0, t, c3_modes()));
    let t = Instant::now();
    lines.push(report(4, 600.0, t, c4_scan()));
    let t = Instant::now();
    lines.push(report(5, 300.0, t, c5_consistency()));
    let t = Instant::now();
    lines.push(report(6, 300.0, t, c6_green()));
    let t = Instant::now();
    lines.push(report(7, 300.0, t, c7_high_freq()));
    let mut stored = None;
    let t = Instant::now();
    lines.push(report(8, 1800.0, t, c8_decay(&mut stored)));
    let t = Instant::now();
    lines.push(report(9, 600.0, t, c9_damping(&stored)));
    let t = Instant::now();
    lines.push(report(10, 600.0, t, c10_determinism()));
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    assert_eq!(lines.len(), 10);
}
