//! `evanskit`: stability checks for radiative shocks from the command line.

mod artifact;
mod config;
mod report;

use artifact::{config_hash, manifest_path, to_json, write_json, RunManifest};
use clap::{Args, Parser, Subcommand};
use config::Config;
use evanskit_core::evans::{half_sphere_samples, stability_scan, winding_number, Contour, ScanOptions, StabilityVerdict, Which};
use evanskit_core::evolution::{damping_energy, simulate, InitialCondition, SimGrid, SimKind, SimOptions};
use evanskit_core::hypotheses::run_all;
use evanskit_core::linalg::C64;
use evanskit_core::model::{load_model, ModelSystem, ShockData};
use evanskit_core::profile::{locate_singular_point, solve_profile, Profile, ProfileOptions};
use evanskit_core::radau::OdeOptions;
use evanskit_core::resolvent::{bound_envelope_check, BoundFamily, GreenSolver, GridSpec, SampleSpec};
use evanskit_core::spectral_ode::{SpectralContext, SpectralPoint};
use evanskit_core::Error;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "evanskit", version, about = "Stability checks for radiative shocks in hyperbolic-elliptic systems")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every sampled quantity (default 42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct ShockArgs {
    /// Built-in model name or model TOML file (falls back to the config's `model`).
    model: Option<String>,
    /// Shock amplitude eps; end states are the model's shock_states(eps).
    #[arg(long)]
    amp: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Structural assumption suite.
    Check {
        #[command(flatten)]
        shock: ShockArgs,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Shock profile (U, Q1).
    Profile {
        #[command(flatten)]
        shock: ShockArgs,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Winding numbers of D+ and D- on one contour.
    Evans {
        #[command(flatten)]
        shock: ShockArgs,
        #[arg(long, default_value_t = 0.0)]
        xi2: f64,
        /// `semicircle:R`
        #[arg(long, default_value = "semicircle:5")]
        contour: String,
        #[arg(long)]
        punch: Option<f64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Winding scan over transverse slices plus low-frequency checks.
    Scan {
        #[command(flatten)]
        shock: ShockArgs,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Resolvent kernel G(x1, y1) on the oracle grid.
    Green {
        #[command(flatten)]
        shock: ShockArgs,
        /// `RE,IM`
        #[arg(long, allow_hyphen_values = true)]
        lambda: String,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        xi2: f64,
        #[arg(long, allow_hyphen_values = true)]
        y1: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Resolvent bound scaling check for one frequency family.
    Bounds {
        #[command(flatten)]
        shock: ShockArgs,
        #[arg(long, value_parser = parse_family)]
        family: BoundFamily,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time-domain run with decay fits and the damping monitor.
    Simulate {
        #[command(flatten)]
        shock: ShockArgs,
        #[arg(long, default_value = "linearized")]
        kind: String,
        #[arg(long, default_value = "gaussian:4,0.01")]
        ic: String,
        #[arg(long = "T")]
        t_end: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Merge run manifests into one verdict table.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_family(s: &str) -> Result<BoundFamily, String> {
    match s {
        "low_freq_kernel" => Ok(BoundFamily::LowFreqKernel),
        "low_freq_resolvent" => Ok(BoundFamily::LowFreqResolvent),
        "high_freq" => Ok(BoundFamily::HighFreq),
        "mid_freq" => Ok(BoundFamily::MidFreq),
        _ => Err(format!("unknown family `{s}` (low_freq_kernel, low_freq_resolvent, high_freq, mid_freq)")),
    }
}

/// Failure of a run: usage problems exit 2, numerical ones 3.
enum Fail {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownModel(_) | Error::Parse(_) | Error::InvalidInput(_) => Fail::Usage(e.to_string()),
            other => Fail::Numeric(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Numeric(format!("i/o: {e}"))
    }
}

struct Outcome {
    pass: bool,
    artifacts: Vec<PathBuf>,
    summary: serde_json::Value,
}

struct Setup {
    cfg: Config,
    model: ModelSystem,
    shock: ShockData,
}

fn setup(cfg: &Config, s: &ShockArgs) -> Result<Setup, Fail> {
    let name = s.model.clone().or_else(|| cfg.model.clone()).ok_or_else(|| Fail::Usage("no model given".into()))?;
    let model = load_model(&name)?;
    let mut cfg = cfg.clone();
    cfg.model = Some(name);
    if let Some(a) = s.amp {
        cfg.amplitude = a;
    }
    let shock = ShockData::from_eps(&model, cfg.amplitude)?;
    Ok(Setup { cfg, model, shock })
}

fn profile_of(st: &Setup) -> Result<Profile, Fail> {
    let opts = ProfileOptions { tol: st.cfg.tol_profile, l_dom_hint: st.cfg.domain_l, ..Default::default() };
    Ok(solve_profile(&st.model, &st.shock, &opts)?)
}

fn context(st: &Setup) -> Result<SpectralContext, Fail> {
    let p = profile_of(st)?;
    let ode = OdeOptions { rtol: st.cfg.tol_ode, ..Default::default() };
    Ok(SpectralContext::new(&st.model, &p, ode)?)
}

fn out_path(given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run_check(st: &Setup, samples: usize, json: &Option<PathBuf>) -> Result<Outcome, Fail> {
    let sh = &st.shock;
    let reports = run_all(&st.model, &sh.u_minus, &sh.u_plus, sh.s, samples, st.cfg.seed)?;
    let path = out_path(json, "check.json");
    write_json(&path, &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.check_id.as_str()).collect();
    for r in &reports {
        println!("{:<26} {:?}  margin {:.3e}", r.check_id, r.verdict, r.margin);
    }
    Ok(Outcome { pass: failed.is_empty(), artifacts: vec![path], summary: json!({ "failed": failed, "checks": reports.len() }) })
}

fn run_profile(st: &Setup, tol: Option<f64>, csv: &Option<PathBuf>) -> Result<Outcome, Fail> {
    let mut st2 = Setup { cfg: st.cfg.clone(), model: st.model.clone(), shock: st.shock.clone() };
    if let Some(t) = tol {
        st2.cfg.tol_profile = t;
    }
    let p = profile_of(&st2)?;
    let (xs, dap) = locate_singular_point(&st.model, &p)?;
    let n = p.n;
    let mut s = String::from("x1");
    for k in 1..=n {
        s.push_str(&format!(",U_{k}"));
    }
    s.push_str(",Q1");
    for k in 1..=n {
        s.push_str(&format!(",dU_{k}"));
    }
    s.push('\n');
    for i in 0..p.grid.len() {
        s.push_str(&format!("{}", p.grid[i]));
        for v in &p.u[i] {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}", p.q1[i]));
        for v in &p.du[i] {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    let path = out_path(csv, "profile.csv");
    std::fs::write(&path, s)?;
    let at0 = p.at(0.0);
    let summary = json!({
        "eta": p.eta, "dap0": dap, "x_singular": xs, "residual": p.residual, "l_dom": p.l_dom,
        "dU0": at0.du, "Q1_0": at0.q, "n_nodes": p.grid.len(),
    });
    println!("eta {:.6}  a_p'(0) {:.6e}  residual {:.2e}  L {:.1}", p.eta, dap, p.residual, p.l_dom);
    Ok(Outcome { pass: true, artifacts: vec![path], summary })
}

fn parse_contour(s: &str) -> Result<f64, Fail> {
    s.strip_prefix("semicircle:")
        .and_then(|r| r.parse::<f64>().ok())
        .filter(|r| *r > 0.0)
        .ok_or_else(|| Fail::Usage(format!("bad contour `{s}`, expected semicircle:R")))
}

fn run_evans(st: &Setup, xi2: f64, contour: &str, punch: Option<f64>, json: &Option<PathBuf>) -> Result<Outcome, Fail> {
    let radius = parse_contour(contour)?;
    let punch = punch.unwrap_or(st.cfg.rho_punch);
    let ctx = context(st)?;
    let mut xi_t = vec![0.0; st.model.d - 1];
    xi_t[0] = xi2;
    let c = Contour::semicircle(xi_t, radius, punch)?;
    let wp = winding_number(&ctx, &c, Which::Plus, 12)?;
    let wm = winding_number(&ctx, &c, Which::Minus, 12)?;
    let out = json!({
        "xi2": xi2, "radius": radius, "punch": punch,
        "winding_plus": wp.winding, "winding_minus": wm.winding,
        "raw_plus": wp.raw, "raw_minus": wm.raw,
        "min_abs_plus": wp.min_abs, "min_abs_minus": wm.min_abs,
    });
    let path = out_path(json, "evans.json");
    write_json(&path, &out)?;
    println!("winding D+ {}  D- {}", wp.winding, wm.winding);
    Ok(Outcome { pass: wp.winding == 0 && wm.winding == 0, artifacts: vec![path], summary: out })
}

fn run_scan(st: &Setup, json: &Option<PathBuf>) -> Result<Outcome, Fail> {
    let ctx = context(st)?;
    let opts = ScanOptions { rho_max: st.cfg.rho_max, rho_punch: st.cfg.rho_punch, ..Default::default() };
    let zhat = half_sphere_samples(st.model.d, st.cfg.zhat_samples, st.cfg.seed);
    let rep = stability_scan(&ctx, &zhat, &opts)?;
    let path = out_path(json, "scan.json");
    write_json(&path, &rep)?;
    println!("windings {:?}  verdict {:?}  ratio spread {:.3}", rep.windings, rep.verdict_d, rep.first_order_ratio_spread);
    let summary = json!({ "verdict_d": rep.verdict_d, "windings": rep.windings, "first_order_ratio_spread": rep.first_order_ratio_spread });
    Ok(Outcome { pass: rep.verdict_d == StabilityVerdict::Stable, artifacts: vec![path], summary })
}

fn run_green(st: &Setup, lambda: &str, xi2: f64, y1: f64, csv: &Option<PathBuf>) -> Result<Outcome, Fail> {
    let (re, im) = lambda
        .split_once(',')
        .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)))
        .ok_or_else(|| Fail::Usage(format!("bad --lambda `{lambda}`, expected RE,IM")))?;
    let ctx = context(st)?;
    let mut xi_t = vec![0.0; st.model.d - 1];
    xi_t[0] = xi2;
    let pt = SpectralPoint::new(C64::new(re, im), xi_t);
    let (xs, _) = GridSpec::for_context(&ctx).nodes();
    let xs: Vec<f64> = xs.into_iter().filter(|x| x.abs() > 1e-12 && (x - y1).abs() > 1e-12).collect();
    let mut stops = xs.clone();
    stops.push(y1);
    let solver = GreenSolver::new(&ctx, &pt, &stops)?;
    let src = solver.source(y1)?;
    let m = st.model.n + 2;
    let mut s = String::from("x1");
    for i in 0..m {
        for j in 0..m {
            s.push_str(&format!(",G{i}{j}_re,G{i}{j}_im"));
        }
    }
    s.push('\n');
    let eye = evanskit_core::linalg::CMat::identity(m, m);
    for &x in &xs {
        let g = solver.apply(&src, x, &eye)?;
        s.push_str(&format!("{x}"));
        for i in 0..m {
            for j in 0..m {
                s.push_str(&format!(",{},{}", g[(i, j)].re, g[(i, j)].im));
            }
        }
        s.push('\n');
    }
    let path = out_path(csv, "green.csv");
    std::fs::write(&path, s)?;
    let jump = solver.jump(&src)?;
    let summary = json!({ "lambda": [re, im], "xi2": xi2, "y1": y1, "rows": xs.len(), "jump_max": jump.iter().map(|z| z.norm()).fold(0.0, f64::max) });
    println!("{} kernel rows written", xs.len());
    Ok(Outcome { pass: true, artifacts: vec![path], summary })
}

fn run_bounds(st: &Setup, family: BoundFamily, json: &Option<PathBuf>) -> Result<Outcome, Fail> {
    let ctx = context(st)?;
    let check = bound_envelope_check(&ctx, family, &SampleSpec::for_family(family))?;
    let path = out_path(json, "bounds.json");
    write_json(&path, &check)?;
    println!("{:?}: C_fit {:.3e}  pass {}  exponent {:?}", family, check.c_fit, check.pass, check.exponent);
    let summary = json!({ "family": family, "c_fit": check.c_fit, "exponent": check.exponent, "pass": check.pass });
    Ok(Outcome { pass: check.pass, artifacts: vec![path], summary })
}

const L2_SLACK: f64 = 0.1;
const LINF_SLACK: f64 = 0.15;

#[allow(clippy::too_many_arguments)]
fn run_simulate(st: &Setup, kind: &str, ic: &str, t_end: Option<f64>, csv: &Option<PathBuf>, json: &Option<PathBuf>) -> Result<Outcome, Fail> {
    let kind: SimKind = kind.parse()?;
    let ic: InitialCondition = ic.parse()?;
    let p = profile_of(st)?;
    let t_end = t_end.unwrap_or(st.cfg.t_end);
    let grid = SimGrid { n1: st.cfg.sim_grid[0], n2: st.cfg.sim_grid[1], ..Default::default() };
    let opts = SimOptions { kind, grid, t_end, ic, fit_window: (20.0_f64.min(t_end / 10.0), t_end), seed: st.cfg.seed, ..Default::default() };
    let r = simulate(&st.model, &p, &opts)?;
    let csv_path = out_path(csv, "norms.csv");
    std::fs::write(&csv_path, r.series.csv())?;
    let damping = damping_energy(&r.series).map_err(|e| e.to_string());
    let within = |k: &str, slack: f64| {
        r.series.fitted_exponents.get(k).and_then(|f| f.target.map(|t| (f.exponent - t).abs() <= slack)).unwrap_or(false)
    };
    let pass = within("L2", L2_SLACK) && within("Linf", LINF_SLACK);
    let caveat = "d = 2 rates hold up to an arbitrarily small loss; exponents compared with slack 0.1 (L2) and 0.15 (Linf)";
    let out = json!({
        "kind": kind, "grid": grid, "t_end": t_end, "ic": ic, "steps": r.steps, "dt": r.dt,
        "series": r.series, "damping": damping.as_ref().ok(), "damping_error": damping.as_ref().err(),
        "pass": pass, "caveat": caveat,
    });
    let json_path = out_path(json, "simulate.json");
    write_json(&json_path, &out)?;
    for (k, f) in &r.series.fitted_exponents {
        println!("{k:<5} exponent {:+.4}  target {:?}", f.exponent, f.target);
    }
    println!("{caveat}");
    let summary = json!({
        "fitted_exponents": r.series.fitted_exponents.iter().map(|(k, f)| (k.clone(), f.exponent)).collect::<std::collections::BTreeMap<_, _>>(),
        "damping_pass": damping.as_ref().map(|d| d.inequality_pass).unwrap_or(false),
    });
    Ok(Outcome { pass, artifacts: vec![json_path, csv_path], summary })
}

fn write_manifest(cli: &Cli, command: &str, cfg: &Config, started: Instant, res: &Result<Outcome, Fail>) -> std::io::Result<()> {
    let (verdict, artifacts, summary) = match res {
        Ok(o) => (if o.pass { "pass" } else { "fail" }, o.artifacts.clone(), o.summary.clone()),
        Err(Fail::Usage(m)) | Err(Fail::Numeric(m)) => ("error", Vec::new(), json!({ "error": m })),
    };
    let path = cli.manifest.clone().unwrap_or_else(|| manifest_path(command, &artifacts));
    let m = RunManifest {
        command: command.into(),
        command_line: std::env::args().collect(),
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts,
        verdict: verdict.into(),
        summary,
    };
    std::fs::write(path, to_json(&m))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Check { .. } => "check",
        Command::Profile { .. } => "profile",
        Command::Evans { .. } => "evans",
        Command::Scan { .. } => "scan",
        Command::Green { .. } => "green",
        Command::Bounds { .. } => "bounds",
        Command::Simulate { .. } => "simulate",
        Command::Report { .. } => "report",
    }
}

fn shock_args(c: &Command) -> Option<&ShockArgs> {
    match c {
        Command::Check { shock, .. }
        | Command::Profile { shock, .. }
        | Command::Evans { shock, .. }
        | Command::Scan { shock, .. }
        | Command::Green { shock, .. }
        | Command::Bounds { shock, .. }
        | Command::Simulate { shock, .. } => Some(shock),
        Command::Report { .. } => None,
    }
}

fn dispatch(cli: &Cli, cfg: &Config) -> Result<Outcome, Fail> {
    if let Command::Report { manifests, json } = &cli.cmd {
        return report::run(manifests, json.as_deref().unwrap_or(Path::new("report.json")));
    }
    let st = setup(cfg, shock_args(&cli.cmd).expect("non-report command"))?;
    match &cli.cmd {
        Command::Check { samples, json, .. } => run_check(&st, *samples, json),
        Command::Profile { tol, csv, .. } => run_profile(&st, *tol, csv),
        Command::Evans { xi2, contour, punch, json, .. } => run_evans(&st, *xi2, contour, *punch, json),
        Command::Scan { json, .. } => run_scan(&st, json),
        Command::Green { lambda, xi2, y1, csv, .. } => run_green(&st, lambda, *xi2, *y1, csv),
        Command::Bounds { family, json, .. } => run_bounds(&st, *family, json),
        Command::Simulate { kind, ic, t_end, csv, json, .. } => run_simulate(&st, kind, ic, *t_end, csv, json),
        Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let cli = Cli::parse();
    let mut cfg = match Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cfg.worker_count() {
        Ok(Some(n)) => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if let Some(s) = shock_args(&cli.cmd) {
        if let Some(m) = &s.model {
            cfg.model = Some(m.clone());
        }
        if let Some(a) = s.amp {
            cfg.amplitude = a;
        }
    }
    let res = dispatch(&cli, &cfg);
    if let Err(e) = write_manifest(&cli, command_name(&cli.cmd), &cfg, started, &res) {
        eprintln!("error: cannot write manifest: {e}");
        return ExitCode::from(3);
    }
    match res {
        Ok(o) if o.pass => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
