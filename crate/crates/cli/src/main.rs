//! `coag`: command-line driver for the simulator and its checks.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 numerical
//! failure (including a failed check), 3 no convergence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use coag_core::config::{RunConfig, SCHEMA_VERSION};
use coag_core::dual::{adjoint_consistency, dual_shape, q_tail_bound, solve_dual, subsolution_bound};
use coag_core::suite::{invariance_suite, SuiteOptions, SuiteReport};
use coag_core::{find_stationary, power_law_init, Error, StableProfile};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "coag", version, about = "Self-similar coagulation with fat-tail data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`, defaults to `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve the power-law datum to `run.t_final`, writing sampled measures.
    Simulate(Common),
    /// Evolve until stationary and fit the tail.
    Stationary {
        #[command(flatten)]
        common: Common,
        /// Stationarity tolerance; overrides `run.tol`.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Solve the dual problem for each `dual.r` and check it against the forward run.
    DualCheck {
        #[command(flatten)]
        common: Common,
        /// Largest admissible adjoint residual; overrides `dual.tolerance`.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Tabulate the stable profile W, its derivative and the identity residual.
    ProfileW {
        /// Index `a` in (0, 1).
        #[arg(long)]
        a: f64,
        #[arg(long, default_value_t = 1e-2)]
        y_min: f64,
        #[arg(long, default_value_t = 1e4)]
        y_max: f64,
        #[arg(long, default_value_t = 61)]
        points: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the invariance checks along a forward run, writing JUnit XML and JSON.
    InvarianceSuite {
        #[command(flatten)]
        common: Common,
        /// Slack of the envelope and growth checks.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    CheckFailed(String),
    NotConverged(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed(msg)) => {
            eprintln!("coag: check failed: {msg}");
            ExitCode::from(2)
        }
        Ok(Status::NotConverged(msg)) => {
            eprintln!("coag: no convergence: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("coag: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse(_) | Error::Io(_) => 1,
        Error::NonConvergence(_) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<Status, Error> {
    match cmd {
        Command::Simulate(c) => simulate(&Context::new(&c, "simulate")?),
        Command::Stationary { common, tolerance } => {
            let mut ctx = Context::new(&common, "stationary")?;
            if let Some(t) = tolerance {
                ctx.cfg.run.tol = t;
            }
            stationary(&ctx.revalidate()?)
        }
        Command::DualCheck { common, tolerance } => {
            let mut ctx = Context::new(&common, "dual-check")?;
            if let Some(t) = tolerance {
                ctx.cfg.dual.tolerance = t;
            }
            dual_check(&ctx.revalidate()?)
        }
        Command::ProfileW { a, y_min, y_max, points, out, workers } => {
            init_pool(workers)?;
            profile_w(a, y_min, y_max, points, &out)
        }
        Command::InvarianceSuite { common, tolerance } => {
            let ctx = Context::new(&common, "invariance-suite")?;
            suite(&ctx, tolerance)
        }
    }
}

fn init_pool(workers: Option<usize>) -> Result<(), Error> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config { field: "workers".into(), message: "must be at least 1".into() });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config { field: "workers".into(), message: e.to_string() })?;
    }
    Ok(())
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    command: &'static str,
    start: Instant,
}

impl Context {
    fn new(c: &Common, command: &'static str) -> Result<Self, Error> {
        let cfg = RunConfig::load(&c.config).map_err(|e| match e {
            Error::Io(io) => Error::Config { field: "config".into(), message: format!("{}: {io}", c.config.display()) },
            other => other,
        })?;
        init_pool(c.workers.or(cfg.workers))?;
        let out = c.out.clone().or_else(|| cfg.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| "out".into());
        fs::create_dir_all(&out)?;
        Ok(Context { cfg, out, command, start: Instant::now() })
    }

    fn revalidate(self) -> Result<Self, Error> {
        self.cfg.validate()?;
        Ok(self)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, files: &[String], status: &str) -> Result<(), Error> {
        let m = json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "status": status,
            "workers": rayon::current_num_threads(),
            "elapsed_seconds": self.start.elapsed().as_secs_f64(),
            "config": self.cfg,
            "files": files,
        });
        write_json(&self.path("manifest.json"), &m)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn with_schema(mut v: Value) -> Value {
    if let Value::Object(m) = &mut v {
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    v
}

fn simulate(ctx: &Context) -> Result<Status, Error> {
    let d = ctx.cfg.dynamics()?;
    let h0 = power_law_init(&d.params, &d.grid);
    let mut times = vec![0.0];
    times.extend(ctx.cfg.sample_times());
    times.dedup();
    let measures = d.evolve_sampled(&h0, &times)?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for (k, (t, m)) in times.iter().zip(&measures).enumerate() {
        let name = format!("measure_{k:03}.csv");
        m.write_csv(BufWriter::new(File::create(ctx.path(&name))?))?;
        rows.push(json!({ "t": t, "file": name, "grid_mass": m.grid_mass(), "origin_mass": m.origin_mass }));
        files.push(name);
    }
    write_json(&ctx.path("simulate.json"), &with_schema(json!({ "samples": rows })))?;
    files.push("simulate.json".into());
    ctx.manifest(&files, "ok")?;
    println!("simulate: {} samples up to t = {} in {}", times.len(), ctx.cfg.run.t_final, ctx.out.display());
    Ok(Status::Ok)
}

fn stationary(ctx: &Context) -> Result<Status, Error> {
    let d = ctx.cfg.dynamics()?;
    let h0 = power_law_init(&d.params, &d.grid);
    let res = find_stationary(&d, &h0, &ctx.cfg.stationary_options())?;
    res.profile.write_csv(BufWriter::new(File::create(ctx.path("profile.csv"))?))?;
    write_json(&ctx.path("stationary.json"), &with_schema(json!(res.report)))?;
    let r = &res.report;
    let fit = r.tail_fit.map_or("no tail fit".to_string(), |f| format!("tail exponent {:.4}, amplitude {:.4}", f.exponent, f.amplitude));
    println!("stationary: converged {} at t = {:.2}, residual {:.2e}, {fit}", r.converged, r.final_time, r.stationarity_residual);
    let files = ["profile.csv".to_string(), "stationary.json".to_string()];
    if r.converged {
        ctx.manifest(&files, "ok")?;
        Ok(Status::Ok)
    } else {
        ctx.manifest(&files, "not_converged")?;
        Ok(Status::NotConverged(format!("stationarity residual {:.3e} at t_max = {}", r.stationarity_residual, r.final_time)))
    }
}

fn dual_check(ctx: &Context) -> Result<Status, Error> {
    let d = ctx.cfg.dynamics()?;
    let dc = &ctx.cfg.dual;
    let h0 = power_law_init(&d.params, &d.grid);
    let traj = d.evolve_trajectory(&h0, dc.t)?;
    let profile = StableProfile::new(d.params.a)?;
    let mut files = Vec::new();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &r in &dc.r {
        let dual = solve_dual(&d, &traj, r, dc.t)?;
        let adjoint = adjoint_consistency(&d, &traj, &dual)?;
        let shape = dual_shape(&d, &dual, dual.at_start());
        let sub = subsolution_bound(&d, &dual, &profile, dc.subsolution_slack)?;
        let tail = q_tail_bound(&d, &traj, r, dc.t)?;
        let name = format!("dual_r{r}.csv");
        dual.at_start().write_csv(BufWriter::new(File::create(ctx.path(&name))?))?;
        files.push(name);
        if adjoint.relative_residual > dc.tolerance {
            failures.push(format!("R = {r}: adjoint residual {:.3e} above {:e}", adjoint.relative_residual, dc.tolerance));
        }
        if sub.m_star.is_none() {
            failures.push(format!("R = {r}: no subsolution constant in the bracket"));
        }
        println!(
            "dual-check R = {r}: adjoint residual {:.2e}, M* = {}, K* = {:.3}",
            adjoint.relative_residual,
            sub.m_star.map_or("none".into(), |m| format!("{m:.4}")),
            tail.k_star
        );
        results.push(json!({ "r": r, "adjoint": adjoint, "shape": shape, "subsolution": sub, "q_tail": tail }));
    }
    write_json(&ctx.path("dual.json"), &with_schema(json!({ "t": dc.t, "tolerance": dc.tolerance, "results": results })))?;
    files.push("dual.json".into());
    if failures.is_empty() {
        ctx.manifest(&files, "ok")?;
        Ok(Status::Ok)
    } else {
        ctx.manifest(&files, "failed")?;
        Ok(Status::CheckFailed(failures.join("; ")))
    }
}

fn profile_w(a: f64, y_min: f64, y_max: f64, points: usize, out: &Path) -> Result<Status, Error> {
    if !(y_min > 0.0 && y_max > y_min && points >= 2) {
        return Err(Error::Config { field: "y-range".into(), message: "need 0 < y-min < y-max and at least 2 points".into() });
    }
    let start = Instant::now();
    let profile = StableProfile::new(a)?;
    let ys: Vec<f64> = (0..points).map(|k| y_min * (y_max / y_min).powf(k as f64 / (points - 1) as f64)).collect();
    let rows = profile.table(&ys)?;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("profile_w.csv"))?);
    writeln!(w, "# schema_version={SCHEMA_VERSION},a={a:?},c={:?}", profile.c)?;
    writeln!(w, "y,w,dw,identity_residual")?;
    for r in &rows {
        let res = r.residual.map_or(String::new(), |v| format!("{v:?}"));
        writeln!(w, "{:?},{:?},{:?},{res}", r.y, r.w, r.dw)?;
    }
    w.flush()?;
    let worst = rows.iter().filter_map(|r| r.residual).fold(0.0f64, f64::max);
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "profile-w",
        "version": env!("CARGO_PKG_VERSION"),
        "a": a,
        "c": profile.c,
        "points": points,
        "worst_identity_residual": worst,
        "elapsed_seconds": start.elapsed().as_secs_f64(),
        "files": ["profile_w.csv"],
    });
    write_json(&out.join("manifest.json"), &summary)?;
    println!("profile-w: {points} rows for a = {a}, worst identity residual {worst:.2e}");
    Ok(Status::Ok)
}

fn suite(ctx: &Context, slack: Option<f64>) -> Result<Status, Error> {
    let d = ctx.cfg.dynamics()?;
    let h0 = power_law_init(&d.params, &d.grid);
    let base = SuiteOptions::default();
    let opts = SuiteOptions { times: ctx.cfg.sample_times(), slack: slack.unwrap_or(base.slack), seed: ctx.cfg.seed, ..base };
    if !(opts.slack >= 0.0 && opts.slack.is_finite()) {
        return Err(Error::Config { field: "tolerance".into(), message: format!("{} must be nonnegative", opts.slack) });
    }
    let report = invariance_suite(&d, &h0, &opts)?;
    let elapsed = ctx.start.elapsed().as_secs_f64();
    fs::write(ctx.path("suite.xml"), junit(&report, elapsed))?;
    write_json(&ctx.path("suite.json"), &with_schema(json!({ "passed": report.passed(), "options": opts, "report": report })))?;
    for c in &report.checks {
        println!("{:<24} {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
    }
    let files = ["suite.xml".to_string(), "suite.json".to_string()];
    if report.passed() {
        ctx.manifest(&files, "ok")?;
        Ok(Status::Ok)
    } else {
        ctx.manifest(&files, "failed")?;
        let names: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Ok(Status::CheckFailed(names.join(", ")))
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn junit(report: &SuiteReport, elapsed: f64) -> String {
    let failures = report.checks.iter().filter(|c| !c.passed).count();
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s += &format!(
        "<testsuite name=\"invariance\" tests=\"{}\" failures=\"{failures}\" errors=\"0\" time=\"{elapsed:.3}\">\n",
        report.checks.len()
    );
    for c in &report.checks {
        s += &format!("  <testcase classname=\"invariance\" name=\"{}\"", xml_escape(&c.name));
        if c.passed {
            s += &format!("><system-out>{}</system-out></testcase>\n", xml_escape(&c.detail));
        } else {
            s += &format!("><failure message=\"{}\"/></testcase>\n", xml_escape(&c.detail));
        }
    }
    s += "</testsuite>\n";
    s
}
