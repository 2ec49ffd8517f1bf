//! Command-line front end: run solves, compare control modes and
//! topologies, emit plot-ready voltage profiles, lint and audit.
//!
//! Exit codes: 0 success, 1 parse/validation/config failure,
//! 2 non-convergence, 3 singular Jacobian.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::caseio::{
    builtin_case33, load_case, load_results, save_results, DerResult, LoadedCase, OutputFormat,
    ResultFile, Topology,
};
use crate::controls::{ControlConfig, ControlMode};
use crate::error::{Error, Result};
use crate::netmodel::BusId;
use crate::oracle::{audit_state, AuditReport};
use crate::solver::{solve, PowerFlowSolution, SolverOptions};

#[derive(Debug, Parser)]
#[command(name = "mgpf", version, about = "Islanded microgrid power flow under droop and secondary control")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one case under one control mode and print a summary.
    Run(RunArgs),
    /// Solve a grid of (mode, topology) cells and print aligned tables.
    Compare(CompareArgs),
    /// Emit bus-vs-voltage plot data for one solve.
    Profile(ProfileArgs),
    /// Lint a case file; optionally audit a saved result against it.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct CaseArgs {
    /// Path to a TOML case file.
    #[arg(long, conflicts_with_all = ["builtin", "topology"])]
    case: Option<PathBuf>,
    /// Name of a bundled case (currently: case33).
    #[arg(long)]
    builtin: Option<String>,
    /// Topology variant of the bundled case.
    #[arg(long, value_parser = Topology::from_str, requires = "builtin")]
    topology: Option<Topology>,
}

impl CaseArgs {
    fn resolve(&self) -> Result<LoadedCase> {
        match (&self.case, &self.builtin) {
            (Some(path), None) => load_case(path),
            (None, Some(name)) => {
                if name != "case33" {
                    return Err(Error::validation(
                        "builtin",
                        format!("unknown builtin case '{name}' (available: case33)"),
                    ));
                }
                Ok(builtin_case33(self.topology.unwrap_or(Topology::Radial)))
            }
            (None, None) => Err(Error::validation(
                "case",
                "either --case PATH or --builtin NAME is required",
            )),
            (Some(_), Some(_)) => unreachable!("clap enforces exclusivity"),
        }
    }
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Control mode: dp, rps, vr or st. Defaults to the case file's mode.
    #[arg(long, value_parser = ControlMode::from_str)]
    mode: Option<ControlMode>,
    /// Leader DER bus id for rps/st, overriding the case file.
    #[arg(long)]
    leader: Option<usize>,
    #[arg(long)]
    tol_vtheta: Option<f64>,
    #[arg(long)]
    tol_f_rho: Option<f64>,
    #[arg(long)]
    tol_vd: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Carry the true loss sensitivities in the balance row.
    #[arg(long)]
    exact_loss_jacobian: bool,
}

impl SolveArgs {
    fn options(&self) -> SolverOptions {
        let mut opts = SolverOptions::default();
        if let Some(t) = self.tol_vtheta {
            opts.tol_vtheta = t;
        }
        if let Some(t) = self.tol_f_rho {
            opts.tol_f_rho = t;
        }
        if let Some(t) = self.tol_vd {
            opts.tol_vd = t;
        }
        if let Some(m) = self.max_iter {
            opts.max_iter = m;
        }
        opts.exact_loss_jacobian = self.exact_loss_jacobian;
        opts
    }

    fn control(&self, loaded: &LoadedCase) -> ControlConfig {
        let mut cfg = loaded.control.clone();
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(leader) = self.leader {
            cfg.leader = Some(BusId(leader));
        }
        cfg
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write results to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format for --out.
    #[arg(long, value_parser = OutputFormat::from_str, default_value = "json")]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    solve: SolveArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Print the residual history.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Comma-separated mode list.
    #[arg(long, default_value = "dp,rps,vr,st")]
    modes: String,
    /// Comma-separated topology list (bundled cases only).
    #[arg(long, default_value = "radial,meshed")]
    topologies: String,
    #[arg(long)]
    leader: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    solve: SolveArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Audit a saved JSON result file against the case invariants.
    #[arg(long)]
    audit: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotConverged(_) => 2,
        Error::SingularJacobian { .. } => 3,
        _ => 1,
    }
}

/// Parses argv and dispatches; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

fn print_summary(sol: &PowerFlowSolution, name: &str, mode: ControlMode, verbose: bool) {
    println!(
        "{name} [{mode}]: {} in {} iterations",
        if sol.converged { "converged" } else { "NOT CONVERGED" },
        sol.iterations
    );
    println!(
        "  f = {:.6} Hz   losses = {:.6} p.u.   max residual = {:.3e}",
        sol.f_hz, sol.losses, sol.max_residual
    );
    let ders = sol
        .der_injections
        .iter()
        .map(|d| format!("{}: {:.3}{:+.3}j", d.bus, d.p, d.q))
        .collect::<Vec<_>>()
        .join("   ");
    println!("  DER injections (p.u.): {ders}");
    for flag in &sol.limit_flags {
        println!(
            "  warning: DER {} {} = {:.3} exceeds limit {:.3}",
            flag.bus, flag.quantity, flag.value, flag.limit
        );
    }
    if verbose {
        let hist = sol
            .residual_history
            .iter()
            .map(|r| format!("{r:.3e}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!("  residuals: {hist}");
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let loaded = args.case.resolve()?;
    let cfg = args.solve.control(&loaded);
    let opts = args.solve.options();
    let outcome = solve(&loaded.case, &loaded.ders, &cfg, &opts);
    let (sol, err) = match outcome {
        Ok(sol) => (sol, None),
        Err(Error::NotConverged(sol)) => {
            let kept = PowerFlowSolution::clone(&sol);
            (kept, Some(Error::NotConverged(sol)))
        }
        Err(other) => return Err(other),
    };
    print_summary(&sol, &loaded.case.name, cfg.mode, args.verbose);
    if let Some(path) = &args.output.out {
        let rf = ResultFile::from_solution(&sol, &loaded.case.name, cfg.mode);
        save_results(&rf, path, args.output.format)?;
        println!("  results written to {}", path.display());
    }
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct CompareCell {
    mode: String,
    topology: String,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    iterations: usize,
    f_hz: f64,
    losses_pu: f64,
    ders: Vec<DerResult>,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    case: String,
    cells: Vec<CompareCell>,
}

fn median3(mut xs: [f64; 3]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[1]
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let modes: Vec<ControlMode> = args
        .modes
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(Error::validation("modes", "at least one mode is required"));
    }

    // Bundled cases sweep topologies; a case file is one fixed topology.
    let variants: Vec<(String, LoadedCase)> = if args.case.builtin.is_some() {
        args.topologies
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| -> Result<(String, LoadedCase)> {
                let topo: Topology = s.trim().parse()?;
                let sub = CaseArgs {
                    case: None,
                    builtin: args.case.builtin.clone(),
                    topology: Some(topo),
                };
                Ok((topo.to_string(), sub.resolve()?))
            })
            .collect::<Result<_>>()?
    } else {
        let loaded = args.case.resolve()?;
        vec![("as-loaded".to_string(), loaded)]
    };

    let case_name = variants[0].1.case.name.clone();
    let mut cells = Vec::new();
    let mut times_ms = Vec::new();
    for (topo_label, loaded) in &variants {
        for &mode in &modes {
            let mut cfg = ControlConfig { mode, ..loaded.control.clone() };
            if let Some(leader) = args.leader {
                cfg.leader = Some(BusId(leader));
            }
            let opts = SolverOptions::default();
            let mut timings = [0.0f64; 3];
            let mut last: Option<std::result::Result<PowerFlowSolution, Error>> = None;
            for t in &mut timings {
                let start = Instant::now();
                let outcome = solve(&loaded.case, &loaded.ders, &cfg, &opts);
                *t = start.elapsed().as_secs_f64() * 1e3;
                last = Some(outcome);
            }
            times_ms.push(median3(timings));
            let cell = match last.unwrap() {
                Ok(sol) => CompareCell {
                    mode: mode.as_str().into(),
                    topology: topo_label.clone(),
                    converged: true,
                    error: None,
                    iterations: sol.iterations,
                    f_hz: sol.f_hz,
                    losses_pu: sol.losses,
                    ders: sol
                        .der_injections
                        .iter()
                        .map(|d| DerResult { bus: d.bus.0, p_pu: d.p, q_pu: d.q })
                        .collect(),
                },
                Err(Error::NotConverged(sol)) => CompareCell {
                    mode: mode.as_str().into(),
                    topology: topo_label.clone(),
                    converged: false,
                    error: Some("not converged".into()),
                    iterations: sol.iterations,
                    f_hz: sol.f_hz,
                    losses_pu: sol.losses,
                    ders: Vec::new(),
                },
                Err(other) => CompareCell {
                    mode: mode.as_str().into(),
                    topology: topo_label.clone(),
                    converged: false,
                    error: Some(other.to_string()),
                    iterations: 0,
                    f_hz: f64::NAN,
                    losses_pu: f64::NAN,
                    ders: Vec::new(),
                },
            };
            cells.push(cell);
        }
    }

    // Injection table: one row per DER bus, one column per cell.
    let der_buses: Vec<usize> = variants[0].1.ders.iter().map(|d| d.bus.0).collect();
    println!("DER injections (p.u.), {case_name}");
    print!("{:>6}", "DER");
    for cell in &cells {
        print!("  {:>16}", format!("{}/{}", cell.mode, cell.topology));
    }
    println!();
    for &bus in &der_buses {
        print!("{bus:>6}");
        for cell in &cells {
            match cell.ders.iter().find(|d| d.bus == bus) {
                Some(d) => print!("  {:>16}", format!("{:.2}{:+.2}i", d.p_pu, d.q_pu)),
                None => print!("  {:>16}", "-"),
            }
        }
        println!();
    }
    println!();
    println!("Iterations and wall time");
    print!("{:>12}", "cell");
    for cell in &cells {
        print!("  {:>16}", format!("{}/{}", cell.mode, cell.topology));
    }
    println!();
    print!("{:>12}", "iterations");
    for cell in &cells {
        match &cell.error {
            None => print!("  {:>16}", cell.iterations),
            Some(e) => print!("  {:>16}", format!("({e})")),
        }
    }
    println!();
    print!("{:>12}", "time_ms");
    for t in &times_ms {
        print!("  {:>16.2}", t);
    }
    println!();

    if let Some(path) = &args.output.out {
        let report = CompareReport { case: case_name, cells };
        let text = match args.output.format {
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
                s.push('\n');
                s
            }
            OutputFormat::Csv => {
                let mut s = String::from("mode,topology,converged,iterations,der_bus,p_pu,q_pu\n");
                for cell in &report.cells {
                    for d in &cell.ders {
                        s.push_str(&format!(
                            "{},{},{},{},{},{},{}\n",
                            cell.mode,
                            cell.topology,
                            cell.converged,
                            cell.iterations,
                            d.bus,
                            d.p_pu,
                            d.q_pu
                        ));
                    }
                }
                s
            }
        };
        std::fs::write(path, text)?;
        println!("comparison written to {}", path.display());
    }
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let loaded = args.case.resolve()?;
    let cfg = args.solve.control(&loaded);
    let opts = args.solve.options();
    let sol = solve(&loaded.case, &loaded.ders, &cfg, &opts)?;
    let mut csv = String::from("bus_id,v_pu\n");
    for (i, id) in sol.bus_ids.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", id.0, sol.state.v[i]));
    }
    match &args.output.out {
        Some(path) => {
            std::fs::write(path, csv)?;
            println!("profile written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn print_audit(report: &AuditReport) {
    for check in &report.checks {
        println!(
            "  {:<24} {}  (worst {:.3e}, threshold {:.0e})",
            check.name,
            if check.pass { "pass" } else { "FAIL" },
            check.worst,
            check.threshold
        );
    }
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let loaded = args.case.resolve()?;
    // Connectivity is part of the lint.
    crate::netmodel::build_admittance(&loaded.case)?;
    println!(
        "{}: OK ({} buses, {} branches ({} closed), {} DERs, mode {})",
        loaded.case.name,
        loaded.case.n(),
        loaded.case.branches.len(),
        loaded.case.closed_branch_count(),
        loaded.ders.len(),
        loaded.control.mode,
    );
    let Some(audit_path) = &args.audit else {
        return Ok(());
    };

    let rf = load_results(audit_path)?;
    let n = loaded.case.n();
    let mut theta = vec![0.0; n];
    let mut v = vec![0.0; n];
    if rf.buses.len() != n {
        return Err(Error::validation(
            "audit",
            format!("result has {} buses, case has {n}", rf.buses.len()),
        ));
    }
    for b in &rf.buses {
        let idx = loaded.case.bus_index(BusId(b.id)).ok_or_else(|| {
            Error::validation("audit", format!("result bus {} not in case", b.id))
        })?;
        theta[idx] = b.theta_rad;
        v[idx] = b.v_pu;
    }
    let mode: ControlMode = rf.mode.parse()?;
    let ders: Vec<(BusId, f64, f64)> =
        rf.ders.iter().map(|d| (BusId(d.bus), d.p_pu, d.q_pu)).collect();
    let report = audit_state(
        &loaded.case,
        &loaded.ders,
        mode,
        loaded.control.leader,
        &theta,
        &v,
        rf.f_hz / loaded.case.f_nominal,
        &ders,
    );
    println!("audit of {} [{}]:", audit_path.display(), rf.mode);
    print_audit(&report);
    if report.all_pass() {
        Ok(())
    } else {
        Err(Error::validation("audit", "one or more checks failed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::validation("x", "y")), 1);
        assert_eq!(exit_code(&Error::NoLeader), 1);
        assert_eq!(exit_code(&Error::SingularJacobian { iteration: 3 }), 3);
        let sol = dummy_solution();
        assert_eq!(exit_code(&Error::NotConverged(Box::new(sol))), 2);
    }

    fn dummy_solution() -> PowerFlowSolution {
        PowerFlowSolution {
            state: crate::solver::StateVector { theta: vec![0.0], v: vec![1.0], f: 1.0 },
            bus_ids: vec![BusId(1)],
            der_injections: vec![],
            branch_flows: vec![],
            losses: 0.0,
            f_hz: 60.0,
            iterations: 100,
            converged: false,
            max_residual: 1.0,
            residual_history: vec![1.0],
            limit_flags: vec![],
        }
    }

    #[test]
    fn cli_parses_the_documented_flags() {
        let cli = Cli::try_parse_from([
            "mgpf", "run", "--builtin", "case33", "--topology", "radial", "--mode", "dp",
            "--leader", "1", "--tol-vtheta", "1e-6", "--tol-f-rho", "1e-4", "--tol-vd", "1e-5",
            "--max-iter", "50", "--out", "/tmp/x.json", "--format", "json",
            "--exact-loss-jacobian",
        ])
        .unwrap();
        match cli.command {
            Command::Run(args) => {
                assert_eq!(args.solve.mode, Some(ControlMode::Droop));
                assert_eq!(args.solve.max_iter, Some(50));
                assert!(args.solve.exact_loss_jacobian);
            }
            _ => panic!("expected run"),
        }
    }

    #[test]
    fn case_and_builtin_are_exclusive() {
        assert!(Cli::try_parse_from([
            "mgpf", "run", "--case", "x.toml", "--builtin", "case33", "--mode", "dp"
        ])
        .is_err());
    }
}
