//! Command-line front end: central solves, distributed simulation over the
//! in-memory or chain-backed contract, report comparison, chain
//! verification, and reference-scenario generation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use dercoord::coordinator::run_admm;
use dercoord::harness::{
    self, atomic_write, compare_reports, generate_reference, generate_reference_weekly,
    load_scenario, write_report, write_scenario, RunReport,
};
use dercoord::ledger::{export_chain, import_chain, verify_chain, LedgerContract, MemoryContract};
use dercoord::model::Scenario;
use dercoord::subproblem::solve_dcm_central;

#[derive(Parser)]
#[command(name = "dercoord", version, about = "Prosumer fleet coordination simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fleet program centrally and write a run report.
    SolveCentral {
        /// Path to scenario.toml.
        scenario: PathBuf,
        /// Output directory for the report (default: alongside the scenario).
        #[arg(long, default_value = "out/central")]
        out: PathBuf,
        /// Solver tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Run the distributed coordination loop and write a run report.
    Simulate {
        /// Path to scenario.toml.
        scenario: PathBuf,
        /// Execute the coordinator update on the simulated chain.
        #[arg(long, conflicts_with = "memory")]
        ledger: bool,
        /// Execute the coordinator update in memory (default).
        #[arg(long)]
        memory: bool,
        /// Output directory for the report and chain export.
        #[arg(long, default_value = "out/simulate")]
        out: PathBuf,
    },
    /// Compare two run reports; nonzero exit when beyond tolerance.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        /// Relative objective tolerance.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Replay and verify an exported chain.
    Verify { chain_file: PathBuf },
    /// Emit the deterministic reference scenario.
    GenReference {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Emit the weekly (T = 168) variant instead of the daily one.
        #[arg(long)]
        weekly: bool,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    load_scenario(path).map_err(|e| anyhow!("scenario-load: {e}"))
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SolveCentral { scenario, out, tol } => {
            let scen = load(&scenario)?;
            let started = Instant::now();
            let central = solve_dcm_central(&scen, tol).map_err(|e| anyhow!("solve: {e}"))?;
            let (fleet_cost, fit, dr, per) = harness::fleet_totals(&scen, &central.schedules)
                .map_err(|e| anyhow!("totals: {e}"))?;
            let mut report = RunReport {
                mode: "central".into(),
                converged: true,
                iterations: central.iterations,
                history: Vec::new(),
                fleet_cost,
                fit_revenue: fit,
                dr_revenue: dr,
                per_prosumer_cost: per,
                settlement: vec![0.0; scen.fleet_size()],
                schedule_files: Vec::new(),
                trades_file: String::new(),
                chain_file: None,
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            };
            let path = write_report(&out, &mut report, &central.schedules, None)
                .map_err(|e| anyhow!("report-write: {e}"))?;
            println!(
                "central solve: cost {fleet_cost:.6}, kkt residual {:.3e}, report {}",
                central.kkt_residual,
                path.display()
            );
            Ok(())
        }
        Command::Simulate {
            scenario,
            ledger,
            memory: _,
            out,
        } => {
            let scen = load(&scenario)?;
            let started = Instant::now();
            let (report, chain_text) = if ledger {
                let mut contract =
                    LedgerContract::from_scenario(&scen).map_err(|e| anyhow!("ledger: {e}"))?;
                let report = run_admm(&scen, &mut contract).map_err(|e| anyhow!("admm: {e}"))?;
                let chain = export_chain(contract.blocks());
                (report, Some(chain))
            } else {
                let mut contract =
                    MemoryContract::from_scenario(&scen).map_err(|e| anyhow!("ledger: {e}"))?;
                let report = run_admm(&scen, &mut contract).map_err(|e| anyhow!("admm: {e}"))?;
                (report, None)
            };
            if !report.converged {
                eprintln!(
                    "warning: did not converge within {} iterations (r_primal {:.3e})",
                    report.iterations,
                    report.history.last().map(|h| h.r_primal).unwrap_or(f64::NAN)
                );
            }
            let (fleet_cost, fit, dr, per) = harness::fleet_totals(&scen, &report.schedules)
                .map_err(|e| anyhow!("totals: {e}"))?;
            let mut run_report = RunReport {
                mode: if ledger { "admm-ledger" } else { "admm-memory" }.into(),
                converged: report.converged,
                iterations: report.iterations,
                history: report.history.clone(),
                fleet_cost,
                fit_revenue: fit,
                dr_revenue: dr,
                per_prosumer_cost: per,
                settlement: report.settlement.clone(),
                schedule_files: Vec::new(),
                trades_file: String::new(),
                chain_file: chain_text.as_ref().map(|_| "chain.ndjson".to_string()),
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            };
            let path = write_report(&out, &mut run_report, &report.schedules, Some(&report.lambda))
                .map_err(|e| anyhow!("report-write: {e}"))?;
            if let Some(chain) = chain_text {
                atomic_write(&out.join("chain.ndjson"), chain.as_bytes())
                    .map_err(|e| anyhow!("chain-write: {e}"))?;
            }
            println!(
                "simulate ({}): cost {fleet_cost:.6}, {} iterations, converged {}, report {}",
                run_report.mode,
                report.iterations,
                report.converged,
                path.display()
            );
            Ok(())
        }
        Command::Compare {
            report_a,
            report_b,
            tol,
        } => {
            let delta =
                compare_reports(&report_a, &report_b).map_err(|e| anyhow!("compare: {e}"))?;
            println!(
                "objective delta (relative): {:.6e}; max schedule delta: {:.6e}",
                delta.cost_delta_rel, delta.max_schedule_delta
            );
            if delta.cost_delta_rel > tol {
                bail!(
                    "compare-beyond-tol: objective delta {:.6e} exceeds {tol:.6e}",
                    delta.cost_delta_rel
                );
            }
            Ok(())
        }
        Command::Verify { chain_file } => {
            let text = std::fs::read_to_string(&chain_file)
                .with_context(|| format!("chain-read: {}", chain_file.display()))?;
            let blocks = import_chain(&text).map_err(|e| anyhow!("chain-parse: {e}"))?;
            let verdict = verify_chain(&blocks);
            match verdict {
                dercoord::ledger::ChainVerdict::Valid => {
                    println!("chain valid: {} blocks", blocks.len());
                    Ok(())
                }
                dercoord::ledger::ChainVerdict::Invalid { height, reason } => {
                    bail!("chain-invalid: height {height}, reason {reason}")
                }
            }
        }
        Command::GenReference { seed, out, weekly } => {
            let scenario = if weekly {
                generate_reference_weekly(seed)
            } else {
                generate_reference(seed)
            };
            let path = write_scenario(&scenario, &out).map_err(|e| anyhow!("write: {e}"))?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
