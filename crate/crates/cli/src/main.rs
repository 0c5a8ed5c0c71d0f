//! `nmpc`: run closed-loop scenarios, ablation pairs, the mobility
//! calibration and QP dumps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use quadruped_nmpc::leg::{find_max_mobility_offset_with, mobility_field, EllipsoidMatrix, LegGeometry, WorkspaceGrid};
use quadruped_nmpc::qp::{read_qp_file, solve, write_qp_file};
use quadruped_nmpc::sim::{ablate, initial_subproblem, run, Ablation, AblationReport, SimConfig};

#[derive(Parser)]
#[command(name = "nmpc", version, about = "Quadruped NMPC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    MobilityCost,
    ForceRobustness,
    ConeConstraints,
    ReplanRate,
    VerticalForceWeight,
}

impl From<Toggle> for Ablation {
    fn from(t: Toggle) -> Self {
        match t {
            Toggle::MobilityCost => Ablation::MobilityCost,
            Toggle::ForceRobustness => Ablation::ForceRobustness,
            Toggle::ConeConstraints => Ablation::ConeConstraints,
            Toggle::ReplanRate => Ablation::ReplanRate,
            Toggle::VerticalForceWeight => Ablation::VerticalForceWeight,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Matrix {
    InverseGram,
    Gram,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its logs.
    Run {
        /// Scenario file (TOML).
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        /// Run the planner on its own thread at wall-clock pace.
        #[arg(long)]
        threaded: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Simulate a scenario with and without one feature.
    Ablate {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        toggle: Toggle,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Search the leg workspace for the foot position of maximum mobility.
    CalibrateMobility {
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 4.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.02)]
        resolution: f64,
        #[arg(long, value_enum, default_value = "inverse-gram")]
        matrix: Matrix,
        /// Write the field as `x,y,z,l_m` CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the first QP of a scenario, or solve a previously written one.
    DumpQp {
        /// Scenario file; the default hover scenario is used when omitted.
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "qp.txt")]
        out: PathBuf,
        /// Solve this dump instead of writing one.
        #[arg(long)]
        solve: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<SimConfig> {
    let mut cfg = SimConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, seed, duration, threaded, out } => {
            let mut cfg = load(&scenario, seed)?;
            if let Some(d) = duration {
                cfg.duration = d;
            }
            cfg.threaded |= threaded;
            let log = run(&cfg)?;
            log.write_to(&out)?;
            println!("{}", serde_json::to_string_pretty(&log.summary)?);
        }
        Command::Ablate { scenario, toggle, seed, out } => {
            let cfg = load(&scenario, seed)?;
            let ablation = Ablation::from(toggle);
            let (baseline, ablated) = ablate(&cfg, ablation)?;
            baseline.write_to(out.join("baseline"))?;
            ablated.write_to(out.join(ablation.label()))?;
            let report = AblationReport { ablation, baseline: baseline.summary, ablated: ablated.summary };
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(out.join("comparison.json"), &text)?;
            println!("{text}");
        }
        Command::CalibrateMobility { beta, gamma, resolution, matrix, csv } => {
            if !(resolution > 0.0) {
                bail!("resolution must be positive");
            }
            let matrix = match matrix {
                Matrix::InverseGram => EllipsoidMatrix::InverseGram,
                Matrix::Gram => EllipsoidMatrix::Gram,
            };
            let geom = LegGeometry::default();
            let grid = WorkspaceGrid::reachable_box(&geom, resolution);
            let cal = find_max_mobility_offset_with(&geom, beta, gamma, &grid, matrix)?;
            println!("{}", serde_json::to_string_pretty(&cal)?);
            if let Some(path) = csv {
                let (samples, _, _) = mobility_field(&geom, beta, gamma, &grid, matrix)?;
                let mut text = String::from("x,y,z,l_m\n");
                for s in samples {
                    text.push_str(&format!("{},{},{},{}\n", s.position.x, s.position.y, s.position.z, s.mobility));
                }
                std::fs::write(&path, text)?;
            }
        }
        Command::DumpQp { scenario, out, solve: input } => match input {
            Some(path) => {
                let qp = read_qp_file(&path)?;
                let sol = solve(&qp, &Default::default())?;
                println!(
                    "{}",
                    serde_json::json!({
                        "iterations": sol.iterations,
                        "kkt_residual": sol.kkt_residual,
                        "objective": sol.objective,
                    })
                );
            }
            None => {
                let cfg = match scenario {
                    Some(p) => load(&p, None)?,
                    None => SimConfig::default(),
                };
                let qp = initial_subproblem(&cfg)?;
                write_qp_file(&out, &qp)?;
                println!("wrote {} stages to {}", qp.horizon(), out.display());
            }
        },
    }
    Ok(())
}
