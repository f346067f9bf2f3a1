// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use gwardar::detection::Verdict;
use gwardar::harness::{
    campaign_specs, emit_metrics, generate_topology, run_campaign, run_experiment, ExperimentMetrics, GwardarConfig,
    ScenarioSpec, Simulation, SimulationState, TopologyKind,
};
use gwardar::Result;

#[derive(Parser)]
#[command(name = "gwardar", version, about = "Trajectory-based protection for SDN data planes, in simulation")]
struct Cli {
    /// Output directory for metrics, reports and run state.
    #[arg(long, global = true, env = "GWARDAR_OUT_DIR", default_value = "gwardar-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warm up on benign traffic, then run an attack scenario, a campaign, or an honest baseline.
    Run {
        /// Topology JSON file or a generator spec: gen:line:N, gen:ring:N, gen:random:N:DEGREE.
        #[arg(long, default_value = "gen:random:54:3")]
        topology: TopologyKind,
        /// Scenario spec file (JSON). Without it an honest baseline runs unless --campaign is given.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Run this many attacks cycling through every scenario.
        #[arg(long, conflicts_with = "scenario")]
        campaign: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// JSON config file. Missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Prefix list, one CIDR per line, assigned to devices in id order.
        #[arg(long)]
        prefixes: Option<PathBuf>,
    },
    /// Compare the intercepted replica with the live tables of the last run.
    VerifyReplica,
    /// Restore live tables from the latest trusted snapshot.
    Restore {
        #[arg(long)]
        force: bool,
    },
    /// Hand control back to the NOS after a takeover.
    ReleaseTakeover,
}

fn append_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for v in verdicts {
        writeln!(f, "{}", serde_json::to_string(v)?)?;
    }
    Ok(())
}

fn print_summary(m: &ExperimentMetrics) {
    for a in &m.attacks {
        println!(
            "{} seed={} targets={} detected_at={} verdict={} correct={}",
            a.scenario,
            a.seed,
            a.targets,
            a.detected_at.map_or("-".into(), |t| t.to_string()),
            a.verdict,
            a.correct
        );
    }
    if !m.attacks.is_empty() {
        println!("detection rate {:.3}", m.detection_rate());
    }
    if let Some(p) = m.fpr_timeline.last() {
        println!("final window fpr {:.4}", p.fpr);
    }
}

fn run(
    out: &Path,
    topology: &TopologyKind,
    scenario: Option<&Path>,
    campaign: Option<usize>,
    seed: u64,
    config: Option<&Path>,
    prefixes: Option<&Path>,
) -> Result<()> {
    let config = match config {
        Some(p) => GwardarConfig::from_json(&fs::read_to_string(p)?)?,
        None => GwardarConfig::default(),
    };
    let prefixes = prefixes.map(gwardar::harness::topogen::read_prefix_list).transpose()?;
    let topo = generate_topology(topology, seed, prefixes.as_deref())?;
    fs::create_dir_all(out)?;
    let report = out.join("verdicts.jsonl");
    let mut sim = Simulation::new(topo, config, seed)?;
    let warm = sim.warm_up()?;
    info!("warm-up: {warm:?}");

    let (metrics, state) = if let Some(path) = scenario {
        let spec = ScenarioSpec::from_json(&fs::read_to_string(path)?)?;
        let spec = ScenarioSpec {
            start_time: spec.start_time.max(sim.now()),
            ..spec
        };
        let o = run_experiment(&sim, &spec)?;
        append_verdicts(&report, &o.verdicts)?;
        let m = ExperimentMetrics {
            attacks: vec![o.attack],
            fpr_timeline: o.simulation.fpr.clone(),
            restore_checks: o.restore.into_iter().collect(),
        };
        (m, o.simulation.export_state())
    } else if let Some(n) = campaign {
        let specs = campaign_specs(n, seed, sim.now());
        (run_campaign(&sim, &specs)?, sim.export_state())
    } else {
        let windows = sim.config.run.monitor_windows;
        let verdicts = sim.monitor(windows)?;
        append_verdicts(&report, &verdicts)?;
        let m = ExperimentMetrics {
            fpr_timeline: sim.fpr.clone(),
            ..ExperimentMetrics::default()
        };
        (m, sim.export_state())
    };
    emit_metrics(&metrics, out)?;
    fs::write(out.join("state.json"), state.to_json())?;
    print_summary(&metrics);
    Ok(())
}

fn load_state(out: &Path) -> Result<SimulationState> {
    SimulationState::from_json(&fs::read_to_string(out.join("state.json"))?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run {
            topology,
            scenario,
            campaign,
            seed,
            config,
            prefixes,
        } => run(
            &cli.out,
            topology,
            scenario.as_deref(),
            *campaign,
            *seed,
            config.as_deref(),
            prefixes.as_deref(),
        ),
        Command::VerifyReplica => load_state(&cli.out).map(|s| {
            let check = s.verify_replica();
            println!("{}", serde_json::to_string_pretty(&check).expect("check serializes"));
            if !check.equal {
                std::process::exit(1);
            }
        }),
        Command::Restore { force } => {
            if !force {
                eprintln!("restore overwrites live tables; pass --force");
                return ExitCode::from(2);
            }
            load_state(&cli.out).and_then(|mut s| {
                let report = s.force_restore()?;
                fs::write(cli.out.join("state.json"), s.to_json())?;
                println!("{}", serde_json::to_string_pretty(&report)?);
                Ok(())
            })
        }
        Command::ReleaseTakeover => load_state(&cli.out).and_then(|mut s| {
            let was = s.release_takeover();
            fs::write(cli.out.join("state.json"), s.to_json())?;
            println!("{}", if was { "takeover released" } else { "no takeover active" });
            Ok(())
        }),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
