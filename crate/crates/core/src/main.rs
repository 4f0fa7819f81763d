use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lorafed::engine::log::write_lines;
use lorafed::experiments::{
    emit_results, run_scenario, run_sweep, sweep_manifest, write_json, Format, Manifest, ManifestRun, Mode,
    ScenarioConfig, SweepSpec, DEFAULT_REPEATS,
};
use lorafed::Error;

#[derive(Parser)]
#[command(name = "lorafed", version, about = "Federated LoRaWAN gateway network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
    /// Run both placements as paired series.
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with one seed.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Directory for the event log, metrics and manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every mode and device count over seeded repeats.
    Sweep {
        /// Comma-separated modes: baseline, two_actor, flip.
        #[arg(long, value_delimiter = ',', default_value = "baseline,two_actor,flip")]
        modes: Vec<String>,
        /// Comma-separated device counts; defaults to 100..600, or 100..1000 with --paper-scale.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "off")]
        altruist: Toggle,
        /// 100..1000 devices over five simulated hours.
        #[arg(long)]
        paper_scale: bool,
        /// Scenario file used as the template for every run.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// First seed; repeats use consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Parse and check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::FairUse(_)
        | Error::Parse { .. }
        | Error::PayloadSize(_)
        | Error::SpreadingFactor(_)
        | Error::Channel(_)
        | Error::Disconnected(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Error> {
    // an unreadable scenario is a configuration problem, not a runtime one
    ScenarioConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Validate { scenario } => {
            let cfg = load(&scenario)?;
            for &seed in &cfg.seeds {
                cfg.resolve(seed)?;
            }
            println!(
                "{}: ok ({} mode, {} devices, {} gateways)",
                scenario.display(),
                cfg.mode,
                cfg.device_count,
                cfg.gateway_entries().len()
            );
            Ok(())
        }
        Command::Run { scenario, seed, out } => {
            let cfg = load(&scenario)?;
            let output = run_scenario(&cfg, seed, true)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(format!("results/{}-seed{seed}", cfg.name)));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_lines(&output.log, &dir.join("events.log"))?;
            write_json(&output.metrics, &dir.join("metrics.json"))?;
            let manifest = Manifest {
                crate_version: env!("CARGO_PKG_VERSION"),
                command: "run",
                sweep: None,
                scenario: Some(&cfg),
                seeds: vec![seed],
                runs: vec![ManifestRun {
                    series: cfg.mode.label().to_string(),
                    device_count: cfg.device_count,
                    seed,
                }],
            };
            write_json(&manifest, &dir.join("manifest.json"))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&output.metrics).expect("metrics serialize")
            );
            Ok(())
        }
        Command::Sweep {
            modes,
            counts,
            repeats,
            out,
            altruist,
            paper_scale,
            scenario,
            seed,
        } => {
            let modes = modes.iter().map(|m| m.parse()).collect::<Result<Vec<Mode>, _>>()?;
            if repeats == 0 {
                return Err(Error::Config("repeats must be at least 1".into()));
            }
            let mut spec = SweepSpec::desk(modes, repeats);
            if paper_scale {
                spec = spec.paper_scale();
            }
            if let Some(path) = scenario {
                spec.template = load(&path)?;
            }
            if let Some(c) = counts {
                spec.counts = c;
            }
            spec.seeds = (seed..seed + repeats as u64).collect();
            spec.altruist = match altruist {
                Toggle::On => vec![true],
                Toggle::Off => vec![false],
                Toggle::Both => vec![true, false],
            };
            for &m in &spec.modes {
                spec.config_for(m, spec.counts.iter().copied().max().unwrap_or(0), seed, false)
                    .validate()?;
            }
            let table = run_sweep(&spec)?;
            let mut written = emit_results(&table, Format::Csv, &out)?;
            written.extend(emit_results(&table, Format::Json, &out)?);
            let runs_path = out.join("runs.json");
            write_json(&table.runs, &runs_path)?;
            let manifest_path = out.join("manifest.json");
            write_json(&sweep_manifest(&spec, &table), &manifest_path)?;
            written.push(runs_path);
            written.push(manifest_path);
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}
