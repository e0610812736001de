use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use activebed::bed_design::DesignMode;
use activebed::experiment::artifacts::{prepare_output_dir, write_artifacts};
use activebed::experiment::benchmark::{run_benchmark_3d, Benchmark3dConfig};
use activebed::experiment::gradcheck::{check_gradients, GradCheckConfig};
use activebed::experiment::{run_campaign_with, CampaignConfig, Scenario};
use activebed::{Error, Result};

#[derive(Parser)]
#[command(name = "activebed", version, about = "Sequential experimental design with active discrepancy learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a design campaign and write its tables to the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DesignMode>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare adjoint gradients with central finite differences.
    ValidateGradients {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 20)]
        draws: usize,
    },
    /// Print the default configuration of a scenario as JSON.
    EmitDefaultConfig {
        #[arg(long)]
        scenario: String,
    },
    /// Design on the joint (θx, θy, θs) grid, parametric scenario.
    Benchmark3d {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 21)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<DesignMode, String> {
    match s {
        "measured" => Ok(DesignMode::Measured),
        "predictive" => Ok(DesignMode::Predictive),
        _ => Err(format!("unknown mode '{s}' (expected measured or predictive)")),
    }
}

fn scenario(tag: &str) -> Result<Scenario> {
    tag.parse()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            stages,
            mode,
            out,
            seed,
        } => {
            let mut cfg = CampaignConfig::load(&config)?;
            if let Some(n) = stages {
                cfg.stages = n;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            prepare_output_dir(&out)?;
            let result = run_campaign_with(&cfg, |r| {
                let ind = r
                    .indicator
                    .as_ref()
                    .map(|i| {
                        format!(
                            " kld={:.3} tau={:.3} {}",
                            i.trajectory.last().copied().unwrap_or(f64::NAN),
                            i.threshold,
                            if i.accept { "accepted" } else { "rejected" }
                        )
                    })
                    .unwrap_or_default();
                eprintln!(
                    "stage {}: d=({:.3}, {:.3}, t={:.3}) y={:.4} map=({:.3}, {:.3}){ind} [{:.1}s]",
                    r.stage,
                    r.design.d_x,
                    r.design.d_y,
                    r.design.d_t,
                    r.measurement.value,
                    r.map.0,
                    r.map.1,
                    r.elapsed_s
                );
                Ok(())
            })?;
            if let Some(f) = &result.final_metrics {
                eprintln!(
                    "final: corrected mse={:.5} re={:.4}; baseline mse={:.5} re={:.4}",
                    f.corrected.mse, f.corrected.re, f.baseline.mse, f.baseline.re
                );
            }
            write_artifacts(&out, &cfg, &result)?;
            eprintln!("wrote {}", out.display());
        }
        Command::ValidateGradients { scenario: tag, draws } => {
            let s = scenario(&tag)?;
            let report = check_gradients(
                s,
                &GradCheckConfig {
                    draws,
                    ..GradCheckConfig::default()
                },
            )?;
            for d in &report.draws {
                println!("draw {:2}: max relative error {:.3e}", d.draw, d.max_rel_error);
            }
            let ok = report.max_rel_error < 1e-3;
            println!(
                "{} parameters, {} draws: max relative error {:.3e} -> {}",
                report.parameters,
                report.draws.len(),
                report.max_rel_error,
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                return Err(Error::InvalidArgument("gradient check failed".into()));
            }
        }
        Command::EmitDefaultConfig { scenario: tag } => {
            println!("{}", CampaignConfig::preset(scenario(&tag)?).to_json());
        }
        Command::Benchmark3d {
            config,
            points,
            out,
        } => {
            let cfg = match config {
                Some(p) => CampaignConfig::load(p)?,
                None => CampaignConfig::preset(Scenario::Parametric),
            };
            let bench = Benchmark3dConfig {
                points,
                ..Benchmark3dConfig::default()
            };
            if let Some(dir) = &out {
                prepare_output_dir(dir)?;
            }
            let result = run_benchmark_3d(&cfg, &bench)?;
            for s in &result.stages {
                println!(
                    "stage {}: d=({:.3}, {:.3}, t={:.3}) y={:.4} gain={:.3} map=({:.3}, {:.3}, θs={:.3}) θs mode={:.3}",
                    s.stage, s.design.0, s.design.1, s.design.2, s.measurement, s.gain, s.map.0, s.map.1, s.map.2, s.strength_mode
                );
            }
            if let Some(dir) = out {
                let path = dir.join("benchmark_3d.json");
                let text = serde_json::to_string_pretty(&result)?;
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
