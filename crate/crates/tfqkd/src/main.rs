//! Command-line surface: deterministic simulation, counts-table analysis,
//! operating-point optimization, and distance sweeps.
//!
//! Exit codes: 0 success, 1 data/model errors, 2 usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tfqkd::channel::{PhaseNoiseParams, SimOptions};
use tfqkd::config::{UntaggedSources, ValidatedConfig};
use tfqkd::optimizer::{optimize_params, sweep_distance, ParameterBox, SweepMode};
use tfqkd::pipeline;
use tfqkd::report::{render_report, render_sweep_csv};
use tfqkd::table::CountsTableFile;

#[derive(Parser)]
#[command(
    name = "tfqkd",
    version,
    about = "Twin-field QKD simulation and finite-key analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonConfig {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the failure probability per bound.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override the total number of pulse pairs.
    #[arg(long)]
    n_total: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Produce a counts table (analytic by default, Monte Carlo with
    /// --n-frames) and the analysis report for it.
    Simulate {
        #[command(flatten)]
        common: CommonConfig,
        /// Post-selection half-window in degrees.
        #[arg(long, default_value_t = 8.0)]
        ds_half: f64,
        /// Monte Carlo frames (pulse-pair slots); omit for the analytic
        /// expected-count path.
        #[arg(long)]
        n_frames: Option<u64>,
        /// Random seed for the Monte Carlo path.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Reference-pulse detection rate per detector, MHz.
        #[arg(long, default_value_t = 1.5)]
        ref_rate_mhz: f64,
        /// Write the counts table here (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze a counts table against a configuration.
    Analyze {
        #[command(flatten)]
        common: CommonConfig,
        /// Counts-table file.
        #[arg(long)]
        counts: PathBuf,
        /// Half-window to analyze (defaults to the table's operating
        /// point; the table must carry an xx_window entry for it).
        #[arg(long)]
        ds_half: Option<f64>,
        /// Untagged-source distillation choice: `yz` or `z`.
        #[arg(long)]
        untagged: Option<String>,
        /// Write the report here (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search source parameters and window for the best key rate.
    Optimize {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long, default_value_t = 4)]
        starts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the rate over a range of total link lengths; emits CSV.
    Sweep {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
        /// Half-window for the fixed-parameter sweep.
        #[arg(long, default_value_t = 8.0)]
        ds_half: f64,
        /// Re-optimize the operating point at every distance.
        #[arg(long, default_value_t = false)]
        reoptimize: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {path:?}")),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(common: &CommonConfig) -> Result<(ValidatedConfig, PhaseNoiseParams)> {
    let (mut cfg, noise) = ValidatedConfig::load(&common.config)
        .with_context(|| format!("loading config {:?}", common.config))?;
    if let Some(eps) = common.epsilon {
        anyhow::ensure!(eps > 0.0 && eps < 1.0, "--epsilon must lie in (0, 1)");
        cfg.security.epsilon = eps;
    }
    if let Some(n) = common.n_total {
        anyhow::ensure!(n > 0.0, "--n-total must be positive");
        cfg.security.n_total = n;
    }
    Ok((cfg, PhaseNoiseParams::from(noise)))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            common,
            ds_half,
            n_frames,
            seed,
            ref_rate_mhz,
            out,
        } => {
            anyhow::ensure!(
                ds_half > 0.0 && ds_half <= 90.0,
                "--ds-half must lie in (0, 90] degrees"
            );
            let (cfg, noise) = load_config(&common)?;
            match n_frames {
                None => {
                    let table = pipeline::simulate_expected_table(&cfg, &noise, ds_half);
                    let outcome = pipeline::analyze_table(&cfg, &table, None, None)?;
                    match &out {
                        Some(path) => {
                            // The table file stays loadable; the report
                            // goes to stdout.
                            emit(&table.render(), Some(path))?;
                            print!("{}", render_report(&outcome.report, Some(&cfg)));
                        }
                        None => {
                            let mut text = table.render();
                            text.push('\n');
                            text.push_str(&render_report(&outcome.report, Some(&cfg)));
                            print!("{text}");
                        }
                    }
                }
                Some(frames) => {
                    let sim = SimOptions {
                        reference_rate_mhz: ref_rate_mhz,
                    };
                    let mc =
                        pipeline::run_monte_carlo(&cfg, &noise, frames, seed, ds_half, &sim)?;
                    let mut text = String::new();
                    use std::fmt::Write as _;
                    let _ = writeln!(text, "frames = {frames}");
                    let _ = writeln!(text, "seed = {seed}");
                    let _ = writeln!(text, "detected_total = {}", mc.counts.detected_total());
                    let _ = writeln!(text, "raw_key_bits = {}", mc.raw_key_bits);
                    let _ = writeln!(text, "qber_before_aopp = {:.6}", mc.qber_before);
                    let _ = writeln!(text, "pairs_formed = {}", mc.pairs_formed);
                    let _ = writeln!(text, "survived_bits = {}", mc.survived_bits);
                    let _ = writeln!(text, "qber_after_aopp = {:.6e}", mc.qber_after);
                    let _ = writeln!(text, "survived_fraction = {:.6}", mc.survived_fraction);
                    if let Some(xx) = &mc.xx {
                        let _ = writeln!(text, "xx_accepted = {}", xx.accepted);
                        let _ = writeln!(text, "xx_errors = {}", xx.errors);
                        let _ = writeln!(text, "xx_qber = {:.6}", xx.qber);
                    }
                    if let Some(report) = &mc.report {
                        text.push('\n');
                        text.push_str(&render_report(report, Some(&cfg)));
                    }
                    emit(&text, out.as_ref())?;
                }
            }
        }
        Command::Analyze {
            common,
            counts,
            ds_half,
            untagged,
            out,
        } => {
            let (cfg, _) = load_config(&common)?;
            let table = CountsTableFile::load(&counts)
                .with_context(|| format!("loading counts table {counts:?}"))?;
            let untagged = match untagged.as_deref() {
                None => None,
                Some(raw) => Some(
                    UntaggedSources::parse(raw)
                        .ok_or_else(|| anyhow::anyhow!("--untagged must be `yz` or `z`"))?,
                ),
            };
            // --n-total re-analyzes a proportionally curtailed dataset.
            let outcome =
                pipeline::analyze_table_curtailed(&cfg, &table, ds_half, untagged, common.n_total)?;
            if let Some(dev) = outcome.table_deviation {
                if dev.abs() > 0.05 {
                    anyhow::bail!(
                        "counts table inconsistent: cell sum deviates from detected_total by {:.1}%",
                        100.0 * dev
                    );
                }
                if dev.abs() > 1e-6 {
                    eprintln!(
                        "note: cell sum deviates from detected_total by {:.2}%",
                        100.0 * dev
                    );
                }
            }
            emit(&render_report(&outcome.report, Some(&cfg)), out.as_ref())?;
        }
        Command::Optimize {
            common,
            starts,
            seed,
            out,
        } => {
            let (cfg, noise) = load_config(&common)?;
            let pinned = (cfg.alice.clone(), 8.0);
            let best = optimize_params(
                &cfg,
                &noise,
                &ParameterBox::default(),
                starts,
                seed,
                &[pinned],
            )?;
            let mut text = String::new();
            use std::fmt::Write as _;
            let _ = writeln!(text, "rate = {:.6e}", best.rate);
            let _ = writeln!(text, "ds_half_deg = {}", best.ds_half_deg);
            let _ = writeln!(text, "mu_x = {:.6}", best.settings.mu_x);
            let _ = writeln!(text, "mu_y = {:.6}", best.settings.mu_y);
            let _ = writeln!(text, "mu_z = {:.6}", best.settings.mu_z);
            let _ = writeln!(text, "p_v = {:.6}", best.settings.p_v);
            let _ = writeln!(text, "p_x = {:.6}", best.settings.p_x);
            let _ = writeln!(text, "p_y = {:.6}", best.settings.p_y);
            let _ = writeln!(text, "p_z = {:.6}", best.settings.p_z);
            let _ = writeln!(text, "evaluations = {}", best.evaluations);
            emit(&text, out.as_ref())?;
        }
        Command::Sweep {
            common,
            from,
            to,
            step,
            ds_half,
            reoptimize,
            seed,
            out,
        } => {
            anyhow::ensure!(step > 0.0 && to >= from, "need step > 0 and to >= from");
            let (cfg, noise) = load_config(&common)?;
            let mut distances = Vec::new();
            let mut d = from;
            while d <= to + 1e-9 {
                distances.push(d);
                d += step;
            }
            let mode = if reoptimize {
                SweepMode::Reoptimized {
                    bounds: ParameterBox::default(),
                    n_starts: 2,
                    seed,
                }
            } else {
                SweepMode::Fixed {
                    ds_half_deg: ds_half,
                }
            };
            let points = sweep_distance(&cfg, &noise, &distances, &mode);
            emit(&render_sweep_csv(&points), out.as_ref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
