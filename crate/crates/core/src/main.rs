use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hmp_eval::diffusion::ScheduleKind;
use hmp_eval::pipeline::{self, CliConfig, FeatureChoice, SampleOptions};
use hmp_eval::protocol::{Preset, PresetName};
use hmp_eval::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hmp-eval", version, about = "Stochastic human motion prediction evaluation toolkit")]
struct Cli {
    /// JSON run configuration (preset, seed, jobs).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads. Outputs do not depend on this value.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut manifest clips into observation/prediction segments.
    Segment {
        manifest: PathBuf,
        /// h36m, amass-cross or custom (custom needs --config).
        #[arg(long)]
        protocol: Option<String>,
        /// Only use clips of this split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group segments into multimodal ground truth by last observed pose.
    Mmgt {
        segments: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// L2 radius in meters; defaults to the preset value.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a prediction bundle repeating the last observed pose.
    ZeroVelocity {
        mmgt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric suite for a prediction bundle.
    Evaluate {
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mmgt: PathBuf,
        /// Feature manifest for FID.
        #[arg(long, conflicts_with = "identity_features")]
        features: Option<PathBuf>,
        /// FID on flattened final poses (not comparable with classifier FID).
        #[arg(long)]
        identity_features: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw latent codes from a serialized linear denoiser.
    Sample {
        denoiser: PathBuf,
        cond: PathBuf,
        #[arg(long, default_value = "sqrt")]
        schedule: String,
        /// Schedule offset; defaults per schedule kind.
        #[arg(long)]
        offset: Option<f64>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomly rotate about Z and mirror every clip.
    Augment {
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_preset(config: Option<&CliConfig>, flag: Option<&str>) -> Result<Preset> {
    match (flag, config) {
        (Some(name), cfg) => {
            let name: PresetName = name.parse()?;
            match cfg {
                Some(cfg) if cfg.preset == name => cfg.preset(),
                _ => Preset::by_name(name),
            }
        }
        (None, Some(cfg)) => cfg.preset(),
        (None, None) => Err(Error::InvalidInput("--protocol or --config is required".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_ref().map(CliConfig::load).transpose()?;
    let jobs = cli.jobs.or(config.as_ref().and_then(|c| c.jobs));
    let config_seed = config.as_ref().and_then(|c| c.seed);
    pipeline::with_jobs(jobs, move || -> Result<()> {
        match cli.command {
            Command::Segment {
                manifest,
                protocol,
                split,
                out,
            } => {
                let preset = resolve_preset(config.as_ref(), protocol.as_deref())?;
                let file = pipeline::run_segment(&manifest, preset, split.as_deref(), &out)?;
                println!(
                    "{} segments ({} clips skipped) -> {}",
                    file.segments.len(),
                    file.skipped_count,
                    out.display()
                );
            }
            Command::Mmgt {
                segments,
                manifest,
                threshold,
                out,
            } => {
                let file = pipeline::run_mmgt(&manifest, &segments, threshold, &out)?;
                println!(
                    "mm-GT for {} segments, mean group size {:.3} -> {}",
                    file.groups.len(),
                    file.mean_group_size,
                    out.display()
                );
            }
            Command::ZeroVelocity { mmgt, manifest, n, out } => {
                let bundle = pipeline::run_zero_velocity(&manifest, &mmgt, n, &out)?;
                println!("{} prediction sets -> {}", bundle.entries.len(), out.display());
            }
            Command::Evaluate {
                predictions,
                manifest,
                mmgt,
                features,
                identity_features,
                out,
            } => {
                let features = match (features, identity_features) {
                    (Some(p), _) => FeatureChoice::File(p),
                    (None, true) => FeatureChoice::Identity,
                    (None, false) => FeatureChoice::None,
                };
                let report = pipeline::run_evaluate(&predictions, &manifest, &mmgt, &features, &out)?;
                for m in &report.metrics {
                    println!("{:>6} {:.3}", m.name, m.aggregate);
                }
                println!("report -> {}", out.display());
            }
            Command::Sample {
                denoiser,
                cond,
                schedule,
                offset,
                steps,
                eta,
                n,
                stop_after,
                seed,
                out,
            } => {
                let opts = SampleOptions {
                    schedule: schedule.parse::<ScheduleKind>()?,
                    offset,
                    steps,
                    eta,
                    samples: n,
                    stop_after,
                    seed: seed.or(config_seed).unwrap_or(0),
                };
                pipeline::run_sample(&denoiser, &cond, &opts, &out)?;
                println!("N={} M={} -> {}", opts.samples, opts.steps, out.display());
            }
            Command::Augment { manifest, seed, out } => {
                let m = pipeline::run_augment(&manifest, seed.or(config_seed).unwrap_or(0), &out)?;
                println!("{} clips augmented -> {}", m.clips.len(), out.display());
            }
        }
        Ok(())
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
