use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use inhabit_core::config::RunConfig;

mod commands;
mod records;

/// Environment variable providing the default output root.
pub const OUT_ENV: &str = "INHABIT_OUT";

#[derive(Parser)]
#[command(
    name = "inhabit",
    version,
    about = "Generate 3D human bodies posed plausibly inside synthetic rooms",
    after_help = "Configuration: every knob has a documented default; see `inhabit config-keys`.\n\
                  Values come from --config FILE (key = value lines) and --set overrides."
)]
struct Cli {
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable), e.g. --set train.epochs=5
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the procedural body template file (PSBT).
    Template {
        /// Output template path.
        #[arg(long)]
        out: PathBuf,
        /// Decoder seed (default: config template.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize the dataset: rooms, SDFs, interactions, rendered views.
    Synth {
        /// Dataset root (default: $INHABIT_OUT/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rooms: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Signed distance grid for a mesh file (PLY or OBJ).
    Sdf {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid nodes per axis (default: config sdf.dims).
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        padding: Option<f64>,
    },
    /// Generate virtual cameras around a body position and render view
    /// bundles.
    Views {
        #[arg(long)]
        mesh: PathBuf,
        /// Output directory; bundles land in <out>/<k>/.
        #[arg(long)]
        out: PathBuf,
        /// Body center "x,y,z" the cameras aim at.
        #[arg(long)]
        center: String,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the S1 or S2 generator on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path (PSIW).
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSONL log (default: alongside the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Architecture: s1 or s2 (default: config train.arch).
        #[arg(long)]
        arch: Option<String>,
        /// Enable the human-scene interaction losses after 75% of epochs.
        #[arg(long)]
        hs: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample bodies from a trained model conditioned on one dataset view.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// View path relative to the dataset root (default: first test view).
        #[arg(long)]
        view: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSONL of body records.
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine generated bodies against scene geometry.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Body records to refine (JSONL from `sample`).
        #[arg(long)]
        bodies: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace JSONL (one record per iteration per body).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Diversity and physical metrics for a body set.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bodies: PathBuf,
        /// Report file (key=value lines); also printed as a table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scene-dependent pose prior from generated samples.
    Prior {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        view: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a sweep through latent space.
    Traverse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        view: Option<String>,
        /// Latent dims to sweep, e.g. "0,1,4".
        #[arg(long)]
        dims: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export bodies and scene as colored PLY meshes for external viewers.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bodies: PathBuf,
        /// Output directory for body_###.ply and scene_<id>.ply files.
        #[arg(long)]
        out: PathBuf,
    },
    /// List every configuration key with its default and description.
    ConfigKeys,
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.merge_file(path)?;
    }
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got '{pair}'"))?;
        config.set(key.trim(), value.trim())?;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = match &cli.command {
        Command::Template { out, seed } => commands::template(&config, out, *seed),
        Command::Synth { out, rooms, samples, seed } => {
            commands::synth(&config, out.as_deref(), *rooms, *samples, *seed)
        }
        Command::Sdf { mesh, out, dims, padding } => {
            commands::sdf(&config, mesh, out, *dims, *padding)
        }
        Command::Views { mesh, out, center, count, seed } => {
            commands::views(&config, mesh, out, center, *count, *seed)
        }
        Command::Train { data, out, log, arch, hs, epochs, seed } => {
            commands::train(&config, data, out, log.as_deref(), arch.as_deref(), *hs, *epochs, *seed)
        }
        Command::Sample { model, data, view, n, seed, out } => {
            commands::sample(&config, model, data, view.as_deref(), *n, *seed, out)
        }
        Command::Fit { data, bodies, out, trace, iters } => {
            commands::fit(&config, data, bodies, out, trace.as_deref(), *iters)
        }
        Command::Eval { data, bodies, out, seed } => {
            commands::eval(&config, data, bodies, out.as_deref(), *seed)
        }
        Command::Prior { model, data, view, n, seed, out } => {
            commands::prior(&config, model, data, view.as_deref(), *n, *seed, out)
        }
        Command::Traverse { model, data, view, dims, steps, out } => {
            commands::traverse(&config, model, data, view.as_deref(), dims, *steps, out)
        }
        Command::Export { data, bodies, out } => commands::export(&config, data, bodies, out),
        Command::ConfigKeys => {
            for (key, default, doc) in RunConfig::schema() {
                println!("{key:24} {default:20} {doc}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
