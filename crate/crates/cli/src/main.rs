use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grla_cli::commands::{self, DataSource, InjectLeak};
use grla_cli::repro::run_repro;
use grla_cli::world::Part;
use grla_cli::CliResult;

/// Domain-adversarial training, evaluation and attribution.
#[derive(Parser)]
#[command(name = "grla", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directories to score, each laid out as <sublabel>/<image>.
    #[arg(long = "data", num_args = 1.., conflicts_with = "config")]
    data: Vec<PathBuf>,
    /// Binarization preset for --data directories (default: the directory name).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lenient: bool,
    /// Score every domain of this experiment config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Part,
    #[arg(long)]
    seed_override: Option<u64>,
}

impl DataArgs {
    fn source(self) -> CliResult<DataSource> {
        match self.config {
            Some(path) => Ok(DataSource::Config {
                path,
                part: self.split,
                seed_override: self.seed_override,
            }),
            None if self.data.is_empty() => Err(grla_cli::CliError::Config("data: pass --data DIR or --config FILE".into())),
            None => Ok(DataSource::Dirs {
                dirs: self.data,
                preset: self.preset,
                lenient: self.lenient,
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train per an experiment config and score every split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lenient: bool,
    },
    /// Score one checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the probability average of several checkpoints.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every model on every dataset, as a table and a heatmap.
    Crossdomain {
        /// NAME=PATH, or a checkpoint path.
        #[arg(long, num_args = 1.., required = true)]
        model: Vec<String>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map the colours of an image tree onto a reference.
    StainNormalize {
        #[arg(long)]
        input: PathBuf,
        /// Image directory, single image, or stats TOML.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrated Gradients for one image.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output prefix; writes PREFIX_gray.png, PREFIX_overlay.png and PREFIX.grlt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// `channel`, `pixel` or an image path.
        #[arg(long, default_value = "channel")]
        baseline: String,
        /// Class to attribute (default: the predicted class).
        #[arg(long)]
        class: Option<usize>,
    },
    /// Check that target labels cannot reach the label branch.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_leak: Option<InjectLeak>,
    },
    /// Run the five reproduction arms and summarize them.
    Repro {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Write synthetic domains as image trees.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Presets to generate, in stream order.
        #[arg(long, num_args = 1.., default_values = ["source", "auxiliary", "target"])]
        domains: Vec<String>,
    },
}

fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Train {
            config,
            seed_override,
            out,
            lenient,
        } => commands::train(&config, seed_override, out, lenient),
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data.source()?, &out),
        Command::Ensemble { checkpoint, data, out } => commands::ensemble(&checkpoint, &data.source()?, &out),
        Command::Crossdomain { model, data, out } => commands::crossdomain(&model, &data.source()?, &out),
        Command::StainNormalize { input, reference, out } => commands::stain_normalize(&input, &reference, &out),
        Command::Attribute {
            checkpoint,
            image,
            out,
            steps,
            baseline,
            class,
        } => commands::attribute(&checkpoint, &image, &out, steps, &baseline, class),
        Command::Verify {
            config,
            seed_override,
            out,
            inject_leak,
        } => commands::verify(&config, seed_override, out, inject_leak),
        Command::Repro {
            configs,
            out,
            epochs,
            seed_override,
        } => run_repro(&configs, &out, epochs, seed_override),
        Command::Synth {
            out,
            n_per_class,
            size,
            seed,
            domains,
        } => commands::synth(&out, n_per_class, size, seed, &domains),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("GRLA_THREADS").ok().and_then(|v| v.parse().ok()) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
