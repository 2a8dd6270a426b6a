//! `mmgen`: synthesize data, train, sample, evaluate.

mod commands;
mod interrupt;
mod manifest;
mod render;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mmgen", version, about = "Multi-modal flow-matching generator on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML run configuration; defaults apply to anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the data, training and sampling seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write grid.png.
    #[arg(long)]
    pub png: bool,
}

/// An rgb (or conditioning) image, from a PPM file or a dataset entry.
#[derive(Args, Clone, Debug)]
pub struct InputArgs {
    /// Binary PPM at the model's resolution.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    pub input: Option<PathBuf>,
    /// Dataset container to take the input from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "data")]
    pub index: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Append,
    Replace,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset container.
    MakeData {
        #[command(flatten)]
        common: Common,
        /// Write the held-out split instead of the training split.
        #[arg(long)]
        val: bool,
        /// Number of samples (default from the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train, or resume training, on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Total step count to reach (default from the config).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from <out>/checkpoint.mmck.
        #[arg(long)]
        resume: bool,
    },
    /// Generate all modalities from noise.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class label; unconditional when omitted.
        #[arg(long)]
        class: Option<u32>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Dataset whose depth ranges set the depth decode range.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate everything else given one modality.
    Condgen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Conditioning modality name, e.g. depth, normal or seg.
        #[arg(long)]
        condition: String,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        class: Option<u32>,
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Predict the dense modalities of an rgb image.
    Understand {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Understand an image into one modality, then generate new rgb from it.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Intermediate modality.
        #[arg(long)]
        via: String,
        #[arg(long)]
        class: Option<u32>,
        /// Seed of the understanding stage; --seed drives the generation stage.
        #[arg(long, default_value_t = 0)]
        understand_seed: u64,
    },
    /// Add or swap in a modality and fine-tune.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset carrying the adapted modality layout.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Modality replaced in replace mode.
        #[arg(long, required_if_eq("mode", "replace"))]
        slot: Option<String>,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
    },
    /// Run the evaluation suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training container, used for the class probe and depth range.
        #[arg(long)]
        data: PathBuf,
        /// Held-out container.
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
    },
}

fn main() -> anyhow::Result<()> {
    use commands as c;
    match Cli::parse().command {
        Command::MakeData { common, val, count } => c::make_data(&common, val, count),
        Command::Train { common, data, steps, resume } => c::train(&common, &data, steps, resume),
        Command::Sample { common, checkpoint, class, n, data } => {
            c::sample(&common, &checkpoint, class, n, data.as_deref())
        }
        Command::Condgen { common, checkpoint, condition, input, class, n } => {
            c::condgen(&common, &checkpoint, &condition, &input, class, n)
        }
        Command::Understand { common, checkpoint, input } => c::understand(&common, &checkpoint, &input),
        Command::Translate { common, checkpoint, input, via, class, understand_seed } => {
            c::translate(&common, &checkpoint, &input, &via, class, understand_seed)
        }
        Command::Adapt { common, checkpoint, data, mode, slot, steps } => {
            c::adapt(&common, &checkpoint, &data, mode, slot.as_deref(), steps)
        }
        Command::Eval { common, checkpoint, data, val, n } => c::eval(&common, &checkpoint, &data, &val, n),
    }
}
