// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use bpdg::config::Preset;
use bpdg::corpus::TieBreak;
use bpdg::fusion::WeightMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bpdg", version, about = "Bilateral personalized dialogue generation")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed for corpus generation, initialisation and shuffling.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Directory for every artifact the command writes.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train, valid, random-test and biased-test splits.
    GenCorpus(GenCorpusArgs),
    /// Fill every utterance's persona label with the heuristic labeller.
    Label(LabelArgs),
    /// Train the generator.
    Train(TrainArgs),
    /// Train the relevance and bilateral persona classifiers.
    TrainAux(TrainAuxArgs),
    /// Reply to one dialogue context.
    Generate(GenerateArgs),
    /// Score generated replies on a test split.
    Eval(EvalArgs),
    /// Interactive conversation on the terminal.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub valid: Option<usize>,
    /// Size of each test split.
    #[arg(long)]
    pub test: Option<usize>,
    /// Persona share of train and valid references, split evenly.
    #[arg(long)]
    pub train_rate: Option<f64>,
    /// Persona share of random-test references, split evenly.
    #[arg(long)]
    pub random_rate: Option<f64>,
    /// Persona share of biased-test references, split evenly.
    #[arg(long)]
    pub biased_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Attribute tables; defaults to the corpus directory's.
    #[arg(long, value_name = "PATH")]
    pub tables: Option<PathBuf>,
    #[arg(long, value_parser = parse_tie)]
    pub tie_break: Option<TieBreak>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the corpus files; defaults to --out.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    /// Context rows per utterance.
    #[arg(long)]
    pub n: Option<usize>,
    /// Drop the context language-model loss.
    #[arg(long)]
    pub no_lm: bool,
    /// Fix fusion weights to the context and drop the presence loss.
    #[arg(long)]
    pub no_paf: bool,
    /// Do not add persona embeddings to context rows.
    #[arg(long)]
    pub no_pemb: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AuxTarget {
    Relevance,
    Bipersona,
}

#[derive(Debug, Args)]
pub struct TrainAuxArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Train only one of the two classifiers.
    #[arg(long, value_enum)]
    pub only: Option<AuxTarget>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Generator checkpoint; defaults to <out>/model.ckpt.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Relevance classifier; defaults to <out>/relevance.ckpt.
    #[arg(long, value_name = "PATH")]
    pub relevance: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<WeightMode>,
    /// Take the top beam instead of re-ranking by relevance.
    #[arg(long)]
    pub no_cmim: bool,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON object with both profiles and the turns so far, ending with
    /// the user's.
    #[arg(long, value_name = "PATH")]
    pub input_dialogue: PathBuf,
    #[command(flatten)]
    pub checkpoints: CheckpointArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Write every beam candidate with its scores as JSON.
    #[arg(long, value_name = "PATH")]
    pub dump_candidates: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestSet {
    Random,
    Biased,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub test: TestSet,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub checkpoints: CheckpointArgs,
    /// Bilateral persona classifier; defaults to <out>/bipersona.ckpt.
    #[arg(long, value_name = "PATH")]
    pub bipersona: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Evaluate only the first N dialogues.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report path; defaults to a name built from the test set and flags.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Also write one generated reply per line.
    #[arg(long, value_name = "PATH")]
    pub hypotheses: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// For example `gender=female;area=rome;interests=music,chess`.
    #[arg(long)]
    pub user_profile: String,
    #[arg(long)]
    pub robot_profile: String,
    #[command(flatten)]
    pub checkpoints: CheckpointArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Print the fusion weights after every reply.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Toy,
    Large,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Large => Preset::Large,
        }
    }
}

fn parse_mode(s: &str) -> Result<WeightMode, String> {
    WeightMode::parse(s).map_err(|e| e.to_string())
}

fn parse_tie(s: &str) -> Result<TieBreak, String> {
    match s {
        "user" => Ok(TieBreak::User),
        "robot" => Ok(TieBreak::Robot),
        _ => Err(format!("expected user or robot, got {s:?}")),
    }
}
