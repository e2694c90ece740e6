mod commands;

use clap::{Args, Parser, Subcommand};
use followup_ft::adaptation::{SliceCount, Weighting};
use followup_ft::experiment::Experiment;
use followup_ft::postprocess::Task;
use followup_ft::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Base training, patient-specific fine-tuning and evaluation of follow-up
/// lesion segmentation on synthetic longitudinal cohorts.
#[derive(Parser, Debug)]
#[command(name = "followup-ft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the run seed and the phantom seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort into paths.data.
    GenPhantom {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base network on the cohort's training exams.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Rank a patient's baseline slices with the base network.
    SelectSlices {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        n_slices: Option<SliceCount>,
    },
    /// Fine-tune the head on a patient's baseline exam.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        n_slices: Option<SliceCount>,
        #[arg(long)]
        weighting: Option<Weighting>,
    },
    /// Write probability maps, binary masks and lesion objects.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Test patients to predict (default: all); the follow-up exam is used.
        #[arg(long)]
        patient: Vec<String>,
        /// `base` or `finetuned` (the patient's own checkpoint).
        #[arg(long, default_value = "base")]
        model: Model,
        /// Explicit checkpoint, used with --exam instead of --patient.
        #[arg(long, requires = "exam")]
        checkpoint: Option<PathBuf>,
        /// Exam manifest to predict.
        #[arg(long, requires = "checkpoint")]
        exam: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        /// Output directory (default: <output>/predictions/<model>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against the test cohort's follow-up annotations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory with one sub-directory of predictions per model.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Restricts the report to detection or segmentation metrics.
        #[arg(long)]
        task: Option<Task>,
    },
    /// Monte Carlo dropout uncertainty on a patient's follow-up exam.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patient: String,
        #[arg(long, default_value = "base")]
        model: Model,
        #[arg(long)]
        task: Option<Task>,
    },
    /// Run one of the sweeps end to end and print the summary table.
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// iterations_sweep, slices_sweep, weighting or uncertainty.
        #[arg(long)]
        experiment: Experiment,
        /// Worker threads over disjoint patients.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

impl std::str::FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "base" => Ok(Model::Base),
            "finetuned" => Ok(Model::Finetuned),
            _ => Err(Error::Config(format!("unknown model '{s}' (expected base or finetuned)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Base,
    Finetuned,
}

fn run(cli: Cli) -> followup_ft::Result<()> {
    use commands as c;
    match cli.command {
        Command::GenPhantom { common } => c::gen_phantom(&common),
        Command::TrainBase { common, iterations } => c::train_base(&common, iterations).map(|_| ()),
        Command::SelectSlices { common, patient, n_slices } => c::select_slices(&common, &patient, n_slices),
        Command::Finetune { common, patient, iterations, n_slices, weighting } => {
            c::finetune(&common, &patient, iterations, n_slices, weighting)
        }
        Command::Predict { common, patient, model, checkpoint, exam, task, out } => {
            c::predict(&common, &patient, model, checkpoint.zip(exam), task, out)
        }
        Command::Evaluate { common, pred, task } => c::evaluate(&common, pred, task),
        Command::Uncertainty { common, patient, model, task } => c::uncertainty(&common, &patient, model, task),
        Command::Reproduce { common, experiment, jobs } => c::reproduce(&common, experiment, jobs),
    }
}

/// 1 for usage and configuration errors, 2 for data errors.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownLayer(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(3)
        }
    }
}
