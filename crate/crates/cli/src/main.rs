use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camoseg::eval::EvalMode;
use camoseg::workflow;
use camoseg::{Config, Error, EvalResult, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "camoseg", version, about = "Open-vocabulary camouflaged instance segmentation")]
struct Cli {
    /// TOML configuration; `preset = "full"` selects full-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    ClassAgnostic,
    ClassAware,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::ClassAgnostic => EvalMode::ClassAgnostic,
            Mode::ClassAware => EvalMode::ClassAware,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic `train/` and `val/` splits.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a split directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mask AP of a checkpoint on a split directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Zero the text embeddings at evaluation time.
        #[arg(long)]
        no_text: bool,
    },
    /// Segment a PNG or a directory of PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary JSON replacing the checkpoint's categories.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Classify against primary names only.
        #[arg(long)]
        no_prompt_ensemble: bool,
    },
    /// Feature clusters and attention maps of one image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(short, long, default_value_t = 4)]
        k: usize,
        /// Attention maps are written for this many instances.
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Train and evaluate the full setting and each switched variant.
    Ablate {
        /// Directory holding `train/` and `val/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        switches: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_row(label: &str, r: &EvalResult) {
    println!("{:<24} {:>6} {:>6} {:>6}", "", "AP", "AP50", "AP75");
    println!(
        "{:<24} {:>6.1} {:>6.1} {:>6.1}",
        label,
        100.0 * r.ap,
        100.0 * r.ap50,
        100.0 * r.ap75
    );
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData { out } => {
            let cfg = load_config(&cli)?;
            workflow::generate_data(&cfg, cfg.seed, out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { data, out, resume } => {
            let cfg = load_config(&cli)?;
            let outcome = workflow::run_train(&cfg, data, out, resume.as_deref())?;
            if let Some(last) = outcome.log.last() {
                println!("iteration {} total loss {:.6}", last.iter, last.total);
            }
            println!("wrote {}", out.join(workflow::CHECKPOINT_FILE).display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            mode,
            no_text,
        } => {
            require_file(checkpoint, "checkpoint")?;
            let mut model = camoseg::Checkpoint::load(checkpoint)?.model()?;
            model.ablation.no_text |= *no_text;
            let mode = mode.map(EvalMode::from).unwrap_or(model.config.eval.mode);
            let samples = workflow::eval_samples(&model, data, mode)?;
            let r = workflow::evaluate_samples(&model, &samples, mode)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join(workflow::METRICS_FILE), r.to_json()?)?;
            print_row(&model.ablation.describe(), &r);
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            vocab,
            no_prompt_ensemble,
        } => {
            require_file(checkpoint, "checkpoint")?;
            let mut model = workflow::load_model(checkpoint, vocab.as_deref())?;
            if *no_prompt_ensemble {
                model.config.text.prompt_ensemble = false;
            }
            for rec in workflow::run_infer(&model, input, out)? {
                println!("{}: {} instances", rec.image, rec.instances.len());
            }
        }
        Command::Visualize {
            checkpoint,
            image,
            out,
            k,
            top,
        } => {
            require_file(checkpoint, "checkpoint")?;
            require_file(image, "image")?;
            let model = workflow::load_model(checkpoint, None)?;
            let v = workflow::run_visualize(&model, image, *k, *top, out)?;
            println!("{} clusters -> {}", v.num_clusters, v.clusters.display());
        }
        Command::Ablate { data, out, switches } => {
            let cfg = load_config(&cli)?;
            let report = workflow::run_ablate(&cfg, switches, data, out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("CAMOSEG_NUM_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("cannot size the worker pool: {e}");
                }
            }
            _ => {
                eprintln!("error: CAMOSEG_NUM_WORKERS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_data() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
