use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jpddm::commands::{self, GuideSource, EXIT_ORACLE_FAILED};
use jpddm::config::RunConfig;
use jpddm::Error;

/// Conditional score-diffusion image synthesis.
///
/// Exit codes: 0 ok, 1 other failure, 2 config, 3 I/O or file format,
/// 4 missing dataset, 5 training diverged, 6 shape or schedule mismatch,
/// 7 oracle check failed.
#[derive(Parser)]
#[command(name = "jpddm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML). Omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired dataset described by `[data]`.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the score network on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the model and optimizer state saved in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Sample targets for guide images.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Guide image (`.jpim` or `.pgm`); repeatable.
        #[arg(long, conflicts_with = "data")]
        guide: Vec<PathBuf>,
        /// Dataset to take guides from; all held-out pairs unless `--index` is given.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset pair index; repeatable.
        #[arg(long, requires = "data")]
        index: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR of candidate images against same-named references.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Directory for `eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the sampler against analytic scores and report pass/fail.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Directory for `oracle.csv` and the config snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("JPDDM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("JPDDM_THREADS must be a non-negative integer, got {v:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<i32, Error> {
    init_threads()?;
    match cli.command {
        Command::GenerateData { common, out } => {
            let cfg = load_config(&common)?;
            let m = commands::generate_data(&cfg, &out)?;
            println!(
                "wrote {} pairs ({}x{}) to {}",
                m.entries.len(),
                m.height,
                m.width,
                show(&out)
            );
        }
        Command::Train {
            common,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(&common)?;
            let s = commands::train_run(&cfg, &data, &out, resume)?;
            println!("trained {} iterations into {}", s.records.len(), show(&out));
            if let (Some(a), Some(b)) = (s.first_loss, s.last_loss) {
                println!("loss {a:.6} -> {b:.6}");
            }
        }
        Command::Sample {
            common,
            checkpoint,
            guide,
            data,
            index,
            out,
        } => {
            let cfg = load_config(&common)?;
            let source = match data {
                Some(dir) if index.is_empty() => GuideSource::Heldout { dir },
                Some(dir) => GuideSource::Dataset { dir, indices: index },
                None if guide.is_empty() => {
                    return Err(Error::Argument("sample needs --guide or --data".into()));
                }
                None => GuideSource::Files(guide),
            };
            let r = commands::sample_run(&cfg, &checkpoint, &source, &out)?;
            let dev = r.records.iter().map(|x| x.max_guide_deviation).fold(0.0, f64::max);
            println!(
                "wrote {} samples to {} (max guide deviation {dev:e})",
                r.records.len(),
                show(&out)
            );
        }
        Command::Eval {
            common,
            reference,
            candidate,
            out,
        } => {
            load_config(&common)?;
            let r = commands::eval_run(&reference, &candidate, out.as_deref())?;
            print!("{}", r.to_csv());
            print!("{}", r.summary());
        }
        Command::OracleCheck { common, out } => {
            let cfg = load_config(&common)?;
            let r = commands::oracle_check_run(&cfg, out.as_deref())?;
            print!("{}", r.summary());
            if !r.passed() {
                let names: Vec<String> = r
                    .failures()
                    .iter()
                    .map(|f| format!("{} (M={})", f.name, f.corrector_steps))
                    .collect();
                eprintln!("failed: {}", names.join(", "));
                return Ok(EXIT_ORACLE_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
