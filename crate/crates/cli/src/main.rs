use clap::{Parser, Subcommand};
use maskmed::harness::gradsuite::{self, DEFAULT_SEEDS};
use maskmed::harness::{
    attention_budget, dump_embeddings, evaluate_dir, evaluate_heldout, gen_phantom, infer, train_from, write_phantoms, Checkpoint, PhantomSpec,
    RunConfig, Vol3d,
};
use maskmed::Error;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

/// Masked multi-scale segmentation with full-scale deformable fusion on 3D volumes.
#[derive(Parser)]
#[command(name = "maskmed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom cases (image + label volumes).
    Phantom {
        /// file of phantom.* keys; defaults apply to missing keys
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on freshly generated phantoms, then score the held-out set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// continue from a checkpoint (its embedded config is used)
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Per-class Dice of a checkpoint on a directory of cases.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict a label volume.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        /// number of seeds per operation
        #[arg(long, default_value_t = DEFAULT_SEEDS.len())]
        seeds: usize,
    },
    /// Class and mask embeddings of every stage as CSV.
    DumpEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        /// input volume; defaults to a phantom drawn from the checkpoint's config
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention-buffer sizes of deformable versus dense fusion.
    BenchAttn {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the full configuration with every key resolved.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> maskmed::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cmd: Command) -> maskmed::Result<()> {
    match cmd {
        Command::Phantom { spec, out } => {
            let spec = match spec {
                Some(p) => PhantomSpec::parse(&std::fs::read_to_string(p)?)?,
                None => PhantomSpec::default(),
            };
            let files = write_phantoms(&spec, &out)?;
            println!("wrote {} cases to {}", files.len() / 2, out.display());
        }
        Command::Train { config, out, resume } => {
            let state = match resume {
                Some(p) => Checkpoint::load(&p)?,
                None => Checkpoint::fresh(&load_config(&config)?)?,
            };
            let started = Instant::now();
            let done = train_from(state, Some(&out))?;
            println!("trained {} epochs in {:.1}s", done.checkpoint.epoch, started.elapsed().as_secs_f64());
            let cfg = &done.checkpoint.config;
            if cfg.train.eval_cases > 0 {
                let report = evaluate_heldout(&done.checkpoint.model, cfg)?;
                std::fs::write(out.join("heldout.csv"), format!("{report}\n"))?;
                println!("held-out mean foreground Dice {:.4}", report.mean_foreground());
            }
        }
        Command::Eval { ckpt, data } => {
            let report = evaluate_dir(&Checkpoint::load(&ckpt)?, &data)?;
            println!("{report}");
        }
        Command::Infer { ckpt, input, out } => {
            let labels = infer(&Checkpoint::load(&ckpt)?, &input, &out)?;
            println!("wrote {:?} labels to {}", labels.extents, out.display());
        }
        Command::Gradcheck { op, seeds } => {
            if seeds == 0 {
                return Err(Error::Config("need at least one seed".into()));
            }
            let seeds: Vec<u64> = (1..=seeds as u64).collect();
            let reports = gradsuite::run_suite(op.as_deref(), &seeds)?;
            reports.iter().for_each(|r| println!("{r}"));
            let failed = reports.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", reports.len())));
            }
            println!("all {} gradient checks passed", reports.len());
        }
        Command::DumpEmbeddings { ckpt, input, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let vol = match input {
                Some(p) => Vol3d::read(&p)?,
                None => gen_phantom(&ckpt.config.phantom)?.0,
            };
            for p in dump_embeddings(&ckpt.model, &vol, &out)? {
                println!("{}", p.display());
            }
        }
        Command::BenchAttn { config } => println!("{}", attention_budget(&load_config(&config)?)?),
        Command::Config { config } => print!("{}", load_config(&config)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
