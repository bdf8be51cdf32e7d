use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ted_core::config::{BackendKind, RunConfig};
use ted_core::dataset::load_jsonl;
use ted_core::distill::{compress_store, Engine, TrainOptions};
use ted_core::eval::evaluate;
use ted_core::prompts::PromptLibrary;
use ted_core::runtime::build_client;
use ted_core::{ExperienceStore, ModelRole, TokenLedger};

#[derive(Parser, Debug)]
#[command(
    name = "ted",
    version,
    about = "Distill a teacher model into a student's prompt context"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the training loop and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        group_size: Option<usize>,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many batches.
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// Evaluate a store with Mean@k.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Directory for report.json and report.md.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print a store's items, highest utility first.
    Inspect {
        #[arg(long)]
        store: PathBuf,
    },
    /// Run one compression pass regardless of the trigger.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        /// Where to write the compressed store; defaults to overwriting --store.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a commented default config.
    InitConfig {
        #[arg(long, default_value = "ted.json")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    student_endpoint: Option<String>,
    #[arg(long)]
    teacher_endpoint: Option<String>,
    /// Use scripted backends for both models.
    #[arg(long)]
    offline: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(url) = &self.student_endpoint {
            config.student.kind = BackendKind::Http;
            config.student.endpoint = Some(url.clone());
        }
        if let Some(url) = &self.teacher_endpoint {
            config.teacher.kind = BackendKind::Http;
            config.teacher.endpoint = Some(url.clone());
        }
        if self.offline {
            config.force_offline();
        }
        Ok(config)
    }
}

fn prompts_for(config: &RunConfig) -> Result<PromptLibrary> {
    Ok(match &config.prompts_dir {
        Some(dir) => PromptLibrary::load_dir(dir)?,
        None => PromptLibrary::builtin(),
    })
}

fn dataset_path(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    match flag.or_else(|| config.dataset.clone()) {
        Some(p) => Ok(p),
        None => bail!("no dataset: pass --dataset or set \"dataset\" in the config"),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json prints"));
}

async fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            common,
            dataset,
            epochs,
            group_size,
            resume,
            max_batches,
        } => {
            let mut config = common.load()?;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            if let Some(n) = group_size {
                config.group_size = n;
            }
            config.validate()?;
            let path = dataset_path(dataset, &config)?;
            let samples = load_jsonl(&path)?;
            let engine = Engine::new(
                config.clone(),
                build_client(ModelRole::Student, &config)?,
                build_client(ModelRole::Teacher, &config)?,
                prompts_for(&config)?,
            );
            let report = engine.train(&samples, TrainOptions { resume, max_batches }).await?;
            print_json(&serde_json::json!({
                "run_dir": engine.run_dir(),
                "completed": report.completed,
                "samples_processed": report.samples_processed,
                "samples_skipped": report.samples_skipped,
                "compressions": report.compressions,
                "items": report.final_store.len(),
                "ledger": report.ledger,
                "store_checksum": report.store_checksum,
            }));
        }
        Command::Eval {
            common,
            dataset,
            store,
            k,
            out,
        } => {
            let mut config = common.load()?;
            if let Some(k) = k {
                config.k = k;
            }
            config.validate()?;
            let samples = load_jsonl(&dataset_path(dataset, &config)?)?;
            let store = ExperienceStore::restore(&store)?;
            let student = build_client(ModelRole::Student, &config)?;
            let report = evaluate(
                &samples,
                &store,
                &student,
                &prompts_for(&config)?,
                config.k,
                config.usage_recording.evaluation,
                &config.prices,
            )
            .await?;
            report
                .write(&out)
                .with_context(|| format!("writing reports to {}", out.display()))?;
            print_json(&serde_json::json!({
                "mean_at_k": report.mean_at_k,
                "k": report.k,
                "problems": report.problems,
                "cost": report.cost,
                "store_checksum": report.store_checksum,
                "report": out.join("report.json"),
            }));
        }
        Command::Inspect { store } => {
            let store = ExperienceStore::restore(&store)?;
            let mut out = std::io::stdout().lock();
            for item in store.ranked() {
                let line = writeln!(
                    out,
                    "[{}] usage={} utility={:.4} {}",
                    item.id,
                    item.usage_count,
                    item.utility(),
                    item.text
                );
                match line {
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => break,
                    other => other?,
                }
            }
        }
        Command::Compress { common, store, out } => {
            let config = common.load()?;
            let mut s = ExperienceStore::restore(&store)?;
            if s.is_empty() {
                bail!("store {} is empty; nothing to compress", store.display());
            }
            let teacher = build_client(ModelRole::Teacher, &config)?;
            let mut ledger = TokenLedger::default();
            let report = compress_store(&mut s, &teacher, &prompts_for(&config)?, config.word_cap, &mut ledger).await;
            let target = out.unwrap_or(store);
            s.persist(&target)?;
            print_json(&serde_json::json!({ "compression": report, "ledger": ledger, "store": target }));
        }
        Command::InitConfig { out } => write_config(&out)?,
    }
    Ok(())
}

fn write_config(out: &Path) -> Result<()> {
    if out.exists() {
        bail!("{} already exists", out.display());
    }
    std::fs::write(out, RunConfig::commented_default()).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
