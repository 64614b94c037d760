//! `styleprompt` command-line entry point.
//!
//! Exit codes: 0 success, 1 input error (bad arguments, config, files,
//! missing prerequisites), 2 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use styleprompt::config::RunConfig;
use styleprompt::fixtures::{write_overfit_corpus, write_toy_corpus};
use styleprompt::metrics::MetricsReport;
use styleprompt::pipeline::{cmd_build_dataset, cmd_evaluate, cmd_generate, cmd_train, Stage};
use styleprompt::Error;

#[derive(Parser)]
#[command(name = "styleprompt", version, about = "Caption plus reference-clip conditioned audio generation")]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Codec,
    Diffusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Overfit,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Cut annotated events into 2 s reference clips.
    BuildDataset,
    /// Train the mel codec or the conditioned diffusion model.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Generate audio for a caption and a reference clip.
    Generate {
        #[arg(long)]
        caption: String,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output directory (default: `<out_dir>/generated`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated audio against a reference clip index.
    Evaluate {
        /// Directory of generated WAVs (default: `<out_dir>/generated`).
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Reference `index.jsonl` (default: the built train split).
        #[arg(long)]
        reference_index: Option<PathBuf>,
        /// Report path (default: `<out_dir>/metrics.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic fixture corpus with manifests.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "overfit")]
        kind: FixtureKind,
    },
}

fn load_config(cli: &Cli) -> styleprompt::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.6}"))
}

fn print_report(report: &MetricsReport, path: &Path) {
    println!("generated files:     {}", report.generated);
    println!("reference clips:     {}", report.references);
    println!("FD:                  {}", fmt_opt(report.fd));
    println!("KL:                  {}", fmt_opt(report.kl));
    println!("Mel-Sim mean:        {}", fmt_opt(report.mel_sim_mean));
    println!("Mel-Sim max:         {}", fmt_opt(report.mel_sim_max));
    println!("same-ref cosine:     {}", fmt_opt(report.same_ref_cos_mean));
    println!("cross-ref cosine:    {}", fmt_opt(report.cross_ref_cos_mean));
    if !report.errors.is_empty() {
        println!("file errors:         {}", report.errors.len());
    }
    println!("report:              {}", path.display());
}

fn run(cli: &Cli) -> styleprompt::Result<()> {
    if let Command::MakeFixtures { out, kind } = &cli.command {
        let manifests = match kind {
            FixtureKind::Overfit => {
                let c = write_overfit_corpus(out)?;
                vec![c.train_manifest, c.valid_manifest]
            }
            FixtureKind::Toy => vec![write_toy_corpus(out)?],
        };
        for m in manifests {
            println!("{}", m.display());
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::BuildDataset => {
            let report = cmd_build_dataset(&cfg)?;
            for (split, r) in &report.splits {
                println!(
                    "{split}: {} entries, {} segments, {} clips kept, {} dropped by energy, {} entry errors",
                    r.entries,
                    r.segments,
                    r.kept,
                    r.dropped,
                    r.entry_errors.len()
                );
            }
            println!("report: {}", cfg.dataset_dir().join(styleprompt::pipeline::BUILD_REPORT).display());
        }
        Command::Train { stage } => {
            let stage = match stage {
                StageArg::Codec => Stage::Codec,
                StageArg::Diffusion => Stage::Diffusion,
            };
            let s = cmd_train(&cfg, stage)?;
            println!(
                "{}: {} steps, loss {:.6} -> {:.6}, best checkpoint {} (validation loss {:.6})",
                stage.name(),
                s.steps,
                s.first_loss,
                s.final_loss,
                s.best_checkpoint.display(),
                s.best_valid_loss
            );
        }
        Command::Generate {
            caption,
            reference,
            count,
            out,
        } => {
            for path in cmd_generate(&cfg, caption, reference, *count, out.as_deref())? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate {
            generated,
            reference_index,
            report,
        } => {
            let r = cmd_evaluate(&cfg, generated.as_deref(), reference_index.as_deref(), report.as_deref())?;
            print_report(&r, &report.clone().unwrap_or_else(|| cfg.report_path()));
        }
        Command::MakeFixtures { .. } => unreachable!(),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
