use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fmsd_cli::commands::{self, Layout};
use fmsd_cli::{CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "fmsd", version, about = "Multi-speaker multi-dialect flow-matching TTS on a synthetic corpus")]
struct Cli {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Short training and probe schedules.
    #[arg(long, global = true)]
    smoke: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default configuration.
    Defaults,
    /// Generate the synthetic corpus and print its manifest hash.
    GenCorpus,
    /// Train the configured variant.
    Train {
        #[arg(long)]
        resume: bool,
    },
    /// Train all four ablation variants.
    Ablate,
    /// Synthesize one utterance, or the parallel test triplets without --text.
    Synth {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires_all = ["reference", "dialect", "output"])]
        text: Option<String>,
        /// Reference frame file (.frm).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// One of wz, ad, kb.
        #[arg(long)]
        dialect: Option<String>,
        /// Frame file to write.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Corpus directory for batch mode; defaults to <out>/corpus.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or all ablation variants with --ablation.
    Eval {
        #[arg(long, conflicts_with = "ablation")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ablation: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.smoke);
    if let Some(out) = cli.out {
        cfg.paths.out = out;
    }
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    match cli.command {
        Command::Defaults => print!("{}", cfg.to_toml()),
        Command::GenCorpus => println!("{}", commands::cmd_gen_corpus(&cfg, &layout)?),
        Command::Train { resume } => println!("{}", commands::cmd_train(&cfg, &layout, resume)?),
        Command::Ablate => {
            for (label, hash) in commands::cmd_ablate(&cfg, &layout)? {
                println!("{label}\t{hash}");
            }
        }
        Command::Synth { checkpoint, text, reference, dialect, output, manifest } => {
            let ckpt = checkpoint.unwrap_or_else(|| layout.train().join(fmsd_core::training::MODEL_FILE));
            match (text, reference, dialect, output) {
                (Some(text), Some(reference), Some(dialect), Some(output)) => {
                    commands::cmd_synth_one(&cfg, &ckpt, &text, &reference, &dialect, &output)?;
                    println!("{}", output.display());
                }
                _ => {
                    let corpus_dir = manifest.unwrap_or_else(|| layout.corpus());
                    let outputs = commands::cmd_synth_batch(&cfg, &layout, &ckpt, &corpus_dir)?;
                    println!("{}", outputs.len());
                }
            }
        }
        Command::Eval { checkpoint, ablation } => {
            if ablation {
                print!("{}", commands::cmd_eval_ablation(&cfg, &layout)?.render(&cfg.hash()));
            } else {
                print!("{}", commands::cmd_eval(&cfg, &layout, checkpoint.as_deref())?.render());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
