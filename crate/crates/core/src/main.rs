use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcmrl::config::RunConfig;
use dcmrl::harness::{self, Layout};
use dcmrl::Error;

#[derive(Parser)]
#[command(name = "dcmrl", version, about = "Offline meta-RL with quantized task contexts and skills on a point maze")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the offline dataset.
    GenData,
    /// Pretrain skill encoder, prior and low-level policy.
    Pretrain,
    /// Meta-train context and skill policies.
    MetaTrain,
    /// Condition on and fine-tune to every target task.
    MetaTest,
    /// Fine-tune with the scratch control; `--budget 0` reports zero-shot.
    Eval {
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Write both codebooks as CSV.
    DumpCodebook,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::MissingCheckpoint(_) | Error::Checkpoint { .. } | Error::InvalidArgument(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> dcmrl::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let l = Layout::new(&cli.out, cfg);
    match cli.cmd {
        Cmd::GenData => println!("{}", harness::gen_data(&l)?.display()),
        Cmd::Pretrain => println!("{}", harness::run_pretrain(&l)?.display()),
        Cmd::MetaTrain => println!("{}", harness::run_meta_train(&l)?.display()),
        Cmd::MetaTest => {
            let s = harness::run_meta_test(&l)?;
            println!("mean final success {:.3}", s.mean_final_success_rate);
        }
        Cmd::Eval { budget } => {
            let s = harness::run_eval(&l, budget)?;
            match s.mean_scratch_final_success_rate {
                Some(b) => println!("mean final success {:.3} (scratch {b:.3})", s.mean_final_success_rate),
                None => println!("mean final success {:.3}", s.mean_final_success_rate),
            }
        }
        Cmd::DumpCodebook => {
            for p in harness::dump_codebook(&l)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
