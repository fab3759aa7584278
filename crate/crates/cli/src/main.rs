use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use formnet::derivation_oracles::{format_report, DistanceVariant};
use formnet::harness::commands::{
    cmd_ablate, cmd_eval, cmd_finetune, cmd_gen_corpus, cmd_pretrain,
};
use formnet::harness::oracles::run_all;
use formnet::harness::RunConfig;

#[derive(Parser)]
#[command(name = "formnet", version, about = "Key-information extraction from form documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file or preset name (desk, large-pretrain, large-finetune).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus file or directory; a synthetic corpus is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let quoted = |p: &PathBuf| format!("{:?}", p.display().to_string());
        if let Some(p) = &self.out {
            overrides.push(format!("out={}", quoted(p)));
        }
        if let Some(p) = &self.corpus {
            overrides.push(format!("corpus={}", quoted(p)));
        }
        if let Some(p) = &self.checkpoint {
            overrides.push(format!("checkpoint={}", quoted(p)));
        }
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a manifest.
    GenCorpus(Common),
    /// Masked-language-model pretraining.
    Pretrain(Common),
    /// BIOES fine-tuning with dev-set model selection.
    Finetune(Common),
    /// Entity-level precision, recall and F1 on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score gold tags instead of a model.
        #[arg(long)]
        gold: bool,
    },
    /// Four-arm ablation over Rich Attention and the graph encoder.
    Ablate(Common),
    /// Run every oracle check and print a table.
    Oracles {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the sign-flipped distance score; the derivation checks must fail.
        #[arg(long)]
        inject_bug: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenCorpus(c) => {
            let config = c.resolve()?;
            let m = cmd_gen_corpus(&config).context("gen-corpus")?;
            println!("wrote {} ({:?})", config.out.display(), m.split_sizes);
        }
        Command::Pretrain(c) => {
            let config = c.resolve()?;
            let s = cmd_pretrain(&config).context("pretrain")?;
            println!(
                "steps {} eval loss {:.4} -> {:.4}",
                s.steps, s.initial_eval_loss, s.final_eval_loss
            );
        }
        Command::Finetune(c) => {
            let config = c.resolve()?;
            let s = cmd_finetune(&config).context("finetune")?;
            match (s.best_step, s.best_dev_f1) {
                (Some(step), Some(f1)) => println!("steps {} best dev f1 {f1:.4} at {step}", s.steps),
                _ => println!("steps {} (no dev split)", s.steps),
            }
        }
        Command::Eval { common, gold } => {
            let config = common.resolve()?;
            let r = cmd_eval(&config, gold).context("eval")?;
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
        Command::Ablate(c) => {
            let config = c.resolve()?;
            let (_, arms) = cmd_ablate(&config).context("ablate")?;
            println!("{:<20} {:>8} {:>8}", "config", "f1", "f1_std");
            for a in arms {
                println!("{:<20} {:>8.4} {:>8.4}", a.arm, a.mean.f1, a.f1_std);
            }
        }
        Command::Oracles { seed, inject_bug } => {
            let variant = if inject_bug {
                DistanceVariant::Negated
            } else {
                DistanceVariant::Reference
            };
            let t = Instant::now();
            let rows = run_all(seed, variant)?;
            print!("{}", format_report(&rows));
            println!("elapsed {:.2}s", t.elapsed().as_secs_f64());
            return Ok(rows.iter().all(|r| r.passed()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
