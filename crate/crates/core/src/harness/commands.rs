//! The command implementations behind the CLI. Each writes its artifacts
//! under `config.out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autodiff::ParameterStore;
use crate::decoder_metrics::{LabelSchema, Prf, PrfReport};
use crate::doc_model::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{load_corpus, load_vocab, CorpusFormat, Splits};
use crate::harness::train::{evaluate_gold, Trainer};
use crate::synth_corpus::{generate_corpus, write_corpus_dir, CorpusManifest};

#[derive(Debug, Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    result: T,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest<T: Serialize>(config: &RunConfig, command: &str, result: T) -> Result<()> {
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
        result,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::invalid(e.to_string()))?;
    write_text(&config.out.join("run_manifest.json"), &text)
}

fn write_loss_log(path: &Path, config: &RunConfig, losses: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("step,loss,lr\n");
    for &(step, loss) in losses {
        s.push_str(&format!("{step},{loss:.8},{:e}\n", config.learning_rate_at(step)));
    }
    write_text(path, &s)
}

fn write_report(path: &Path, report: &PrfReport) -> Result<()> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Splits from `config.corpus`, or a synthetic corpus generated in memory.
pub fn load_splits(config: &RunConfig, vocab: &Vocabulary) -> Result<Splits> {
    match &config.corpus {
        Some(p) => load_corpus(p, vocab),
        None => {
            let c = generate_corpus(&config.gen_config())?;
            Ok(Splits {
                train: c.train,
                dev: c.dev,
                test: c.test,
                format: CorpusFormat::Jsonl,
            })
        }
    }
}

pub fn cmd_gen_corpus(config: &RunConfig) -> Result<CorpusManifest> {
    let gen = config.gen_config();
    let corpus = generate_corpus(&gen)?;
    write_corpus_dir(&config.out, &gen, &corpus)
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// MLM pretraining. Writes `loss_log.csv`, `checkpoint/` and the manifest.
pub fn cmd_pretrain(config: &RunConfig) -> Result<PretrainSummary> {
    let vocab = load_vocab(config.vocab.as_deref())?;
    let splits = load_splits(config, &vocab)?;
    let mut trainer = Trainer::new(config, &vocab)?;
    if let Some(ck) = &config.checkpoint {
        trainer.load_checkpoint(ck, config.resume)?;
    }
    let train = trainer.prepare(&splits.train)?;
    let held = trainer.prepare(&splits.dev)?;
    let eval = if held.is_empty() { &train } else { &held };
    let initial = trainer.mlm_eval_loss(&trainer.store, eval)?;
    let losses = trainer.pretrain(&train)?;
    let final_loss = trainer.mlm_eval_loss(&trainer.store, eval)?;

    create_dir(&config.out)?;
    write_loss_log(&config.out.join("loss_log.csv"), config, &losses)?;
    trainer.store.save(&config.out.join("checkpoint"))?;
    let summary = PretrainSummary {
        steps: trainer.store.step() as usize,
        initial_eval_loss: initial,
        final_eval_loss: final_loss,
    };
    write_manifest(config, "pretrain", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSummary {
    pub steps: usize,
    pub best_step: Option<usize>,
    pub best_dev_f1: Option<f64>,
    pub final_train_loss: Option<f64>,
}

/// BIOES tagging. Writes `loss_log.csv`, `dev_log.csv`, `checkpoint/` (last
/// step), `best/` (best dev F1) and the manifest.
pub fn cmd_finetune(config: &RunConfig) -> Result<FinetuneSummary> {
    let vocab = load_vocab(config.vocab.as_deref())?;
    let splits = load_splits(config, &vocab)?;
    let mut trainer = Trainer::new(config, &vocab)?;
    if let Some(ck) = &config.checkpoint {
        trainer.load_checkpoint(ck, config.resume)?;
    }
    let train = trainer.prepare(&splits.train)?;
    let dev = trainer.prepare(&splits.dev)?;
    let outcome = trainer.finetune(&train, &dev)?;

    create_dir(&config.out)?;
    write_loss_log(&config.out.join("loss_log.csv"), config, &outcome.losses)?;
    let mut s = String::from("step,precision,recall,f1\n");
    for (step, p) in &outcome.dev_log {
        s.push_str(&format!("{step},{:.6},{:.6},{:.6}\n", p.precision, p.recall, p.f1));
    }
    write_text(&config.out.join("dev_log.csv"), &s)?;
    trainer.store.save(&config.out.join("checkpoint"))?;
    let best = outcome.best.as_ref().map(|b| &b.store).unwrap_or(&trainer.store);
    best.save(&config.out.join("best"))?;
    let summary = FinetuneSummary {
        steps: trainer.store.step() as usize,
        best_step: outcome.best.as_ref().map(|b| b.step),
        best_dev_f1: outcome.best.as_ref().map(|b| b.f1),
        final_train_loss: outcome.losses.last().map(|l| l.1),
    };
    write_manifest(config, "finetune", &summary)?;
    Ok(summary)
}

/// Entity-level scores on the test split, written to `metrics.csv`. With
/// `gold`, the gold tags are scored instead of a model.
pub fn cmd_eval(config: &RunConfig, gold: bool) -> Result<PrfReport> {
    let vocab = load_vocab(config.vocab.as_deref())?;
    let splits = load_splits(config, &vocab)?;
    if splits.test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let report = if gold {
        let schema = LabelSchema::new(config.entity_types.iter().cloned())?;
        evaluate_gold(&splits.test, &schema)?
    } else {
        let ck = config
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("eval needs a checkpoint (or --gold)".into()))?;
        let mut trainer = Trainer::new(config, &vocab)?;
        trainer.load_checkpoint(ck, false)?;
        let test = trainer.prepare(&splits.test)?;
        trainer.evaluate(&trainer.store, &test)?
    };
    create_dir(&config.out)?;
    write_report(&config.out.join("metrics.csv"), &report)?;
    write_manifest(config, "eval", report.micro.f1)?;
    Ok(report)
}

pub const ABLATION_ARMS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("rich_attention", true, false),
    ("gcn", false, true),
    ("rich_attention+gcn", true, true),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub test: Prf,
    pub best_dev_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationArm {
    pub arm: String,
    pub mean: Prf,
    pub f1_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Summaries per arm, in [`ABLATION_ARMS`] order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationArm> {
    ABLATION_ARMS
        .iter()
        .filter_map(|(arm, _, _)| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == *arm).collect();
            if sel.is_empty() {
                return None;
            }
            let col = |f: fn(&Prf) -> f64| sel.iter().map(|r| f(&r.test)).collect::<Vec<_>>();
            let (f1, f1_std) = mean_std(&col(|p| p.f1));
            Some(AblationArm {
                arm: arm.to_string(),
                mean: Prf {
                    precision: mean_std(&col(|p| p.precision)).0,
                    recall: mean_std(&col(|p| p.recall)).0,
                    f1,
                },
                f1_std,
            })
        })
        .collect()
}

/// Trains every arm from scratch for seeds `seed .. seed + ablation_seeds`
/// and scores the best-dev parameters on test. Writes `ablation.csv`.
pub fn cmd_ablate(config: &RunConfig) -> Result<(Vec<AblationRow>, Vec<AblationArm>)> {
    let vocab = load_vocab(config.vocab.as_deref())?;
    let splits = load_splits(config, &vocab)?;
    if splits.test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let mut rows = Vec::new();
    for (arm, rich, gcn) in ABLATION_ARMS {
        for k in 0..config.ablation_seeds as u64 {
            let run = RunConfig {
                seed: config.seed + k,
                use_rich_attention: rich,
                use_gcn: gcn,
                ..config.clone()
            };
            let mut trainer = Trainer::new(&run, &vocab)?;
            let train = trainer.prepare(&splits.train)?;
            let dev = trainer.prepare(&splits.dev)?;
            let test = trainer.prepare(&splits.test)?;
            let outcome = trainer.finetune(&train, &dev)?;
            let (store, best_dev_f1): (&ParameterStore, f64) = match &outcome.best {
                Some(b) => (&b.store, b.f1),
                None => (&trainer.store, f64::NAN),
            };
            let report = trainer.evaluate(store, &test)?;
            rows.push(AblationRow {
                arm: arm.to_string(),
                seed: run.seed,
                test: report.micro,
                best_dev_f1,
            });
        }
    }
    let arms = summarize(&rows);
    create_dir(&config.out)?;
    let mut s = String::from("config,seed,precision,recall,f1,f1_std\n");
    for r in &rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},\n",
            r.arm, r.seed, r.test.precision, r.test.recall, r.test.f1
        ));
    }
    for a in &arms {
        s.push_str(&format!(
            "{},mean,{:.6},{:.6},{:.6},{:.6}\n",
            a.arm, a.mean.precision, a.mean.recall, a.mean.f1, a.f1_std
        ));
    }
    write_text(&config.out.join("ablation.csv"), &s)?;
    write_manifest(config, "ablate", &arms)?;
    Ok((rows, arms))
}

/// Output directory for a named sub-run.
pub fn sub_out(config: &RunConfig, name: &str) -> PathBuf {
    config.out.join(name)
}
