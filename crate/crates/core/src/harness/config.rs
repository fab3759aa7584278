//! Flat key/value run configuration with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::doc_model::MAX_SEQ;
use crate::error::{Error, Result};
use crate::etc_backbone::{BackboneConfig, ModelConfig};
use crate::rich_attention::FeatureSet;
use crate::supertoken_gcn::GcnConfig;
use crate::synth_corpus::GenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub hidden: usize,
    pub num_heads: usize,
    pub etc_layers: usize,
    pub gcn_layers: usize,
    pub embed_dim: usize,
    pub local_radius: usize,
    pub max_neighbors: usize,
    pub max_seq: usize,
    pub use_rich_attention: bool,
    pub use_gcn: bool,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Fraction of `steps` with linearly increasing learning rate.
    pub warmup: f64,
    pub mask_rate: f64,
    /// Dev evaluation period during fine-tuning, in steps.
    pub eval_every: usize,
    pub ablation_seeds: usize,

    pub entity_types: Vec<String>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Continue the checkpoint's optimizer state and step count.
    pub resume: bool,

    pub n_docs: usize,
    pub interleave_prob: f64,
    pub columns: usize,
    pub rows_per_column: usize,
    pub tokens_per_line: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: 32,
            num_heads: 4,
            etc_layers: 2,
            gcn_layers: 2,
            embed_dim: 32,
            local_radius: 8,
            max_neighbors: 8,
            max_seq: MAX_SEQ,
            use_rich_attention: true,
            use_gcn: true,
            learning_rate: 1e-3,
            batch_size: 4,
            steps: 500,
            warmup: 0.0,
            mask_rate: 0.15,
            eval_every: 50,
            ablation_seeds: 3,
            entity_types: vec!["header".into(), "question".into(), "answer".into()],
            corpus: None,
            vocab: None,
            out: PathBuf::from("runs/latest"),
            checkpoint: None,
            resume: false,
            n_docs: 250,
            interleave_prob: 0.8,
            columns: 2,
            rows_per_column: 4,
            tokens_per_line: 3,
        }
    }
}

pub const PRESETS: [&str; 3] = ["desk", "large-pretrain", "large-finetune"];

impl RunConfig {
    /// Named configurations. The large ones are far beyond a single CPU.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self::default();
        let large = Self {
            hidden: 512,
            num_heads: 8,
            etc_layers: 12,
            gcn_layers: 12,
            embed_dim: 512,
            ..desk.clone()
        };
        match name {
            "desk" => Ok(desk),
            "large-pretrain" => Ok(Self {
                learning_rate: 2e-4,
                batch_size: 512,
                warmup: 0.01,
                ..large
            }),
            "large-finetune" => Ok(Self {
                learning_rate: 1e-4,
                batch_size: 8,
                warmup: 0.0,
                ..large
            }),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}`; expected one of {PRESETS:?}"
            ))),
        }
    }

    /// A config file path or a preset name, then overrides.
    pub fn resolve(spec: Option<&str>, overrides: &[String]) -> Result<Self> {
        match spec {
            Some(name) if PRESETS.contains(&name) && !Path::new(name).exists() => {
                let text = Self::preset(name)?.to_toml()?;
                let table = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
                Self::from_table(table, None, overrides)
            }
            Some(p) => Self::load(Some(Path::new(p)), overrides),
            None => Self::load(None, overrides),
        }
    }

    /// Reads `path` (if any), applies `key=value` overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Parse {
                    path: p.to_owned(),
                    key: "<file>".into(),
                    message: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        Self::from_table(table, path, overrides)
    }

    fn from_table(mut table: toml::Table, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let config: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            key: "<config>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1)", self.mask_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return bad(format!("warmup {} outside [0, 1]", self.warmup));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.eval_every == 0 || self.ablation_seeds == 0 {
            return bad("eval_every and ablation_seeds must be positive".into());
        }
        if self.entity_types.is_empty() {
            return bad("entity_types is empty".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, num_tags: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            backbone: BackboneConfig {
                num_layers: self.etc_layers,
                hidden: self.hidden,
                num_heads: self.num_heads,
                local_radius: self.local_radius,
                num_global: 1,
                max_seq: self.max_seq,
                use_rich_attention: self.use_rich_attention,
                use_gcn: self.use_gcn,
            },
            gcn: GcnConfig {
                num_layers: self.gcn_layers,
                hidden: self.hidden,
                max_neighbors: self.max_neighbors,
                vocab_size,
                embed_dim: self.embed_dim,
            },
            num_tags,
            features: FeatureSet::ALL,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_docs: self.n_docs,
            entity_types: self.entity_types.clone(),
            columns: self.columns,
            rows_per_column: self.rows_per_column,
            tokens_per_line: self.tokens_per_line,
            interleave_prob: self.interleave_prob,
            seed: self.seed,
            ..GenConfig::default()
        }
    }

    /// Number of warm-up steps, rounded up.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup * self.steps as f64).ceil() as usize
    }

    /// Linear warm-up, then constant.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.learning_rate * (step + 1) as f64 / w as f64
        } else {
            self.learning_rate
        }
    }
}

/// `key=value`, where the value is read as a TOML literal and falls back to
/// a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_owned()));
    Ok((k.to_owned(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_strings() {
        assert_eq!(parse_override("steps=20").unwrap().1, toml::Value::Integer(20));
        assert_eq!(parse_override("use_gcn = false").unwrap().1, toml::Value::Boolean(false));
        assert_eq!(
            parse_override("out=runs/a").unwrap().1,
            toml::Value::String("runs/a".into())
        );
        assert!(parse_override("steps").is_err());
    }

    #[test]
    fn load_applies_overrides_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "steps = 30\nhidden = 16\nnum_heads = 2\n").unwrap();
        let c = RunConfig::load(Some(&p), &["steps=7".into(), "learning_rate=0.01".into()]).unwrap();
        assert_eq!((c.steps, c.hidden, c.learning_rate), (7, 16, 0.01));
        assert_eq!(c.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::load(None, &["stepz=3".into()]).is_err());
        assert!(RunConfig::load(None, &["steps=0".into()]).is_err());
        assert!(RunConfig::load(None, &["mask_rate=1.0".into()]).is_err());
        assert!(RunConfig::load(None, &["batch_size=0".into()]).is_err());
        assert!(RunConfig::load(None, &["steps=\"many\"".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            corpus: Some("data/x".into()),
            ..RunConfig::default()
        };
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn warmup_then_constant() {
        let c = RunConfig {
            steps: 100,
            warmup: 0.04,
            learning_rate: 1.0,
            ..RunConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| c.learning_rate_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        let flat = RunConfig {
            warmup: 0.0,
            ..c
        };
        assert_eq!(flat.learning_rate_at(0), 1.0);
    }

    #[test]
    fn presets() {
        for name in PRESETS {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        let p = RunConfig::preset("large-pretrain").unwrap();
        assert_eq!((p.batch_size, p.learning_rate, p.warmup), (512, 2e-4, 0.01));
        let f = RunConfig::preset("large-finetune").unwrap();
        assert_eq!((f.batch_size, f.learning_rate, f.etc_layers), (8, 1e-4, 12));
        assert!(RunConfig::preset("huge").is_err());
        let r = RunConfig::resolve(Some("large-finetune"), &["steps=9".into()]).unwrap();
        assert_eq!((r.batch_size, r.steps), (8, 9));
    }

    #[test]
    fn model_config_checks_heads() {
        let c = RunConfig {
            num_heads: 3,
            ..RunConfig::default()
        };
        assert!(c.model_config(100, 13).is_err());
        assert!(RunConfig::default().model_config(100, 13).is_ok());
    }
}
