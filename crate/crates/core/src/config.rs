//! The run configuration file: TOML sections layered over built-in
//! defaults, then dotted `key=value` overrides, then strict decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MixtureConfig, Stage};
use crate::error::{Error, Result};
use crate::eval::AblationConfig;
use crate::model::ModelConfig;
use crate::sample::SampleRunConfig;
use crate::train::{CorpusConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Mixtures in `xgyu` notation; each keeps the pretrain text-only share.
    pub ratios: Vec<String>,
    /// Logged points averaged for each run's final loss.
    pub window: usize,
    /// Parallel runs; 0 reads `PIXELFUSE_THREADS`, defaulting to 1.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: ["8g2u", "7g3u", "5g5u", "3g7u"].map(String::from).to_vec(),
            window: 20,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub pretrain: TrainConfig,
    pub sft: TrainConfig,
    pub recon: TrainConfig,
    pub sample: SampleRunConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |stage, steps| TrainConfig {
            stage,
            steps,
            ..TrainConfig::default()
        };
        Self {
            model: ModelConfig::tiny(),
            corpus: CorpusConfig::default(),
            pretrain: stage(Stage::Pretrain, 2000),
            sft: stage(Stage::Sft, 1000),
            // Finetuning from a trained model: a smaller step keeps the residual
            // error on flat backgrounds low.
            recon: TrainConfig {
                lr: 1e-4,
                ..stage(Stage::ReconFinetune, 2000)
            },
            sample: SampleRunConfig::default(),
            ablation: AblationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Keys the defaults leave unset, listed so they can still be documented
/// and overridden.
const OPTIONAL_KEYS: [&str; 4] = [
    "corpus.path",
    "pretrain.mask_total_steps",
    "sft.mask_total_steps",
    "recon.mask_total_steps",
];

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut t = root;
    for p in &parts[..parts.len() - 1] {
        t = match t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
        {
            toml::Value::Table(inner) => inner,
            _ => return Err(Error::Config(format!("`{key}`: `{p}` is not a section"))),
        };
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Decodes `text` over the defaults, applies `key=value` overrides and
    /// validates. Unknown keys are errors.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        merge(&mut table, user);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, cfg, stage) in [
            ("pretrain", &self.pretrain, Stage::Pretrain),
            ("sft", &self.sft, Stage::Sft),
            ("recon", &self.recon, Stage::ReconFinetune),
        ] {
            if cfg.stage != stage {
                return Err(Error::Config(format!("{name}.stage must be {stage:?}")));
            }
            cfg.validate()?;
            if cfg.data.image_size != self.model.image_size {
                return Err(Error::Config(format!(
                    "{name}.data.image_size {} differs from model.image_size {}",
                    cfg.data.image_size, self.model.image_size
                )));
            }
        }
        self.sample.validate()?;
        self.mixtures()?;
        Ok(())
    }

    /// Sets every seed a run draws from.
    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.sft.seed = seed;
        self.recon.seed = seed;
        self.sample.seed = seed;
    }

    pub fn stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Sft => &self.sft,
            Stage::ReconFinetune => &self.recon,
        }
    }

    /// Sweep mixtures, keeping the pretraining text-only share.
    pub fn mixtures(&self) -> Result<Vec<MixtureConfig>> {
        self.sweep
            .ratios
            .iter()
            .map(|r| {
                let m: MixtureConfig = r.parse()?;
                MixtureConfig::new(m.gen_ratio, m.und_ratio, self.pretrain.mixture.text_only_fraction)
            })
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every key with its default value, one `key = value` per line.
    pub fn documented_keys() -> Vec<String> {
        fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
            match v {
                toml::Value::Table(t) => {
                    for (k, v) in t {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, v, out);
                    }
                }
                other => out.push(format!("{prefix} = {other}")),
            }
        }
        let mut out = Vec::new();
        let v = toml::Value::try_from(RunConfig::default()).expect("defaults serialise");
        walk("", &v, &mut out);
        out.extend(OPTIONAL_KEYS.iter().map(|k| format!("{k} = (unset)")));
        out.sort();
        out
    }
}

/// Worker count for parallel runs: the explicit value, else
/// `PIXELFUSE_THREADS`, else 1.
pub fn thread_budget(explicit: usize) -> usize {
    if explicit > 0 {
        return explicit;
    }
    std::env::var("PIXELFUSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
