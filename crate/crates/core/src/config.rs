//! Flat `key = value` run configuration.
//!
//! Every key has a default. Files may set any subset; unknown keys are
//! rejected. Environment variables named `PDAE_` plus the key in upper case
//! with dots replaced by underscores (`PDAE_TRAIN_BATCH_SIZE`) override files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::parse_list;
use crate::data::{DataSource, Synthetic};
use crate::error::{Error, Result};
use crate::model::ConditionerSpec;
use crate::networks::{EncoderSpec, LatentSpec, UNetSpec};
use crate::sampling::{FractionMode, Method, SamplerPlan};
use crate::schedule::{ScheduleSpec, WeightScheme};
use crate::training::{ClassifierConfig, TrainConfig};

pub const ENV_PREFIX: &str = "PDAE_";

const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.kind", "glyphs"),
    ("data.path", ""),
    ("data.labels", ""),
    ("data.channels", "1"),
    ("data.points", "2000"),
    ("data.size", "28"),
    ("data.classes", "10"),
    ("data.seed", "0"),
    ("schedule.kind", "linear"),
    ("schedule.steps", "1000"),
    ("schedule.beta_start", "0.0001"),
    ("schedule.beta_end", "0.02"),
    ("schedule.beta", "0.008"),
    ("latent_schedule.kind", "constant"),
    ("latent_schedule.steps", "1000"),
    ("latent_schedule.beta_start", "0.0001"),
    ("latent_schedule.beta_end", "0.02"),
    ("latent_schedule.beta", "0.008"),
    ("unet.base_channels", "32"),
    ("unet.channel_mults", "1,2,4"),
    ("unet.attention_resolutions", "7"),
    ("unet.time_embed_dim", "128"),
    ("unet.groups", "8"),
    ("unet.num_classes", "0"),
    ("unet.dropout", "0.1"),
    ("cond.kind", "encoder"),
    ("cond.classes", "10"),
    ("encoder.base_channels", "32"),
    ("encoder.channel_mults", "1,2,4"),
    ("encoder.attention_resolutions", "14"),
    ("encoder.groups", "8"),
    ("encoder.z_dim", "64"),
    ("latent.hidden", "256"),
    ("latent.layers", "6"),
    ("latent.time_embed_dim", "64"),
    ("latent.groups", "8"),
    ("train.batch_size", "64"),
    ("train.lr", "0.0001"),
    ("train.images", "1000000"),
    ("train.ema_decay", "0.9999"),
    ("train.grad_clip", "1.0"),
    ("train.log_every", "100"),
    ("train.weight", "pdae"),
    ("train.gamma", "0.1"),
    ("latent_train.batch_size", "128"),
    ("latent_train.lr", "0.0001"),
    ("latent_train.images", "2000000"),
    ("latent_train.ema_decay", "0.9999"),
    ("classifier.epochs", "50"),
    ("classifier.batch_size", "64"),
    ("classifier.lr", "0.05"),
    ("classifier.l2", "0.0001"),
    ("classifier.balanced", "false"),
    ("sample.method", "ddim"),
    ("sample.steps", "100"),
    ("sample.eta", "0"),
    ("sample.guidance_scale", "1"),
    ("sample.guided_fraction", "1"),
    ("sample.fraction_mode", "steps"),
    ("sample.count", "16"),
    ("latent_sample.steps", "100"),
    ("latent_sample.eta", "0"),
    ("fewshot.floor", "0.001"),
    ("fewshot.batch", "64"),
    ("eval.samples", "1000"),
    ("eval.stride", "10"),
    ("eval.batch", "64"),
    ("eval.grid_stride", "50"),
    ("eval.threshold", "0.9"),
];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| cfg_err(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(cfg_err(format!("line {}: `{k}` set twice", no + 1)));
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(cfg_err(format!("unknown key `{key}`"))),
        }
    }

    /// Applies overrides from `lookup` (normally the process environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for (k, _) in KEYS {
            if let Some(v) = lookup(&env_name(k)) {
                self.set(k, v.trim())?;
            }
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<()> {
        self.apply_env(|n| std::env::var(n).ok())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }

    /// The resolved configuration, one `key = value` per line, sorted.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| cfg_err(format!("unknown key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| cfg_err(format!("bad value `{v}` for `{key}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.raw(key)?;
        parse_list(v).ok_or_else(|| cfg_err(format!("bad list `{v}` for `{key}`")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let path = |k: &str| -> Result<Option<PathBuf>> {
            let v = self.raw(k)?;
            Ok((!v.is_empty()).then(|| PathBuf::from(v)))
        };
        let seed = self.get("data.seed")?;
        match self.raw("data.kind")? {
            "idx" => Ok(DataSource::Idx { images: path("data.path")?.ok_or_else(|| cfg_err("data.path is required for IDX data"))?, labels: path("data.labels")? }),
            "dir" => Ok(DataSource::ImageDir {
                path: path("data.path")?.ok_or_else(|| cfg_err("data.path is required for an image directory"))?,
                channels: self.get("data.channels")?,
            }),
            "glyphs" => Ok(DataSource::Synthetic { kind: Synthetic::Glyphs { points: self.get("data.points")?, size: self.get("data.size")? }, seed }),
            "blobs" => Ok(DataSource::Synthetic {
                kind: Synthetic::Blobs {
                    points: self.get("data.points")?,
                    classes: self.get("data.classes")?,
                    size: self.get("data.size")?,
                    channels: self.get("data.channels")?,
                },
                seed,
            }),
            k => Err(cfg_err(format!("unknown data.kind `{k}` (idx, dir, glyphs, blobs)"))),
        }
    }

    fn schedule_at(&self, p: &str) -> Result<ScheduleSpec> {
        let steps = self.get(&format!("{p}.steps"))?;
        match self.raw(&format!("{p}.kind"))? {
            "linear" => Ok(ScheduleSpec::Linear { steps, beta_start: self.get(&format!("{p}.beta_start"))?, beta_end: self.get(&format!("{p}.beta_end"))? }),
            "constant" => Ok(ScheduleSpec::Constant { steps, beta: self.get(&format!("{p}.beta"))? }),
            k => Err(cfg_err(format!("unknown {p}.kind `{k}` (linear, constant)"))),
        }
    }

    pub fn schedule(&self) -> Result<ScheduleSpec> {
        self.schedule_at("schedule")
    }

    pub fn latent_schedule(&self) -> Result<ScheduleSpec> {
        self.schedule_at("latent_schedule")
    }

    /// Network for images of `channels x size x size`.
    pub fn unet(&self, channels: usize, size: usize) -> Result<UNetSpec> {
        let base: usize = self.get("unet.base_channels")?;
        let s = UNetSpec {
            in_channels: channels,
            image_size: size,
            base_channels: base,
            channel_mults: self.list("unet.channel_mults")?,
            attention_resolutions: self.list("unet.attention_resolutions")?,
            time_embed_dim: self.get("unet.time_embed_dim")?,
            groups: self.get("unet.groups")?,
            num_classes: self.get("unet.num_classes")?,
            dropout: self.get("unet.dropout")?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn conditioner(&self) -> Result<ConditionerSpec> {
        match self.raw("cond.kind")? {
            "encoder" => Ok(ConditionerSpec::Encoder(EncoderSpec {
                base_channels: self.get("encoder.base_channels")?,
                channel_mults: self.list("encoder.channel_mults")?,
                attention_resolutions: self.list("encoder.attention_resolutions")?,
                groups: self.get("encoder.groups")?,
                z_dim: self.get("encoder.z_dim")?,
            })),
            "labels" => Ok(ConditionerSpec::Labels { classes: self.get("cond.classes")? }),
            k => Err(cfg_err(format!("unknown cond.kind `{k}` (encoder, labels)"))),
        }
    }

    pub fn latent(&self, z_dim: usize) -> Result<LatentSpec> {
        Ok(LatentSpec {
            z_dim,
            hidden: self.get("latent.hidden")?,
            layers: self.get("latent.layers")?,
            time_embed_dim: self.get("latent.time_embed_dim")?,
            groups: self.get("latent.groups")?,
        })
    }

    pub fn weight(&self) -> Result<WeightScheme> {
        let w = match self.raw("train.weight")? {
            "simple" => WeightScheme::Simple,
            "pdae" => WeightScheme::Pdae { gamma: self.get("train.gamma")? },
            k => return Err(cfg_err(format!("unknown train.weight `{k}` (simple, pdae)"))),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            images: self.get("train.images")?,
            ema_decay: self.get("train.ema_decay")?,
            grad_clip: self.get("train.grad_clip")?,
            seed: self.seed()?,
            log_every: self.get("train.log_every")?,
            verbose: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn latent_train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            batch_size: self.get("latent_train.batch_size")?,
            lr: self.get("latent_train.lr")?,
            images: self.get("latent_train.images")?,
            ema_decay: self.get("latent_train.ema_decay")?,
            ..self.train()?
        };
        c.validate()?;
        Ok(c)
    }

    pub fn classifier(&self) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            epochs: self.get("classifier.epochs")?,
            batch_size: self.get("classifier.batch_size")?,
            lr: self.get("classifier.lr")?,
            l2: self.get("classifier.l2")?,
            balanced: self.get("classifier.balanced")?,
            seed: self.seed()?,
        })
    }

    pub fn plan(&self) -> Result<SamplerPlan> {
        let method = match self.raw("sample.method")? {
            "ddim" => Method::Ddim,
            "ddpm" => Method::Ddpm,
            k => return Err(cfg_err(format!("unknown sample.method `{k}` (ddim, ddpm)"))),
        };
        let fraction_mode = match self.raw("sample.fraction_mode")? {
            "steps" => FractionMode::Steps,
            "t_range" => FractionMode::TRange,
            k => return Err(cfg_err(format!("unknown sample.fraction_mode `{k}` (steps, t_range)"))),
        };
        Ok(SamplerPlan {
            method,
            steps: self.get("sample.steps")?,
            eta: self.get("sample.eta")?,
            guidance_scale: self.get("sample.guidance_scale")?,
            guided_fraction: self.get("sample.guided_fraction")?,
            fraction_mode,
            seed: self.seed()?,
        })
    }

    pub fn latent_plan(&self) -> Result<SamplerPlan> {
        Ok(SamplerPlan {
            method: Method::Ddim,
            steps: self.get("latent_sample.steps")?,
            eta: self.get("latent_sample.eta")?,
            guidance_scale: 0.0,
            guided_fraction: 0.0,
            fraction_mode: FractionMode::Steps,
            seed: self.seed()?.wrapping_add(1),
        })
    }
}
