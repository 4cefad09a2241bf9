//! `key = value` configuration files.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are errors so a
//! typo never silently falls back to a default.

use std::path::Path;

use super::HarnessError;
use crate::objective::LossWeights;
use crate::segmodel::{DecoderConfig, Enhancement, ModelConfig};
use crate::synthbench::domain_preset;

/// Everything `train`, `eval` and `ablate` need.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub d: usize,
    pub n_queries: usize,
    pub n_classes: usize,
    pub enhancement: Enhancement,
    pub share_query_proj: bool,
    pub loss: LossWeights,
    pub source_domain: String,
    pub target_domains: Vec<String>,
    pub image_size: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub data_seed: u64,
    pub ablation_seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            weight_decay: 0.05,
            epochs: 30,
            batch_size: 8,
            grad_clip: 0.0,
            d: 32,
            n_queries: 20,
            n_classes: 6,
            enhancement: Enhancement::ALL,
            share_query_proj: false,
            loss: LossWeights::default(),
            source_domain: "clear".into(),
            target_domains: ["dusk", "fog", "noiseCam", "coolHue"].map(String::from).to_vec(),
            image_size: 64,
            train_scenes: 200,
            val_scenes: 50,
            data_seed: 1000,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key} = {value}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl TrainConfig {
    /// Parses a config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "n_queries" => self.n_queries = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "enhancement" => {
                self.enhancement = Enhancement::parse(value)
                    .ok_or_else(|| bad(key, value, "expected `none` or strides from 32,16,8"))?
            }
            "share_query_proj" => self.share_query_proj = num(key, value)?,
            "lambda_ce" => self.loss.ce = num(key, value)?,
            "lambda_dice" => self.loss.dice = num(key, value)?,
            "lambda_cls" => self.loss.cls = num(key, value)?,
            "no_object_weight" => self.loss.no_object = num(key, value)?,
            "dice_eps" => self.loss.dice_eps = num(key, value)?,
            "aux_weight" => self.loss.aux = num(key, value)?,
            "source_domain" => self.source_domain = value.to_string(),
            "target_domains" => self.target_domains = list(value),
            "image_size" => self.image_size = num(key, value)?,
            "train_scenes" => self.train_scenes = num(key, value)?,
            "val_scenes" => self.val_scenes = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "ablation_seeds" => {
                self.ablation_seeds = list(value)
                    .iter()
                    .map(|s| num(key, s))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = [
            ("lr", self.lr),
            ("dice_eps", self.loss.dice_eps),
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("train_scenes", self.train_scenes as f64),
            ("val_scenes", self.val_scenes as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("lambda_ce", self.loss.ce),
            ("lambda_dice", self.loss.dice),
            ("lambda_cls", self.loss.cls),
            ("no_object_weight", self.loss.no_object),
            ("aux_weight", self.loss.aux),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!("{name} must be non-negative")));
            }
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(HarnessError::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        for name in std::iter::once(&self.source_domain).chain(&self.target_domains) {
            if domain_preset(name).is_none() {
                return Err(HarnessError::Config(format!("unknown domain `{name}`")));
            }
        }
        if self
            .target_domains
            .iter()
            .any(|t| t.eq_ignore_ascii_case(&self.source_domain))
        {
            return Err(HarnessError::Config(
                "target_domains must not include the source domain".into(),
            ));
        }
        self.model_config().validate().map_err(HarnessError::Config)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_queries: self.n_queries,
            n_classes: self.n_classes,
            decoder: DecoderConfig::with_enhancement(self.enhancement),
            share_query_proj: self.share_query_proj,
        }
    }

    /// Applies the seed precedence: command line, then `CMA_SEED`, then
    /// the file.
    pub fn resolve_seed(&mut self, cli: Option<u64>, env: Option<&str>) -> Result<(), HarnessError> {
        if let Some(s) = cli {
            self.seed = s;
        } else if let Some(e) = env {
            self.seed = e
                .trim()
                .parse()
                .map_err(|err| HarnessError::Config(format!("CMA_SEED = {e}: {err}")))?;
        }
        Ok(())
    }

    /// The config in file form; `parse(to_text())` restores it.
    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let seeds: Vec<String> = self.ablation_seeds.iter().map(u64::to_string).collect();
        let enh = self.enhancement.to_string().replace('+', ",");
        format!(
            "seed = {}\nlr = {:e}\nweight_decay = {}\nepochs = {}\nbatch_size = {}\n\
             grad_clip = {}\nd = {}\nn_queries = {}\nn_classes = {}\nenhancement = {}\n\
             share_query_proj = {}\nlambda_ce = {}\nlambda_dice = {}\nlambda_cls = {}\n\
             no_object_weight = {}\ndice_eps = {}\naux_weight = {}\nsource_domain = {}\n\
             target_domains = {}\nimage_size = {}\ntrain_scenes = {}\nval_scenes = {}\n\
             data_seed = {}\nablation_seeds = {}\n",
            self.seed,
            self.lr,
            self.weight_decay,
            self.epochs,
            self.batch_size,
            self.grad_clip,
            self.d,
            self.n_queries,
            self.n_classes,
            enh,
            self.share_query_proj,
            l.ce,
            l.dice,
            l.cls,
            l.no_object,
            l.dice_eps,
            l.aux,
            self.source_domain,
            self.target_domains.join(","),
            self.image_size,
            self.train_scenes,
            self.val_scenes,
            self.data_seed,
            seeds.join(","),
        )
    }
}
