//! Flat `key = value` run configuration.
//!
//! Layers apply in order defaults, file, flags. Within a layer the master
//! `seed` is applied first, so a more specific `train.seed` in the same layer
//! wins over it.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::reranker::{CaConfig, FeatureSpec};
use crate::synthdata::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap(pub BTreeMap<String, String>);

impl ConfigMap {
    /// Parses `key = value` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

/// Float formatting that parses back to the same bits.
fn float(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub gleu_order: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gleu_order: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub k: usize,
    /// Standard deviation of noise added to the initial parameters.
    pub perturb: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            d_model: 8,
            heads: 2,
            ff_dim: 16,
            layers: 1,
            k: 3,
            perturb: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RerankConfig {
    pub ca: CaConfig,
    pub features: FeatureSpec,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub rerank: RerankConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    /// Defaults overlaid with each layer in turn.
    pub fn resolve(layers: &[&ConfigMap]) -> Result<Self> {
        let mut config = Self::default();
        for layer in layers {
            config.apply(layer)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut encoder = self.model.encoder.clone();
        // The vocabulary is only known once data is read.
        encoder.vocab_size = encoder.vocab_size.max(1);
        encoder.validate()?;
        self.train.validate()?;
        self.synth.corruption.validate()?;
        if self.model.max_len < 3 {
            return Err(Error::Config("model.max_len must leave room for the three markers".into()));
        }
        if !(0.0..1.0).contains(&self.model.head.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, map: &ConfigMap) -> Result<()> {
        if let Some(v) = map.0.get("seed") {
            self.set_seed(parse("seed", v)?);
        }
        for (k, v) in &map.0 {
            if k != "seed" {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    /// Derives every component seed from one master seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.encoder.seed = seed;
        self.train.seed = seed.wrapping_add(1);
        self.synth.corruption.seed = seed.wrapping_add(2);
        self.rerank.ca.seed = seed.wrapping_add(3);
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let c = &mut self.synth.corruption;
        let r = &mut self.rerank;
        let g = &mut self.gradcheck;
        match key {
            "model.d_model" => m.encoder.d_model = parse(key, v)?,
            "model.layers" => m.encoder.layers = parse(key, v)?,
            "model.heads" => m.encoder.heads = parse(key, v)?,
            "model.ff_dim" => m.encoder.ff_dim = parse(key, v)?,
            "model.max_positions" => m.encoder.max_positions = parse(key, v)?,
            "model.seed" => m.encoder.seed = parse(key, v)?,
            "model.max_len" => m.max_len = parse(key, v)?,
            "model.lowercase" => m.lowercase = parse(key, v)?,
            "model.min_count" => m.min_count = parse(key, v)?,
            "model.dropout" => m.head.dropout = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.accumulation" => t.accumulation = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.mask_policy" => t.mask_policy = parse(key, v)?,
            "train.baseline_heads" => t.baseline_heads = parse(key, v)?,
            "train.select_metric" => t.select_metric = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "synth.groups" => self.synth.groups = parse(key, v)?,
            "synth.k" => c.k = parse(key, v)?,
            "synth.rate" => c.rate = parse(key, v)?,
            "synth.p_delete" => c.p_delete = parse(key, v)?,
            "synth.p_insert" => c.p_insert = parse(key, v)?,
            "synth.p_replace" => c.p_replace = parse(key, v)?,
            "synth.p_swap" => c.p_swap = parse(key, v)?,
            "synth.score_noise" => c.score_noise = parse(key, v)?,
            "synth.seed" => c.seed = parse(key, v)?,
            "rerank.delta" => r.ca.delta = parse(key, v)?,
            "rerank.max_doublings" => r.ca.max_doublings = parse(key, v)?,
            "rerank.restarts" => r.ca.restarts = parse(key, v)?,
            "rerank.max_passes" => r.ca.max_passes = parse(key, v)?,
            "rerank.objective" => r.ca.objective = parse(key, v)?,
            "rerank.normalize" => r.ca.normalize = parse(key, v)?,
            "rerank.seed" => r.ca.seed = parse(key, v)?,
            "rerank.model_score" => r.features.model_score = parse(key, v)?,
            "rerank.vernet_f" => r.features.vernet_f = parse(key, v)?,
            "rerank.length_ratio" => r.features.length_ratio = parse(key, v)?,
            "eval.gleu_order" => self.eval.gleu_order = parse(key, v)?,
            "gradcheck.step" => g.step = parse(key, v)?,
            "gradcheck.tolerance" => g.tolerance = parse(key, v)?,
            "gradcheck.d_model" => g.d_model = parse(key, v)?,
            "gradcheck.heads" => g.heads = parse(key, v)?,
            "gradcheck.ff_dim" => g.ff_dim = parse(key, v)?,
            "gradcheck.layers" => g.layers = parse(key, v)?,
            "gradcheck.k" => g.k = parse(key, v)?,
            "gradcheck.perturb" => g.perturb = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Model and training keys, as stored in checkpoints.
    pub fn model_map(model: &ModelConfig, train: &TrainConfig) -> ConfigMap {
        let mut m = ConfigMap::default();
        m.set("model.d_model", model.encoder.d_model);
        m.set("model.layers", model.encoder.layers);
        m.set("model.heads", model.encoder.heads);
        m.set("model.ff_dim", model.encoder.ff_dim);
        m.set("model.max_positions", model.encoder.max_positions);
        m.set("model.seed", model.encoder.seed);
        m.set("model.max_len", model.max_len);
        m.set("model.lowercase", model.lowercase);
        m.set("model.min_count", model.min_count);
        m.set("model.dropout", float(model.head.dropout));
        m.set("train.lr", float(train.lr));
        m.set("train.batch_size", train.batch_size);
        m.set("train.accumulation", train.accumulation);
        m.set("train.epochs", train.epochs);
        m.set("train.seed", train.seed);
        m.set("train.mask_policy", train.mask_policy);
        m.set("train.baseline_heads", train.baseline_heads);
        m.set("train.select_metric", train.select_metric);
        m.set("train.beta1", float(train.beta1));
        m.set("train.beta2", float(train.beta2));
        m.set("train.eps", float(train.eps));
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::MaskPolicy;

    #[test]
    fn parses_comments_and_blank_lines() {
        let m = ConfigMap::parse("# header\n\ntrain.lr = 0.001  # faster\nseed=4\n").unwrap();
        assert_eq!(m.0.len(), 2);
        assert_eq!(m.0["train.lr"], "0.001");
        assert!(matches!(ConfigMap::parse("a = 1\noops\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = ConfigMap::parse("train.epochs = 7\ntrain.lr = 0.01\nseed = 3\ntrain.seed = 99\n").unwrap();
        let mut flags = ConfigMap::default();
        flags.set("train.lr", "0.5");
        let c = RunConfig::resolve(&[&file, &flags]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.train.seed, 99);
        assert_eq!(c.model.encoder.seed, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);

        let mut seed_flag = ConfigMap::default();
        seed_flag.set("seed", 8);
        let c = RunConfig::resolve(&[&file, &seed_flag]).unwrap();
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let bad = ConfigMap::parse("train.speed = 3").unwrap();
        assert!(matches!(RunConfig::resolve(&[&bad]), Err(Error::Config(_))));
        let bad = ConfigMap::parse("train.mask_policy = both").unwrap();
        assert!(RunConfig::resolve(&[&bad]).is_err());
        let bad = ConfigMap::parse("train.batch_size = 0").unwrap();
        assert!(RunConfig::resolve(&[&bad]).is_err());
    }

    #[test]
    fn model_map_round_trips() {
        let mut c = RunConfig::default();
        c.train.lr = 0.1 + 0.2;
        c.train.mask_policy = MaskPolicy::Hypothesis;
        c.model.head.dropout = 0.1;
        let map = RunConfig::model_map(&c.model, &c.train);
        let back = RunConfig::resolve(&[&ConfigMap::parse(&map.to_text()).unwrap()]).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
    }
}
