//! Flat `key = value` run configuration.
//!
//! Every setting has a dotted key (`weights.w_pix`, `heatmap.alpha`, ...).
//! A file and a list of overrides are applied in that order on top of the
//! defaults; `train.toy_mode = true` first switches to the toy preset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::imageops::SsimParams;
use crate::interpretability::{AssessConfig, SiameseConfig};
use crate::losses::LossWeights;
use crate::preprocess::PreprocessConfig;
use crate::training::{SiameseTrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub toy_mode: bool,
    pub real_label: f64,
    pub ffl_alpha: f64,
    pub augment: bool,
    pub perceptual_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiameseSection {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub margin: f64,
    pub input_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateSection {
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSection {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySection {
    pub strip_width: usize,
    pub ssim: SsimParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainSection,
    pub weights: LossWeights,
    pub siamese: SiameseSection,
    pub translate: TranslateSection,
    pub heatmap: HeatmapSection,
    pub consistency: ConsistencySection,
}

impl RunConfig {
    fn from_train(t: TrainConfig) -> Self {
        let s = SiameseTrainConfig::default();
        let a = AssessConfig::default();
        Self {
            seed: t.seed,
            preprocess: t.preprocess,
            generator: t.generator,
            discriminator: t.discriminator,
            train: TrainSection {
                learning_rate: t.learning_rate,
                adam_beta1: t.adam_beta1,
                adam_beta2: t.adam_beta2,
                batch_size: t.batch_size,
                steps: t.steps,
                checkpoint_every: t.checkpoint_every,
                toy_mode: t.toy_mode,
                real_label: t.real_label,
                ffl_alpha: t.ffl_alpha,
                augment: t.augment,
                perceptual_weights: t.perceptual_weights,
            },
            weights: t.weights,
            siamese: SiameseSection {
                steps: s.steps,
                batch_size: s.batch_size,
                learning_rate: s.learning_rate,
                adam_beta1: s.adam_beta1,
                adam_beta2: s.adam_beta2,
                margin: s.margin,
                input_size: s.embedder.input_size,
            },
            translate: TranslateSection { overlap: a.overlap },
            heatmap: HeatmapSection { alpha: a.alpha },
            consistency: ConsistencySection {
                strip_width: a.strip_width,
                ssim: a.ssim,
            },
        }
    }

    pub fn reference() -> Self {
        Self::from_train(TrainConfig::reference())
    }

    pub fn toy() -> Self {
        Self::from_train(TrainConfig::toy())
    }

    /// Defaults, then `text` (file contents), then `overrides`.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match text {
            Some(t) => parse_text(t)?,
            None => Vec::new(),
        };
        for o in overrides {
            pairs.push(parse_pair(o).ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?);
        }
        let toy = match pairs.iter().rev().find(|(k, _)| k == "train.toy_mode") {
            Some((_, v)) => parse_bool(v).ok_or_else(|| Error::invalid(format!("train.toy_mode: `{v}` is not a bool")))?,
            None => false,
        };
        let base = if toy { Self::toy() } else { Self::reference() };
        let mut flat = flatten(&serde_json::to_value(&base)?);
        for (k, v) in pairs {
            let slot = flat
                .get_mut(&k)
                .ok_or_else(|| Error::invalid(format!("unknown configuration key `{k}`")))?;
            *slot = typed_value(&k, slot, &v)?;
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Error::invalid(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(0.0..=1.0).contains(&self.heatmap.alpha) {
            return Err(Error::invalid(format!("heatmap.alpha {} outside [0, 1]", self.heatmap.alpha)));
        }
        if self.siamese.batch_size < 2 {
            return Err(Error::invalid("siamese.batch_size must be at least 2"));
        }
        if self.siamese.input_size < 4 || self.siamese.input_size % 4 != 0 {
            return Err(Error::invalid("siamese.input_size must be a positive multiple of 4"));
        }
        if self.consistency.strip_width == 0 {
            return Err(Error::invalid("consistency.strip_width must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            batch_size: t.batch_size,
            steps: t.steps,
            weights: self.weights,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            toy_mode: t.toy_mode,
            real_label: t.real_label,
            ffl_alpha: t.ffl_alpha,
            augment: t.augment,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            preprocess: self.preprocess.clone(),
            perceptual_weights: t.perceptual_weights.clone(),
        }
    }

    pub fn siamese_config(&self) -> SiameseTrainConfig {
        let s = &self.siamese;
        SiameseTrainConfig {
            steps: s.steps,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            adam_beta1: s.adam_beta1,
            adam_beta2: s.adam_beta2,
            margin: s.margin,
            seed: self.seed,
            embedder: SiameseConfig {
                input_size: s.input_size,
            },
        }
    }

    pub fn assess_config(&self) -> AssessConfig {
        AssessConfig {
            overlap: self.translate.overlap,
            strip_width: self.consistency.strip_width,
            alpha: self.heatmap.alpha,
            ssim: self.consistency.ssim,
            preprocess: self.preprocess.clone(),
        }
    }

    /// Every key with its value, sorted, one `key = value` per line.
    pub fn to_text(&self) -> Result<String> {
        let flat = flatten(&serde_json::to_value(self)?);
        let mut out = String::new();
        for (k, v) in &flat {
            out.push_str(&format!("{k} = {}\n", render(v)));
        }
        Ok(out)
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_text()?.as_bytes())))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::reference()
    }
}

fn parse_pair(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_pair(line).ok_or_else(|| Error::invalid(format!("line {}: expected key = value", i + 1)))?);
    }
    Ok(out)
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, child, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn typed_value(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::invalid(format!("{key}: `{raw}` is not {what}"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(parse_bool(raw).ok_or_else(|| bad("a bool"))?),
        Value::Number(n) if n.is_u64() => match raw.parse::<u64>() {
            Ok(u) => Value::from(u),
            Err(_) => return Err(bad("a non-negative integer")),
        },
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !f.is_finite() {
                return Err(bad("a finite number"));
            }
            Value::from(f)
        }
        Value::Array(items) => {
            let parts: Vec<&str> = raw.trim_matches(|c| c == '[' || c == ']').split(',').collect();
            if parts.len() != items.len() {
                return Err(bad(&format!("a list of {} values", items.len())));
            }
            let mut out = Vec::with_capacity(parts.len());
            for (p, item) in parts.iter().zip(items) {
                out.push(typed_value(key, item, p.trim())?);
            }
            Value::Array(out)
        }
        Value::Null | Value::String(_) => {
            if raw.is_empty() || raw == "none" {
                Value::Null
            } else {
                Value::String(raw.to_string())
            }
        }
        Value::Object(_) => return Err(Error::invalid(format!("{key} is a section, not a value"))),
    })
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".to_string(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        let back = RunConfig::resolve(Some(&c.to_text().unwrap()), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn overrides_apply_after_file() {
        let text = "# comment\nheatmap.alpha = 0.3\nweights.w_pix = 5\n";
        let c = RunConfig::resolve(Some(text), &["heatmap.alpha=0".into()]).unwrap();
        assert_eq!(c.heatmap.alpha, 0.0);
        assert_eq!(c.weights.w_pix, 5.0);
        assert_eq!(c.assess_config().alpha, 0.0);
        assert_ne!(c.hash().unwrap(), RunConfig::default().hash().unwrap());
    }

    #[test]
    fn toy_mode_switches_preset() {
        let c = RunConfig::resolve(None, &["train.toy_mode=true".into(), "train.batch_size=8".into()]).unwrap();
        assert_eq!(c.generator.input_size, 64);
        assert_eq!(c.generator.levels, 5);
        assert_eq!(c.train.batch_size, 8);
    }

    #[test]
    fn seed_reaches_every_consumer() {
        let c = RunConfig::resolve(None, &["seed=42".into()]).unwrap();
        assert_eq!(c.train_config().seed, 42);
        assert_eq!(c.siamese_config().seed, 42);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::resolve(None, &["nope=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.batch_size=-1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.augment=maybe".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.learning_rate=0".into()]).is_err());
        assert!(RunConfig::resolve(None, &["heatmap.alpha=2".into()]).is_err());
        assert!(RunConfig::resolve(None, &["generator".into()]).is_err());
        assert!(RunConfig::resolve(Some("just words"), &[]).is_err());
    }

    #[test]
    fn lists_and_optional_paths_parse() {
        let c = RunConfig::resolve(
            None,
            &[
                "preprocess.gray_weights=0.2, 0.7, 0.1".into(),
                "train.perceptual_weights=/tmp/vgg.safetensors".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.preprocess.gray_weights, [0.2, 0.7, 0.1]);
        assert_eq!(c.train.perceptual_weights, Some(PathBuf::from("/tmp/vgg.safetensors")));
        assert!(RunConfig::resolve(None, &["preprocess.gray_weights=1,2".into()]).is_err());
    }
}
