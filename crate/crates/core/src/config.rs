//! Run configuration: a flat TOML document of dotted keys.
//!
//! ```toml
//! version = 1
//! profile = "tiny"
//! seed = 0
//! train.lr = 0.0005
//! model.c_f = 64
//! ```
//!
//! `profile` is applied first and fills every other key with its defaults;
//! the remaining keys then override those defaults. See [`TrainConfig::keys`]
//! for the full schema.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corruption::CorruptionConfig;
use crate::model::ModelConfig;
use crate::objectives::{LossConfig, Reduction};
use crate::synth::{ActionClass, CorpusSpec};
use crate::{Error, Result};

pub const CONFIG_VERSION: i64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Tiny,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config { key: "profile".into(), reason: format!("`{s}` is not tiny|paper") }),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Tiny => "tiny",
            Profile::Paper => "paper",
        })
    }
}

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub clips_per_class: usize,
    pub transitions: usize,
    pub duration: usize,
    pub seed: u64,
}

impl DataConfig {
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec { transitions: self.transitions, ..CorpusSpec::balanced(self.classes, self.clips_per_class, self.duration, self.seed) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when non-zero.
    pub steps: usize,
    pub weight_decay: f64,
    /// Frames per training window.
    pub seq_len: usize,
    /// Clips used for fine-tuning; zero means all.
    pub finetune_clips: usize,
    /// Standard deviation of Gaussian noise on fine-tuning inputs.
    pub finetune_noise: f64,
    /// Batches prepared ahead of the optimizer; zero prepares inline.
    pub prefetch: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub corruption: CorruptionConfig,
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Tiny => TrainConfig {
                profile,
                seed: 0,
                lr: 5e-4,
                batch_size: 16,
                epochs: 60,
                steps: 0,
                weight_decay: 0.01,
                seq_len: 27,
                finetune_clips: 0,
                finetune_noise: 0.0,
                prefetch: 2,
                loss: LossConfig::default(),
                model: ModelConfig::tiny(),
                corruption: CorruptionConfig { t1: 4, t2: 10, ..CorruptionConfig::default() },
                data: DataConfig { classes: 8, clips_per_class: 8, transitions: 0, duration: 27, seed: 0 },
            },
            Profile::Paper => TrainConfig {
                profile,
                epochs: 300,
                seq_len: 243,
                model: ModelConfig::paper(),
                corruption: CorruptionConfig::default(),
                data: DataConfig { classes: 10, clips_per_class: 64, transitions: 64, duration: 243, seed: 0 },
                ..Self::profile(Profile::Tiny)
            },
        }
    }

    pub fn tiny() -> Self {
        Self::profile(Profile::Tiny)
    }

    /// Every settable key with its current value, in schema order.
    pub fn keys(&self) -> Vec<(String, String)> {
        let l = &self.loss;
        let c = &self.corruption;
        let d = &self.data;
        let mut v: Vec<(String, String)> = vec![
            ("version".into(), CONFIG_VERSION.to_string()),
            ("profile".into(), self.profile.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("train.lr".into(), format!("{:?}", self.lr)),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.steps".into(), self.steps.to_string()),
            ("train.weight_decay".into(), format!("{:?}", self.weight_decay)),
            ("train.seq_len".into(), self.seq_len.to_string()),
            ("train.finetune_clips".into(), self.finetune_clips.to_string()),
            ("train.finetune_noise".into(), format!("{:?}", self.finetune_noise)),
            ("train.prefetch".into(), self.prefetch.to_string()),
            ("loss.tau".into(), format!("{:?}", l.tau)),
            ("loss.k".into(), l.k.to_string()),
            ("loss.gamma".into(), format!("{:?}", l.gamma)),
            ("loss.lambda_3d".into(), format!("{:?}", l.lambda_3d)),
            ("loss.lambda_v".into(), format!("{:?}", l.lambda_v)),
            ("loss.epsilon_smooth".into(), format!("{:?}", l.epsilon_smooth)),
            ("loss.con_reduction".into(), l.con_reduction.name().into()),
            ("loss.recon_reduction".into(), l.recon_reduction.name().into()),
            ("corruption.joint_ratio".into(), format!("{:?}", c.joint_ratio)),
            ("corruption.frame_ratio".into(), format!("{:?}", c.frame_ratio)),
            ("corruption.t1".into(), c.t1.to_string()),
            ("corruption.t2".into(), c.t2.to_string()),
            ("corruption.sigma".into(), format!("{:?}", c.sigma)),
            ("corruption.outlier_prob".into(), format!("{:?}", c.outlier_prob)),
            ("corruption.mode_probs".into(), c.mode_probs.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(",")),
            ("data.classes".into(), d.classes.to_string()),
            ("data.clips_per_class".into(), d.clips_per_class.to_string()),
            ("data.transitions".into(), d.transitions.to_string()),
            ("data.duration".into(), d.duration.to_string()),
            ("data.seed".into(), d.seed.to_string()),
        ];
        for line in self.model.to_kv().lines() {
            let (k, val) = line.split_once('=').expect("kv line");
            v.push((format!("model.{k}"), val.to_string()));
        }
        v
    }

    /// Sets `key` from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: String| Error::Config { key: key.to_string(), reason };
        let parse_err = || bad(format!("cannot parse `{value}`"));
        macro_rules! p {
            () => {
                value.parse().map_err(|_| parse_err())?
            };
        }
        match key {
            "version" => {
                if value.parse::<i64>().ok() != Some(CONFIG_VERSION) {
                    return Err(bad(format!("unsupported version `{value}`, expected {CONFIG_VERSION}")));
                }
            }
            "profile" => {
                let seed = self.seed;
                *self = Self::profile(value.parse()?);
                self.seed = seed;
            }
            "seed" => self.seed = p!(),
            "train.lr" => self.lr = p!(),
            "train.batch_size" => self.batch_size = p!(),
            "train.epochs" => self.epochs = p!(),
            "train.steps" => self.steps = p!(),
            "train.weight_decay" => self.weight_decay = p!(),
            "train.seq_len" => self.seq_len = p!(),
            "train.finetune_clips" => self.finetune_clips = p!(),
            "train.finetune_noise" => self.finetune_noise = p!(),
            "train.prefetch" => self.prefetch = p!(),
            "loss.tau" => self.loss.tau = p!(),
            "loss.k" => self.loss.k = p!(),
            "loss.gamma" => self.loss.gamma = p!(),
            "loss.lambda_3d" => self.loss.lambda_3d = p!(),
            "loss.lambda_v" => self.loss.lambda_v = p!(),
            "loss.epsilon_smooth" => self.loss.epsilon_smooth = p!(),
            "loss.con_reduction" => self.loss.con_reduction = value.parse::<Reduction>().map_err(|_| parse_err())?,
            "loss.recon_reduction" => self.loss.recon_reduction = value.parse::<Reduction>().map_err(|_| parse_err())?,
            "corruption.joint_ratio" => self.corruption.joint_ratio = p!(),
            "corruption.frame_ratio" => self.corruption.frame_ratio = p!(),
            "corruption.t1" => self.corruption.t1 = p!(),
            "corruption.t2" => self.corruption.t2 = p!(),
            "corruption.sigma" => self.corruption.sigma = p!(),
            "corruption.outlier_prob" => self.corruption.outlier_prob = p!(),
            "corruption.mode_probs" => {
                let parts = value.trim_matches(|c| c == '[' || c == ']').split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| parse_err())?;
                self.corruption.mode_probs = parts.try_into().map_err(|_| bad("expected three probabilities".into()))?;
            }
            "data.classes" => self.data.classes = p!(),
            "data.clips_per_class" => self.data.clips_per_class = p!(),
            "data.transitions" => self.data.transitions = p!(),
            "data.duration" => self.data.duration = p!(),
            "data.seed" => self.data.seed = p!(),
            _ => match key.strip_prefix("model.") {
                Some(k) => self.model.set(k, value)?,
                None => return Err(bad("unknown key".into())),
            },
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config { key: assignment.to_string(), reason: "expected key=value".into() })?;
        self.set(k.trim(), v.trim().trim_matches('"'))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format { what: "config", reason: e.to_string() })?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        let mut cfg = Self::tiny();
        match flat.iter().find(|(k, _)| k == "version") {
            Some((_, v)) => cfg.set("version", v)?,
            None => return Err(Error::Config { key: "version".into(), reason: "missing".into() }),
        }
        if let Some((_, v)) = flat.iter().find(|(k, _)| k == "profile") {
            cfg.set("profile", v)?;
        }
        if let Some((_, v)) = flat.iter().find(|(k, _)| k == "seed") {
            cfg.set("seed", v)?;
        }
        for (k, v) in flat.iter().filter(|(k, _)| k != "version" && k != "profile") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// TOML text that [`TrainConfig::from_toml_str`] reads back unchanged.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.keys() {
            let quoted = matches!(k.as_str(), "profile" | "loss.con_reduction" | "loss.recon_reduction" | "corruption.mode_probs");
            if k == "corruption.mode_probs" {
                s.push_str(&format!("{k} = [{}]\n", v.replace(',', ", ")));
            } else if quoted {
                s.push_str(&format!("{k} = \"{v}\"\n"));
            } else {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }

    /// Number of optimizer steps for a run over `samples` training samples.
    pub fn total_steps(&self, samples: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * samples.div_ceil(self.batch_size.max(1))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: key.into(), reason: reason.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr", "must be positive");
        }
        if self.batch_size < 1 {
            return bad("train.batch_size", "must be at least 1");
        }
        if self.epochs == 0 && self.steps == 0 {
            return bad("train.steps", "either train.epochs or train.steps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay", "must be non-negative");
        }
        if self.seq_len < 2 || self.seq_len > self.model.t_max {
            return bad("train.seq_len", "must be in 2..=model.t_max");
        }
        if !(self.finetune_noise >= 0.0) {
            return bad("train.finetune_noise", "must be non-negative");
        }
        if self.data.duration < self.seq_len {
            return bad("data.duration", "must be at least train.seq_len");
        }
        if self.data.classes < 2 || self.data.classes > ActionClass::ALL.len() {
            return bad("data.classes", "must be in 2..=10");
        }
        if self.data.clips_per_class == 0 {
            return bad("data.clips_per_class", "must be positive");
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.corruption.validate(self.seq_len)
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let text = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => format!("{f:?}"),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            other => return Err(Error::Config { key, reason: format!("unsupported value {other}") }),
        };
        out.push((key, text));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        TrainConfig::tiny().validate().unwrap();
        TrainConfig::profile(Profile::Paper).validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainConfig::tiny();
        cfg.seed = 42;
        cfg.loss.gamma = 1.5;
        cfg.model.l3 = 1;
        cfg.corruption.mode_probs = [1.0, 0.0, 0.0];
        let back = TrainConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_and_nested_keys_agree() {
        let a = TrainConfig::from_toml_str("version = 1\ntrain.lr = 0.001\nmodel.c_f = 32\n").unwrap();
        let b = TrainConfig::from_toml_str("version = 1\n[train]\nlr = 0.001\n[model]\nc_f = 32\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lr, 0.001);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let e = TrainConfig::from_toml_str("version = 1\ntrain.lrr = 0.1\n").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "train.lrr"), "{e}");
        let e = TrainConfig::from_toml_str("version = 1\nmodel.width = 3\n").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "model.width"), "{e}");
        assert!(TrainConfig::from_toml_str("train.lr = 0.1\n").is_err());
        assert!(TrainConfig::from_toml_str("version = 2\n").is_err());
    }

    #[test]
    fn profile_key_applies_before_overrides() {
        let cfg = TrainConfig::from_toml_str("version = 1\ntrain.epochs = 3\nprofile = \"paper\"\n").unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seq_len, 243);
    }

    #[test]
    fn overrides_and_validation() {
        let mut cfg = TrainConfig::tiny();
        cfg.apply_override("loss.k=4").unwrap();
        cfg.apply_override("corruption.mode_probs=0.2,0.3,0.5").unwrap();
        assert_eq!(cfg.loss.k, 4);
        assert_eq!(cfg.corruption.mode_probs, [0.2, 0.3, 0.5]);
        cfg.apply_override("train.lr=0").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "train.lr"));
        assert!(cfg.apply_override("nokey").is_err());
        let mut cfg = TrainConfig::tiny();
        cfg.corruption.t2 = 30;
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "corruption.t2"));
    }
}
