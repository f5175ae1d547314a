//! All hyperparameters and ablation switches, with a flat `key = value` file format.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::codec::TemplateKind;
use crate::model::ModelDims;
use crate::objectives::{MulConfig, ObjectiveFlags};
use crate::sampler::{NegativeStrategy, UncertaintyConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UaulConfig {
    pub uncertainty: UncertaintyConfig,
    pub mul: MulConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(serialize_with = "ser_template")]
    pub template: TemplateKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub use_mul: bool,
    pub use_me: bool,
    pub use_mc: bool,
    pub use_ul: bool,
    #[serde(serialize_with = "ser_negatives")]
    pub negatives: NegativeStrategy,
    pub me_normalize: bool,
    pub clip_norm: f64,
    pub max_decode_len: usize,
}

fn ser_template<S: serde::Serializer>(t: &TemplateKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&t.name())
}

fn ser_negatives<S: serde::Serializer>(n: &NegativeStrategy, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&n.name())
}

impl Default for UaulConfig {
    fn default() -> Self {
        UaulConfig {
            uncertainty: UncertaintyConfig::default(),
            mul: MulConfig::default(),
            lr: 3e-4,
            epochs: 200,
            batch_size: 16,
            seed: 42,
            template: TemplateKind::Paraphrase,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            max_len: 96,
            use_mul: true,
            use_me: true,
            use_mc: true,
            use_ul: false,
            negatives: NegativeStrategy::Mc,
            me_normalize: false,
            clip_norm: 1.0,
            max_decode_len: 64,
        }
    }
}

/// Every key accepted by [`UaulConfig::set`], in file order.
pub const KEYS: [&str; 22] = [
    "k",
    "dropout",
    "alpha",
    "margin",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "template",
    "d_model",
    "n_heads",
    "n_layers",
    "d_ff",
    "max_len",
    "use_mul",
    "use_me",
    "use_mc",
    "use_ul",
    "negatives",
    "me_normalize",
    "clip_norm",
    "max_decode_len",
];

impl UaulConfig {
    /// Plain MLE seq2seq: no MC dropout, no extra terms.
    pub fn baseline(&self) -> Self {
        UaulConfig {
            use_mul: false,
            use_me: false,
            use_mc: false,
            use_ul: false,
            negatives: NegativeStrategy::Mc,
            ..self.clone()
        }
    }

    /// True when training reduces to teacher-forced MLE without any sampling.
    pub fn is_vanilla(&self) -> bool {
        !(self.use_mul || self.use_me || self.use_mc || self.use_ul)
    }

    /// The `(K, p)` actually used: a single undropped pass without MC dropout.
    pub fn effective_uncertainty(&self) -> UncertaintyConfig {
        if self.use_mc {
            self.uncertainty
        } else {
            UncertaintyConfig {
                samples: 1,
                dropout: 0.0,
            }
        }
    }

    pub fn flags(&self) -> ObjectiveFlags {
        ObjectiveFlags {
            use_mul: self.use_mul,
            use_me: self.use_me,
            use_ul: self.use_ul,
            me_normalize_by_k: self.me_normalize,
        }
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Inconsistent(m));
        if let Err(e) = self.uncertainty.validate() {
            return bad(e.to_string());
        }
        if !(self.mul.alpha > 0.0 && self.mul.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.mul.alpha));
        }
        if !self.mul.margin.is_finite() {
            return bad("margin must be finite".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_decode_len == 0 {
            return bad("epochs, batch_size and max_decode_len must be at least 1".into());
        }
        if !matches!(self.negatives, NegativeStrategy::Mc) && self.use_mc {
            return bad(format!("negatives = {} requires use_mc = false", self.negatives.name()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        self.dims(16).validate().or_else(|e| bad(e.to_string()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = |reason: String| ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        fn flag(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err("expected a boolean".into()),
            }
        }
        let r: Result<(), String> = (|| {
            match key {
                "k" => self.uncertainty.samples = num(value)?,
                "dropout" => self.uncertainty.dropout = num(value)?,
                "alpha" => self.mul.alpha = num(value)?,
                "margin" => self.mul.margin = num(value)?,
                "lr" => self.lr = num(value)?,
                "epochs" => self.epochs = num(value)?,
                "batch_size" => self.batch_size = num(value)?,
                "seed" => self.seed = num(value)?,
                "template" => self.template = TemplateKind::parse_name(value).map_err(|e| e.to_string())?,
                "d_model" => self.d_model = num(value)?,
                "n_heads" => self.n_heads = num(value)?,
                "n_layers" => self.n_layers = num(value)?,
                "d_ff" => self.d_ff = num(value)?,
                "max_len" => self.max_len = num(value)?,
                "use_mul" => self.use_mul = flag(value)?,
                "use_me" => self.use_me = flag(value)?,
                "use_mc" => self.use_mc = flag(value)?,
                "use_ul" => self.use_ul = flag(value)?,
                "negatives" => self.negatives = NegativeStrategy::parse(value)?,
                "me_normalize" => self.me_normalize = flag(value)?,
                "clip_norm" => self.clip_norm = num(value)?,
                "max_decode_len" => self.max_decode_len = num(value)?,
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        match r {
            Ok(()) => Ok(()),
            Err(_) if !KEYS.contains(&key) => Err(ConfigError::UnknownKey(key.to_string())),
            Err(reason) => Err(invalid(reason)),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "k" => self.uncertainty.samples.to_string(),
            "dropout" => self.uncertainty.dropout.to_string(),
            "alpha" => self.mul.alpha.to_string(),
            "margin" => self.mul.margin.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "template" => self.template.name(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "max_len" => self.max_len.to_string(),
            "use_mul" => self.use_mul.to_string(),
            "use_me" => self.use_me.to_string(),
            "use_mc" => self.use_mc.to_string(),
            "use_ul" => self.use_ul.to_string(),
            "negatives" => self.negatives.name(),
            "me_normalize" => self.me_normalize.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "max_decode_len" => self.max_decode_len.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = UaulConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = UaulConfig::default();
        cfg.set("template", "special:ac,sp,at,ot").unwrap();
        cfg.set("margin", "-0.3").unwrap();
        cfg.set("use_mc", "false").unwrap();
        cfg.set("negatives", "topk:3").unwrap();
        let back = UaulConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = UaulConfig::default();
        for k in KEYS {
            let mut c = UaulConfig::default();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert_eq!(UaulConfig::parse("beam = 4"), Err(ConfigError::UnknownKey("beam".into())));
    }

    #[test]
    fn bad_value_and_syntax() {
        assert!(matches!(UaulConfig::parse("k = many"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(UaulConfig::parse("k 5"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(UaulConfig::parse("dropout = 1.0"), Err(ConfigError::Inconsistent(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = UaulConfig::parse("# defaults\n\nk = 3  # fewer passes\n").unwrap();
        assert_eq!(cfg.uncertainty.samples, 3);
    }

    #[test]
    fn topk_requires_mc_off() {
        assert!(matches!(UaulConfig::parse("negatives = topk:2"), Err(ConfigError::Inconsistent(_))));
        assert!(UaulConfig::parse("negatives = topk:2\nuse_mc = false").is_ok());
    }

    #[test]
    fn baseline_is_vanilla() {
        let b = UaulConfig::default().baseline();
        assert!(b.is_vanilla());
        assert_eq!(b.effective_uncertainty().samples, 1);
        assert!(!UaulConfig::default().is_vanilla());
    }
}
