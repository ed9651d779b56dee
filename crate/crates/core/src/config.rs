//! Flat `key = value` configuration with `#` comments.
//!
//! Precedence, lowest first: defaults, config file, `QGK_*` environment
//! variables, explicit overrides (command-line flags).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "QGK_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Itf,
    EquippedOnly,
    PureOnly,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itf" => Ok(TrainMode::Itf),
            "equipped-only" => Ok(TrainMode::EquippedOnly),
            "pure-only" => Ok(TrainMode::PureOnly),
            _ => Err(Error::Config(format!(
                "mode must be itf, equipped-only or pure-only, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Itf => "itf",
            TrainMode::EquippedOnly => "equipped-only",
            TrainMode::PureOnly => "pure-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub hidden_size: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub itf_n: usize,
    pub itf_cycles: usize,
    pub beam: usize,
    pub avg_k: usize,
    pub seed: u64,
    pub word_dim: usize,
    pub bio_dim: usize,
    pub ner_dim: usize,
    pub pos_dim: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    pub clip: f64,
    pub vocab_size: usize,
    pub min_freq: usize,
    pub eval_interval: usize,
    pub mode: TrainMode,
    pub no_tg: bool,
    pub no_rc: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            hidden_size: 600,
            layers: 2,
            dropout: 0.3,
            lr: 1e-3,
            batch_size: 16,
            itf_n: 3000,
            itf_cycles: 3,
            beam: 10,
            avg_k: 5,
            seed: 42,
            word_dim: 100,
            bio_dim: 8,
            ner_dim: 8,
            pos_dim: 8,
            max_len: 30,
            length_penalty: 0.7,
            clip: 5.0,
            vocab_size: 5000,
            min_freq: 1,
            eval_interval: 500,
            mode: TrainMode::Itf,
            no_tg: false,
            no_rc: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl Config {
    pub const KEYS: [&'static str; 23] = [
        "hidden_size",
        "layers",
        "dropout",
        "lr",
        "batch_size",
        "itf_n",
        "itf_cycles",
        "beam",
        "avg_k",
        "seed",
        "word_dim",
        "bio_dim",
        "ner_dim",
        "pos_dim",
        "max_len",
        "length_penalty",
        "clip",
        "vocab_size",
        "min_freq",
        "eval_interval",
        "mode",
        "no_tg",
        "no_rc",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "hidden_size" => self.hidden_size = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "itf_n" => self.itf_n = parse(key, v)?,
            "itf_cycles" => self.itf_cycles = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "avg_k" => self.avg_k = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "word_dim" => self.word_dim = parse(key, v)?,
            "bio_dim" => self.bio_dim = parse(key, v)?,
            "ner_dim" => self.ner_dim = parse(key, v)?,
            "pos_dim" => self.pos_dim = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "length_penalty" => self.length_penalty = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "min_freq" => self.min_freq = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "no_tg" => self.no_tg = parse(key, v)?,
            "no_rc" => self.no_rc = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.merge_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse_str(&text)
    }

    /// Applies `QGK_<KEY>` variables, e.g. `QGK_HIDDEN_SIZE=64`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) {
                self.set(&key.to_lowercase(), v.as_ref())?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_size < 2 || !self.hidden_size.is_multiple_of(2) {
            return bad("hidden_size must be even and at least 2");
        }
        if self.layers == 0 || self.batch_size == 0 || self.itf_n == 0 || self.itf_cycles == 0 {
            return bad("layers, batch_size, itf_n and itf_cycles must be at least 1");
        }
        if self.beam == 0 || self.avg_k == 0 || self.max_len == 0 {
            return bad("beam, avg_k and max_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.clip.is_nan() || self.clip <= 0.0 {
            return bad("lr and clip must be positive");
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return bad("vocab_size must exceed the number of reserved tokens");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1");
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let pairs: [(&str, String); 23] = [
            ("hidden_size", self.hidden_size.to_string()),
            ("layers", self.layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("itf_n", self.itf_n.to_string()),
            ("itf_cycles", self.itf_cycles.to_string()),
            ("beam", self.beam.to_string()),
            ("avg_k", self.avg_k.to_string()),
            ("seed", self.seed.to_string()),
            ("word_dim", self.word_dim.to_string()),
            ("bio_dim", self.bio_dim.to_string()),
            ("ner_dim", self.ner_dim.to_string()),
            ("pos_dim", self.pos_dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("length_penalty", self.length_penalty.to_string()),
            ("clip", self.clip.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("min_freq", self.min_freq.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("mode", self.mode.to_string()),
            ("no_tg", self.no_tg.to_string()),
            ("no_rc", self.no_rc.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = Config::default();
        assert_eq!(Config::parse_str(&c.to_kv_string()).unwrap(), c);
    }

    #[test]
    fn file_env_and_comments() {
        let mut c = Config::parse_str("# toy\nhidden_size = 64 # small\nmode = equipped-only\n").unwrap();
        assert_eq!(c.hidden_size, 64);
        assert_eq!(c.mode, TrainMode::EquippedOnly);
        c.apply_env([("QGK_BEAM", "3"), ("PATH", "/bin")]).unwrap();
        assert_eq!(c.beam, 3);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Config::parse_str("hidden = 3").is_err());
        assert!(Config::parse_str("hidden_size = 3").is_err());
        assert!(Config::parse_str("dropout = high").is_err());
        assert!(Config::parse_str("no equals sign").is_err());
        assert!(Config::default().apply_env([("QGK_NOPE", "1")]).is_err());
    }
}
