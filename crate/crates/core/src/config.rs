//! Flat key=value configuration with CLI-overridable defaults. Every
//! default is echoed into the run manifest so silent choices stay visible.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            epsilon: 1e-8,
            clip_norm: 5.0,
            batch_size: 16,
            max_epochs: 100,
            patience: 3,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArg("learning_rate must be > 0".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidArg("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArg("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Config {
    pub opt: OptimizerConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_vocab: usize,
    pub min_count: usize,
    pub n_dev: usize,
    pub nb_alpha: f64,
    pub kn_discount: f64,
    pub mlp_emb_dim: usize,
    pub mlp_hidden_dim: usize,
    pub mlp_epochs: usize,
    /// Dev-accuracy learning-rate grid.
    pub lr_grid: Vec<f64>,
    pub self_train_rounds: usize,
    /// Posterior margin for self-training: top1/top2 ratio threshold.
    pub self_train_margin: f64,
    pub curve_sizes: Vec<usize>,
    pub curve_seeds: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            opt: OptimizerConfig::default(),
            embed_dim: 100,
            hidden_dim: 100,
            max_vocab: 50_000,
            min_count: 2,
            n_dev: 5_000,
            nb_alpha: 1.0,
            kn_discount: 0.75,
            mlp_emb_dim: 100,
            mlp_hidden_dim: 100,
            mlp_epochs: 200,
            lr_grid: vec![0.5, 0.1, 0.05, 0.01],
            self_train_rounds: 3,
            self_train_margin: 2.0,
            curve_sizes: vec![5, 20, 100, 1000],
            curve_seeds: 3,
        }
    }
}

impl Config {
    /// Desk-scale preset for quick runs on the shipped fixtures.
    pub fn fixture_preset() -> Self {
        let mut c = Config::default();
        c.embed_dim = 8;
        c.hidden_dim = 8;
        c.max_vocab = 64;
        c.min_count = 1;
        c.n_dev = 4;
        c.opt.max_epochs = 50;
        c.opt.batch_size = 4;
        c.curve_sizes = vec![2, 4];
        c
    }

    /// Desk-scale preset for subsampled AG-News-style runs.
    pub fn agnews_small_preset() -> Self {
        let mut c = Config::default();
        c.embed_dim = 16;
        c.hidden_dim = 16;
        c.max_vocab = 10_000;
        c.min_count = 1;
        c.n_dev = 500;
        c.opt.max_epochs = 20;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fixture" => Ok(Self::fixture_preset()),
            "agnews-small" => Ok(Self::agnews_small_preset()),
            other => Err(Error::InvalidArg(format!("unknown preset `{other}`"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::InvalidArg(format!("bad value `{v}` for key `{k}`"));
        macro_rules! parse {
            ($v:expr, $k:expr) => {
                $v.parse().map_err(|_| bad($k, $v))?
            };
        }
        match key {
            "learning_rate" => self.opt.learning_rate = parse!(value, key),
            "epsilon" => self.opt.epsilon = parse!(value, key),
            "clip_norm" => self.opt.clip_norm = parse!(value, key),
            "batch_size" => self.opt.batch_size = parse!(value, key),
            "max_epochs" => self.opt.max_epochs = parse!(value, key),
            "patience" => self.opt.patience = parse!(value, key),
            "seed" => self.opt.seed = parse!(value, key),
            "embed_dim" => self.embed_dim = parse!(value, key),
            "hidden_dim" => self.hidden_dim = parse!(value, key),
            "max_vocab" => self.max_vocab = parse!(value, key),
            "min_count" => self.min_count = parse!(value, key),
            "n_dev" => self.n_dev = parse!(value, key),
            "nb_alpha" => self.nb_alpha = parse!(value, key),
            "kn_discount" => self.kn_discount = parse!(value, key),
            "mlp_emb_dim" => self.mlp_emb_dim = parse!(value, key),
            "mlp_hidden_dim" => self.mlp_hidden_dim = parse!(value, key),
            "mlp_epochs" => self.mlp_epochs = parse!(value, key),
            "self_train_rounds" => self.self_train_rounds = parse!(value, key),
            "self_train_margin" => self.self_train_margin = parse!(value, key),
            "curve_seeds" => self.curve_seeds = parse!(value, key),
            "lr_grid" => {
                self.lr_grid = value
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(key, value)))
                    .collect::<Result<_>>()?
            }
            "curve_sizes" => {
                self.curve_sizes = value
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(key, value)))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::InvalidArg(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a flat `key=value` file; `#` starts a comment.
    pub fn load_kv(path: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_kv_file(path)?;
        Ok(cfg)
    }

    pub fn apply_kv_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {}: expected key=value", i + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Full flat view for the run manifest.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("learning_rate".into(), self.opt.learning_rate.to_string());
        m.insert("epsilon".into(), self.opt.epsilon.to_string());
        m.insert("clip_norm".into(), self.opt.clip_norm.to_string());
        m.insert("batch_size".into(), self.opt.batch_size.to_string());
        m.insert("max_epochs".into(), self.opt.max_epochs.to_string());
        m.insert("patience".into(), self.opt.patience.to_string());
        m.insert("seed".into(), self.opt.seed.to_string());
        m.insert("embed_dim".into(), self.embed_dim.to_string());
        m.insert("hidden_dim".into(), self.hidden_dim.to_string());
        m.insert("max_vocab".into(), self.max_vocab.to_string());
        m.insert("min_count".into(), self.min_count.to_string());
        m.insert("n_dev".into(), self.n_dev.to_string());
        m.insert("nb_alpha".into(), self.nb_alpha.to_string());
        m.insert("kn_discount".into(), self.kn_discount.to_string());
        m.insert("mlp_emb_dim".into(), self.mlp_emb_dim.to_string());
        m.insert("mlp_hidden_dim".into(), self.mlp_hidden_dim.to_string());
        m.insert("mlp_epochs".into(), self.mlp_epochs.to_string());
        m.insert(
            "lr_grid".into(),
            self.lr_grid
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("self_train_rounds".into(), self.self_train_rounds.to_string());
        m.insert("self_train_margin".into(), self.self_train_margin.to_string());
        m.insert(
            "curve_sizes".into(),
            self.curve_sizes
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("curve_seeds".into(), self.curve_seeds.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn kv_file_round_trip() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\nlearning_rate = 0.05\nbatch_size=8\ncurve_sizes=5,20").unwrap();
        let cfg = Config::load_kv(f.path()).unwrap();
        assert_eq!(cfg.opt.learning_rate, 0.05);
        assert_eq!(cfg.opt.batch_size, 8);
        assert_eq!(cfg.curve_sizes, vec![5, 20]);
    }

    #[test]
    fn unknown_key_is_error() {
        let mut cfg = Config::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("batch_size", "x").is_err());
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut cfg = OptimizerConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = OptimizerConfig::default();
        cfg2.patience = 0;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn map_echoes_every_default() {
        let m = Config::default().to_map();
        assert_eq!(m["max_vocab"], "50000");
        assert_eq!(m["kn_discount"], "0.75");
        assert!(m.contains_key("lr_grid"));
    }
}
