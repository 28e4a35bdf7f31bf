//! Training configuration and its flat `key = value` text form. The same
//! serialization is embedded in checkpoints.

use crate::error::{Error, Result};

pub const CONFIG_KEYS: [&str; 16] = [
    "p",
    "k_pc",
    "k_neighbors",
    "n_blocks",
    "lambda",
    "alpha",
    "lr_backbone",
    "lr_head",
    "weight_decay",
    "epochs",
    "eval_every",
    "embed_dim",
    "ffn_ratio",
    "curvature",
    "tau",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub p: usize,
    pub k_pc: usize,
    pub k_neighbors: usize,
    pub n_blocks: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub embed_dim: usize,
    pub ffn_ratio: usize,
    pub curvature: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 100,
            k_pc: 9,
            k_neighbors: 100,
            n_blocks: 2,
            lambda: 0.4,
            alpha: 0.6,
            lr_backbone: 3e-5,
            lr_head: 7.5e-4,
            weight_decay: 5e-5,
            epochs: 400,
            eval_every: 5,
            embed_dim: 128,
            ffn_ratio: 4,
            curvature: crate::hyperbolic::DEFAULT_CURVATURE,
            tau: crate::hyperbolic::DEFAULT_TAU,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k_pc
    }

    /// All invariant violations at once, or Ok.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.p == 0 {
            problems.push("p must be >= 1".to_string());
        }
        if self.k_pc == 0 {
            problems.push("k_pc must be >= 1".to_string());
        }
        if self.k_neighbors == 0 {
            problems.push("k_neighbors must be >= 1".to_string());
        }
        if self.k_neighbors >= self.batch_size().max(1) {
            problems.push(format!(
                "k_neighbors={} must be below the batch size {}",
                self.k_neighbors,
                self.batch_size()
            ));
        }
        if self.n_blocks == 0 {
            problems.push("n_blocks must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda={} must lie in [0, 1]", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha={} must lie in [0, 1]", self.alpha));
        }
        if self.lr_backbone < 0.0 {
            problems.push("lr_backbone must be >= 0".to_string());
        }
        if self.lr_head < 0.0 {
            problems.push("lr_head must be >= 0".to_string());
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be >= 0".to_string());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be >= 1".to_string());
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be >= 1".to_string());
        }
        if self.ffn_ratio == 0 {
            problems.push("ffn_ratio must be >= 1".to_string());
        }
        if self.curvature <= 0.0 {
            problems.push(format!("curvature={} must be positive", self.curvature));
        }
        if self.tau <= 0.0 {
            problems.push(format!("tau={} must be positive", self.tau));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(problems.join("; ")))
        }
    }

    /// Canonical `key = value` serialization, one key per line.
    pub fn to_kv_string(&self) -> String {
        format!(
            "p = {}\nk_pc = {}\nk_neighbors = {}\nn_blocks = {}\nlambda = {}\nalpha = {}\n\
             lr_backbone = {}\nlr_head = {}\nweight_decay = {}\nepochs = {}\neval_every = {}\n\
             embed_dim = {}\nffn_ratio = {}\ncurvature = {}\ntau = {}\nseed = {}\n",
            self.p,
            self.k_pc,
            self.k_neighbors,
            self.n_blocks,
            self.lambda,
            self.alpha,
            self.lr_backbone,
            self.lr_head,
            self.weight_decay,
            self.epochs,
            self.eval_every,
            self.embed_dim,
            self.ffn_ratio,
            self.curvature,
            self.tau,
            self.seed
        )
    }

    /// Parse the flat key=value form. `#` starts a comment; every key is
    /// required exactly once; unknown keys are rejected. All problems are
    /// reported in one error.
    pub fn from_kv_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut problems = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!(
                    "line {line_no}: expected 'key = value', got '{line}'"
                ));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if !CONFIG_KEYS.contains(&key) {
                problems.push(format!("line {line_no}: unknown key '{key}'"));
                continue;
            }
            if !seen.insert(key.to_string()) {
                problems.push(format!("line {line_no}: duplicate key '{key}'"));
                continue;
            }
            if let Err(msg) = cfg.set(key, value) {
                problems.push(format!("line {line_no}: {msg}"));
            }
        }
        let missing: Vec<&str> = CONFIG_KEYS
            .iter()
            .filter(|k| !seen.contains(**k))
            .copied()
            .collect();
        if !missing.is_empty() {
            problems.push(format!("missing required keys: {}", missing.join(", ")));
        }
        if let Err(e) = cfg.validate() {
            if problems.is_empty() {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::parse("config", problems.join("; ")))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value '{value}' for key '{key}'"))
        }
        match key {
            "p" => self.p = num(key, value)?,
            "k_pc" => self.k_pc = num(key, value)?,
            "k_neighbors" => self.k_neighbors = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lr_backbone" => self.lr_backbone = num(key, value)?,
            "lr_head" => self.lr_head = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "ffn_ratio" => self.ffn_ratio = num(key, value)?,
            "curvature" => self.curvature = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => unreachable!("key filtered above"),
        }
        Ok(())
    }
}
