//! Flat key=value run configuration. Every field of `TrainConfig` is
//! addressable from the file; unknown or repeated keys are rejected rather
//! than ignored.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub t0: usize,
    pub t_mult: usize,
    pub use_mam: bool,
    pub use_smamba_fpn: bool,
    pub use_spatial_branch: bool,
    pub use_mhr: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_main: 5e-4,
            lr_backbone: 5e-5,
            weight_decay: 0.0025,
            batch_size: 4,
            epochs: 30,
            t0: 15,
            t_mult: 2,
            use_mam: true,
            use_smamba_fpn: true,
            use_spatial_branch: true,
            use_mhr: true,
            seed: 0,
        }
    }
}

fn bad(msg: String) -> Error {
    Error::Config(msg)
}

fn parse_as<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("bad value '{}' for key '{}'", v, key)))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_main <= 0.0 || self.lr_backbone <= 0.0 {
            return Err(bad("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(bad("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(bad("batch_size and epochs must be at least 1".into()));
        }
        if self.t0 < 1 || self.t_mult < 1 {
            return Err(bad("scheduler needs t0 >= 1 and t_mult >= 1".into()));
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. Blank lines and
    /// `#`-comments are allowed; unknown and duplicate keys are not.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(bad(format!("line {}: duplicate key '{}'", ln + 1, k)));
            }
            seen.push(k.to_string());
            match k {
                "lr_main" => cfg.lr_main = parse_as(k, v)?,
                "lr_backbone" => cfg.lr_backbone = parse_as(k, v)?,
                "weight_decay" => cfg.weight_decay = parse_as(k, v)?,
                "batch_size" => cfg.batch_size = parse_as(k, v)?,
                "epochs" => cfg.epochs = parse_as(k, v)?,
                "t0" => cfg.t0 = parse_as(k, v)?,
                "t_mult" => cfg.t_mult = parse_as(k, v)?,
                "use_mam" => cfg.use_mam = parse_as(k, v)?,
                "use_smamba_fpn" => cfg.use_smamba_fpn = parse_as(k, v)?,
                "use_spatial_branch" => cfg.use_spatial_branch = parse_as(k, v)?,
                "use_mhr" => cfg.use_mhr = parse_as(k, v)?,
                "seed" => cfg.seed = parse_as(k, v)?,
                _ => return Err(bad(format!("line {}: unknown key '{}'", ln + 1, k))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The inverse of `parse`, used to persist the resolved run settings.
    pub fn to_text(&self) -> String {
        format!(
            "lr_main = {}\nlr_backbone = {}\nweight_decay = {}\nbatch_size = {}\nepochs = {}\n\
             t0 = {}\nt_mult = {}\nuse_mam = {}\nuse_smamba_fpn = {}\nuse_spatial_branch = {}\n\
             use_mhr = {}\nseed = {}\n",
            self.lr_main,
            self.lr_backbone,
            self.weight_decay,
            self.batch_size,
            self.epochs,
            self.t0,
            self.t_mult,
            self.use_mam,
            self.use_smamba_fpn,
            self.use_spatial_branch,
            self.use_mhr,
            self.seed,
        )
    }

    /// Desk-scale model with this config's ablation switches applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            use_mam: self.use_mam,
            use_smamba_fpn: self.use_smamba_fpn,
            use_spatial_branch: self.use_spatial_branch,
            use_mhr: self.use_mhr,
            ..Default::default()
        }
    }
}
