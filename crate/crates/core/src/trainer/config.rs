//! Training hyperparameters and their `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::network::DOWNSAMPLE;

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs between input-size redraws; 0 keeps the base size throughout.
    pub multiscale_period: usize,
    pub scale_set: Vec<usize>,
    pub seed: u64,
    /// Epochs after which the learning rate is multiplied by 0.1.
    pub lr_steps: Vec<usize>,
    /// Epochs over which the learning rate ramps up linearly from zero,
    /// counted in optimizer steps. 0 disables the ramp.
    pub warmup_epochs: usize,
    /// Checkpoint every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    /// Random flips and brightness jitter.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 100,
            multiscale_period: 10,
            scale_set: (320..=512).step_by(DOWNSAMPLE).collect(),
            seed: 0,
            lr_steps: Vec::new(),
            warmup_epochs: 0,
            checkpoint_every: 1,
            augment: false,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| s.parse().ok()).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if self.multiscale_period > 0 && self.scale_set.is_empty() {
            return bad("scale_set is empty".into());
        }
        if let Some(s) = self.scale_set.iter().find(|&&s| s == 0 || s % DOWNSAMPLE != 0) {
            return bad(format!("scale {s} is not a positive multiple of {DOWNSAMPLE}"));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<TrainConfig, TrainError> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| TrainError::Config(format!("line {}: {m}: '{}'", i + 1, raw.trim()));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || err("bad value");
            match k {
                "batch_size" => c.batch_size = v.parse().map_err(|_| num())?,
                "learning_rate" => c.learning_rate = v.parse().map_err(|_| num())?,
                "momentum" => c.momentum = v.parse().map_err(|_| num())?,
                "weight_decay" => c.weight_decay = v.parse().map_err(|_| num())?,
                "epochs" => c.epochs = v.parse().map_err(|_| num())?,
                "multiscale_period" => c.multiscale_period = v.parse().map_err(|_| num())?,
                "scale_set" => c.scale_set = list(v).ok_or_else(num)?,
                "seed" => c.seed = v.parse().map_err(|_| num())?,
                "lr_steps" => c.lr_steps = list(v).ok_or_else(num)?,
                "warmup_epochs" => c.warmup_epochs = v.parse().map_err(|_| num())?,
                "checkpoint_every" => c.checkpoint_every = v.parse().map_err(|_| num())?,
                "augment" => c.augment = v.parse().map_err(|_| num())?,
                _ => return Err(err("unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<TrainConfig, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        TrainConfig::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "multiscale_period = {}", self.multiscale_period);
        let _ = writeln!(s, "scale_set = {}", join(&self.scale_set));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lr_steps = {}", join(&self.lr_steps));
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "augment = {}", self.augment);
        s
    }

    /// Learning rate at a 1-based epoch, before warmup.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| epoch > s).count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }
}
