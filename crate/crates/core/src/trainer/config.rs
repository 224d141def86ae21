use std::fmt;
use std::str::FromStr;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_LAMBDA, DEFAULT_TAU, TAU_MAX, TAU_MIN};
use crate::synthdata::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    ClipDos,
    ClipDensity,
    AllPairs,
    Anchored,
    TensorClip,
    Barlow3d,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::ClipDos,
        LossKind::ClipDensity,
        LossKind::AllPairs,
        LossKind::Anchored,
        LossKind::TensorClip,
        LossKind::Barlow3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::ClipDos => "clip_dos",
            LossKind::ClipDensity => "clip_density",
            LossKind::AllPairs => "allpairs",
            LossKind::Anchored => "anchored",
            LossKind::TensorClip => "tensorclip",
            LossKind::Barlow3d => "barlow3d",
        }
    }

    /// Modalities consumed, anchor (crystal) first.
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            LossKind::ClipDos => &[Modality::Crystal, Modality::Dos],
            LossKind::ClipDensity => &[Modality::Crystal, Modality::Density],
            _ => &Modality::ALL,
        }
    }

    pub fn uses_tau(self) -> bool {
        self != LossKind::Barlow3d
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

/// Pre-training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub d: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Initial temperature.
    pub tau: f64,
    pub learn_tau: bool,
    pub lambda: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Anchored,
            d: 32,
            batch_size: 32,
            epochs: 100,
            warmup_epochs: 10,
            peak_lr: 1e-4,
            weight_decay: 5e-4,
            seed: 0,
            tau: DEFAULT_TAU,
            learn_tau: true,
            lambda: DEFAULT_LAMBDA,
            clip_norm: 5.0,
        }
    }
}

pub const PRESETS: [&str; 3] = ["desk", "paper-pretrain", "paper-retrieval"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let paper = Self {
            d: 128,
            batch_size: 360,
            epochs: 500,
            warmup_epochs: 10,
            peak_lr: 1e-4,
            weight_decay: 5e-4,
            ..Self::default()
        };
        match name {
            "desk" => Ok(Self::default()),
            "paper-pretrain" => Ok(paper),
            "paper-retrieval" => Ok(Self {
                batch_size: 100,
                ..paper
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs > 0 && self.epochs <= self.warmup_epochs {
            return bad(format!(
                "epochs ({}) must exceed warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.d < 2 || self.d % 2 != 0 {
            return bad(format!("d must be even and at least 2, got {}", self.d));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau) {
            return bad(format!("tau must lie in [{TAU_MIN}, {TAU_MAX}], got {}", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("cannot parse `{v}` for {k}")))
        }
        match key {
            "loss" => self.loss = value.parse()?,
            "d" => self.d = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "learn_tau" => self.learn_tau = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over `self`, then validates.
    pub fn layer_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("loss", self.loss.to_string()),
            ("d", self.d.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("tau", self.tau.to_string()),
            ("learn_tau", self.learn_tau.to_string()),
            ("lambda", self.lambda.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Linear warm-up to `peak` over the first `warmup_epochs / epochs` of the
/// run, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, warmup_epochs: usize, epochs: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 || epochs == 0 {
        return Ok(0.0);
    }
    let warmup = total_steps * warmup_epochs / epochs;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let span = total_steps - warmup;
    if span == 0 {
        return Ok(peak);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    cosine_lr(step, total_steps, cfg.peak_lr, cfg.warmup_epochs, cfg.epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let total = cfg.epochs * 10;
        let warm = 10 * cfg.warmup_epochs;
        assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
        assert!((lr_at(warm, total, &cfg).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_at(total, total, &cfg).unwrap().abs() < 1e-20);
        assert!(matches!(
            lr_at(total + 1, total, &cfg),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn schedule_continuous_at_boundary() {
        let cfg = TrainConfig::default();
        let total = 100_000;
        let warm = total * cfg.warmup_epochs / cfg.epochs;
        let before = cfg.peak_lr * (warm as f64 - 1e-9) / warm as f64;
        let at = lr_at(warm, total, &cfg).unwrap();
        assert!((before - cfg.peak_lr).abs() < 1e-12);
        assert!((at - cfg.peak_lr).abs() < 1e-12);
        let after = lr_at(warm + 1, total, &cfg).unwrap();
        assert!((after - cfg.peak_lr).abs() < 1e-12);
    }

    #[test]
    fn presets() {
        let p = TrainConfig::preset("paper-pretrain").unwrap();
        assert_eq!((p.batch_size, p.epochs, p.warmup_epochs), (360, 500, 10));
        assert_eq!((p.peak_lr, p.weight_decay), (1e-4, 5e-4));
        assert_eq!(TrainConfig::preset("paper-retrieval").unwrap().batch_size, 100);
        assert!(TrainConfig::preset("nope").is_err());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        c.loss = LossKind::TensorClip;
        c.batch_size = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig {
            epochs: 5,
            warmup_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::default();
        c.layer_text("loss = barlow3d\npeak_lr = 0.001 # faster\nlearn_tau = false").unwrap();
        assert_eq!(c.loss, LossKind::Barlow3d);
        assert_eq!(c.peak_lr, 1e-3);
        let mut back = TrainConfig::preset("paper-pretrain").unwrap();
        back.layer_text(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert!(c.clone().layer_text("bogus = 1").is_err());
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
    }

    proptest! {
        #[test]
        fn schedule_bounded(step in 0usize..=5000, warm in 0usize..20) {
            let cfg = TrainConfig { epochs: 50, warmup_epochs: warm, ..TrainConfig::default() };
            let lr = lr_at(step, 5000, &cfg).unwrap();
            prop_assert!((0.0..=cfg.peak_lr).contains(&lr));
        }
    }
}
