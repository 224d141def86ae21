use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{clip_global_norm, cosine_lr, optimizer_step, AdamState};
use crate::autodiff::{Graph, ParamSet};
use crate::encoders::{CrystalEncoder, Encoder, LinearHead};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{split_dataset, Dataset, MaterialRecord, Modality, SplitSpec};
use crate::tensor::Tensor;

/// Peak learning rates tried during fine-tuning.
pub const SWEEP: [f64; 3] = [1e-3, 1e-4, 1e-5];

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub sweep: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Seeds the split, head initialization and batch order.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            sweep: SWEEP.to_vec(),
            batch_size: 120,
            epochs: 30,
            warmup_epochs: 3,
            weight_decay: 0.0,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() || self.sweep.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("bad learning-rate sweep {:?}", self.sweep)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 || self.epochs <= self.warmup_epochs {
            return Err(Error::Config(format!(
                "epochs ({}) must be positive and exceed warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Crystal encoder plus linear head predicting a standardized property.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunedModel<T: Scalar> {
    pub encoder: CrystalEncoder<T>,
    pub head: LinearHead<T>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl<T: Scalar> FinetunedModel<T> {
    pub fn predict(&self, rec: &MaterialRecord) -> Result<f64> {
        let e = self.encoder.encode(rec.crystal()?)?;
        Ok(self.head.predict(&e)?.as_f64() * self.target_std + self.target_mean)
    }

    /// Mean absolute error of [`Self::predict`] against `property`.
    pub fn mae(&self, data: &Dataset, property: &str) -> Result<f64> {
        let errs = data
            .records
            .par_iter()
            .map(|r| Ok((self.predict(r)? - label(r, property)?).abs()))
            .collect::<Result<Vec<f64>>>()?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport<T: Scalar> {
    pub property: String,
    pub best_lr: f64,
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub test_mae: f64,
    /// Validation MAE per epoch for each learning rate of the sweep.
    pub val_history: Vec<(f64, Vec<f64>)>,
    pub model: FinetunedModel<T>,
}

/// 1-based index of the smallest entry; the earliest wins ties.
pub fn select_best_epoch(history: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in history.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i + 1, v));
        }
    }
    best.map(|(i, _)| i)
}

fn label(r: &MaterialRecord, property: &str) -> Result<f64> {
    r.properties
        .get(property)
        .copied()
        .ok_or_else(|| Error::PropertyMissing(format!("{property} (record {})", r.id)))
}

/// Trains `encoder` plus a fresh linear head on the 60% train split for each
/// learning rate of the sweep, keeps the (rate, epoch) with the lowest
/// validation MAE, and reports its test MAE.
pub fn finetune<T: Scalar>(
    encoder: &CrystalEncoder<T>,
    labeled: &Dataset,
    property: &str,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport<T>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for r in &labeled.records {
        label(r, property)?;
        if r.crystal.is_none() {
            return Err(Error::ModalityMissing(Modality::Crystal.name().into()));
        }
    }
    let (train, val, test) = split_dataset(labeled, &SplitSpec::standard(cfg.seed))?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::BadSplit(format!(
            "{} records leave an empty split",
            labeled.len()
        )));
    }
    let ys: Vec<f64> = train
        .records
        .iter()
        .map(|r| label(r, property))
        .collect::<Result<_>>()?;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };

    let mut best: Option<(f64, usize, f64, FinetunedModel<T>)> = None;
    let mut val_history = Vec::with_capacity(cfg.sweep.len());
    for &peak in &cfg.sweep {
        let mut model = FinetunedModel {
            encoder: encoder.clone(),
            head: LinearHead::new(encoder.embed_dim(), cfg.seed),
            target_mean: mean,
            target_std: std,
        };
        let mut opt = AdamState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let steps = train.len().div_ceil(cfg.batch_size);
        let total = steps * cfg.epochs;
        let mut global = 0;
        let mut hist = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let recs: Vec<&MaterialRecord> = chunk.iter().map(|&i| &train.records[i]).collect();
                let mut grads = regression_grads(&model, &recs, property)?;
                if !grads.values().all(Tensor::is_finite) {
                    return Err(Error::NonFiniteLoss { epoch, step: global + 1 });
                }
                clip_global_norm(&mut grads, cfg.clip_norm);
                global += 1;
                let lr = cosine_lr(global, total, peak, cfg.warmup_epochs, cfg.epochs)?;
                let mut params = model.encoder.params().clone();
                params.extend(model.head.params().clone());
                optimizer_step(&mut params, &grads, &mut opt, lr, cfg.weight_decay)?;
                for (k, v) in params {
                    if k.starts_with(LinearHead::<T>::NAME) && model.head.params().contains_key(&k) {
                        model.head.params_mut().insert(k, v);
                    } else {
                        model.encoder.params_mut().insert(k, v);
                    }
                }
            }
            let v = model.mae(&val, property)?;
            hist.push(v);
            if best.as_ref().is_none_or(|b| v < b.2) {
                best = Some((peak, epoch, v, model.clone()));
            }
        }
        val_history.push((peak, hist));
    }
    let (best_lr, best_epoch, best_val_mae, model) = best.expect("nonempty sweep");
    let test_mae = model.mae(&test, property)?;
    Ok(FinetuneReport {
        property: property.to_string(),
        best_lr,
        best_epoch,
        best_val_mae,
        test_mae,
        val_history,
        model,
    })
}

/// Gradient of the batch-mean squared error on standardized targets.
fn regression_grads<T: Scalar>(model: &FinetunedModel<T>, recs: &[&MaterialRecord], property: &str) -> Result<ParamSet<T>> {
    let inv_b = T::lit(1.0 / recs.len() as f64);
    let per_sample = recs
        .par_iter()
        .map(|r| {
            let y = (label(r, property)? - model.target_mean) / model.target_std;
            let mut g = Graph::new();
            let e = model.encoder.forward(&mut g, r.crystal()?)?;
            let pred = model.head.forward(&mut g, e)?;
            let diff = g.add_const(pred, &Tensor::new(vec![1, 1], vec![T::lit(-y)])?)?;
            let sq = g.square(diff);
            let loss = g.scale(sq, inv_b);
            let loss = g.sum(loss);
            g.backward(loss)?;
            g.param_grads()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ParamSet::new();
    for sample in per_sample {
        for (k, t) in sample {
            match total.get_mut(&k) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    total.insert(k, t);
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::CrystalEncoderConfig;
    use crate::synthdata::{generate_dataset, GeneratorSpec};

    #[test]
    fn argmin_semantics() {
        assert_eq!(select_best_epoch(&[3.0, 2.0, 2.5]), Some(2));
        assert_eq!(select_best_epoch(&[1.0, 1.0]), Some(1));
        assert_eq!(select_best_epoch(&[f64::NAN, 4.0]), Some(2));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn default_sweep() {
        let c = FinetuneConfig::default();
        assert_eq!(c.sweep, vec![1e-3, 1e-4, 1e-5]);
        assert_eq!((c.batch_size, c.weight_decay), (120, 0.0));
    }

    #[test]
    fn finetune_selects_global_minimum() {
        let spec = GeneratorSpec {
            grid_size: 4,
            tokens: 8,
            ..GeneratorSpec::default()
        };
        let data = generate_dataset(40, 3, &spec).unwrap();
        let enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(8, 8), 1).unwrap();
        let cfg = FinetuneConfig {
            batch_size: 8,
            epochs: 4,
            warmup_epochs: 1,
            ..FinetuneConfig::default()
        };
        let r = finetune(&enc, &data, "gap", &cfg).unwrap();
        assert_eq!(r.val_history.len(), 3);
        let global = r
            .val_history
            .iter()
            .flat_map(|(_, h)| h.iter().copied())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_val_mae, global);
        let (_, h) = r.val_history.iter().find(|(lr, _)| *lr == r.best_lr).unwrap();
        assert_eq!(select_best_epoch(h), Some(r.best_epoch));
        assert!(r.test_mae.is_finite() && r.test_mae >= 0.0);
        let again = finetune(&enc, &data, "gap", &cfg).unwrap();
        assert_eq!(again.test_mae, r.test_mae);
    }

    #[test]
    fn missing_property() {
        let spec = GeneratorSpec {
            grid_size: 4,
            tokens: 8,
            ..GeneratorSpec::default()
        };
        let data = generate_dataset(10, 3, &spec).unwrap();
        let enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(8, 8), 1).unwrap();
        assert!(matches!(
            finetune(&enc, &data, "bulk_modulus", &FinetuneConfig::default()),
            Err(Error::PropertyMissing(_))
        ));
    }
}
