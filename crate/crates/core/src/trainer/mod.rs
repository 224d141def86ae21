//! Pre-training and fine-tuning loops.
//!
//! Each optimizer step encodes every sample of the batch on its own graph
//! (in parallel), evaluates the objective on a separate graph over the
//! stacked embeddings, and pushes the embedding gradients back through the
//! per-sample graphs. Per-sample parameter gradients are summed in batch
//! order, so results do not depend on the thread count.

mod checkpoint;
mod config;
mod finetune;
mod model;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, ParamSet, Var};
use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::evalkit::topk_retrieval;
use crate::losses::{BarlowParams, ClipParams, Objective, TAU_MAX, TAU_MIN};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, MaterialRecord, Modality};
use crate::tensor::Tensor;

pub use checkpoint::{read_metrics_csv, write_metrics_csv, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{cosine_lr, lr_at, LossKind, TrainConfig, PRESETS};
pub use finetune::{finetune, select_best_epoch, FinetuneConfig, FinetuneReport, FinetunedModel, SWEEP};
pub use model::{Model, ModelDims, LOG_TAU};
pub use optim::{clip_global_norm, global_norm, optimizer_step, AdamState, ADAM_EPS, BETA1, BETA2};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MMALIGN_THREADS";

/// Sizes the global worker pool from `MMALIGN_THREADS` when it is set.
/// Returns the thread count in effect.
pub fn init_threads_from_env() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        // A pool may already exist (tests, repeated calls); keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

/// One row of the metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean in-batch top-1 retrieval between the first two modalities.
    pub top1_retrieval: f64,
}

pub fn objective_for<T: Scalar>(cfg: &TrainConfig) -> Result<Objective<T>> {
    let clip = ClipParams::new(T::lit(cfg.tau))?;
    Ok(match cfg.loss {
        LossKind::ClipDos | LossKind::ClipDensity => Objective::Clip(clip),
        LossKind::AllPairs => Objective::AllPairs(clip),
        LossKind::Anchored => Objective::Anchored(clip),
        LossKind::TensorClip => Objective::TensorClip(clip),
        LossKind::Barlow3d => Objective::Barlow3d(BarlowParams::new(T::lit(cfg.lambda))?),
    })
}

/// Loss, in-batch top-1 retrieval and prefixed parameter gradients for one
/// batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub loss: T,
    pub top1: f64,
    pub grads: ParamSet<T>,
}

pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    loss: LossKind,
    objective: &Objective<T>,
    records: &[&MaterialRecord],
) -> Result<StepOutput<T>> {
    let mods = loss.modalities();
    let mut graphs: Vec<Vec<(Graph<T>, Var)>> = Vec::with_capacity(mods.len());
    let mut batches = Vec::with_capacity(mods.len());
    for &m in mods {
        let gs = records
            .par_iter()
            .map(|r| {
                let mut g = Graph::new();
                let v = model.forward(m, &mut g, r)?;
                Ok((g, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<T>> = gs.iter().map(|(g, v)| g.value(*v).data().to_vec()).collect();
        batches.push(EmbeddingBatch::from_rows(&rows)?);
        graphs.push(gs);
    }

    let mut lg = Graph::new();
    let vars: Vec<Var> = batches.iter().map(|b| lg.leaf(b.as_tensor().clone())).collect();
    let inv_tau = if loss.uses_tau() {
        let lt = lg.param(LOG_TAU, &Tensor::vector(vec![model.log_tau]));
        let c = lg.clamp(lt, T::lit(TAU_MIN.ln()), T::lit(TAU_MAX.ln()));
        let neg = lg.scale(c, -T::one());
        Some(lg.exp(neg))
    } else {
        None
    };
    let out = objective.build(&mut lg, &vars, inv_tau)?;
    lg.backward(out)?;
    let value = lg.value(out).data()[0];

    let mut grads = ParamSet::new();
    if loss.uses_tau() {
        grads.insert(LOG_TAU.to_string(), lg.grad_of(LOG_TAU)?);
    }
    for ((&m, gs), &v) in mods.iter().zip(graphs.iter_mut()).zip(&vars) {
        let eg = lg.grad(v)?;
        let per_sample = gs
            .par_iter_mut()
            .enumerate()
            .map(|(i, (g, out))| {
                let seed = Tensor::new(vec![1, eg.cols()], eg.row(i).to_vec())?;
                g.backward_with_seed(*out, seed)?;
                g.param_grads()
            })
            .collect::<Result<Vec<_>>>()?;
        for sample in per_sample {
            for (name, t) in sample {
                let key = format!("{}.{name}", m.name());
                match grads.get_mut(&key) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(key, t);
                    }
                }
            }
        }
    }
    let top1 = topk_retrieval(&batches[0], &batches[1], 1)?;
    Ok(StepOutput {
        loss: value,
        top1,
        grads,
    })
}

fn check_modalities(data: &Dataset, mods: &[Modality]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for &m in mods {
        if !data.modality_mask.contains(m) {
            return Err(Error::ModalityMissing(m.name().into()));
        }
    }
    Ok(())
}

pub fn pretrain<T: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint<T>> {
    pretrain_with(cfg, data, |_| {})
}

/// [`pretrain`] with a callback after every epoch.
pub fn pretrain_with<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let mods = cfg.loss.modalities();
    check_modalities(data, mods)?;
    let dims = ModelDims::from_dataset(data, cfg.d)?;
    let mut model = Model::<T>::new(dims, mods, cfg.seed, cfg.tau)?;
    let objective = objective_for::<T>(cfg)?;
    let mut opt = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);

    let n = data.len();
    let steps = n / cfg.batch_size;
    if cfg.epochs > 0 && steps == 0 {
        return Err(Error::Config(format!(
            "{n} records cannot fill one batch of {}",
            cfg.batch_size
        )));
    }
    let total = steps * cfg.epochs;
    let train_tau = cfg.learn_tau && cfg.loss.uses_tau();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut global = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut top1_sum, mut lr) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let recs: Vec<&MaterialRecord> = order[step * cfg.batch_size..(step + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &data.records[i])
                .collect();
            let out = batch_gradients(&model, cfg.loss, &objective, &recs)?;
            let mut grads = out.grads;
            if !train_tau {
                grads.remove(LOG_TAU);
            }
            let finite = out.loss.is_finite() && grads.values().all(Tensor::is_finite);
            if !finite {
                return Err(Error::NonFiniteLoss { epoch, step: step + 1 });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            global += 1;
            lr = lr_at(global, total, cfg)?;
            let mut params = model.flat_params();
            if !train_tau {
                params.remove(LOG_TAU);
            }
            optimizer_step(&mut params, &grads, &mut opt, lr, cfg.weight_decay)?;
            model.update_from(&params)?;
            loss_sum += out.loss.as_f64();
            top1_sum += out.top1;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / steps as f64,
            lr,
            top1_retrieval: top1_sum / steps as f64,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        model,
        optimizer: opt,
        epoch: cfg.epochs,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, GeneratorSpec, ModalitySet};
    use crate::testutil::{central_difference, rel_err};

    fn tiny(n: usize) -> Dataset {
        let spec = GeneratorSpec {
            grid_size: 8,
            tokens: 8,
            min_nodes: 2,
            max_nodes: 4,
            ..GeneratorSpec::default()
        };
        generate_dataset(n, 11, &spec).unwrap()
    }

    fn small_cfg(loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            d: 4,
            batch_size: 4,
            epochs: 3,
            warmup_epochs: 1,
            peak_lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny(6);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg(LossKind::Anchored)
        };
        let ck = pretrain::<f64>(&cfg, &data).unwrap();
        let dims = ModelDims::from_dataset(&data, cfg.d).unwrap();
        let init = Model::<f64>::new(dims, &Modality::ALL, cfg.seed, cfg.tau).unwrap();
        assert_eq!(ck.model, init);
        assert!(ck.history.is_empty());
    }

    #[test]
    fn deterministic_history() {
        let data = tiny(8);
        let cfg = small_cfg(LossKind::ClipDos);
        let a = pretrain::<f64>(&cfg, &data).unwrap();
        let b = pretrain::<f64>(&cfg, &data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn every_loss_trains() {
        let data = tiny(8);
        for loss in LossKind::ALL {
            let ck = pretrain::<f64>(&small_cfg(loss), &data).unwrap();
            assert_eq!(ck.history.len(), 3, "{loss}");
            assert_eq!(ck.model.modalities(), loss.modalities(), "{loss}");
        }
    }

    #[test]
    fn missing_modality() {
        let mut data = tiny(6);
        data.records[0].dos = None;
        data.modality_mask = ModalitySet::of(&[Modality::Crystal, Modality::Density]);
        assert!(matches!(
            pretrain::<f64>(&small_cfg(LossKind::ClipDos), &data),
            Err(Error::ModalityMissing(_))
        ));
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let data = tiny(4);
        let recs: Vec<&MaterialRecord> = data.records.iter().collect();
        let dims = ModelDims::from_dataset(&data, 4).unwrap();
        for loss in [LossKind::Anchored, LossKind::Barlow3d] {
            let cfg = small_cfg(loss);
            let model = Model::<f64>::new(dims, loss.modalities(), 5, 0.5).unwrap();
            let obj = objective_for::<f64>(&cfg).unwrap();
            let out = batch_gradients(&model, loss, &obj, &recs).unwrap();
            for name in ["crystal.out.w", "dos.value_embed.w", "density.conv1.b"] {
                let base = model.flat_params()[name].clone();
                let fd = central_difference(&base, 1e-5, |t| {
                    let mut p = ParamSet::new();
                    p.insert(name.to_string(), t.clone());
                    let mut m = model.clone();
                    m.update_from(&p).unwrap();
                    batch_gradients(&m, loss, &obj, &recs).unwrap().loss
                });
                let err = rel_err(&out.grads[name], &fd);
                assert!(err < 1e-4, "{loss} {name}: {err}");
            }
            if loss.uses_tau() {
                let base = Tensor::vector(vec![model.log_tau]);
                let fd = central_difference(&base, 1e-6, |t| {
                    let mut m = model.clone();
                    m.log_tau = t.data()[0];
                    batch_gradients(&m, loss, &obj, &recs).unwrap().loss
                });
                assert!(rel_err(&out.grads[LOG_TAU], &fd) < 1e-4);
            }
        }
    }

    #[test]
    fn batch_larger_than_dataset() {
        let data = tiny(3);
        assert!(matches!(
            pretrain::<f64>(&small_cfg(LossKind::ClipDos), &data),
            Err(Error::Config(_))
        ));
    }
}
