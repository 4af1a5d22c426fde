//! Mini-batch Adam training with per-epoch learning-rate decay.

use std::borrow::Cow;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss, AdamState, CnnModel, Normalization};
use crate::exec::Exec;
use crate::{Error, Result};

/// Indexed access to `(level-set tensor, target)` pairs.
pub trait SampleSet: Sync {
    fn len(&self) -> usize;
    fn field(&self, i: usize) -> Result<Cow<'_, [f64]>>;
    fn target(&self, i: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn targets(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.target(i)).collect()
    }
}

/// In-memory sample set.
#[derive(Clone, Debug, Default)]
pub struct VecSamples {
    pub fields: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl SampleSet for VecSamples {
    fn len(&self) -> usize {
        self.fields.len()
    }

    fn field(&self, i: usize) -> Result<Cow<'_, [f64]>> {
        Ok(Cow::Borrowed(&self.fields[i]))
    }

    fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 2.5e-4,
            lr_decay: 0.999,
            epochs: 3000,
            batch_size: 750,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::validation("initial learning rate must be finite and non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::validation("learning-rate decay must lie in (0, 1]"));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::validation("need at least one epoch and a batch size of at least 2"));
        }
        Ok(())
    }

    /// Full batches per epoch for `n` training samples; the remainder of a
    /// shuffled epoch is dropped so every batch has the same size.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size.min(n)).max(1)
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    /// 1-based.
    pub iteration: usize,
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// `1/2 * mean` squared error on normalized targets.
    pub minibatch_loss: f64,
    /// `1/2 * sum` over the same batch.
    pub minibatch_loss_sum: f64,
    /// Set on the last iteration of each epoch.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub final_val_loss: f64,
}

pub const HISTORY_HEADER: &str = "iteration,epoch,lr,minibatch_loss,val_loss,minibatch_loss_sum";

pub fn write_history_csv<W: Write>(mut w: W, rows: &[HistoryRow]) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        let val = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:e},{:e},{},{:e}",
            r.iteration, r.epoch, r.lr, r.minibatch_loss, val, r.minibatch_loss_sum
        )?;
    }
    Ok(())
}

fn load_batch<S: SampleSet + ?Sized>(set: &S, idx: &[usize], exec: Exec) -> Result<Vec<Vec<f64>>> {
    exec.map_slice(idx, |&i| set.field(i).map(Cow::into_owned))
        .into_iter()
        .collect()
}

/// Inference-mode loss on normalized targets.
pub fn evaluate_loss<S: SampleSet + ?Sized>(model: &CnnModel, set: &S, exec: Exec) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let preds: Vec<f64> = exec
        .map_slice(&idx, |&i| model.infer_normalized(&set.field(i)?))
        .into_iter()
        .collect::<Result<_>>()?;
    let targets: Vec<f64> = idx.iter().map(|&i| model.normalization.encode(set.target(i))).collect();
    Ok(loss(&preds, &targets))
}

/// Train `model` in place. The target normalization is fitted to the
/// training targets first. `progress` sees every history row as it is
/// produced.
pub fn train<S, V>(
    model: &mut CnnModel,
    train_set: &S,
    val_set: &V,
    cfg: &TrainConfig,
    exec: Exec,
    progress: &mut dyn FnMut(&HistoryRow),
) -> Result<TrainReport>
where
    S: SampleSet + ?Sized,
    V: SampleSet + ?Sized,
{
    cfg.validate()?;
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::validation(
            "training needs at least 2 training samples and a non-empty validation split",
        ));
    }
    model.normalization = Normalization::fit(&train_set.targets());
    let norm = model.normalization;
    let batch = cfg.batch_size.min(train_set.len());
    let per_epoch = cfg.batches_per_epoch(train_set.len());

    let mut adam = AdamState::new(&model.param_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs * per_epoch);
    let mut val_loss = f64::NAN;
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        for b in 0..per_epoch {
            iteration += 1;
            let idx = &order[b * batch..(b + 1) * batch];
            let fields = load_batch(train_set, idx, exec)?;
            let refs: Vec<&[f64]> = fields.iter().map(Vec::as_slice).collect();
            let targets: Vec<f64> = idx.iter().map(|&i| norm.encode(train_set.target(i))).collect();

            let pass = model.forward_train(&refs, exec)?;
            let batch_loss = loss(&pass.outputs, &targets);
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at iteration {iteration} (epoch {}, batch {}, lr {lr:e})",
                    epoch + 1,
                    b + 1
                )));
            }
            let grads = model.backward(&refs, &pass, &targets, exec)?;
            model.update_running_stats(pass.batch_stats());
            adam.update(&mut model.params_mut(), &grads.0, lr);

            let mut row = HistoryRow {
                iteration,
                epoch: epoch + 1,
                lr,
                minibatch_loss: batch_loss,
                minibatch_loss_sum: batch_loss * refs.len() as f64,
                val_loss: None,
            };
            if b + 1 == per_epoch {
                val_loss = evaluate_loss(model, val_set, exec)?;
                row.val_loss = Some(val_loss);
            }
            progress(&row);
            history.push(row);
        }
    }
    Ok(TrainReport {
        history,
        final_val_loss: val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::{Architecture, Target};
    use super::*;

    fn toy_set(seed: u64, n: usize) -> VecSamples {
        let fields = random_fields(seed, n, 180);
        // a smooth nonlinear functional of the field
        let targets = fields
            .iter()
            .map(|f| 0.3 + f[..60].iter().sum::<f64>() / 60.0 - 0.5 * f[100] * f[7])
            .collect();
        VecSamples { fields, targets }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let init = CnnModel::new(&tiny_arch(), [6, 5, 6], Target::Cl, 2).unwrap();
        let mut m = init.clone();
        let data = toy_set(1, 4);
        let cfg = TrainConfig {
            initial_lr: 0.0,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &data, &data, &cfg, Exec::Sequential, &mut |_| {}).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(m.params(), init.params());
    }

    #[test]
    fn history_bookkeeping() {
        let mut m = CnnModel::new(&tiny_arch(), [6, 5, 6], Target::Cl, 2).unwrap();
        let data = toy_set(2, 10);
        let cfg = TrainConfig {
            initial_lr: 1e-3,
            lr_decay: 0.5,
            epochs: 3,
            batch_size: 3,
            seed: 4,
        };
        let r = train(&mut m, &data, &data, &cfg, Exec::Sequential, &mut |_| {}).unwrap();
        assert_eq!(r.history.len(), 9);
        assert_eq!(r.history[8].iteration, 9);
        assert_eq!(r.history[3].lr, 5e-4);
        let vals: Vec<usize> = r.history.iter().filter(|h| h.val_loss.is_some()).map(|h| h.iteration).collect();
        assert_eq!(vals, vec![3, 6, 9]);
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &r.history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("iteration,epoch,lr,minibatch_loss,val_loss"));
    }

    #[test]
    fn training_is_deterministic_across_policies() {
        let data = toy_set(3, 8);
        let cfg = TrainConfig {
            initial_lr: 1e-3,
            lr_decay: 0.99,
            epochs: 3,
            batch_size: 4,
            seed: 7,
        };
        let base = CnnModel::new(&tiny_arch(), [6, 5, 6], Target::Cdi, 1).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        let ra = train(&mut a, &data, &data, &cfg, Exec::Sequential, &mut |_| {}).unwrap();
        let rb = train(&mut b, &data, &data, &cfg, Exec::Parallel, &mut |_| {}).unwrap();
        assert_eq!(ra.history, rb.history);
        assert_eq!(a, b);
    }

    #[test]
    fn memorizes_ten_samples() {
        let data = toy_set(5, 10);
        let cfg = TrainConfig {
            initial_lr: 2e-3,
            lr_decay: 1.0,
            epochs: 2000,
            batch_size: 10,
            seed: 1,
        };
        let arch = Architecture {
            kernels: vec![3, 2],
            channels: vec![4, 4],
        };
        let mut m = CnnModel::new(&arch, [6, 5, 6], Target::Cl, 3).unwrap();
        let r = train(&mut m, &data, &data, &cfg, Exec::Sequential, &mut |_| {}).unwrap();
        let last = r.history.last().unwrap().minibatch_loss;
        assert!(last < 1e-4, "final loss {last:e}");
    }

    #[test]
    fn rejects_tiny_splits() {
        let mut m = CnnModel::new(&tiny_arch(), [6, 5, 6], Target::Cl, 2).unwrap();
        let one = toy_set(1, 1);
        let cfg = TrainConfig::default();
        assert!(train(&mut m, &one, &one, &cfg, Exec::Sequential, &mut |_| {}).is_err());
    }
}
