//! Losses, plain SGD, and the standard and anchored training loops.

use std::ops::ControlFlow;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight λ of the anchor penalty during incremental fine-tuning.
    pub anchor_weight: f64,
    pub shuffle: bool,
    /// Frame stride between consecutive training windows of a video.
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 0,
            anchor_weight: 0.1,
            shuffle: true,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.anchor_weight.is_finite() && self.anchor_weight >= 0.0) {
            return Err(Error::config(format!(
                "anchor_weight must be >= 0, got {}",
                self.anchor_weight
            )));
        }
        if self.window_stride == 0 {
            return Err(Error::config("window_stride must be positive"));
        }
        Ok(())
    }
}

/// Frozen copy of every parameter, taken before fine-tuning starts.
#[derive(Debug, Clone)]
pub struct AnchorSnapshot<F> {
    entries: Vec<(String, Arc<Tensor<F>>)>,
}

impl<F: Real> AnchorSnapshot<F> {
    pub fn capture(store: &ParamStore<F>) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(_, p)| (p.name().to_string(), Arc::new(p.value().clone())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_ref())
    }

    fn check_matches(&self, store: &ParamStore<F>) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Param(format!(
                "anchor has {} parameters, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for ((name, t), (_, p)) in self.entries.iter().zip(store.iter()) {
            if name != p.name() || t.shape() != p.value().shape() {
                return Err(Error::Param(format!(
                    "anchor entry {name:?} {:?} does not match parameter {:?} {:?}",
                    t.shape(),
                    p.name(),
                    p.value().shape()
                )));
            }
        }
        Ok(())
    }

    /// `Σ ‖θ − θ_anchor‖²` over all parameters.
    pub fn squared_distance(&self, store: &ParamStore<F>) -> Result<f64> {
        self.check_matches(store)?;
        Ok(self
            .entries
            .iter()
            .zip(store.iter())
            .flat_map(|((_, a), (_, p))| a.data().iter().zip(p.value().data()))
            .map(|(a, b)| {
                let d = (*b - *a).to_f64_lossy();
                d * d
            })
            .sum())
    }
}

pub fn cross_entropy<F: Real>(tape: &mut Tape<F>, logits: Var, label: Label) -> Result<Var> {
    tape.cross_entropy(logits, label.index())
}

/// `λ · Σ_params Σ (θ − θ_anchor)²`.
pub fn anchor_penalty<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    anchor: &AnchorSnapshot<F>,
    lambda: f64,
) -> Result<Var> {
    anchor.check_matches(store)?;
    let mut terms = Vec::with_capacity(store.len());
    for ((_, target), (id, _)) in anchor.entries.iter().zip(store.iter()) {
        let p = tape.param(store, id);
        terms.push(tape.sq_diff_sum(p, Arc::clone(target))?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(F::zero())),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, F::from_f64_lossy(lambda)))
}

/// Cross-entropy on the new data plus the anchor penalty.
pub fn incremental_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    label: Label,
    store: &ParamStore<F>,
    anchor: &AnchorSnapshot<F>,
    lambda: f64,
) -> Result<Var> {
    let ce = cross_entropy(tape, logits, label)?;
    let pen = anchor_penalty(tape, store, anchor, lambda)?;
    tape.add(ce, pen)
}

/// `θ ← θ − η·g` for every trainable parameter, then clears the gradients.
/// Fails without touching any value if a trainable parameter has no
/// gradient buffer.
pub fn sgd_step<F: Real>(store: &mut ParamStore<F>, learning_rate: f64) -> Result<()> {
    if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable() && p.grad().is_none()) {
        return Err(Error::Gradient(format!(
            "parameter {:?} has no gradient; run backward before stepping",
            p.name()
        )));
    }
    let lr = F::from_f64_lossy(learning_rate);
    for p in store.params_mut() {
        if !p.trainable() {
            continue;
        }
        let g = ParamStore::take_grad(p).expect("checked above");
        let v = ParamStore::value_mut_of(p);
        for (x, d) in v.data_mut().iter_mut().zip(&g) {
            *x -= lr * *d;
        }
    }
    store.zero_grad();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// One `epoch\tmean_loss\ttrain_accuracy` line per epoch.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tmean_loss\ttrain_accuracy\n");
        for r in &self.epochs {
            s.push_str(&format!("{}\t{:.9}\t{:.9}\n", r.epoch, r.mean_loss, r.train_accuracy));
        }
        s
    }
}

pub fn train<F: Real>(model: &mut Model<F>, dataset: &Dataset, cfg: &TrainConfig) -> Result<History> {
    fit(model, dataset, cfg, None, |_, _| ControlFlow::Continue(()))
}

/// Same loop as [`train`] with the anchored loss; `anchor` is never modified.
pub fn finetune_incremental<F: Real>(
    model: &mut Model<F>,
    dataset: &Dataset,
    anchor: &AnchorSnapshot<F>,
    cfg: &TrainConfig,
) -> Result<History> {
    fit(model, dataset, cfg, Some(anchor), |_, _| ControlFlow::Continue(()))
}

/// Seeded mini-batch SGD. `monitor` runs after every epoch and may stop
/// training early. With `anchor = Some(..)` and λ > 0 every batch loss
/// gains the anchor penalty; λ = 0 is exactly the plain loop.
pub fn fit<F: Real>(
    model: &mut Model<F>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    anchor: Option<&AnchorSnapshot<F>>,
    mut monitor: impl FnMut(&EpochRecord, &Model<F>) -> ControlFlow<()>,
) -> Result<History> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    let windows = dataset.windows(model.config().frames, cfg.window_stride)?;
    for w in &windows {
        model.check_window(w.frames)?;
    }
    if let Some(a) = anchor {
        a.check_matches(model.params())?;
    }
    let lambda = anchor.map_or(0.0, |_| cfg.anchor_weight);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let inv = F::from_f64_lossy(1.0 / batch.len() as f64);
            for &i in batch {
                let w = &windows[i];
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, w.frames)?;
                let ce = cross_entropy(&mut tape, out.logits, w.label)?;
                let ce_value = tape.scalar(ce).to_f64_lossy();
                if !ce_value.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("training loss at epoch {epoch}"),
                    });
                }
                loss_sum += ce_value;
                let p_fake = tape.value(out.probs).data()[1].to_f64_lossy();
                if (p_fake >= 0.5) == (w.label == Label::Fake) {
                    correct += 1;
                }
                let scaled = tape.scale(ce, inv);
                tape.backward(scaled, model.params_mut())?;
            }
            if let (Some(a), true) = (anchor, lambda > 0.0) {
                let mut tape = Tape::new();
                let pen = anchor_penalty(&mut tape, model.params(), a, lambda)?;
                loss_sum += tape.scalar(pen).to_f64_lossy() * batch.len() as f64;
                tape.backward(pen, model.params_mut())?;
            }
            sgd_step(model.params_mut(), cfg.learning_rate)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / windows.len() as f64,
            train_accuracy: correct as f64 / windows.len() as f64,
        };
        history.epochs.push(record);
        if monitor(&record, model).is_break() {
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn sgd_arithmetic() {
        let mut s = store(&[1.0]);
        let id = s.id("w").unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&s, id);
        let l = tape.scale(p, 2.0);
        let l = tape.sum(l);
        tape.backward(l, &mut s).unwrap();
        sgd_step(&mut s, 0.5).unwrap();
        assert_eq!(s.value(id).data(), &[0.0]);
        assert!(s.get(id).grad().is_none());
    }

    #[test]
    fn sgd_without_grads_is_an_error() {
        let mut s = store(&[1.0, 2.0]);
        assert!(matches!(sgd_step(&mut s, 0.1), Err(Error::Gradient(_))));
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_grad_or_zero_rate_leaves_params() {
        for (lr, scale) in [(0.5, 0.0), (1e-300, 1.0)] {
            let mut s = store(&[1.5, -2.0]);
            let id = s.id("w").unwrap();
            let mut tape = Tape::new();
            let p = tape.param(&s, id);
            let l = tape.scale(p, scale);
            let l = tape.sum(l);
            tape.backward(l, &mut s).unwrap();
            sgd_step(&mut s, lr).unwrap();
            assert_eq!(s.value(id).data(), &[1.5, -2.0]);
        }
    }

    #[test]
    fn penalty_arithmetic() {
        let s = store(&[1.0, 2.0]);
        let anchor = AnchorSnapshot::capture(&store(&[0.0, 0.0]));
        let mut tape = Tape::new();
        let p = anchor_penalty(&mut tape, &s, &anchor, 0.5).unwrap();
        assert_eq!(tape.scalar(p), 2.5);
        let p0 = anchor_penalty(&mut tape, &s, &anchor, 0.0).unwrap();
        assert_eq!(tape.scalar(p0), 0.0);
        let same = AnchorSnapshot::capture(&s);
        let p1 = anchor_penalty(&mut tape, &s, &same, 3.0).unwrap();
        assert_eq!(tape.scalar(p1), 0.0);
    }

    #[test]
    fn penalty_rejects_mismatched_anchor() {
        let s = store(&[1.0, 2.0]);
        let anchor = AnchorSnapshot::capture(&store(&[0.0]));
        let mut tape = Tape::new();
        assert!(anchor_penalty(&mut tape, &s, &anchor, 1.0).is_err());
        let mut other = ParamStore::new();
        other.insert("v", Tensor::zeros(&[2])).unwrap();
        let anchor = AnchorSnapshot::capture(&other);
        assert!(anchor_penalty(&mut tape, &s, &anchor, 1.0).is_err());
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { anchor_weight: -1.0, ..ok.clone() },
            TrainConfig { window_stride: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
