//! Joint SGD training of flexible models.

use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::losses::{flexible_loss, term_layout, term_name, DistillConfig, LogitsBundle};
use crate::models::{FlexibleModel, SubModelIndex};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows evaluated per forward call during validation.
pub const EVAL_CHUNK: usize = 512;

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_factor() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_initial: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Epochs after which the learning rate is multiplied by `lr_factor`.
    /// Defaults to 50% and 75% of `epochs` (rounded up).
    #[serde(default)]
    pub milestones: Option<Vec<usize>>,
    #[serde(default = "default_factor")]
    pub lr_factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub drop_last: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_initial: default_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            milestones: None,
            lr_factor: default_factor(),
            seed: 0,
            eval_every: default_eval_every(),
            drop_last: false,
        }
    }
}

impl TrainConfig {
    pub fn resolved_milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => {
                let mut m: Vec<usize> = [0.5, 0.75]
                    .iter()
                    .map(|f| ((self.epochs as f64 * f).ceil() as usize).max(1))
                    .collect();
                m.dedup();
                m
            }
        }
    }

    /// Copy with every default written out.
    pub fn resolved(&self) -> Self {
        Self {
            milestones: Some(self.resolved_milestones()),
            ..self.clone()
        }
    }

    /// Checks the invariants a run configuration must meet.
    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }

    /// `train` itself also accepts `lr_initial == 0` (a frozen run).
    fn check(&self, allow_zero_lr: bool) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        let lr_ok = self.lr_initial > 0.0 || (allow_zero_lr && self.lr_initial == 0.0);
        if !(lr_ok && self.lr_initial.is_finite()) {
            return Err(Error::config("train.lr_initial", format!("must be > 0, got {}", self.lr_initial)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(Error::config("train.lr_factor", "must be > 0"));
        }
        let m = self.resolved_milestones();
        if m.windows(2).any(|p| p[0] >= p[1]) || m.iter().any(|&e| e == 0 || e > self.epochs) {
            return Err(Error::config(
                "train.milestones",
                format!("must be strictly ascending within [1, {}], got {m:?}", self.epochs),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate used throughout 1-based `epoch`:
    /// `lr_initial · lr_factor^k` with `k` the number of milestones before it.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.resolved_milestones().iter().filter(|&&m| m < epoch).count();
        self.lr_initial * self.lr_factor.powi(passed as i32)
    }
}

/// Momentum buffers, one per trainable parameter.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = store
            .trainable_ids()
            .into_iter()
            .map(|id| (id, Tensor::zeros(store.param(id).value.shape())))
            .collect();
        Self {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.buffers.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    /// `v ← μ·v + g + wd·θ; θ ← θ − lr·v`, then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (id, _) in &self.buffers {
            if let Some(bad) = store.grad(*id).data().iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} in parameter `{}`",
                    store.param(*id).name
                )));
            }
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (id, v) in &mut self.buffers {
            let (theta, g) = store.value_and_grad_mut(*id);
            for ((t, gv), vv) in theta.data_mut().iter_mut().zip(g.data_mut()).zip(v.data_mut()) {
                *vv = mu * *vv + *gv + wd * *t;
                *t -= lr * *vv;
                *gv = T::zero();
            }
        }
        Ok(())
    }
}

/// One evaluated epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Mean unweighted value of each loss term, in [`term_layout`] order.
    pub terms: Vec<(String, f64)>,
    /// Validation accuracy per sub-model.
    pub accuracies: Vec<f64>,
    pub avg_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub avg_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub params: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One entry per evaluated epoch, in epoch order.
    pub history: Vec<EpochMetrics>,
    /// Total loss of every optimisation step in order.
    pub step_losses: Vec<f64>,
    pub best: BestSnapshot,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
    hits as f64 / labels.len() as f64
}

fn check_data<T: Scalar, M: FlexibleModel<T>>(model: &M, ds: &Dataset<T>, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Validation(format!("{what} dataset is empty")));
    }
    if ds.classes() != model.classes() {
        return Err(Error::Validation(format!(
            "{what} dataset has {} classes, model head has {}",
            ds.classes(),
            model.classes()
        )));
    }
    if ds.sample_shape() != model.input_shape() {
        return Err(Error::Validation(format!(
            "{what} samples have shape {:?}, model expects {:?}",
            ds.sample_shape(),
            model.input_shape()
        )));
    }
    Ok(())
}

/// Evaluation-mode accuracy of every sub-model (`which = None`) or of one.
pub fn evaluate<T: Scalar, M: FlexibleModel<T>>(
    model: &M,
    store: &ParamStore<T>,
    ds: &Dataset<T>,
    which: Option<SubModelIndex>,
) -> Result<Vec<f64>> {
    check_data(model, ds, "evaluation")?;
    let count = if which.is_some() { 1 } else { model.num_submodels() };
    let mut hits = vec![0usize; count];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _, labels) = ds.batch(chunk)?;
        let logits = match which {
            Some(i) => vec![model.eval_one(store, &x, i)?],
            None => model.eval_all(store, &x)?,
        };
        for (h, l) in hits.iter_mut().zip(&logits) {
            *h += (0..l.rows()).filter(|&r| argmax(l.row(r)) == labels[r]).count();
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / ds.len() as f64).collect())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains all sub-models jointly: per batch one `forward_all`, one
/// flexible loss, one `backward_all` and one SGD step.
///
/// `on_epoch` sees every evaluated epoch as soon as it is complete.
pub fn train<T, M>(
    model: &M,
    store: &mut ParamStore<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome>
where
    T: Scalar,
    M: FlexibleModel<T>,
{
    cfg.check(true)?;
    distill.validate("distill")?;
    check_data(model, train_set, "training")?;
    check_data(model, val_set, "validation")?;
    let n = model.num_submodels();
    let layout = term_layout(distill.strategy, n);
    if distill.strategy != crate::losses::Strategy::None && n < 2 {
        return Err(Error::config(
            "distill.strategy",
            format!("{} needs at least 2 sub-models, model has {n}", distill.strategy),
        ));
    }
    if model.uses_batch_norm() && (cfg.batch_size < 2 || train_set.len() < 2) {
        return Err(Error::config(
            "train.batch_size",
            "batch norm needs at least 2 samples per training batch",
        ));
    }

    let plan = BatchPlan::new(cfg.batch_size, cfg.drop_last, cfg.seed)?;
    let mut sgd = Sgd::new(store, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<BestSnapshot> = None;
    let mut term_sums = vec![0.0; layout.len()];

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = plan.batches(train_set.len(), epoch);
        if batches.is_empty() {
            return Err(Error::Validation("drop_last left no full batch".into()));
        }
        let mut loss_sum = 0.0;
        term_sums.iter_mut().for_each(|s| *s = 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let (x, y, _) = train_set.batch(idx)?;
            let (logits, pass) = model.forward_all(store, &x, Mode::Train)?;
            let loss = flexible_loss(&LogitsBundle::new(logits, y)?, distill)?;
            let total = loss.total.to_f64_lossless();
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {total} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            model.backward_all(store, &pass, &loss.grads)?;
            sgd.step(store, lr).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch}, batch {}", b + 1)),
                other => other,
            })?;
            loss_sum += total;
            step_losses.push(total);
            for (s, t) in term_sums.iter_mut().zip(&loss.terms) {
                *s += t.value.to_f64_lossless();
            }
        }

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let accuracies = evaluate(model, store, val_set, None)?;
            let avg = mean(&accuracies);
            let nb = batches.len() as f64;
            let m = EpochMetrics {
                epoch,
                lr,
                loss: loss_sum / nb,
                terms: layout.iter().zip(&term_sums).map(|(&k, s)| (term_name(k), s / nb)).collect(),
                accuracies: accuracies.clone(),
                avg_accuracy: avg,
            };
            on_epoch(&m);
            history.push(m);
            if best.as_ref().is_none_or(|b| avg > b.avg_accuracy) {
                best = Some(BestSnapshot {
                    epoch,
                    avg_accuracy: avg,
                    accuracies,
                    params: Checkpoint::from_store(store),
                });
            }
        }
    }
    Ok(TrainOutcome {
        history,
        step_losses,
        best: best.expect("the final epoch is always evaluated"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap(), true).unwrap();
        (s, id)
    }

    #[test]
    fn plain_descent_without_momentum() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        let mut opt = Sgd::new(&s, 0.0, 0.0);
        s.grad_mut(id).data_mut().copy_from_slice(&[0.5, 0.25]);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let (mut s, id) = store_with(&[3.0]);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        let (g, lr) = (0.7, 0.05);
        for _ in 0..2 {
            s.grad_mut(id).data_mut()[0] = g;
            opt.step(&mut s, lr).unwrap();
        }
        let want = 3.0 - lr * (g + 1.9 * g);
        assert!((s.value(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let (mut s, id) = store_with(&[2.0]);
        let mut opt = Sgd::new(&s, 0.0, 0.5);
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.value(id).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = store_with(&[1.0]);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        let err = opt.step(&mut s, 0.1).unwrap_err().to_string();
        assert!(err.contains("`w`"), "{err}");
        assert_eq!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn lr_schedule_counts_passed_milestones() {
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.resolved_milestones(), vec![15, 23]);
        assert_eq!(cfg.lr_at(1), 0.1);
        assert_eq!(cfg.lr_at(15), 0.1);
        assert_eq!(cfg.lr_at(16), 0.1 * 0.1);
        assert_eq!(cfg.lr_at(24), 0.1 * 0.1f64.powi(2));
        let one = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(one.validate().is_ok());
        assert_eq!(one.lr_at(1), 0.1);
    }

    #[test]
    fn config_invariants() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.epochs = 0));
        assert!(bad(|c| c.lr_initial = 0.0));
        assert!(bad(|c| c.milestones = Some(vec![10, 5])));
        assert!(bad(|c| c.milestones = Some(vec![31])));
        assert!(bad(|c| c.eval_every = 0));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f64; 10]), 0);
    }

    #[test]
    fn random_logits_score_near_chance() {
        let mut rng = RngState::new(8);
        let logits = Tensor::<f64>::rand_normal(&mut rng, &[1000, 10], 0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..1000).map(|_| rng.index_inclusive(9)).collect();
        let acc = accuracy(&logits, &labels);
        assert!((acc - 0.1).abs() <= 0.04, "{acc}");
    }
}
