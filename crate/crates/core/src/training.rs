//! Two-phase training: phase 1 fits the fusion network and vision position
//! tables against a frozen decoder, phase 2 also unfreezes the decoder.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::numerics::{stream_seed, Graph, Group, Matrix, ParamStore, Real};

pub const WARMUP_RATIO: f64 = 0.03;
/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Largest model `grad_check` accepts.
pub const GRAD_CHECK_MAX_PARAMS: usize = 5000;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;
/// Steps averaged for [`TrainReport::final_loss`].
pub const FINAL_LOSS_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }

    pub fn frozen_groups(self) -> BTreeSet<Group> {
        match self {
            Phase::Pretrain => [Group::Expert, Group::Lm].into(),
            Phase::Finetune => [Group::Expert].into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub frozen: BTreeSet<Group>,
    /// Probability that a training example has one random expert masked.
    #[serde(default)]
    pub expert_dropout: f64,
}

impl PhaseConfig {
    pub fn new(phase: Phase, lr: f64, steps: usize, batch_size: usize) -> Self {
        Self {
            phase,
            lr,
            steps,
            batch_size,
            frozen: phase.frozen_groups(),
            expert_dropout: 0.0,
        }
    }

    pub fn with_expert_dropout(mut self, p: f64) -> Self {
        self.expert_dropout = p;
        self
    }

    /// Violations under `prefix` (e.g. `train.pretrain`).
    pub fn violations(&self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            out.push((format!("{prefix}.lr"), format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.expert_dropout) {
            out.push((
                format!("{prefix}.expert_dropout"),
                format!("must lie in [0, 1), got {}", self.expert_dropout),
            ));
        }
        if self.batch_size == 0 {
            out.push((format!("{prefix}.batch_size"), "must be at least 1".into()));
        }
        if self.frozen != self.phase.frozen_groups() {
            let want: Vec<_> = self.phase.frozen_groups().iter().map(|g| g.label()).collect();
            out.push((
                format!("{prefix}.frozen"),
                format!("{} must freeze exactly {want:?}", self.phase.label()),
            ));
        }
        out
    }
}

/// Learning rate at `step` of `total`: linear warmup over the first
/// `ceil(0.03 · total)` steps, then cosine decay to zero.
pub fn scheduled_lr(base: f64, step: usize, total: usize) -> f64 {
    let warmup = ((total as f64) * WARMUP_RATIO).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Bias-corrected adaptive-moment optimizer without weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    moments: Vec<Option<(Matrix<T>, Matrix<T>)>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies the accumulated gradients to every non-frozen tensor.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let step_size = T::c(lr / c1);
        let inv_c2 = T::c(1.0 / c2);
        let eps = T::c(self.eps);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let (rows, cols) = p.value.shape();
            let (m, v) = self.moments[i].get_or_insert_with(|| (Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)));
            let grad = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Sets each group's freeze flag to match `phase`.
pub fn apply_freeze<T: Real>(store: &mut ParamStore<T>, phase: &PhaseConfig) {
    for g in Group::ALL {
        store.set_frozen(g, phase.frozen.contains(&g));
    }
}

/// Accumulates the batch-mean loss gradient into the store and returns the
/// mean loss. Does not touch parameter values.
pub fn accumulate_gradients<T: Real>(model: &mut Model<T>, batch: &[Example]) -> Result<f64> {
    accumulate_masked(model, batch, &vec![BTreeSet::new(); batch.len()])
}

fn accumulate_masked<T: Real>(model: &mut Model<T>, batch: &[Example], masks: &[BTreeSet<String>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Sequence("empty batch".into()));
    }
    model.store.zero_grads();
    let weight = T::c(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for (index, example) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let loss = model.masked_loss(&mut g, example, &masks[index])?;
        let value = g.value(loss).get(0, 0).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        total += value;
        let scaled = g.scale(loss, weight)?;
        g.backward(scaled, &mut model.store)?;
    }
    Ok(total / batch.len() as f64)
}

/// One optimizer step on `batch` at learning rate `lr`; returns the mean loss
/// measured before the update.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    batch: &[Example],
    phase: &PhaseConfig,
    optimizer: &mut Adam<T>,
    lr: f64,
) -> Result<f64> {
    masked_step(model, batch, &vec![BTreeSet::new(); batch.len()], phase, optimizer, lr)
}

fn masked_step<T: Real>(
    model: &mut Model<T>,
    batch: &[Example],
    masks: &[BTreeSet<String>],
    phase: &PhaseConfig,
    optimizer: &mut Adam<T>,
    lr: f64,
) -> Result<f64> {
    apply_freeze(&mut model.store, phase);
    let loss = accumulate_masked(model, batch, masks)?;
    optimizer.update(&mut model.store, lr);
    Ok(loss)
}

/// Mean loss without touching gradients or parameters.
pub fn evaluate_loss<T: Real>(model: &Model<T>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Sequence("empty batch".into()));
    }
    let mut total = 0.0;
    for (index, example) in examples.iter().enumerate() {
        let mut g = Graph::new();
        let loss = model.loss(&mut g, example)?;
        let value = g.value(loss).get(0, 0).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        total += value;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub digests_before: BTreeMap<Group, String>,
    pub digests_after: BTreeMap<Group, String>,
}

impl TrainReport {
    pub fn changed_groups(&self) -> BTreeSet<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.digests_before.get(g) != self.digests_after.get(g))
            .collect()
    }
}

pub fn final_loss(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(FINAL_LOSS_WINDOW)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Runs one phase with a fresh optimizer. Batches are drawn from successive
/// seeded shuffles of `train`. Expert dropout draws from its own stream, so
/// batch order does not depend on it.
pub fn run_phase<T: Real>(
    model: &mut Model<T>,
    train: &[Example],
    phase: &PhaseConfig,
    seed: u64,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Sequence("empty training set".into()));
    }
    apply_freeze(&mut model.store, phase);
    let digests_before = model.store.digests();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, phase.phase.label()));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("{}.dropout", phase.phase.label())));
    let names = model.expert_names();
    let mut optimizer = Adam::default();
    let mut losses = Vec::with_capacity(phase.steps);
    for step in 0..phase.steps {
        let mut batch = Vec::with_capacity(phase.batch_size);
        while batch.len() < phase.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let masks: Vec<BTreeSet<String>> = batch
            .iter()
            .map(|_| {
                if names.len() > 1 && phase.expert_dropout > 0.0 && dropout_rng.gen::<f64>() < phase.expert_dropout {
                    [names[dropout_rng.gen_range(0..names.len())].clone()].into()
                } else {
                    BTreeSet::new()
                }
            })
            .collect();
        let lr = scheduled_lr(phase.lr, step, phase.steps);
        let loss = masked_step(model, &batch, &masks, phase, &mut optimizer, lr)
            .map_err(|e| e.context(format!("{} step {step}", phase.phase.label())))?;
        losses.push(loss);
    }
    Ok(TrainReport {
        phase: phase.phase,
        final_loss: final_loss(&losses),
        losses,
        digests_before,
        digests_after: model.store.digests(),
    })
}

/// Parameter snapshots and reports from both phases.
#[derive(Debug, Clone)]
pub struct PipelineResult<T> {
    pub phase1: ParamStore<T>,
    pub phase2: ParamStore<T>,
    pub reports: [TrainReport; 2],
}

pub fn run_pipeline<T: Real>(
    model: &mut Model<T>,
    train: &[Example],
    pretrain: &PhaseConfig,
    finetune: &PhaseConfig,
    seed: u64,
) -> Result<PipelineResult<T>> {
    if pretrain.phase != Phase::Pretrain || finetune.phase != Phase::Finetune {
        return Err(Error::Sequence("phases must be pretrain then finetune".into()));
    }
    let r1 = run_phase(model, train, pretrain, seed)?;
    let phase1 = model.store.clone();
    let r2 = run_phase(model, train, finetune, seed)?;
    Ok(PipelineResult {
        phase1,
        phase2: model.store.clone(),
        reports: [r1, r2],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Largest relative error per trainable group.
    pub max_rel_error: BTreeMap<Group, f64>,
    /// Parameter holding the overall worst scalar.
    pub worst: String,
    pub scalars: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backward gradients with central differences for every
/// trainable scalar. Only verification precision is accepted.
pub fn grad_check(model: &mut Model<f64>, batch: &[Example], phase: &PhaseConfig) -> Result<GradCheckReport> {
    apply_freeze(&mut model.store, phase);
    let trainable = model.store.trainable_scalar_count();
    if trainable > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::GradCheck(format!(
            "{trainable} trainable parameters exceed the limit of {GRAD_CHECK_MAX_PARAMS}"
        )));
    }
    accumulate_gradients(model, batch)?;
    let ids: Vec<_> = model.store.iter().filter(|(_, t)| !t.frozen).map(|(id, _)| id).collect();
    let mut max_rel_error = BTreeMap::new();
    let mut worst = (0.0, String::new());
    for id in ids {
        let analytic = model.store.get(id).grad.clone();
        if !analytic.is_finite() {
            return Err(Error::GradCheck(format!("non-finite gradient in {}", model.store.get(id).name)));
        }
        let group = model.store.get(id).group;
        let entry = max_rel_error.entry(group).or_insert(0.0f64);
        for k in 0..analytic.len() {
            let original = model.store.get(id).value.data()[k];
            model.store.get_mut(id).value.data_mut()[k] = original + FD_STEP;
            let plus = evaluate_loss(model, batch)?;
            model.store.get_mut(id).value.data_mut()[k] = original - FD_STEP;
            let minus = evaluate_loss(model, batch)?;
            model.store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic.data()[k], numeric);
            *entry = entry.max(err);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, model.store.get(id).name.clone());
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst: worst.1,
        scalars: trainable,
    })
}
