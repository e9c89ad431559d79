//! The relaxed training loop for every supported defense.
//!
//! Per mini-batch: forward pass, relaxed center loss (for center-based
//! defenses), the defense's cross-entropy-side loss, the joint objective,
//! then the center update followed by the model update. Both updates use
//! gradients from the same forward pass.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, Branch, CenterBank, LossResult, RelaxConfig, DEFAULT_CENTER_LR};
use crate::model::{self, ModelParams, Sgd};
use crate::numerics::{argmax, softmax_rows, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    /// Plain cross-entropy, no defense.
    Ce,
    /// Threshold-first relaxed cross-entropy.
    Relax,
    /// Parity-first relaxed cross-entropy on normalized logits, no centers.
    ImpRelax,
    /// Relaxed cross-entropy plus relaxed center loss, no normalization.
    RelaxedCenter,
    /// Full center-based relaxed learning.
    Crl,
    LabelSmoothing,
    ConfidencePenalty,
}

impl Defense {
    pub fn uses_centers(self) -> bool {
        matches!(self, Defense::RelaxedCenter | Defense::Crl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Defense::Ce => "ce",
            Defense::Relax => "relax",
            Defense::ImpRelax => "imp_relax",
            Defense::RelaxedCenter => "relaxed_center",
            Defense::Crl => "crl",
            Defense::LabelSmoothing => "label_smoothing",
            Defense::ConfidencePenalty => "confidence_penalty",
        }
    }
}

/// Multiply the learning rate by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub defense: Defense,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: Option<StepDecay>,
    pub center_lr: f64,
    pub relax: RelaxConfig,
    pub label_smoothing_eps: f64,
    pub confidence_penalty_beta: f64,
    /// Stop after this epoch even if `epochs` is larger.
    pub early_stop_epoch: Option<usize>,
    pub seed: u64,
    /// Evaluate accuracies every this many epochs (and always at the last).
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            defense: Defense::Ce,
            epochs: 100,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_decay: None,
            center_lr: DEFAULT_CENTER_LR,
            relax: RelaxConfig::default(),
            label_smoothing_eps: 0.1,
            confidence_penalty_beta: 0.1,
            early_stop_epoch: None,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("training.lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("training.momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("training.weight_decay must be >= 0"));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(Error::config("training.lr_decay needs every >= 1 and factor > 0"));
            }
        }
        if self.defense.uses_centers() && !(self.center_lr > 0.0) {
            return Err(Error::config("training.center_lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_eps) {
            return Err(Error::config("training.label_smoothing_eps must be in [0, 1)"));
        }
        if !(self.confidence_penalty_beta >= 0.0) {
            return Err(Error::config("training.confidence_penalty_beta must be >= 0"));
        }
        if self.early_stop_epoch == Some(0) {
            return Err(Error::config("training.early_stop_epoch must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("training.eval_every must be >= 1"));
        }
        self.relax.validate()
    }

    pub fn epochs_to_run(&self) -> usize {
        self.early_stop_epoch.map_or(self.epochs, |e| e.min(self.epochs))
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.factor.powi(((epoch - 1) / d.every) as i32),
            None => self.lr,
        }
    }
}

/// Seed of the mini-batch permutation for `epoch`.
pub fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seed of the class-center initialization.
pub fn center_seed(seed: u64) -> u64 {
    seed ^ 0xC3A5_C85C_97CB_3127
}

/// The order in which samples are visited in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(seed, epoch)));
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub plain: usize,
    pub reflect: usize,
    pub soft: usize,
}

impl BranchCounts {
    fn add(&mut self, b: Option<Branch>) {
        match b {
            Some(Branch::Plain) => self.plain += 1,
            Some(Branch::Reflect) => self.reflect += 1,
            Some(Branch::Soft) => self.soft += 1,
            None => {}
        }
    }

    pub fn total(&self) -> usize {
        self.plain + self.reflect + self.soft
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_rce: f64,
    pub loss_rcl: f64,
    pub loss_total: f64,
    pub rce_branches: BranchCounts,
    pub rcl_branches: BranchCounts,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Column order of the epoch history CSV.
pub const HISTORY_HEADER: &str = "epoch,loss_rce,loss_rcl,loss_total,rce_plain,rce_reflect,rce_soft,rcl_plain,rcl_reflect,rcl_soft,train_acc,test_acc";

pub fn write_history_csv<W: Write>(history: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |a| format!("{a}"));
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss_rce,
            r.loss_rcl,
            r.loss_total,
            r.rce_branches.plain,
            r.rce_branches.reflect,
            r.rce_branches.soft,
            r.rcl_branches.plain,
            r.rcl_branches.reflect,
            r.rcl_branches.soft,
            opt(r.train_acc),
            opt(r.test_acc)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Empty for defenses without centers.
    pub centers: CenterBank,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.last().map_or(0, |r| r.epoch)
    }
}

/// State after one mini-batch update, for observers.
pub struct StepView<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub params: &'a ModelParams,
    pub centers: &'a CenterBank,
    pub rce: &'a LossResult,
    pub rcl: Option<&'a LossResult>,
}

pub fn train(
    config: &TrainingConfig,
    layer_sizes: &[usize],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutcome> {
    train_observed(config, layer_sizes, train_set, test_set, |_| {})
}

/// [`train`] with a callback after every mini-batch update.
pub fn train_observed<F>(
    config: &TrainingConfig,
    layer_sizes: &[usize],
    train_set: &Dataset,
    test_set: &Dataset,
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&StepView<'_>),
{
    config.validate()?;
    let mut params = model::init_model(layer_sizes, config.seed)?;
    if train_set.classes != params.num_classes() || test_set.classes != params.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes but the model outputs {}",
            train_set.classes,
            params.num_classes()
        )));
    }
    if train_set.dim() != params.input_dim() || test_set.dim() != params.input_dim() {
        return Err(Error::config(format!(
            "dataset has {} features but the model expects {}",
            train_set.dim(),
            params.input_dim()
        )));
    }
    if train_set.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut centers = if config.defense.uses_centers() {
        CenterBank::random(params.num_classes(), params.feature_dim(), center_seed(config.seed), config.center_lr)?
    } else {
        CenterBank::empty()
    };
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay)?;
    let relax = config.relax;
    let last_epoch = config.epochs_to_run();
    let mut history = Vec::with_capacity(last_epoch);

    for epoch in 1..=last_epoch {
        opt.lr = config.lr_at(epoch);
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut sums = (0.0, 0.0, 0.0);
        let mut rce_branches = BranchCounts::default();
        let mut rcl_branches = BranchCounts::default();
        let mut n_batches = 0usize;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let xb = train_set.x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_set.y[i]).collect();
            let trace = model::forward(&params, &xb).map_err(|_| Error::Divergence { epoch, batch })?;
            let logits = &trace.logits;

            let (rce, rcl) = match config.defense {
                Defense::Ce => (losses::ce_loss(logits, &yb)?, None),
                Defense::Relax => (losses::relax_loss(logits, &yb, relax.alpha_rce, epoch)?, None),
                Defense::ImpRelax => {
                    (losses::imp_relax_loss(logits, &yb, relax.alpha_rce, relax.tau_rce, epoch)?, None)
                }
                Defense::LabelSmoothing => {
                    (losses::label_smoothing_loss(logits, &yb, config.label_smoothing_eps)?, None)
                }
                Defense::ConfidencePenalty => {
                    (losses::confidence_penalty_loss(logits, &yb, config.confidence_penalty_beta)?, None)
                }
                Defense::Crl | Defense::RelaxedCenter => {
                    let (tau_rce, tau_rcl) =
                        if config.defense == Defense::Crl { (relax.tau_rce, relax.tau_rcl) } else { (0.0, 0.0) };
                    let probs = softmax_rows(logits);
                    let rcl = losses::relaxed_center_loss(
                        trace.features(),
                        &centers,
                        &probs,
                        &yb,
                        relax.alpha_rcl,
                        tau_rcl,
                        epoch,
                    )?;
                    let rce = losses::imp_relax_loss(logits, &yb, relax.alpha_rce, tau_rce, epoch)?;
                    (rce, Some(rcl))
                }
            };
            let total = match &rcl {
                Some(rcl) => losses::crl_total(&rce, rcl, relax.lambda)?,
                None => rce.clone(),
            };
            if !total.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }

            if let Some(gc) = total.grad_centers.as_ref() {
                centers.apply_grads(gc)?;
            }
            let grad_logits = total.grad_logits.as_ref().expect("defense losses produce logit gradients");
            let grads = model::backward(&params, &trace, grad_logits, total.grad_features.as_ref(), false)?;
            if !grads.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
            opt.step(&mut params, &grads)?;

            sums.0 += rce.loss;
            sums.1 += rcl.as_ref().map_or(0.0, |r| r.loss);
            sums.2 += total.loss;
            rce_branches.add(rce.branch);
            rcl_branches.add(rcl.as_ref().and_then(|r| r.branch));
            n_batches += 1;
            observe(&StepView { epoch, batch, params: &params, centers: &centers, rce: &rce, rcl: rcl.as_ref() });
        }
        let evaluate = epoch % config.eval_every == 0 || epoch == last_epoch;
        let (train_acc, test_acc) = if evaluate {
            let te = if test_set.is_empty() { None } else { Some(evaluate_accuracy(&params, test_set)?) };
            (Some(evaluate_accuracy(&params, train_set)?), te)
        } else {
            (None, None)
        };
        let nb = n_batches as f64;
        let record = EpochRecord {
            epoch,
            loss_rce: sums.0 / nb,
            loss_rcl: sums.1 / nb,
            loss_total: sums.2 / nb,
            rce_branches,
            rcl_branches,
            train_acc,
            test_acc,
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} train {:?} test {:?}",
            record.loss_total,
            record.train_acc,
            record.test_acc
        );
        history.push(record);
    }
    Ok(TrainOutcome { params, centers, history })
}

const EVAL_CHUNK: usize = 512;

/// Logits for every row, computed in chunks.
pub fn predict_logits(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let mut out = Vec::with_capacity(x.rows() * params.num_classes());
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let t = model::forward(params, &x.select_rows(chunk))?;
        out.extend_from_slice(t.logits.as_slice());
    }
    Matrix::from_vec(x.rows(), params.num_classes(), out)
}

/// Argmax accuracy, ties toward the lowest class index.
pub fn evaluate_accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::input("accuracy of an empty dataset"));
    }
    let logits = predict_logits(params, &dataset.x)?;
    Ok(accuracy_from_logits(&logits, &dataset.y))
}

pub fn accuracy_from_logits(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = logits.rows_iter().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    correct as f64 / labels.len() as f64
}
