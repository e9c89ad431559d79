//! Loss family for relaxed training: cross-entropy and its logit-normalized
//! and soft-target variants, the two relaxed cross-entropy schedules, center
//! loss and its relaxed counterpart, the joint objective, and the
//! label-smoothing / confidence-penalty baselines.
//!
//! Every loss returns its batch-mean value together with analytic gradients.
//! Relaxed losses additionally report which branch fired.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, norm_scale, normalize_vjp, softmax_into, Matrix, ProbVector, PROB_SUM_TOL};

/// Which case of a relaxed loss produced the value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Ordinary descent on the underlying loss.
    Plain,
    /// `|L - alpha|`: gradient ascent when the loss is below the threshold.
    Reflect,
    /// Soft-target (or pull-to-origin) relaxation.
    Soft,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Plain, Branch::Reflect, Branch::Soft];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Plain => "plain",
            Branch::Reflect => "reflect",
            Branch::Soft => "soft",
        }
    }
}

/// Sparse per-class center gradients.
pub type CenterGrads = BTreeMap<usize, Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub grad_logits: Option<Matrix>,
    pub grad_features: Option<Matrix>,
    pub grad_centers: Option<CenterGrads>,
    pub branch: Option<Branch>,
}

impl LossResult {
    fn logits_only(loss: f64, grad: Matrix) -> Self {
        LossResult { loss, grad_logits: Some(grad), grad_features: None, grad_centers: None, branch: None }
    }

    fn tagged(mut self, branch: Branch) -> Self {
        self.branch = Some(branch);
        self
    }

    /// Multiplies value and every gradient by `s`.
    fn scaled(mut self, s: f64) -> Self {
        self.loss *= s;
        if let Some(g) = self.grad_logits.as_mut() {
            g.scale(s);
        }
        if let Some(g) = self.grad_features.as_mut() {
            g.scale(s);
        }
        if let Some(gc) = self.grad_centers.as_mut() {
            gc.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
        }
        self
    }

    /// `|L - alpha|` with gradient `sign(L - alpha) * grad L`; the sign is
    /// taken as negative at equality.
    fn reflected(self, alpha: f64) -> Self {
        let diff = self.loss - alpha;
        let sign = if diff > 0.0 { 1.0 } else { -1.0 };
        let mut r = self.scaled(sign);
        r.loss = diff.abs();
        r.tagged(Branch::Reflect)
    }
}

/// Learnable class centers in feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    pub centers: Matrix,
    pub center_lr: f64,
}

/// Center learning rate used throughout.
pub const DEFAULT_CENTER_LR: f64 = 0.001;

impl CenterBank {
    pub fn new(centers: Matrix, center_lr: f64) -> Result<Self> {
        if !centers.is_finite() {
            return Err(Error::input("non-finite center"));
        }
        if !(center_lr > 0.0) {
            return Err(Error::config(format!("center learning rate must be > 0, got {center_lr}")));
        }
        Ok(CenterBank { centers, center_lr })
    }

    /// Standard normal entries scaled by 0.1.
    pub fn random(classes: usize, dim: usize, seed: u64, center_lr: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> =
            (0..classes * dim).map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        CenterBank::new(Matrix::from_vec(classes, dim, data)?, center_lr)
    }

    /// An empty bank, for defenses without centers.
    pub fn empty() -> Self {
        CenterBank { centers: Matrix::zeros(0, 0), center_lr: DEFAULT_CENTER_LR }
    }

    pub fn is_empty(&self) -> bool {
        self.centers.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    /// `c_i <- c_i - center_lr * grad_i` for every class in `grads`.
    pub fn apply_grads(&mut self, grads: &CenterGrads) -> Result<()> {
        for (&class, g) in grads {
            if class >= self.num_classes() || g.len() != self.dim() {
                return Err(Error::dim(format!("center gradient for class {class}")));
            }
            let lr = self.center_lr;
            for (c, gi) in self.centers.row_mut(class).iter_mut().zip(g) {
                *c -= lr * gi;
            }
        }
        Ok(())
    }
}

/// Thresholds, normalization factors and joint weight for relaxed training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxConfig {
    pub alpha_rce: f64,
    pub alpha_rcl: f64,
    pub tau_rce: f64,
    pub tau_rcl: f64,
    pub lambda: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig { alpha_rce: 1.0, alpha_rcl: 0.1, tau_rce: 0.1, tau_rcl: 0.1, lambda: 1.0 }
    }
}

impl RelaxConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_rce", self.alpha_rce),
            ("alpha_rcl", self.alpha_rcl),
            ("tau_rce", self.tau_rce),
            ("tau_rcl", self.tau_rcl),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("relax.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim(format!("{} labels for {rows} rows", labels.len())));
    }
    if rows == 0 {
        return Err(Error::input("empty batch"));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

fn check_logits(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.cols() < 2 {
        return Err(Error::dim("need at least two classes"));
    }
    if !logits.is_finite() {
        return Err(Error::input("non-finite logits"));
    }
    check_labels(labels, logits.rows(), logits.cols())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("normalization factor must be >= 0, got {tau}")));
    }
    Ok(())
}

fn check_epoch(epoch: usize) -> Result<()> {
    if epoch == 0 {
        return Err(Error::config("epochs are numbered from 1"));
    }
    Ok(())
}

/// Per-row target distributions.
enum Targets<'a> {
    OneHot,
    Dense(&'a Matrix),
}

/// Batch-mean cross-entropy of targets against `softmax(g / (1 + tau ||g||))`.
///
/// Targets must sum to one per row, so `dL/dz = p_norm - t` before the
/// normalization chain. With `tau == 0` the scaled logits are the logits
/// themselves and the chain rule reduces to the identity.
fn normalized_ce(logits: &Matrix, labels: &[usize], tau: f64, targets: Targets<'_>) -> LossResult {
    let (b, c) = logits.shape();
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    let mut z = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut u = vec![0.0; c];
    for r in 0..b {
        let g = logits.row(r);
        let (s, n) = if tau == 0.0 {
            z.copy_from_slice(g);
            (1.0, l2_norm(g))
        } else {
            let (s, n) = norm_scale(g, tau);
            z.iter_mut().zip(g).for_each(|(zi, gi)| *zi = gi / s);
            (s, n)
        };
        softmax_into(&z, &mut p);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        match targets {
            Targets::OneHot => {
                let y = labels[r];
                total += lse - z[y];
                for (i, ui) in u.iter_mut().enumerate() {
                    let t = if i == y { 1.0 } else { 0.0 };
                    *ui = (p[i] - t) * inv_b;
                }
            }
            Targets::Dense(t) => {
                let tr = t.row(r);
                for i in 0..c {
                    if tr[i] != 0.0 {
                        total += tr[i] * (lse - z[i]);
                    }
                    u[i] = (p[i] - tr[i]) * inv_b;
                }
            }
        }
        normalize_vjp(g, tau, s, n, &u, grad.row_mut(r));
    }
    LossResult::logits_only(total * inv_b, grad)
}

/// Mean cross-entropy `-ln p_y`, gradient `(p - onehot) / B`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<LossResult> {
    check_logits(logits, labels)?;
    Ok(normalized_ce(logits, labels, 0.0, Targets::OneHot))
}

/// Cross-entropy against logit-normalized probabilities.
pub fn lce_loss(logits: &Matrix, labels: &[usize], tau_rce: f64) -> Result<LossResult> {
    check_tau(tau_rce)?;
    check_logits(logits, labels)?;
    Ok(normalized_ce(logits, labels, tau_rce, Targets::OneHot))
}

/// Keeps the true-class probability and spreads the rest evenly.
pub fn soft_target(p: &ProbVector, y: usize) -> Result<ProbVector> {
    let c = p.len();
    if c < 2 {
        return Err(Error::config("soft targets need at least two classes"));
    }
    if y >= c {
        return Err(Error::Label { label: y, classes: c });
    }
    let mut out = vec![0.0; c];
    soft_target_into(p.as_slice(), y, &mut out);
    ProbVector::new(out)
}

fn soft_target_into(p: &[f64], y: usize, out: &mut [f64]) {
    let c = p.len();
    let rest = (1.0 - p[y]) / (c - 1) as f64;
    out.fill(rest);
    out[y] = p[y];
}

/// Soft targets from the plain softmax of each logit row. These are
/// constants for differentiation.
fn soft_targets(logits: &Matrix, labels: &[usize]) -> Matrix {
    let (b, c) = logits.shape();
    let mut t = Matrix::zeros(b, c);
    let mut p = vec![0.0; c];
    for r in 0..b {
        softmax_into(logits.row(r), &mut p);
        soft_target_into(&p, labels[r], t.row_mut(r));
    }
    t
}

/// Soft cross-entropy of the (gradient-stopped) soft targets against the
/// logit-normalized probabilities.
pub fn sce_loss(logits: &Matrix, labels: &[usize], tau_rce: f64) -> Result<LossResult> {
    check_tau(tau_rce)?;
    check_logits(logits, labels)?;
    let t = soft_targets(logits, labels);
    Ok(normalized_ce(logits, labels, tau_rce, Targets::Dense(&t)))
}

/// Threshold first, then epoch parity:
/// `L_ce > alpha` -> plain CE; else even epoch -> `|L_ce - alpha|`;
/// else soft CE without normalization.
pub fn relax_loss(logits: &Matrix, labels: &[usize], alpha_rce: f64, epoch: usize) -> Result<LossResult> {
    check_epoch(epoch)?;
    let ce = ce_loss(logits, labels)?;
    if ce.loss > alpha_rce {
        Ok(ce.tagged(Branch::Plain))
    } else if epoch.is_multiple_of(2) {
        Ok(ce.reflected(alpha_rce))
    } else {
        Ok(sce_loss(logits, labels, 0.0)?.tagged(Branch::Soft))
    }
}

/// Epoch parity first, then threshold:
/// even epoch -> `|L_lce - alpha|`; else `L_lce > alpha` -> `L_lce`;
/// else soft CE with normalization.
pub fn imp_relax_loss(
    logits: &Matrix,
    labels: &[usize],
    alpha_rce: f64,
    tau_rce: f64,
    epoch: usize,
) -> Result<LossResult> {
    check_epoch(epoch)?;
    let lce = lce_loss(logits, labels, tau_rce)?;
    if epoch.is_multiple_of(2) {
        Ok(lce.reflected(alpha_rce))
    } else if lce.loss > alpha_rce {
        Ok(lce.tagged(Branch::Plain))
    } else {
        Ok(sce_loss(logits, labels, tau_rce)?.tagged(Branch::Soft))
    }
}

fn check_centers(features: &Matrix, centers: &CenterBank, labels: &[usize]) -> Result<()> {
    if centers.dim() != features.cols() {
        return Err(Error::dim(format!("features have {} columns, centers {}", features.cols(), centers.dim())));
    }
    if !features.is_finite() {
        return Err(Error::input("non-finite features"));
    }
    check_labels(labels, features.rows(), centers.num_classes())
}

/// `sum ||q - c_y||^2 / 2B` on raw features and centers.
pub fn center_loss(features: &Matrix, centers: &CenterBank, labels: &[usize]) -> Result<LossResult> {
    check_centers(features, centers, labels)?;
    let (b, d) = features.shape();
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    let mut gq = Matrix::zeros(b, d);
    let mut gc: CenterGrads = BTreeMap::new();
    for r in 0..b {
        let y = labels[r];
        let q = features.row(r);
        let c = centers.centers.row(y);
        let acc = gc.entry(y).or_insert_with(|| vec![0.0; d]);
        let gr = gq.row_mut(r);
        for k in 0..d {
            let diff = q[k] - c[k];
            total += diff * diff;
            gr[k] = diff * inv_b;
            acc[k] -= diff * inv_b;
        }
    }
    Ok(LossResult {
        loss: total * 0.5 * inv_b,
        grad_logits: None,
        grad_features: Some(gq),
        grad_centers: Some(gc),
        branch: None,
    })
}

/// Relaxed center loss on `q / (1 + tau ||q||)` and `c / (1 + tau ||c||)`.
///
/// With `L_ct` the center loss on the normalized vectors: even epoch ->
/// `|L_ct - alpha|`; else `L_ct > alpha` -> `L_ct`; else a confidence
/// weighted mix of pull-to-center and pull-to-origin,
/// `mean(p_y ||q_n - c_n||^2 + (1 - p_y) ||q_n||^2) / 2`, with the weights
/// held constant.
pub fn relaxed_center_loss(
    features: &Matrix,
    centers: &CenterBank,
    probs: &Matrix,
    labels: &[usize],
    alpha_rcl: f64,
    tau_rcl: f64,
    epoch: usize,
) -> Result<LossResult> {
    check_epoch(epoch)?;
    check_tau(tau_rcl)?;
    check_centers(features, centers, labels)?;
    if probs.shape() != (features.rows(), centers.num_classes()) {
        return Err(Error::input(format!(
            "probabilities {:?} do not match batch {} x {} classes",
            probs.shape(),
            features.rows(),
            centers.num_classes()
        )));
    }
    for row in probs.rows_iter() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::input("probability rows must be distributions"));
        }
    }

    let (b, d) = features.shape();
    let inv_b = 1.0 / b as f64;

    let normalize = |v: &[f64]| -> (Vec<f64>, f64, f64) {
        let (s, n) = norm_scale(v, tau_rcl);
        (v.iter().map(|x| x / s).collect(), s, n)
    };
    let mut center_norm: BTreeMap<usize, (Vec<f64>, f64, f64)> = BTreeMap::new();
    for &y in labels {
        center_norm.entry(y).or_insert_with(|| normalize(centers.centers.row(y)));
    }
    let feats: Vec<(Vec<f64>, f64, f64)> = features.rows_iter().map(normalize).collect();

    let sq_dist: Vec<f64> = (0..b)
        .map(|r| {
            let cn = &center_norm[&labels[r]].0;
            feats[r].0.iter().zip(cn).map(|(a, c)| (a - c) * (a - c)).sum()
        })
        .collect();
    let l_ct = sq_dist.iter().sum::<f64>() * 0.5 * inv_b;

    let soft = epoch % 2 == 1 && l_ct <= alpha_rcl;
    // Gradients w.r.t. the normalized vectors.
    let mut uq = Matrix::zeros(b, d);
    let mut uc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut soft_total = 0.0;
    for r in 0..b {
        let y = labels[r];
        let qn = &feats[r].0;
        let cn = &center_norm[&y].0;
        let (wy, wo) = if soft {
            let py = probs.get(r, y);
            (py, 1.0 - py)
        } else {
            (1.0, 0.0)
        };
        if soft {
            soft_total += wy * sq_dist[r] + wo * qn.iter().map(|v| v * v).sum::<f64>();
        }
        let acc = uc.entry(y).or_insert_with(|| vec![0.0; d]);
        let ur = uq.row_mut(r);
        for k in 0..d {
            let diff = qn[k] - cn[k];
            ur[k] = (wy * diff + wo * qn[k]) * inv_b;
            acc[k] -= wy * diff * inv_b;
        }
    }

    let mut gq = Matrix::zeros(b, d);
    for r in 0..b {
        let (_, s, n) = &feats[r];
        normalize_vjp(features.row(r), tau_rcl, *s, *n, uq.row(r), gq.row_mut(r));
    }
    let mut gc: CenterGrads = BTreeMap::new();
    for (y, u) in &uc {
        let (_, s, n) = &center_norm[y];
        let mut out = vec![0.0; d];
        normalize_vjp(centers.centers.row(*y), tau_rcl, *s, *n, u, &mut out);
        gc.insert(*y, out);
    }

    let base =
        LossResult { loss: l_ct, grad_logits: None, grad_features: Some(gq), grad_centers: Some(gc), branch: None };
    Ok(if epoch.is_multiple_of(2) {
        base.reflected(alpha_rcl)
    } else if !soft {
        base.tagged(Branch::Plain)
    } else {
        LossResult { loss: soft_total * 0.5 * inv_b, ..base }.tagged(Branch::Soft)
    })
}

/// `L = L_rce + lambda * L_rcl`. Center gradients are passed through from
/// `rcl` unscaled since centers descend on `L_rcl` alone.
pub fn crl_total(rce: &LossResult, rcl: &LossResult, lambda: f64) -> Result<LossResult> {
    let grad_features = match (&rce.grad_features, &rcl.grad_features) {
        (Some(a), Some(b)) => {
            let mut g = a.clone();
            g.axpy(lambda, b)?;
            Some(g)
        }
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => {
            let mut g = b.clone();
            g.scale(lambda);
            Some(g)
        }
        (None, None) => None,
    };
    let grad_logits = match (&rce.grad_logits, &rcl.grad_logits) {
        (Some(a), Some(b)) => {
            let mut g = a.clone();
            g.axpy(lambda, b)?;
            Some(g)
        }
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => {
            let mut g = b.clone();
            g.scale(lambda);
            Some(g)
        }
        (None, None) => None,
    };
    Ok(LossResult {
        loss: rce.loss + lambda * rcl.loss,
        grad_logits,
        grad_features,
        grad_centers: rcl.grad_centers.clone(),
        branch: rce.branch,
    })
}

/// Cross-entropy against `(1 - eps) onehot + eps / C`.
pub fn label_smoothing_loss(logits: &Matrix, labels: &[usize], eps: f64) -> Result<LossResult> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("label smoothing eps must be in [0, 1), got {eps}")));
    }
    check_logits(logits, labels)?;
    if eps == 0.0 {
        return Ok(normalized_ce(logits, labels, 0.0, Targets::OneHot));
    }
    let (b, c) = logits.shape();
    let mut t = Matrix::from_vec(b, c, vec![eps / c as f64; b * c])?;
    for (r, &y) in labels.iter().enumerate() {
        t.set(r, y, 1.0 - eps + eps / c as f64);
    }
    Ok(normalized_ce(logits, labels, 0.0, Targets::Dense(&t)))
}

/// `L_ce - beta * H(p)`, batch mean.
pub fn confidence_penalty_loss(logits: &Matrix, labels: &[usize], beta: f64) -> Result<LossResult> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::config(format!("confidence penalty beta must be >= 0, got {beta}")));
    }
    let mut out = ce_loss(logits, labels)?;
    if beta == 0.0 {
        return Ok(out);
    }
    let (b, c) = logits.shape();
    let inv_b = 1.0 / b as f64;
    let grad = out.grad_logits.as_mut().unwrap();
    let mut p = vec![0.0; c];
    let mut logp = vec![0.0; c];
    let mut h_total = 0.0;
    for r in 0..b {
        let g = logits.row(r);
        softmax_into(g, &mut p);
        let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + g.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        logp.iter_mut().zip(g).for_each(|(l, gi)| *l = gi - lse);
        let h: f64 = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
        h_total += h;
        // dH/dg_k = -p_k (ln p_k + H)
        for (k, gk) in grad.row_mut(r).iter_mut().enumerate() {
            *gk += beta * p[k] * (logp[k] + h) * inv_b;
        }
    }
    out.loss -= beta * h_total * inv_b;
    Ok(out)
}
