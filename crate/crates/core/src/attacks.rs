//! Adaptive membership-inference attacks and their evaluation.
//!
//! Four attacks produce a per-sample membership score (higher means more
//! member-like): prediction entropy, modified entropy, input-gradient norm,
//! and a neural attack model trained on shadow models that were trained
//! exactly like the target. Every attack is summarized by the pooled AUC
//! over the target's members and non-members and by the accuracy of
//! per-class thresholds.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{self, ModelParams, Sgd};
use crate::numerics::{self, auc, entropy_slice, softmax_into, softmax_rows, top2_gap, Matrix, ProbVector};
use crate::trainer::{self, TrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Nn,
    Entropy,
    MEntropy,
    GradXL2,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Nn, AttackKind::Entropy, AttackKind::MEntropy, AttackKind::GradXL2];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Nn => "nn",
            AttackKind::Entropy => "entropy",
            AttackKind::MEntropy => "m_entropy",
            AttackKind::GradXL2 => "grad_x_l2",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Negative prediction entropy.
pub fn entropy_score(p: &ProbVector) -> f64 {
    -numerics::entropy(p)
}

const LOG_CLAMP: f64 = 1e-12;

fn m_entropy_slice(p: &[f64], y: usize) -> f64 {
    let ln = |v: f64| v.max(LOG_CLAMP).ln();
    let mut mentr = -(1.0 - p[y]) * ln(p[y]);
    for (i, &pi) in p.iter().enumerate() {
        if i != y {
            mentr -= pi * ln(1.0 - pi);
        }
    }
    -mentr
}

/// Negative modified entropy,
/// `-(1 - p_y) ln p_y - sum_{i != y} p_i ln(1 - p_i)`, log arguments
/// clamped at 1e-12.
pub fn m_entropy_score(p: &ProbVector, y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::Label { label: y, classes: p.len() });
    }
    Ok(m_entropy_slice(p.as_slice(), y))
}

/// Negative l2 norm of the per-sample cross-entropy gradient w.r.t. each
/// input row.
pub fn grad_x_l2_scores(params: &ModelParams, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != x.rows() {
        return Err(Error::dim("one label per row required"));
    }
    let c = params.num_classes();
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let trace = model::forward(params, x)?;
    // per-sample (unaveraged) CE gradient: p - onehot
    let mut g = softmax_rows(&trace.logits);
    for (r, &y) in labels.iter().enumerate() {
        let v = g.get(r, y);
        g.set(r, y, v - 1.0);
    }
    let grads = model::backward(params, &trace, &g, None, true)?;
    let gx = grads.input.expect("input gradient requested");
    Ok(gx.rows_iter().map(|row| -numerics::l2_norm(row)).collect())
}

pub fn grad_x_l2_score(params: &ModelParams, x: &[f64], y: usize) -> Result<f64> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(grad_x_l2_scores(params, &m, &[y])?[0])
}

/// Scores of one attack on a labelled member/non-member population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub is_member: Vec<bool>,
}

impl MembershipScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, is_member: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != is_member.len() {
            return Err(Error::dim("scores, labels and membership must have equal length"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::input("non-finite membership score"));
        }
        Ok(MembershipScoreSet { scores, labels, is_member })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut m = Vec::new();
        let mut n = Vec::new();
        for (&s, &is) in self.scores.iter().zip(&self.is_member) {
            if is {
                m.push(s);
            } else {
                n.push(s);
            }
        }
        (m, n)
    }

    pub fn auc(&self) -> Result<f64> {
        let (m, n) = self.split();
        auc(&m, &n)
    }

    /// Members and non-members swapped.
    pub fn flipped(&self) -> Self {
        MembershipScoreSet { is_member: self.is_member.iter().map(|b| !b).collect(), ..self.clone() }
    }

    fn append(&mut self, other: MembershipScoreSet) {
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
        self.is_member.extend(other.is_member);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "score,label,is_member")?;
        for i in 0..self.len() {
            writeln!(w, "{:?},{},{}", self.scores[i], self.labels[i], u8::from(self.is_member[i]))?;
        }
        Ok(())
    }
}

/// `(TPR + TNR) / 2` of the rule "member iff score >= threshold".
fn balanced_accuracy(tp: usize, pos: usize, tn: usize, neg: usize) -> f64 {
    0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64)
}

/// Best threshold by balanced accuracy over `(score, is_member)` pairs.
///
/// Candidates are one below the minimum, the midpoints between consecutive
/// distinct scores, and one above the maximum. Ties go to the smallest
/// threshold. `None` if either side is absent.
fn best_threshold(samples: &mut [(f64, bool)]) -> Option<(f64, f64)> {
    let pos = samples.iter().filter(|s| s.1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Threshold below everything: all predicted member.
    let mut best_t = samples[0].0 - 1.0;
    let mut best_acc = balanced_accuracy(pos, pos, 0, neg);
    let (mut tp, mut tn) = (pos, 0usize);
    let mut i = 0;
    while i < samples.len() {
        let v = samples[i].0;
        while i < samples.len() && samples[i].0 == v {
            if samples[i].1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let t = if i < samples.len() { 0.5 * (v + samples[i].0) } else { v + 1.0 };
        let acc = balanced_accuracy(tp, pos, tn, neg);
        if acc > best_acc {
            best_acc = acc;
            best_t = t;
        }
    }
    Some((best_t, best_acc))
}

/// Per-class thresholds maximizing balanced membership accuracy. A class
/// without both members and non-members falls back to the global
/// threshold.
pub fn per_class_thresholds(set: &MembershipScoreSet, classes: usize) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::input("no scores to threshold"));
    }
    let mut all: Vec<(f64, bool)> = set.scores.iter().copied().zip(set.is_member.iter().copied()).collect();
    let (global, _) =
        best_threshold(&mut all).ok_or_else(|| Error::input("thresholds need both members and non-members"))?;
    Ok((0..classes)
        .map(|c| {
            let mut per: Vec<(f64, bool)> =
                (0..set.len()).filter(|&i| set.labels[i] == c).map(|i| (set.scores[i], set.is_member[i])).collect();
            best_threshold(&mut per).map_or(global, |(t, _)| t)
        })
        .collect())
}

/// Balanced accuracy of per-class thresholds applied to `set`.
pub fn thresholded_accuracy(set: &MembershipScoreSet, thresholds: &[f64]) -> Result<f64> {
    let pos = set.is_member.iter().filter(|&&m| m).count();
    let neg = set.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input("accuracy needs both members and non-members"));
    }
    let (mut tp, mut tn) = (0, 0);
    for i in 0..set.len() {
        let t =
            *thresholds.get(set.labels[i]).ok_or(Error::Label { label: set.labels[i], classes: thresholds.len() })?;
        let predicted = set.scores[i] >= t;
        match (predicted, set.is_member[i]) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(balanced_accuracy(tp, pos, tn, neg))
}

/// Member/non-member counts over equal-width bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub member_counts: Vec<usize>,
    pub nonmember_counts: Vec<usize>,
}

impl Histogram {
    /// Bins over `[lo, hi]`; values at `hi` go to the last bin, values
    /// outside are clamped.
    pub fn build(members: &[f64], nonmembers: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("histogram needs at least one bin"));
        }
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
        let bin_of = |v: f64| (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        let mut member_counts = vec![0; bins];
        let mut nonmember_counts = vec![0; bins];
        members.iter().for_each(|&v| member_counts[bin_of(v)] += 1);
        nonmembers.iter().for_each(|&v| nonmember_counts[bin_of(v)] += 1);
        Ok(Histogram { edges, member_counts, nonmember_counts })
    }

    pub fn bins(&self) -> usize {
        self.member_counts.len()
    }

    /// `sum_i min(m_i / M, n_i / N)`: 1 for identical normalized
    /// distributions, 0 for disjoint support.
    pub fn intersection(&self) -> f64 {
        let m: usize = self.member_counts.iter().sum();
        let n: usize = self.nonmember_counts.iter().sum();
        if m == 0 || n == 0 {
            return 0.0;
        }
        self.member_counts
            .iter()
            .zip(&self.nonmember_counts)
            .map(|(&a, &b)| (a as f64 / m as f64).min(b as f64 / n as f64))
            .sum()
    }

    /// Fraction of members whose bin starts at or above `from`.
    pub fn member_fraction_from(&self, from: f64) -> f64 {
        let total: usize = self.member_counts.iter().sum();
        let above: usize =
            self.member_counts.iter().zip(&self.edges).filter(|(_, &left)| left >= from - 1e-12).map(|(c, _)| c).sum();
        above as f64 / total.max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_left,bin_right,member_count,nonmember_count")?;
        for i in 0..self.bins() {
            writeln!(
                w,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.member_counts[i],
                self.nonmember_counts[i]
            )?;
        }
        Ok(())
    }
}

/// Hyper-parameters of the NN attack model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NnAttackConfig {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for NnAttackConfig {
    fn default() -> Self {
        NnAttackConfig { hidden: [128, 64], dropout: 0.5, lr: 0.01, momentum: 0.0, epochs: 50, batch_size: 256 }
    }
}

impl NnAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden != [128, 64] {
            return Err(Error::config("attack.nn.hidden is fixed at [128, 64]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("attack.nn.dropout must be in [0, 1)"));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("attack.nn needs lr > 0, epochs >= 1, batch_size >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("attack.nn.momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// MLP `2C -> 128 -> 64 -> 1` with a sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackModelParams {
    pub mlp: ModelParams,
    pub classes: usize,
}

impl AttackModelParams {
    pub fn init(classes: usize, seed: u64) -> Result<Self> {
        Ok(AttackModelParams { mlp: model::init_model(&[2 * classes, 128, 64, 1], seed)?, classes })
    }
}

/// Attack input rows `[p || onehot(y)]`.
pub fn attack_features(probs: &Matrix, labels: &[usize]) -> Matrix {
    let (n, c) = probs.shape();
    let mut f = Matrix::zeros(n, 2 * c);
    for r in 0..n {
        let row = f.row_mut(r);
        row[..c].copy_from_slice(probs.row(r));
        row[c + labels[r]] = 1.0;
    }
    f
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A trained shadow model with its members and non-members.
#[derive(Clone, Debug)]
pub struct ShadowRun {
    pub params: ModelParams,
    pub members: Dataset,
    pub nonmembers: Dataset,
}

/// Binary cross-entropy training of the attack MLP on shadow outputs.
pub fn nn_attack_train(shadows: &[ShadowRun], config: &NnAttackConfig, attack_seed: u64) -> Result<AttackModelParams> {
    if shadows.is_empty() {
        return Err(Error::input("the NN attack needs at least one shadow model"));
    }
    config.validate()?;
    let classes = shadows[0].params.num_classes();
    let mut feats: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for s in shadows {
        for (ds, t) in [(&s.members, 1.0), (&s.nonmembers, 0.0)] {
            if ds.is_empty() {
                continue;
            }
            let probs = softmax_rows(&trainer::predict_logits(&s.params, &ds.x)?);
            feats.extend_from_slice(attack_features(&probs, &ds.y).as_slice());
            targets.extend(std::iter::repeat_n(t, ds.len()));
        }
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::input("shadow models supplied no samples"));
    }
    let x = Matrix::from_vec(n, 2 * classes, feats)?;
    let mut attack = AttackModelParams::init(classes, attack_seed)?;
    let mut opt = Sgd::new(config.lr, config.momentum, 0.0)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(attack_seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(attack_seed);
    drop_rng.set_stream(2);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for idx in order.chunks(config.batch_size) {
            let xb = x.select_rows(idx);
            let trace = model::forward_dropout(&attack.mlp, &xb, config.dropout, &mut drop_rng)?;
            let inv_b = 1.0 / idx.len() as f64;
            let mut g = Matrix::zeros(idx.len(), 1);
            for (r, &i) in idx.iter().enumerate() {
                g.set(r, 0, (sigmoid(trace.logits.get(r, 0)) - targets[i]) * inv_b);
            }
            let grads = model::backward(&attack.mlp, &trace, &g, None, false)?;
            opt.step(&mut attack.mlp, &grads)?;
        }
    }
    Ok(attack)
}

/// Membership probabilities for many samples, dropout off.
pub fn nn_attack_scores(attack: &AttackModelParams, probs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if probs.cols() != attack.classes {
        return Err(Error::dim("probability width does not match the attack model"));
    }
    let logits = trainer::predict_logits(&attack.mlp, &attack_features(probs, labels))?;
    Ok(logits.as_slice().iter().map(|&z| sigmoid(z)).collect())
}

pub fn nn_attack_score(attack: &AttackModelParams, p: &ProbVector, y: usize) -> Result<f64> {
    if y >= attack.classes {
        return Err(Error::Label { label: y, classes: attack.classes });
    }
    let m = Matrix::from_vec(1, p.len(), p.as_slice().to_vec())?;
    Ok(nn_attack_scores(attack, &m, &[y])?[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub attacks: Vec<AttackKind>,
    pub n_shadow: usize,
    /// Shadow `i` trains with seed `shadow_base_seed + i`.
    pub shadow_base_seed: u64,
    pub attack_seed: u64,
    pub hist_bins: usize,
    pub nn: NnAttackConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            attacks: AttackKind::ALL.to_vec(),
            n_shadow: 5,
            shadow_base_seed: 0,
            attack_seed: 0,
            hist_bins: 20,
            nn: NnAttackConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::config("attack.attacks is empty"));
        }
        if self.attacks.contains(&AttackKind::Nn) && self.n_shadow == 0 {
            return Err(Error::config("attack.n_shadow must be >= 1 for the NN attack"));
        }
        if self.hist_bins == 0 {
            return Err(Error::config("attack.hist_bins must be >= 1"));
        }
        self.nn.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub auc: f64,
    pub per_class_thresholds: Vec<f64>,
    pub thresholded_accuracy: f64,
    /// Distribution of this attack's scores on the target.
    pub histogram: Histogram,
    #[serde(skip)]
    pub scores: Option<MembershipScoreSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<AttackReport>,
    /// Largest minus second-largest softmax probability on the target.
    pub boundary_histogram: Histogram,
    pub member_count: usize,
    pub nonmember_count: usize,
}

impl SuiteReport {
    pub fn auc(&self, kind: AttackKind) -> Option<f64> {
        self.reports.iter().find(|r| r.attack == kind).map(|r| r.auc)
    }
}

/// Trains one shadow model per split in `plan` with the target's training
/// configuration; shadow `i` uses seed `base_seed + i`.
pub fn train_shadows(
    training: &TrainingConfig,
    layer_sizes: &[usize],
    data: &Dataset,
    plan: &SplitPlan,
    n_shadow: usize,
    base_seed: u64,
    exec: Executor,
) -> Result<Vec<ShadowRun>> {
    if plan.shadows.len() < n_shadow {
        return Err(Error::config(format!(
            "split plan has {} shadow partitions, {n_shadow} requested",
            plan.shadows.len()
        )));
    }
    let jobs: Vec<(u64, &crate::data::ShadowSplit)> =
        plan.shadows[..n_shadow].iter().enumerate().map(|(i, s)| (base_seed.wrapping_add(i as u64), s)).collect();
    exec.try_map(jobs, |(seed, split)| {
        let members = data.subset(&split.train);
        let nonmembers = data.subset(&split.test);
        let cfg = TrainingConfig { seed, ..training.clone() };
        let out = trainer::train(&cfg, layer_sizes, &members, &nonmembers)?;
        Ok(ShadowRun { params: out.params, members, nonmembers })
    })
}

const SCORE_CHUNK: usize = 256;

/// Scores every row of `ds` with a threshold-style attack, in chunks.
fn score_population(kind: AttackKind, params: &ModelParams, ds: &Dataset, exec: Executor) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(SCORE_CHUNK).collect();
    let parts = exec.try_map(chunks, |chunk| -> Result<Vec<f64>> {
        let x = ds.x.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| ds.y[i]).collect();
        if kind == AttackKind::GradXL2 {
            return grad_x_l2_scores(params, &x, &y);
        }
        let logits = model::forward(params, &x)?.logits;
        let mut p = vec![0.0; logits.cols()];
        Ok(logits
            .rows_iter()
            .zip(&y)
            .map(|(g, &yi)| {
                softmax_into(g, &mut p);
                match kind {
                    AttackKind::Entropy => -entropy_slice(&p),
                    _ => m_entropy_slice(&p, yi),
                }
            })
            .collect())
    })?;
    Ok(parts.concat())
}

fn score_set(
    kind: AttackKind,
    params: &ModelParams,
    attack: Option<&AttackModelParams>,
    members: &Dataset,
    nonmembers: &Dataset,
    exec: Executor,
) -> Result<MembershipScoreSet> {
    let score = |ds: &Dataset| -> Result<Vec<f64>> {
        match (kind, attack) {
            (AttackKind::Nn, Some(a)) => {
                let probs = softmax_rows(&trainer::predict_logits(params, &ds.x)?);
                nn_attack_scores(a, &probs, &ds.y)
            }
            (AttackKind::Nn, None) => Err(Error::config("NN attack requested without an attack model")),
            _ => score_population(kind, params, ds, exec),
        }
    };
    let mut scores = score(members)?;
    scores.extend(score(nonmembers)?);
    let labels: Vec<usize> = members.y.iter().chain(&nonmembers.y).copied().collect();
    let is_member: Vec<bool> =
        std::iter::repeat_n(true, members.len()).chain(std::iter::repeat_n(false, nonmembers.len())).collect();
    MembershipScoreSet::new(scores, labels, is_member)
}

/// Distance-to-boundary histogram of a model on members and non-members.
pub fn boundary_histogram(
    params: &ModelParams,
    members: &Dataset,
    nonmembers: &Dataset,
    bins: usize,
) -> Result<Histogram> {
    let gaps = |ds: &Dataset| -> Result<Vec<f64>> {
        let probs = softmax_rows(&trainer::predict_logits(params, &ds.x)?);
        Ok(probs.rows_iter().map(top2_gap).collect())
    };
    Histogram::build(&gaps(members)?, &gaps(nonmembers)?, bins, 0.0, 1.0)
}

/// Runs the configured attacks against `target`, whose members and
/// non-members are given. Thresholds are fitted on pooled shadow scores
/// when shadows exist, otherwise on the target population itself.
pub fn evaluate_attacks(
    target: &ModelParams,
    members: &Dataset,
    nonmembers: &Dataset,
    shadows: &[ShadowRun],
    config: &AttackConfig,
    exec: Executor,
) -> Result<SuiteReport> {
    config.validate()?;
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::input("attack evaluation needs members and non-members"));
    }
    let classes = target.num_classes();
    let attack_model = if config.attacks.contains(&AttackKind::Nn) {
        Some(nn_attack_train(shadows, &config.nn, config.attack_seed)?)
    } else {
        None
    };
    let mut reports = Vec::with_capacity(config.attacks.len());
    for &kind in &config.attacks {
        let target_scores = score_set(kind, target, attack_model.as_ref(), members, nonmembers, exec)?;
        let fit_set = if shadows.is_empty() {
            target_scores.clone()
        } else {
            let mut pooled = MembershipScoreSet::new(vec![], vec![], vec![])?;
            for s in shadows {
                pooled.append(score_set(kind, &s.params, attack_model.as_ref(), &s.members, &s.nonmembers, exec)?);
            }
            pooled
        };
        let thresholds = per_class_thresholds(&fit_set, classes)?;
        let thresholded = thresholded_accuracy(&target_scores, &thresholds)?;
        let (m, n) = target_scores.split();
        let lo = m.iter().chain(&n).copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().chain(&n).copied().fold(f64::NEG_INFINITY, f64::max);
        let histogram = Histogram::build(&m, &n, config.hist_bins, lo, hi)?;
        reports.push(AttackReport {
            attack: kind,
            auc: auc(&m, &n)?,
            per_class_thresholds: thresholds,
            thresholded_accuracy: thresholded,
            histogram,
            scores: Some(target_scores),
        });
    }
    Ok(SuiteReport {
        reports,
        boundary_histogram: boundary_histogram(target, members, nonmembers, config.hist_bins)?,
        member_count: members.len(),
        nonmember_count: nonmembers.len(),
    })
}

/// Adaptive protocol end to end: shadow models are trained with the
/// target's own training configuration on the plan's shadow partitions.
#[allow(clippy::too_many_arguments)]
pub fn run_attack_suite(
    target: &ModelParams,
    data: &Dataset,
    plan: &SplitPlan,
    training: &TrainingConfig,
    layer_sizes: &[usize],
    config: &AttackConfig,
    exec: Executor,
) -> Result<SuiteReport> {
    config.validate()?;
    let shadows = if config.attacks.contains(&AttackKind::Nn) {
        train_shadows(training, layer_sizes, data, plan, config.n_shadow, config.shadow_base_seed, exec)?
    } else {
        Vec::new()
    };
    let members = data.subset(&plan.target_train);
    let nonmembers = data.subset(&plan.target_test);
    evaluate_attacks(target, &members, &nonmembers, &shadows, config, exec)
}
