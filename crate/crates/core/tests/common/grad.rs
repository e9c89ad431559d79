//! Finite-difference checks of every loss against the reference formulas
//! in the parent module. Branches are forced by choosing `alpha` and the
//! epoch around the reference loss, then frozen for differentiation.

use crl_core::losses::{self, CenterBank, LossResult};
use crl_core::Branch;
use rand::Rng;

use super::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Case {
    Ce,
    Lce,
    Sce,
    Relax(Branch),
    ImpRelax(Branch),
    Center,
    RelaxedCenter(Branch),
    LabelSmoothing,
    ConfidencePenalty,
    CrlTotal,
}

pub const ALL_CASES: [Case; 16] = [
    Case::Ce,
    Case::Lce,
    Case::Sce,
    Case::Relax(Branch::Plain),
    Case::Relax(Branch::Reflect),
    Case::Relax(Branch::Soft),
    Case::ImpRelax(Branch::Plain),
    Case::ImpRelax(Branch::Reflect),
    Case::ImpRelax(Branch::Soft),
    Case::Center,
    Case::RelaxedCenter(Branch::Plain),
    Case::RelaxedCenter(Branch::Reflect),
    Case::RelaxedCenter(Branch::Soft),
    Case::LabelSmoothing,
    Case::ConfidencePenalty,
    Case::CrlTotal,
];

/// Worst of the value mismatch and the gradient relative error.
#[derive(Clone, Copy, Debug)]
pub struct Outcome {
    pub value_err: f64,
    pub grad_err: f64,
}

impl Outcome {
    pub fn worst(&self) -> f64 {
        self.value_err.max(self.grad_err)
    }
}

struct Problem {
    b: usize,
    c: usize,
    d: usize,
    logits: Vec<f64>,
    labels: Vec<usize>,
    feats: Vec<f64>,
    centers: Vec<f64>,
    tau: f64,
}

fn problem(seed: u64) -> Problem {
    let mut r = rng(seed);
    let b = r.random_range(2..=6);
    let c = r.random_range(2..=6);
    let d = r.random_range(2..=5);
    Problem {
        b,
        c,
        d,
        logits: rand_vec(&mut r, b * c, 3.0),
        labels: rand_labels(&mut r, b, c),
        feats: rand_vec(&mut r, b * d, 2.0),
        centers: rand_vec(&mut r, c * d, 2.0),
        tau: r.random_range(0.05..0.5),
    }
}

fn dense_center_grad(res: &LossResult, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * d];
    for (&k, g) in res.grad_centers.as_ref().expect("center gradients") {
        out[k * d..(k + 1) * d].copy_from_slice(g);
    }
    out
}

fn expect_branch(res: &LossResult, want: Option<Branch>) -> Result<(), String> {
    if res.branch != want {
        return Err(format!("branch {:?}, expected {want:?}", res.branch));
    }
    Ok(())
}

fn compare(value: f64, reference: f64, grad: &[f64], fd: &[f64]) -> Outcome {
    Outcome { value_err: (value - reference).abs() / reference.abs().max(1.0), grad_err: rel_err(grad, fd) }
}

/// Picks `alpha` on the requested side of `l`: `above` puts alpha at
/// `1.5 l` so that `l <= alpha`.
fn alpha_for(l: f64, above: bool) -> f64 {
    if above {
        1.5 * l
    } else {
        0.5 * l
    }
}

/// Runs one case at one seed. Where both sides of `alpha` are possible,
/// even seeds put the loss below it.
pub fn run(case: Case, seed: u64) -> Result<Outcome, String> {
    let p = problem(seed);
    let (b, c, d) = (p.b, p.c, p.d);
    let labels = &p.labels;
    let logits_m = mat(b, c, &p.logits);
    let err = |e: crl_core::Error| e.to_string();
    let variant = seed.is_multiple_of(2);

    let logit_case = |res: LossResult, reference: &dyn Fn(&[f64]) -> f64| -> Outcome {
        let g = res.grad_logits.expect("logit gradient");
        compare(res.loss, reference(&p.logits), g.as_slice(), &fd_grad(reference, &p.logits))
    };

    match case {
        Case::Ce => {
            let res = losses::ce_loss(&logits_m, labels).map_err(err)?;
            Ok(logit_case(res, &|x| ref_ce(x, labels, c, 0.0, &Target::OneHot)))
        }
        Case::Lce => {
            let res = losses::lce_loss(&logits_m, labels, p.tau).map_err(err)?;
            Ok(logit_case(res, &|x| ref_ce(x, labels, c, p.tau, &Target::OneHot)))
        }
        Case::Sce => {
            let t = ref_soft_targets(&p.logits, labels, c);
            let res = losses::sce_loss(&logits_m, labels, p.tau).map_err(err)?;
            Ok(logit_case(res, &|x| ref_ce(x, labels, c, p.tau, &Target::Dense(&t))))
        }
        Case::LabelSmoothing => {
            let eps = 0.05 + 0.4 * (seed % 7) as f64 / 7.0;
            let t = ref_smoothed_targets(labels, c, eps);
            let res = losses::label_smoothing_loss(&logits_m, labels, eps).map_err(err)?;
            Ok(logit_case(res, &|x| ref_ce(x, labels, c, 0.0, &Target::Dense(&t))))
        }
        Case::ConfidencePenalty => {
            let beta = 0.05 + 0.1 * (seed % 10) as f64;
            let res = losses::confidence_penalty_loss(&logits_m, labels, beta).map_err(err)?;
            Ok(logit_case(res, &|x| ref_confidence_penalty(x, labels, c, beta)))
        }
        Case::Relax(branch) => {
            let l = ref_ce(&p.logits, labels, c, 0.0, &Target::OneHot);
            let (alpha, epoch) = match branch {
                Branch::Plain => (alpha_for(l, false), 1 + (seed as usize % 2)),
                Branch::Reflect => (alpha_for(l, true), 2),
                Branch::Soft => (alpha_for(l, true), 3),
            };
            let res = losses::relax_loss(&logits_m, labels, alpha, epoch).map_err(err)?;
            expect_branch(&res, Some(branch))?;
            let t = ref_soft_targets(&p.logits, labels, c);
            Ok(logit_case(res, &|x| match branch {
                Branch::Plain => ref_ce(x, labels, c, 0.0, &Target::OneHot),
                Branch::Reflect => (ref_ce(x, labels, c, 0.0, &Target::OneHot) - alpha).abs(),
                Branch::Soft => ref_ce(x, labels, c, 0.0, &Target::Dense(&t)),
            }))
        }
        Case::ImpRelax(branch) => {
            let l = ref_ce(&p.logits, labels, c, p.tau, &Target::OneHot);
            let (alpha, epoch) = match branch {
                Branch::Plain => (alpha_for(l, false), 1),
                Branch::Reflect => (alpha_for(l, variant), 4),
                Branch::Soft => (alpha_for(l, true), 5),
            };
            let res = losses::imp_relax_loss(&logits_m, labels, alpha, p.tau, epoch).map_err(err)?;
            expect_branch(&res, Some(branch))?;
            let t = ref_soft_targets(&p.logits, labels, c);
            Ok(logit_case(res, &|x| match branch {
                Branch::Plain => ref_ce(x, labels, c, p.tau, &Target::OneHot),
                Branch::Reflect => (ref_ce(x, labels, c, p.tau, &Target::OneHot) - alpha).abs(),
                Branch::Soft => ref_ce(x, labels, c, p.tau, &Target::Dense(&t)),
            }))
        }
        Case::Center => {
            let bank = CenterBank::new(mat(c, d, &p.centers), 0.1).map_err(err)?;
            let res = losses::center_loss(&mat(b, d, &p.feats), &bank, labels).map_err(err)?;
            let nq = b * d;
            let joint: Vec<f64> = p.feats.iter().chain(&p.centers).copied().collect();
            let f = |x: &[f64]| ref_center(&x[..nq], &x[nq..], labels, d);
            let mut g = res.grad_features.as_ref().unwrap().as_slice().to_vec();
            g.extend(dense_center_grad(&res, c, d));
            Ok(compare(res.loss, f(&joint), &g, &fd_grad(f, &joint)))
        }
        Case::RelaxedCenter(branch) => {
            let (res, f, joint) = relaxed_center(&p, branch, variant, seed)?;
            let mut g = res.grad_features.as_ref().unwrap().as_slice().to_vec();
            g.extend(dense_center_grad(&res, c, d));
            Ok(compare(res.loss, f(&joint), &g, &fd_grad(&f, &joint)))
        }
        Case::CrlTotal => {
            let rce_branch = [Branch::Plain, Branch::Reflect, Branch::Soft][seed as usize % 3];
            let rcl_branch = [Branch::Plain, Branch::Reflect, Branch::Soft][(seed as usize / 3) % 3];
            let lambda = 0.25 + 0.5 * (seed % 4) as f64;
            // Shared epoch parity: reflection on even epochs, everything
            // else on odd ones.
            let even = rce_branch == Branch::Reflect || rcl_branch == Branch::Reflect;
            let rce_branch = if even { Branch::Reflect } else { rce_branch };
            let rcl_branch = if even { Branch::Reflect } else { rcl_branch };
            let epoch = if even { 2 } else { 3 };

            let l = ref_ce(&p.logits, labels, c, p.tau, &Target::OneHot);
            let alpha_rce = match rce_branch {
                Branch::Plain => alpha_for(l, false),
                Branch::Reflect => alpha_for(l, seed.is_multiple_of(2)),
                Branch::Soft => alpha_for(l, true),
            };
            let rce = losses::imp_relax_loss(&logits_m, labels, alpha_rce, p.tau, epoch).map_err(err)?;
            expect_branch(&rce, Some(rce_branch))?;
            let t = ref_soft_targets(&p.logits, labels, c);
            let rce_ref = |x: &[f64]| match rce_branch {
                Branch::Plain => ref_ce(x, labels, c, p.tau, &Target::OneHot),
                Branch::Reflect => (ref_ce(x, labels, c, p.tau, &Target::OneHot) - alpha_rce).abs(),
                Branch::Soft => ref_ce(x, labels, c, p.tau, &Target::Dense(&t)),
            };
            let (rcl, rcl_ref, qc) = relaxed_center(&p, rcl_branch, seed % 2 == 1, seed)?;
            let total = losses::crl_total(&rce, &rcl, lambda).map_err(err)?;

            let nl = b * c;
            let nq = b * d;
            let joint: Vec<f64> = p.logits.iter().chain(&qc).copied().collect();
            let total_ref = |x: &[f64]| rce_ref(&x[..nl]) + lambda * rcl_ref(&x[nl..]);
            let fd_total = fd_grad(total_ref, &joint);
            // Centers descend on the center loss alone.
            let fd_centers = fd_grad(|cc: &[f64]| rcl_ref(&[&qc[..nq], cc].concat()), &qc[nq..]);
            let mut fd = fd_total[..nl + nq].to_vec();
            fd.extend(fd_centers);

            let mut g = total.grad_logits.as_ref().unwrap().as_slice().to_vec();
            g.extend_from_slice(total.grad_features.as_ref().unwrap().as_slice());
            g.extend(dense_center_grad(&total, c, d));
            Ok(compare(total.loss, total_ref(&joint), &g, &fd))
        }
    }
}

type Reference = Box<dyn Fn(&[f64]) -> f64>;

/// Library result, reference over `[features; centers]`, and that point.
fn relaxed_center(
    p: &Problem,
    branch: Branch,
    below: bool,
    seed: u64,
) -> Result<(LossResult, Reference, Vec<f64>), String> {
    let (b, c, d, tau) = (p.b, p.c, p.d, p.tau);
    let labels = p.labels.clone();
    let probs: Vec<f64> = p.logits.chunks(c).flat_map(softmax).collect();
    let py: Vec<f64> = labels.iter().enumerate().map(|(r, &y)| probs[r * c + y]).collect();
    let l = ref_center_normalized(&p.feats, &p.centers, &labels, d, tau);
    let (alpha, epoch) = match branch {
        Branch::Plain => (alpha_for(l, false), 1),
        Branch::Reflect => (alpha_for(l, !below), 2),
        Branch::Soft => (alpha_for(l, true), 1 + 2 * (seed as usize % 3)),
    };
    let bank = CenterBank::new(mat(c, d, &p.centers), 0.1).map_err(|e| e.to_string())?;
    let res = losses::relaxed_center_loss(&mat(b, d, &p.feats), &bank, &mat(b, c, &probs), &labels, alpha, tau, epoch)
        .map_err(|e| e.to_string())?;
    expect_branch(&res, Some(branch))?;
    let nq = b * d;
    let f: Reference = Box::new(move |x: &[f64]| match branch {
        Branch::Plain => ref_center_normalized(&x[..nq], &x[nq..], &labels, d, tau),
        Branch::Reflect => (ref_center_normalized(&x[..nq], &x[nq..], &labels, d, tau) - alpha).abs(),
        Branch::Soft => ref_center_soft(&x[..nq], &x[nq..], &labels, d, tau, &py),
    });
    let joint: Vec<f64> = p.feats.iter().chain(&p.centers).copied().collect();
    Ok((res, f, joint))
}

/// Runs `case` over `seeds` seeds and returns the worst outcome.
pub fn sweep(case: Case, seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let out = run(case, 1000 + seed).map_err(|e| format!("{case:?} seed {seed}: {e}"))?;
        worst = worst.max(out.worst());
    }
    Ok(worst)
}
