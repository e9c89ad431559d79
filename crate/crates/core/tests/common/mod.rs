//! Independent reference implementations used as test oracles. Nothing
//! here calls into the library's loss or model code.
#![allow(dead_code, clippy::needless_range_loop)]

use crl_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod grad;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

pub fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix {
    Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + FD_STEP;
            let up = f(&xp);
            xp[i] = orig - FD_STEP;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, 1e-6)`. The floor keeps differencing
/// noise (about 1e-11) from counting as error when the true gradient is
/// zero, as for soft targets with two classes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

pub fn softmax(g: &[f64]) -> Vec<f64> {
    let m = g.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = g.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(g: &[f64]) -> Vec<f64> {
    let m = g.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + g.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    g.iter().map(|x| x - lse).collect()
}

/// `v / (1 + tau ||v||)`.
pub fn normalize(v: &[f64], tau: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (1.0 + tau * n)).collect()
}

/// Targets for one row: one-hot, soft (`p_y` kept, rest spread), or
/// label-smoothed.
pub enum Target<'a> {
    OneHot,
    Dense(&'a [Vec<f64>]),
}

/// Mean of `-sum_k t_k ln softmax(normalize(g, tau))_k` over rows.
pub fn ref_ce(logits: &[f64], labels: &[usize], classes: usize, tau: f64, t: &Target) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for r in 0..b {
        let g = normalize(&logits[r * classes..(r + 1) * classes], tau);
        let lp = log_softmax(&g);
        total += match t {
            Target::OneHot => -lp[labels[r]],
            Target::Dense(rows) => -rows[r].iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>(),
        };
    }
    total / b as f64
}

/// Soft targets from the plain softmax, computed once and frozen.
pub fn ref_soft_targets(logits: &[f64], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let p = softmax(&logits[r * classes..(r + 1) * classes]);
            let rest = (1.0 - p[y]) / (classes - 1) as f64;
            (0..classes).map(|k| if k == y { p[y] } else { rest }).collect()
        })
        .collect()
}

pub fn ref_smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&y| (0..classes).map(|k| eps / classes as f64 + if k == y { 1.0 - eps } else { 0.0 }).collect())
        .collect()
}

/// Mean `CE - beta H(softmax)`.
pub fn ref_confidence_penalty(logits: &[f64], labels: &[usize], classes: usize, beta: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for r in 0..b {
        let g = &logits[r * classes..(r + 1) * classes];
        let lp = log_softmax(g);
        let h: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
        total += -lp[labels[r]] - beta * h;
    }
    total / b as f64
}

/// `sum ||q_r - c_{y_r}||^2 / 2B`, features and centers row-major.
pub fn ref_center(q: &[f64], c: &[f64], labels: &[usize], d: usize) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for r in 0..b {
        let y = labels[r];
        for k in 0..d {
            let diff = q[r * d + k] - c[y * d + k];
            total += diff * diff;
        }
    }
    total / (2.0 * b as f64)
}

/// Center loss on normalized vectors.
pub fn ref_center_normalized(q: &[f64], c: &[f64], labels: &[usize], d: usize, tau: f64) -> f64 {
    let qn: Vec<f64> = q.chunks(d).flat_map(|r| normalize(r, tau)).collect();
    let cn: Vec<f64> = c.chunks(d).flat_map(|r| normalize(r, tau)).collect();
    ref_center(&qn, &cn, labels, d)
}

/// Soft scenario of the relaxed center loss with frozen weights `p_y`.
pub fn ref_center_soft(q: &[f64], c: &[f64], labels: &[usize], d: usize, tau: f64, py: &[f64]) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for r in 0..b {
        let qn = normalize(&q[r * d..(r + 1) * d], tau);
        let y = labels[r];
        let cn = normalize(&c[y * d..(y + 1) * d], tau);
        let dist: f64 = qn.iter().zip(&cn).map(|(a, b)| (a - b) * (a - b)).sum();
        let origin: f64 = qn.iter().map(|a| a * a).sum();
        total += py[r] * dist + (1.0 - py[r]) * origin;
    }
    total / (2.0 * b as f64)
}

/// A plain-`Vec` MLP: ReLU hidden layers, linear output, `W` stored
/// `in x out` row-major.
#[derive(Clone, Debug)]
pub struct RefMlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl RefMlp {
    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut at = 0;
        for w in sizes.windows(2) {
            weights.push(flat[at..at + w[0] * w[1]].to_vec());
            at += w[0] * w[1];
            biases.push(flat[at..at + w[1]].to_vec());
            at += w[1];
        }
        assert_eq!(at, flat.len());
        RefMlp { sizes: sizes.to_vec(), weights, biases }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied().collect::<Vec<_>>())
            .collect()
    }

    /// Activations of every layer for one input; the last entry is the
    /// logits, the one before it the features.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let a = acts.last().unwrap();
            let mut z = self.biases[l].clone();
            for i in 0..n_in {
                for j in 0..n_out {
                    z[j] += a[i] * self.weights[l][i * n_out + j];
                }
            }
            if l + 1 < n_layers {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Mean-CE gradient over a batch, by the chain rule written out.
    pub fn ce_grad(&self, xs: &[Vec<f64>], ys: &[usize]) -> Vec<Vec<f64>> {
        let n_layers = self.weights.len();
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let inv_b = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.forward(x);
            let mut delta = softmax(&acts[n_layers]);
            delta[y] -= 1.0;
            delta.iter_mut().for_each(|d| *d *= inv_b);
            for l in (0..n_layers).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let a = &acts[l];
                for i in 0..n_in {
                    for j in 0..n_out {
                        gw[l][i * n_out + j] += a[i] * delta[j];
                    }
                }
                for j in 0..n_out {
                    gb[l][j] += delta[j];
                }
                if l > 0 {
                    let mut prev = vec![0.0; n_in];
                    for i in 0..n_in {
                        if a[i] > 0.0 {
                            prev[i] = (0..n_out).map(|j| self.weights[l][i * n_out + j] * delta[j]).sum();
                        }
                    }
                    delta = prev;
                }
            }
        }
        gw.into_iter().zip(gb).map(|(w, b)| w.into_iter().chain(b).collect()).collect()
    }

    pub fn sgd(&mut self, grads: &[Vec<f64>], lr: f64) {
        for (l, g) in grads.iter().enumerate() {
            let nw = self.weights[l].len();
            for (w, gi) in self.weights[l].iter_mut().zip(&g[..nw]) {
                *w -= lr * gi;
            }
            for (b, gi) in self.biases[l].iter_mut().zip(&g[nw..]) {
                *b -= lr * gi;
            }
        }
    }
}

/// Pairwise-counting AUC: `P(m > n) + P(m = n) / 2`.
pub fn brute_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut wins = 0.0;
    for m in members {
        for n in nonmembers {
            if m > n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    wins / (members.len() * nonmembers.len()) as f64
}
