//! Numeric primitives shared by every other module: a dense row-major
//! matrix, probability transforms, distances, entropy and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }
}

/// A probability vector: entries in [0, 1] summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

pub const PROB_SUM_TOL: f64 = 1e-9;

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::input("empty probability vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::input("probabilities must lie in [0, 1]"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::input(format!("probabilities sum to {s}")));
        }
        Ok(ProbVector(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        ProbVector(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_logits(g: &[f64]) -> Result<()> {
    if g.len() < 2 {
        return Err(Error::dim("need at least two logits"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite logit"));
    }
    Ok(())
}

/// Max-subtracted softmax written into `out`. No validation.
pub(crate) fn softmax_into(g: &[f64], out: &mut [f64]) {
    let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(g) {
        *o = (v - m).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// The logit-normalization divisor `1 + tau * ||g||`.
#[inline]
pub(crate) fn norm_scale(v: &[f64], tau: f64) -> (f64, f64) {
    let n = l2_norm(v);
    (1.0 + tau * n, n)
}

/// Softmax of `g / (1 + tau ||g||)` written into `out`. Returns the
/// divisor and the norm for the backward pass. With `tau == 0` this runs
/// the plain softmax on the unscaled logits.
pub(crate) fn normalized_softmax_into(g: &[f64], tau: f64, out: &mut [f64]) -> (f64, f64) {
    if tau == 0.0 {
        softmax_into(g, out);
        return (1.0, l2_norm(g));
    }
    let (s, n) = norm_scale(g, tau);
    let scaled: Vec<f64> = g.iter().map(|v| v / s).collect();
    softmax_into(&scaled, out);
    (s, n)
}

/// Vector-Jacobian product of `v -> v / (1 + tau ||v||)`.
///
/// `u` is the upstream gradient w.r.t. the normalized vector; the result
/// is the gradient w.r.t. `v`. The norm term is dropped at the origin and
/// when `tau == 0`, which leaves `u / s` bit-for-bit.
pub(crate) fn normalize_vjp(v: &[f64], tau: f64, s: f64, norm: f64, u: &[f64], out: &mut [f64]) {
    if tau == 0.0 || norm == 0.0 {
        for (o, &ui) in out.iter_mut().zip(u) {
            *o = ui / s;
        }
        return;
    }
    let vu: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    let k = tau * vu / (s * s * norm);
    for ((o, &ui), &vi) in out.iter_mut().zip(u).zip(v) {
        *o = ui / s - k * vi;
    }
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn softmax(g: &[f64]) -> Result<ProbVector> {
    check_logits(g)?;
    let mut out = vec![0.0; g.len()];
    softmax_into(g, &mut out);
    Ok(ProbVector(out))
}

/// Softmax of the logits divided by `1 + tau * ||g||_2`.
pub fn normalized_softmax(g: &[f64], tau: f64) -> Result<ProbVector> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("normalization factor must be >= 0, got {tau}")));
    }
    check_logits(g)?;
    let mut out = vec![0.0; g.len()];
    normalized_softmax_into(g, tau, &mut out);
    Ok(ProbVector(out))
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), out.row_mut(r));
    }
    out
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_slice(p.as_slice())
}

pub(crate) fn entropy_slice(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn euclid_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Probability that a random member score exceeds a random non-member
/// score, ties counted one half.
///
/// Computed from midranks of the pooled sample, which is exact in `f64`
/// for any realistic sample size.
pub fn auc(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<f64> {
    if member_scores.is_empty() || nonmember_scores.is_empty() {
        return Err(Error::input("auc needs non-empty member and non-member sets"));
    }
    if member_scores.iter().chain(nonmember_scores).any(|s| !s.is_finite()) {
        return Err(Error::input("non-finite membership score"));
    }
    let nm = member_scores.len();
    let nn = nonmember_scores.len();
    let mut pooled: Vec<(f64, bool)> =
        member_scores.iter().map(|&s| (s, true)).chain(nonmember_scores.iter().map(|&s| (s, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the member rank sum keeps midranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1, midrank*2 = i + j + 2
        let members_in_tie = pooled[i..=j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += members_in_tie * (i + j + 2) as u128;
        i = j + 1;
    }
    let nm_u = nm as u128;
    // 2 * U = 2 * R - nm (nm + 1)
    let u2 = rank_sum2 - nm_u * (nm_u + 1);
    Ok(u2 as f64 / (2.0 * nm as f64 * nn as f64))
}

/// Largest probability minus the second largest.
pub fn distance_to_boundary(p: &ProbVector) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::dim("distance to boundary needs at least two classes"));
    }
    Ok(top2_gap(p.as_slice()))
}

pub(crate) fn top2_gap(p: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(m: &[f64], n: &[f64]) -> f64 {
        let mut c = 0.0;
        for &a in m {
            for &b in n {
                if a > b {
                    c += 1.0;
                } else if a == b {
                    c += 0.5;
                }
            }
        }
        c / (m.len() * n.len()) as f64
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[1.0]).is_err());
    }

    #[test]
    fn normalized_softmax_examples() {
        let g = [1.0, 0.0];
        assert_eq!(normalized_softmax(&g, 0.0).unwrap(), softmax(&g).unwrap());
        assert_eq!(normalized_softmax(&[0.0, 0.0], 3.7).unwrap().as_slice(), &[0.5, 0.5]);
        // 1 / (1 + e^-0.5)
        let p = normalized_softmax(&g, 1.0).unwrap();
        assert!((p[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!((p[1] - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!(matches!(normalized_softmax(&g, -0.1), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap()), 0.0);
        assert!((entropy(&ProbVector::uniform(4)) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&ProbVector::uniform(2)) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn euclid_examples() {
        assert_eq!(euclid_sq(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclid_sq(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
        assert!(euclid_sq(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.5, 0.7], &[0.3, 0.5, 0.7]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.3], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(brute_auc(&[0.8, 0.3], &[0.5, 0.1]), 0.75);
        assert!(auc(&[], &[1.0]).is_err());
        assert!(auc(&[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn boundary_examples() {
        let p = ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        assert!((distance_to_boundary(&p).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(distance_to_boundary(&ProbVector::uniform(5)).unwrap(), 0.0);
        let p = ProbVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(distance_to_boundary(&p).unwrap(), 1.0);
        assert!(distance_to_boundary(&ProbVector::new(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let nm = rng.random_range(1..=60);
            let nn = rng.random_range(1..=60);
            // coarse grid forces ties
            let m: Vec<f64> = (0..nm).map(|_| rng.random_range(0..8) as f64).collect();
            let n: Vec<f64> = (0..nn).map(|_| rng.random_range(0..8) as f64).collect();
            assert!((auc(&m, &n).unwrap() - brute_auc(&m, &n)).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_maximized_by_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for c in [2usize, 5, 10] {
            let hmax = entropy(&ProbVector::uniform(c));
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                let p = ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap();
                let h = entropy(&p);
                assert!(h <= hmax + 1e-12 && h >= 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(g in prop::collection::vec(-30.0f64..30.0, 2..12), c in -50.0f64..50.0) {
            let a = softmax(&g).unwrap();
            let shifted: Vec<f64> = g.iter().map(|v| v + c).collect();
            let b = softmax(&shifted).unwrap();
            for i in 0..g.len() {
                prop_assert!((a[i] - b[i]).abs() < 1e-12);
            }
            let s: f64 = a.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < PROB_SUM_TOL);
        }

        #[test]
        fn normalized_softmax_tau_zero_is_softmax(g in prop::collection::vec(-30.0f64..30.0, 2..12)) {
            prop_assert_eq!(normalized_softmax(&g, 0.0).unwrap(), softmax(&g).unwrap());
        }

        #[test]
        fn auc_complement(m in prop::collection::hash_set(-1_000_000i64..1_000_000, 1..40),
                          n in prop::collection::hash_set(-1_000_000i64..1_000_000, 1..40)) {
            let m: Vec<f64> = m.into_iter().map(|v| v as f64 * 1e-3).collect();
            let n: Vec<f64> = n.into_iter().filter(|v| !m.contains(&(*v as f64 * 1e-3))).map(|v| v as f64 * 1e-3).collect();
            prop_assume!(!n.is_empty());
            let a = auc(&m, &n).unwrap();
            let b = auc(&n, &m).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
