//! Datasets, the synthetic noisy-blobs generator, CSV I/O and the
//! target/shadow split protocol.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{euclid_sq, l2_norm, Matrix};

/// Features with integer class labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dim(format!("{} rows but {} labels", x.rows(), y.len())));
        }
        if let Some(&label) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        if !x.is_finite() {
            return Err(Error::input("non-finite feature"));
        }
        Ok(Dataset { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect(), classes: self.classes }
    }
}

/// Parameters of the Gaussian blobs generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub separation: f64,
    pub label_noise: f64,
}

impl BlobSpec {
    /// The noisy benchmark used by the desk-scale experiments.
    pub fn standard() -> Self {
        BlobSpec { seed: 0, n: 2000, d: 20, classes: 5, separation: 3.0, label_noise: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.d == 0 {
            return Err(Error::config("blobs need >= 2 classes and >= 1 dimension"));
        }
        if self.n < 2 * self.classes {
            return Err(Error::config(format!(
                "need at least {} samples for {} classes",
                2 * self.classes,
                self.classes
            )));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::config("separation must be > 0"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Class means with pairwise distance at least `separation / 2`.
///
/// When `classes <= d` the means are `separation / sqrt 2` times a random
/// orthonormal set, so every pair is exactly `separation` apart. Otherwise
/// they are rejection-sampled on the sphere of radius `separation`.
fn blob_means(rng: &mut ChaCha8Rng, classes: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    if classes <= d {
        while means.len() < classes {
            let mut v = gaussian(rng);
            for m in &means {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= dot * b);
            }
            let n = l2_norm(&v);
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= n);
            means.push(v);
        }
        let r = separation / 2f64.sqrt();
        means.iter_mut().for_each(|m| m.iter_mut().for_each(|a| *a *= r));
        return Ok(means);
    }
    let min_sq = (separation / 2.0).powi(2);
    let mut attempts = 0;
    while means.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::config(format!("cannot place {classes} separated means in {d} dimensions")));
        }
        let mut v = gaussian(rng);
        let n = l2_norm(&v);
        v.iter_mut().for_each(|a| *a *= separation / n);
        if means.iter().all(|m| euclid_sq(m, &v).unwrap() >= min_sq) {
            means.push(v);
        }
    }
    Ok(means)
}

/// Unit-covariance Gaussian clusters with a fraction of labels reassigned
/// uniformly at random.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = blob_means(&mut rng, spec.classes, spec.d, spec.separation)?;
    let mut y: Vec<usize> = Vec::with_capacity(spec.n);
    let mut data = Vec::with_capacity(spec.n * spec.d);
    for _ in 0..spec.n {
        let c = rng.random_range(0..spec.classes);
        y.push(c);
        for k in 0..spec.d {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(means[c][k] + z);
        }
    }
    let n_noisy = (spec.label_noise * spec.n as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_noisy] {
        y[i] = rng.random_range(0..spec.classes);
    }
    Dataset::new(Matrix::from_vec(spec.n, spec.d, data)?, y, spec.classes)
}

/// Class means of the generator before noise, for inspection and tests.
pub fn gen_blob_means(spec: &BlobSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    blob_means(&mut rng, spec.classes, spec.d, spec.separation)
}

/// Reads `f0,...,f{d-1},label`. Labels are densified to `0..C` in sorted
/// order of their original numeric values.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let width = headers.len();
    if width < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "header needs at least one feature column and a label column".into(),
        });
    }
    for (k, h) in headers.iter().enumerate() {
        let expect = if k + 1 == width { "label".to_string() } else { format!("f{k}") };
        if h != expect {
            return Err(Error::Parse { line: 1, msg: format!("column {k} is `{h}`, expected `{expect}`") });
        }
    }
    let d = width - 1;
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec
            .map_err(|e| Error::Parse { line: e.position().map_or(line, |p| p.line() as usize), msg: e.to_string() })?;
        if rec.len() != width {
            return Err(Error::Parse { line, msg: format!("{} fields, expected {width}", rec.len()) });
        }
        for (k, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("column {k}: `{cell}` is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("column {k} is not finite") });
            }
            if k < d {
                data.push(v);
            } else {
                raw_labels.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    let mut distinct = raw_labels.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let y: Vec<usize> = raw_labels.iter().map(|l| distinct.binary_search_by(|v| v.total_cmp(l)).unwrap()).collect();
    let n = y.len();
    Dataset::new(Matrix::from_vec(n, d, data)?, y, distinct.len())
}

/// Writes the CSV format read by [`load_csv`]. Floats use the shortest
/// round-trip representation.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim()).map(|k| format!("f{k}")).chain(["label".into()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (r, row) in ds.x.rows_iter().enumerate() {
        for v in row {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&ds.y[r].to_string());
        out.push('\n');
    }
    let mut f = File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Per-dimension standardization fitted on one subset, applied to all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("cannot fit standardization on no rows"));
        }
        let d = x.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut x = ds.x.clone();
        for r in 0..x.rows() {
            for ((v, m), s) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Dataset { x, y: ds.y.clone(), classes: ds.classes }
    }
}

/// A shadow model's own train/test partition of the shadow pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowSplit {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Index sets of the target/shadow protocol. Target members are
/// `target_train`, target non-members `target_test`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub base_seed: u64,
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_pool: Vec<usize>,
    pub shadows: Vec<ShadowSplit>,
}

fn halve(mut v: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    let test = v.split_off(v.len().div_ceil(2));
    (v, test)
}

/// Seeded half/half target/shadow split, each pool halved into train/test.
/// Shadow `i` re-partitions the shadow pool with seed `base_seed + i`.
/// Odd sizes put the extra element on the first side (target, train).
pub fn make_split(n: usize, base_seed: u64, n_shadow: usize) -> Result<SplitPlan> {
    if n < 4 {
        return Err(Error::input(format!("need at least 4 samples to split, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(base_seed));
    let (target_pool, shadow_pool) = halve(perm);
    let (target_train, target_test) = halve(target_pool);
    let shadows = (0..n_shadow as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // a separate stream from the top-level permutation with the same seed
            rng.set_stream(1);
            let mut pool = shadow_pool.clone();
            pool.shuffle(&mut rng);
            let (train, test) = halve(pool);
            ShadowSplit { seed, train, test }
        })
        .collect();
    Ok(SplitPlan { n, base_seed, target_train, target_test, shadow_pool, shadows })
}

impl SplitPlan {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Checks every disjointness/coverage invariant of the protocol.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = vec![0u8; self.n];
        let mut mark = |idx: &[usize], tag: u8| -> Result<()> {
            for &i in idx {
                if i >= self.n {
                    return Err(Error::input(format!("index {i} out of range")));
                }
                if seen[i] != 0 {
                    return Err(Error::input(format!("index {i} assigned twice")));
                }
                seen[i] = tag;
            }
            Ok(())
        };
        mark(&self.target_train, 1)?;
        mark(&self.target_test, 2)?;
        mark(&self.shadow_pool, 3)?;
        if seen.contains(&0) {
            return Err(Error::input("split does not cover every index"));
        }
        for s in &self.shadows {
            let mut in_pool = vec![0u8; self.n];
            for &i in s.train.iter().chain(&s.test) {
                if seen.get(i) != Some(&3) {
                    return Err(Error::input(format!("shadow {} uses non-pool index {i}", s.seed)));
                }
                in_pool[i] += 1;
            }
            if self.shadow_pool.iter().any(|&i| in_pool[i] != 1)
                || s.train.len() + s.test.len() != self.shadow_pool.len()
            {
                return Err(Error::input(format!("shadow {} is not a partition of the pool", s.seed)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    #[test]
    fn split_sizes() {
        let p = make_split(1000, 0, 5).unwrap();
        assert_eq!(p.target_train.len(), 250);
        assert_eq!(p.target_test.len(), 250);
        assert_eq!(p.shadow_pool.len(), 500);
        assert_eq!(p.shadows.len(), 5);
        assert!(p.shadows.iter().all(|s| s.train.len() == 250 && s.test.len() == 250));
        assert_eq!(p.shadows.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        p.check_invariants().unwrap();
        assert!(make_split(3, 0, 1).is_err());
    }

    #[test]
    fn odd_pools_favor_train() {
        let p = make_split(7, 3, 1).unwrap();
        assert_eq!((p.target_train.len(), p.target_test.len(), p.shadow_pool.len()), (2, 2, 3));
        assert_eq!((p.shadows[0].train.len(), p.shadows[0].test.len()), (2, 1));
        p.check_invariants().unwrap();
    }

    #[test]
    fn reference_partition_is_stable() {
        let p = make_split(20, 0, 2).unwrap();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&p).unwrap());
        assert_eq!(hex::encode(h.finalize()), REFERENCE_SPLIT_SHA256, "plan: {}", serde_json::to_string(&p).unwrap());
    }

    const REFERENCE_SPLIT_SHA256: &str = "af2a8086c39f571f6c53392fa5a60c0c1475ef75607cd628a2139eac4d70f0f3";

    #[test]
    fn invariant_checker_catches_overlap() {
        let mut p = make_split(40, 1, 1).unwrap();
        let dup = p.target_train[0];
        p.target_test[0] = dup;
        assert!(p.check_invariants().is_err());
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let spec = BlobSpec { seed: 4, n: 3000, d: 6, classes: 4, separation: 2.0, label_noise: 0.1 };
        let a = gen_blobs(&spec).unwrap();
        let b = gen_blobs(&spec).unwrap();
        assert_eq!(a, b);
        let tol = 3.0 * (spec.n as f64).sqrt();
        for c in 0..spec.classes {
            let count = a.y.iter().filter(|&&y| y == c).count() as f64;
            assert!((count - spec.n as f64 / spec.classes as f64).abs() <= tol);
        }
    }

    #[test]
    fn blob_means_are_separated() {
        for (classes, d) in [(5, 20), (3, 3), (8, 2), (6, 4)] {
            let spec = BlobSpec { seed: 9, n: 100, d, classes, separation: 3.0, label_noise: 0.0 };
            let means = gen_blob_means(&spec).unwrap();
            for i in 0..classes {
                for j in 0..i {
                    assert!(euclid_sq(&means[i], &means[j]).unwrap().sqrt() >= 1.5 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn blob_spec_validation() {
        let mut s = BlobSpec::standard();
        s.label_noise = 1.0;
        assert!(gen_blobs(&s).is_err());
        s.label_noise = 0.0;
        s.separation = 0.0;
        assert!(gen_blobs(&s).is_err());
        s.separation = 1.0;
        s.n = 9;
        assert!(gen_blobs(&s).is_err());
    }

    #[test]
    fn csv_hand_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "f0,f1,label\n1.5,-2,7\n0,3.25,3\n4,5,7\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.x, Matrix::from_vec(3, 2, vec![1.5, -2.0, 0.0, 3.25, 4.0, 5.0]).unwrap());
        assert_eq!(ds.y, vec![1, 0, 1]);
        assert_eq!(ds.classes, 2);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "f0,f1,label\n1,2,0\n3,1\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "f0,f1,label\n1,x,0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "f0,label,f1\n1,2,0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_blobs(&BlobSpec { seed: 1, n: 50, d: 3, classes: 3, separation: 2.0, label_noise: 0.2 }).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn standardizer_uses_fit_rows_only() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 3.0, 100.0, 5.0]).unwrap();
        let ds = Dataset::new(x, vec![0, 1, 0, 1], 2).unwrap();
        let s = Standardizer::fit(&ds.x, &[0, 1]).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.std, vec![1.0]);
        let t = s.apply(&ds);
        assert_eq!(t.x.as_slice(), &[-1.0, 1.0, 98.0, 3.0]);
    }
}
