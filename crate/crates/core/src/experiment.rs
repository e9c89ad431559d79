//! JSON-configured experiment runs: data preparation, training, attacking,
//! parameter sweeps and report rendering. The `crl` binary is a thin shell
//! over these functions.
//!
//! All randomness flows from seeds in the config, so a run is reproduced
//! exactly from its config. Each command writes its artifacts first and its
//! [`RunManifest`] last.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, AttackKind, SuiteReport};
use crate::data::{self, BlobSpec, Dataset, SplitPlan, Standardizer};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::losses::CenterBank;
use crate::model::{self, ModelParams};
use crate::trainer::{self, Defense, EpochRecord, TrainingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Csv { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs(BlobSpec::standard())
    }
}

/// Values to sweep; the grid is the cartesian product of non-empty lists.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub defense: Vec<Defense>,
    pub alpha_rce: Vec<f64>,
    pub alpha_rcl: Vec<f64>,
    pub lambda: Vec<f64>,
    pub tau_rce: Vec<f64>,
    pub tau_rcl: Vec<f64>,
    pub label_smoothing_eps: Vec<f64>,
    pub confidence_penalty_beta: Vec<f64>,
    pub early_stop_epoch: Vec<usize>,
}

/// One grid point: the overrides applied to the base training config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub defense: Option<Defense>,
    pub alpha_rce: Option<f64>,
    pub alpha_rcl: Option<f64>,
    pub lambda: Option<f64>,
    pub tau_rce: Option<f64>,
    pub tau_rcl: Option<f64>,
    pub label_smoothing_eps: Option<f64>,
    pub confidence_penalty_beta: Option<f64>,
    pub early_stop_epoch: Option<usize>,
}

impl GridPoint {
    pub fn apply(&self, base: &TrainingConfig) -> TrainingConfig {
        let mut t = base.clone();
        if let Some(v) = self.defense {
            t.defense = v;
        }
        if let Some(v) = self.alpha_rce {
            t.relax.alpha_rce = v;
        }
        if let Some(v) = self.alpha_rcl {
            t.relax.alpha_rcl = v;
        }
        if let Some(v) = self.lambda {
            t.relax.lambda = v;
        }
        if let Some(v) = self.tau_rce {
            t.relax.tau_rce = v;
        }
        if let Some(v) = self.tau_rcl {
            t.relax.tau_rcl = v;
        }
        if let Some(v) = self.label_smoothing_eps {
            t.label_smoothing_eps = v;
        }
        if let Some(v) = self.confidence_penalty_beta {
            t.confidence_penalty_beta = v;
        }
        if let Some(v) = self.early_stop_epoch {
            t.early_stop_epoch = Some(v);
        }
        t
    }
}

impl Grid {
    pub fn is_empty(&self) -> bool {
        self.points().is_empty()
    }

    /// Cartesian product in field order, last field varying fastest.
    pub fn points(&self) -> Vec<GridPoint> {
        fn axis<T: Copy>(pts: Vec<GridPoint>, vals: &[T], set: impl Fn(&mut GridPoint, T)) -> Vec<GridPoint> {
            if vals.is_empty() {
                return pts;
            }
            pts.into_iter()
                .flat_map(|p| {
                    vals.iter()
                        .map(|&v| {
                            let mut q = p.clone();
                            set(&mut q, v);
                            q
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        let mut pts = vec![GridPoint::default()];
        pts = axis(pts, &self.defense, |p, v| p.defense = Some(v));
        pts = axis(pts, &self.alpha_rce, |p, v| p.alpha_rce = Some(v));
        pts = axis(pts, &self.alpha_rcl, |p, v| p.alpha_rcl = Some(v));
        pts = axis(pts, &self.lambda, |p, v| p.lambda = Some(v));
        pts = axis(pts, &self.tau_rce, |p, v| p.tau_rce = Some(v));
        pts = axis(pts, &self.tau_rcl, |p, v| p.tau_rcl = Some(v));
        pts = axis(pts, &self.label_smoothing_eps, |p, v| p.label_smoothing_eps = Some(v));
        pts = axis(pts, &self.confidence_penalty_beta, |p, v| p.confidence_penalty_beta = Some(v));
        pts = axis(pts, &self.early_stop_epoch, |p, v| p.early_stop_epoch = Some(v));
        if pts.len() == 1 && pts[0] == GridPoint::default() {
            return Vec::new();
        }
        pts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub layer_sizes: Vec<usize>,
    /// Seed of the target/shadow partition.
    pub split_seed: u64,
    pub training: TrainingConfig,
    pub attack: AttackConfig,
    pub executor: Executor,
    pub grid: Option<Grid>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            layer_sizes: vec![20, 64, 32, 5],
            split_seed: 0,
            training: TrainingConfig::default(),
            attack: AttackConfig::default(),
            executor: Executor::default(),
            grid: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 || self.layer_sizes.contains(&0) {
            return Err(Error::config(format!(
                "layer_sizes: need input, >= 1 hidden and output sizes, all positive, got {:?}",
                self.layer_sizes
            )));
        }
        if let DatasetSpec::Blobs(b) = &self.dataset {
            b.validate().map_err(|e| Error::config(format!("dataset.blobs: {e}")))?;
        }
        self.training.validate()?;
        self.attack.validate()?;
        if let Some(g) = &self.grid {
            for p in g.points() {
                p.apply(&self.training).validate().map_err(|e| Error::config(format!("grid: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Standardized dataset and its split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Dataset,
    pub plan: SplitPlan,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn target_train(&self) -> Dataset {
        self.data.subset(&self.plan.target_train)
    }

    pub fn target_test(&self) -> Dataset {
        self.data.subset(&self.plan.target_test)
    }
}

/// Loads or generates the dataset, splits it, and standardizes every row
/// with statistics of the target training set.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let raw = match &config.dataset {
        DatasetSpec::Blobs(b) => data::gen_blobs(b)?,
        DatasetSpec::Csv { path } => data::load_csv(path)?,
    };
    if raw.dim() != config.layer_sizes[0] || raw.classes != *config.layer_sizes.last().unwrap() {
        return Err(Error::config(format!(
            "layer_sizes {:?} do not fit a dataset with {} features and {} classes",
            config.layer_sizes,
            raw.dim(),
            raw.classes
        )));
    }
    if raw.len() < 2 * raw.classes {
        return Err(Error::config(format!("dataset has {} rows for {} classes", raw.len(), raw.classes)));
    }
    let plan = data::make_split(raw.len(), config.split_seed, config.attack.n_shadow)?;
    let standardizer = Standardizer::fit(&raw.x, &plan.target_train)?;
    Ok(Prepared { data: standardizer.apply(&raw), plan, standardizer })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_secs: f64,
    pub versions: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn seeds_of(config: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut s = BTreeMap::new();
    if let DatasetSpec::Blobs(b) = &config.dataset {
        s.insert("dataset".into(), b.seed);
    }
    s.insert("split".into(), config.split_seed);
    s.insert("training".into(), config.training.seed);
    s.insert("shadow_base".into(), config.attack.shadow_base_seed);
    s.insert("attack".into(), config.attack.attack_seed);
    s
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: &ExperimentConfig,
    files: &[PathBuf],
    started: Instant,
) -> Result<RunManifest> {
    let artifacts = files
        .iter()
        .map(|f| Ok(Artifact { path: f.strip_prefix(out).unwrap_or(f).display().to_string(), sha256: file_sha256(f)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut versions = BTreeMap::new();
    versions.insert("crl-core".into(), env!("CARGO_PKG_VERSION").into());
    versions.insert("parallel".into(), cfg!(feature = "parallel").to_string());
    let m = RunManifest {
        command: command.into(),
        config_hash: config.hash()?,
        seeds: seeds_of(config),
        artifacts,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        versions,
    };
    write_atomic(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(m)
}

pub struct GenDataArgs {
    pub spec: BlobSpec,
    pub out: PathBuf,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<Dataset> {
    args.spec.validate()?;
    let ds = data::gen_blobs(&args.spec)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    data::save_csv(&ds, &args.out)?;
    Ok(ds)
}

pub const MODEL_DIR: &str = "model";
pub const CENTERS_FILE: &str = "centers.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "attack_report.json";
pub const BOUNDARY_HIST_FILE: &str = "hist_boundary.csv";
pub const FRONTIER_FILE: &str = "frontier.csv";

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub centers: CenterBank,
    pub history: Vec<EpochRecord>,
    pub manifest: RunManifest,
}

impl TrainRun {
    pub fn final_record(&self) -> &EpochRecord {
        self.history.last().expect("at least one epoch")
    }
}

/// Trains the target model and writes checkpoint, centers, history, split
/// and config to `out`.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<TrainRun> {
    let started = Instant::now();
    let prep = prepare(config)?;
    let outcome = trainer::train(&config.training, &config.layer_sizes, &prep.target_train(), &prep.target_test())?;
    fs::create_dir_all(out)?;
    let model_dir = out.join(MODEL_DIR);
    model::save_checkpoint(&outcome.params, outcome.epochs_run(), &model_dir)?;
    let centers_path = out.join(CENTERS_FILE);
    fs::write(&centers_path, serde_json::to_string(&outcome.centers)?)?;
    let history_path = out.join(HISTORY_FILE);
    let mut buf = Vec::new();
    trainer::write_history_csv(&outcome.history, &mut buf)?;
    fs::write(&history_path, buf)?;
    let split_path = out.join(SPLIT_FILE);
    prep.plan.save_json(&split_path)?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(config)?)?;
    let files = vec![
        model_dir.join(model::CHECKPOINT_MANIFEST),
        model_dir.join(model::CHECKPOINT_WEIGHTS),
        centers_path,
        history_path,
        split_path,
        config_path,
    ];
    let manifest = write_manifest(out, "train", config, &files, started)?;
    Ok(TrainRun { params: outcome.params, centers: outcome.centers, history: outcome.history, manifest })
}

/// Runs the adaptive attack suite against the checkpoint in `target_dir`.
pub fn cmd_attack(target_dir: &Path, config: &ExperimentConfig, out: &Path) -> Result<SuiteReport> {
    let started = Instant::now();
    config.validate()?;
    let model_dir = target_dir.join(MODEL_DIR);
    if !model_dir.join(model::CHECKPOINT_MANIFEST).is_file() {
        return Err(Error::config(format!("no checkpoint under {}", model_dir.display())));
    }
    let target_cfg_path = target_dir.join(CONFIG_FILE);
    if target_cfg_path.is_file() {
        let target_cfg = ExperimentConfig::load(&target_cfg_path)?;
        if target_cfg.training.defense != config.training.defense {
            return Err(Error::config(format!(
                "training.defense: target was trained with `{}` but shadows would use `{}`",
                target_cfg.training.defense.name(),
                config.training.defense.name()
            )));
        }
        if target_cfg.training != config.training {
            log::warn!("shadow training config differs from the target's beyond the defense");
        }
    }
    let (params, _) = model::load_checkpoint(&model_dir)?;
    if params.layer_sizes != config.layer_sizes {
        return Err(Error::config(format!(
            "layer_sizes {:?} differ from the checkpoint's {:?}",
            config.layer_sizes, params.layer_sizes
        )));
    }
    let prep = prepare(config)?;
    let report = attacks::run_attack_suite(
        &params,
        &prep.data,
        &prep.plan,
        &config.training,
        &config.layer_sizes,
        &config.attack,
        config.executor,
    )?;
    let files = write_attack_outputs(&report, out)?;
    let mut all = files;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?)?;
    all.push(cfg_path);
    write_manifest(out, "attack", config, &all, started)?;
    Ok(report)
}

fn write_attack_outputs(report: &SuiteReport, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let report_path = out.join(REPORT_FILE);
    fs::write(&report_path, serde_json::to_string_pretty(report)?)?;
    files.push(report_path);
    let p = out.join(BOUNDARY_HIST_FILE);
    let mut buf = Vec::new();
    report.boundary_histogram.write_csv(&mut buf)?;
    fs::write(&p, buf)?;
    files.push(p);
    for r in &report.reports {
        let p = out.join(format!("hist_{}.csv", r.attack));
        let mut buf = Vec::new();
        r.histogram.write_csv(&mut buf)?;
        fs::write(&p, buf)?;
        files.push(p);
        if let Some(s) = &r.scores {
            let p = out.join(format!("scores_{}.csv", r.attack));
            let mut buf = Vec::new();
            s.write_csv(&mut buf)?;
            fs::write(&p, buf)?;
            files.push(p);
        }
    }
    Ok(files)
}

/// One row of the privacy/utility frontier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub point: usize,
    pub overrides: GridPoint,
    pub training: TrainingConfig,
    pub train_acc: f64,
    pub test_acc: f64,
    pub aucs: BTreeMap<AttackKind, f64>,
    pub boundary_intersection: f64,
}

/// Trains and attacks one configuration on prepared data.
pub fn train_and_attack(
    prep: &Prepared,
    training: &TrainingConfig,
    layer_sizes: &[usize],
    attack: &AttackConfig,
    exec: Executor,
) -> Result<(trainer::TrainOutcome, SuiteReport)> {
    let outcome = trainer::train(training, layer_sizes, &prep.target_train(), &prep.target_test())?;
    let report =
        attacks::run_attack_suite(&outcome.params, &prep.data, &prep.plan, training, layer_sizes, attack, exec)?;
    Ok((outcome, report))
}

pub fn sweep(config: &ExperimentConfig) -> Result<Vec<(FrontierRow, trainer::TrainOutcome, SuiteReport)>> {
    let grid = config
        .grid
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| Error::config("grid: sweep needs at least one non-empty grid axis"))?;
    let prep = prepare(config)?;
    let points = grid.points();
    let exec = config.executor;
    exec.try_map(points.into_iter().enumerate().collect(), |(i, point)| {
        let training = point.apply(&config.training);
        let (outcome, report) = train_and_attack(&prep, &training, &config.layer_sizes, &config.attack, exec)?;
        let last = outcome.history.last().expect("trained at least one epoch");
        let row = FrontierRow {
            point: i,
            overrides: point,
            training: training.clone(),
            train_acc: last.train_acc.unwrap_or(f64::NAN),
            test_acc: last.test_acc.unwrap_or(f64::NAN),
            aucs: report.reports.iter().map(|r| (r.attack, r.auc)).collect(),
            boundary_intersection: report.boundary_histogram.intersection(),
        };
        Ok((row, outcome, report))
    })
}

pub const FRONTIER_HEADER: &str = "point,defense,alpha_rce,alpha_rcl,lambda,tau_rce,tau_rcl,label_smoothing_eps,confidence_penalty_beta,early_stop_epoch,train_acc,test_acc,auc_nn,auc_entropy,auc_m_entropy,auc_grad_x_l2,boundary_intersection";

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut s = String::from(FRONTIER_HEADER);
    s.push('\n');
    let auc = |r: &FrontierRow, k| r.aucs.get(&k).map_or(String::new(), |v: &f64| v.to_string());
    for r in rows {
        let t = &r.training;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.point,
            t.defense.name(),
            t.relax.alpha_rce,
            t.relax.alpha_rcl,
            t.relax.lambda,
            t.relax.tau_rce,
            t.relax.tau_rcl,
            t.label_smoothing_eps,
            t.confidence_penalty_beta,
            t.early_stop_epoch.map_or(String::new(), |e| e.to_string()),
            r.train_acc,
            r.test_acc,
            auc(r, AttackKind::Nn),
            auc(r, AttackKind::Entropy),
            auc(r, AttackKind::MEntropy),
            auc(r, AttackKind::GradXL2),
            r.boundary_intersection
        );
    }
    s
}

/// Runs every grid point, each into `out/point_NNN`, then writes the
/// frontier table.
pub fn cmd_sweep(config: &ExperimentConfig, out: &Path) -> Result<Vec<FrontierRow>> {
    let started = Instant::now();
    let results = sweep(config)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (row, outcome, report) in &results {
        let dir = out.join(format!("point_{:03}", row.point));
        fs::create_dir_all(&dir)?;
        let mut buf = Vec::new();
        trainer::write_history_csv(&outcome.history, &mut buf)?;
        fs::write(dir.join(HISTORY_FILE), buf)?;
        model::save_checkpoint(&outcome.params, outcome.epochs_run(), &dir.join(MODEL_DIR))?;
        files.extend(write_attack_outputs(report, &dir)?);
    }
    let rows: Vec<FrontierRow> = results.into_iter().map(|r| r.0).collect();
    let frontier = out.join(FRONTIER_FILE);
    fs::write(&frontier, frontier_csv(&rows))?;
    files.push(frontier);
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?)?;
    files.push(cfg_path);
    write_manifest(out, "sweep", config, &files, started)?;
    Ok(rows)
}

/// Renders plain-text summary tables from whatever a run directory holds.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut s = String::new();
    let mut found = false;
    let history = dir.join(HISTORY_FILE);
    if history.is_file() {
        found = true;
        let text = fs::read_to_string(&history)?;
        let last = text.lines().skip(1).filter(|l| !l.is_empty()).last().unwrap_or("");
        let cols: Vec<&str> = last.split(',').collect();
        let _ = writeln!(s, "training history: {}", history.display());
        if cols.len() >= 12 {
            let _ = writeln!(
                s,
                "  epoch {:>5}  loss {:>10}  train_acc {:>6}  test_acc {:>6}",
                cols[0], cols[3], cols[10], cols[11]
            );
        }
    }
    let report_path = dir.join(REPORT_FILE);
    if report_path.is_file() {
        found = true;
        let report: SuiteReport = serde_json::from_str(&fs::read_to_string(&report_path)?)?;
        let _ = writeln!(s, "attacks ({} members / {} non-members):", report.member_count, report.nonmember_count);
        let _ = writeln!(s, "  {:<12} {:>8} {:>12}", "attack", "auc", "thr_acc");
        for r in &report.reports {
            let _ = writeln!(s, "  {:<12} {:>8.4} {:>12.4}", r.attack.name(), r.auc, r.thresholded_accuracy);
        }
        let _ = writeln!(s, "  boundary histogram intersection {:.4}", report.boundary_histogram.intersection());
    }
    let frontier = dir.join(FRONTIER_FILE);
    if frontier.is_file() {
        found = true;
        let _ = writeln!(s, "sweep frontier:");
        let text = fs::read_to_string(&frontier)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let pick = [
            "point",
            "defense",
            "alpha_rce",
            "alpha_rcl",
            "lambda",
            "test_acc",
            "auc_nn",
            "auc_entropy",
            "auc_m_entropy",
            "auc_grad_x_l2",
        ];
        let idx: Vec<usize> = pick.iter().filter_map(|p| header.iter().position(|h| h == p)).collect();
        let _ = writeln!(s, "  {}", idx.iter().map(|&i| format!("{:>13}", header[i])).collect::<String>());
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let cells: String = idx
                .iter()
                .map(|&i| {
                    let c = cols.get(i).copied().unwrap_or("");
                    match c.parse::<f64>() {
                        Ok(v) if c.contains('.') => format!("{v:>13.4}"),
                        _ => format!("{c:>13}"),
                    }
                })
                .collect();
            let _ = writeln!(s, "  {cells}");
        }
    }
    if !found {
        return Err(Error::config(format!("nothing to report in {}", dir.display())));
    }
    Ok(s)
}
