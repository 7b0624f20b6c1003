//! Metrics, trivial baselines, the repeated k-fold protocol, sweeps and
//! ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{inject_label_missingness, inject_mcar, kfold_split, DirtyDataset};
use crate::engine::Tensor;
use crate::error::{HexaError, Result};
use crate::trainer::{classifier_inputs, impute_dataset, train, TrainConfig, TrainObserver};

/// RMSE over cells where `m` is `0`.
pub fn rmse_missing(x_true: &Tensor, x_hat: &Tensor, m: &Tensor) -> Result<f64> {
    rmse_masked(x_true, x_hat, &m.map(|v| 1.0 - v))
}

/// RMSE over cells where `scored` is `1`.
pub fn rmse_masked(x_true: &Tensor, x_hat: &Tensor, scored: &Tensor) -> Result<f64> {
    if x_true.dims() != x_hat.dims() || x_true.dims() != scored.dims() {
        return Err(HexaError::dim(
            "rmse",
            format!("truth {:?}, estimate {:?}, mask {:?}", x_true.shape(), x_hat.shape(), scored.shape()),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&t, &e), &s) in x_true.data().iter().zip(x_hat.data()).zip(scored.data()) {
        if s == 1.0 {
            sum += (t - e) * (t - e);
            count += 1;
        }
    }
    if count == 0 {
        return Err(HexaError::contract("rmse needs at least one scored cell"));
    }
    Ok((sum / count as f64).sqrt())
}

/// F1 of `positive` for predicted vs. true class ids.
pub fn f1_score(pred: &[usize], truth: &[usize], positive: usize) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(HexaError::contract(format!(
            "f1 needs equal non-empty inputs, got {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if !truth.contains(&positive) {
        return Err(HexaError::contract(format!("positive class {positive} does not occur in the labels")));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Zero,
    Mean,
}

/// Observed-entry mean of every column.
pub fn column_means(ds: &DirtyDataset) -> Result<Vec<f64>> {
    (0..ds.d())
        .map(|i| {
            let (sum, count) = (0..ds.n())
                .filter(|&j| ds.mask.get(j, i) == 1.0)
                .fold((0.0, 0usize), |(s, c), j| (s + ds.x.get(j, i), c + 1));
            if count == 0 {
                Err(HexaError::data(format!("column {i} has no observed entries")))
            } else {
                Ok(sum / count as f64)
            }
        })
        .collect()
}

/// Missing cells replaced with `fill[column]`.
pub fn fill_missing(ds: &DirtyDataset, fill: &[f64]) -> Tensor {
    let mut out = ds.x.clone();
    let d = ds.d();
    for (k, (v, &m)) in out.data_mut().iter_mut().zip(ds.mask.data()).enumerate() {
        if m == 0.0 {
            *v = fill[k % d];
        }
    }
    out
}

pub fn baseline_impute(ds: &DirtyDataset, kind: BaselineKind) -> Result<Tensor> {
    match kind {
        BaselineKind::Zero => Ok(fill_missing(ds, &vec![0.0; ds.d()])),
        BaselineKind::Mean => Ok(fill_missing(ds, &column_means(ds)?)),
    }
}

/// Corruption and fold settings for [`run_cv_experiment`].
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub folds: usize,
    pub repeats: usize,
    pub missing_rate: f64,
    pub label_missing_rate: f64,
    /// Master seed; per-repeat and per-fold seeds are derived from it.
    pub seed: u64,
    /// Class scored by F1; `None` picks the training-fold minority.
    pub positive_class: Option<usize>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 10,
            missing_rate: 0.2,
            label_missing_rate: 0.2,
            seed: 0,
            positive_class: None,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.repeats == 0 {
            return Err(HexaError::config("need folds >= 2 and repeats >= 1"));
        }
        for (name, r) in [("missing_rate", self.missing_rate), ("label_missing_rate", self.label_missing_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(HexaError::config(format!("{name} must lie in [0,1), got {r}")));
            }
        }
        Ok(())
    }
}

/// SplitMix64 step, used to derive independent seeds.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut s = master;
    for &p in parts {
        s = s.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}

/// FNV-1a over the configuration's debug form.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in format!("{cfg:?}").bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Outcome of training and testing on one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldRecord {
    pub run_id: String,
    pub repeat: usize,
    pub fold: usize,
    /// Imputation RMSE on held-out test cells, scaled space.
    pub rmse: f64,
    pub rmse_zero: f64,
    pub rmse_mean: f64,
    pub f1: f64,
    pub positive_class: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Epoch-mean losses of the final epoch.
    pub final_losses: BTreeMap<String, f64>,
    /// Batches that contained a test row; always 0 for a sound split.
    pub leaked_batches: usize,
    pub wall_clock_s: f64,
}

impl FoldRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "rmse" => Some(self.rmse),
            "rmse_zero" => Some(self.rmse_zero),
            "rmse_mean" => Some(self.rmse_mean),
            "f1" => Some(self.f1),
            _ => None,
        }
    }
}

pub const METRICS: [&str; 4] = ["rmse", "rmse_zero", "rmse_mean", "f1"];

struct LeakAudit<'a> {
    test_rows: &'a BTreeSet<usize>,
    leaked: usize,
}

impl TrainObserver for LeakAudit<'_> {
    fn on_batch(&mut self, row_ids: &[usize]) {
        if row_ids.iter().any(|r| self.test_rows.contains(r)) {
            self.leaked += 1;
        }
    }
}

/// Cells that were observed in `clean` but hidden in `corrupted`.
fn held_out(clean: &DirtyDataset, corrupted: &DirtyDataset) -> Tensor {
    clean.mask.zip_map(&corrupted.mask, |c, k| if c == 1.0 && k == 0.0 { 1.0 } else { 0.0 }).expect("same shape")
}

fn minority_class(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c > 0)
        .min_by_key(|&(_, &c)| c)
        .map(|(k, _)| k)
        .unwrap_or(0)
}

/// Trains on one fold and scores its test rows.
///
/// `clean` must be scaled; `corrupted` is `clean` after element corruption.
#[allow(clippy::too_many_arguments)]
fn run_fold(
    clean: &DirtyDataset,
    corrupted: &DirtyDataset,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &TrainConfig,
    protocol: &Protocol,
    repeat: usize,
    fold: usize,
) -> Result<FoldRecord> {
    let started = Instant::now();
    let seed = derive_seed(protocol.seed, &[repeat as u64, fold as u64, 3]);
    let train_set = inject_label_missingness(
        &corrupted.subset(train_idx)?,
        protocol.label_missing_rate,
        derive_seed(protocol.seed, &[repeat as u64, fold as u64, 2]),
    )?;
    let test_set = corrupted.subset(test_idx)?;
    let test_clean = clean.subset(test_idx)?;

    let fold_cfg = TrainConfig { seed, ..cfg.clone() };
    let test_rows: BTreeSet<usize> = test_set.row_ids.iter().copied().collect();
    let mut audit = LeakAudit { test_rows: &test_rows, leaked: 0 };
    let state = train(&train_set, &fold_cfg, None, &mut audit)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    let scored = held_out(&test_clean, &test_set);
    let has_scored = scored.data().contains(&1.0);
    let score = |estimate: &Tensor| -> Result<f64> {
        if has_scored {
            rmse_masked(&test_clean.x, estimate, &scored)
        } else {
            Ok(f64::NAN)
        }
    };
    let x_hat = impute_dataset(&state.params, &test_set, &mut rng)?;
    let rmse = score(&x_hat)?;
    let rmse_zero = score(&baseline_impute(&test_set, BaselineKind::Zero)?)?;
    let rmse_mean = score(&fill_missing(&test_set, &column_means(&train_set)?))?;

    let train_counts = corrupted.subset(train_idx)?.class_counts();
    let positive = protocol.positive_class.unwrap_or_else(|| minority_class(&train_counts));
    let inputs = classifier_inputs(&state.params, &fold_cfg, &test_set, &mut rng)?;
    let pred = state.params.predict(&inputs)?;
    let truth: Vec<usize> = test_clean.labels().into_iter().map(|l| l.unwrap_or(usize::MAX)).collect();
    let (pred, truth): (Vec<usize>, Vec<usize>) = pred
        .into_iter()
        .zip(truth)
        .filter(|&(_, t)| t != usize::MAX)
        .unzip();
    let f1 = if truth.contains(&positive) { f1_score(&pred, &truth, positive)? } else { f64::NAN };

    Ok(FoldRecord {
        run_id: format!("r{repeat}f{fold}"),
        repeat,
        fold,
        rmse,
        rmse_zero,
        rmse_mean,
        f1,
        positive_class: positive,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        seed,
        config_hash: config_hash(cfg),
        final_losses: state.history.last().map(|r| r.losses.clone()).unwrap_or_default(),
        leaked_batches: audit.leaked,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Repeated k-fold protocol on a scaled dataset.
///
/// Each repeat hides elements MCAR over the whole dataset, draws a fresh
/// fold split, then for every fold hides training labels, trains, and scores
/// the test fold: imputation RMSE on the hidden cells against their original
/// values, plus F1 of the classifier. `on_record` sees each record as it
/// completes.
pub fn run_cv_experiment(
    clean: &DirtyDataset,
    cfg: &TrainConfig,
    protocol: &Protocol,
    on_record: &mut dyn FnMut(&FoldRecord),
) -> Result<Vec<FoldRecord>> {
    protocol.validate()?;
    cfg.validate()?;
    if clean.scaler.is_none() {
        return Err(HexaError::contract("run_cv_experiment expects a scaled dataset"));
    }
    let mut records = Vec::with_capacity(protocol.repeats * protocol.folds);
    for repeat in 0..protocol.repeats {
        let corrupted = inject_mcar(clean, protocol.missing_rate, derive_seed(protocol.seed, &[repeat as u64, 0]))?;
        let split = kfold_split(clean.n(), protocol.folds, derive_seed(protocol.seed, &[repeat as u64, 1]))?;
        for fold in 0..protocol.folds {
            let rec = run_fold(clean, &corrupted, &split.train(fold), split.test(fold), cfg, protocol, repeat, fold)
                .map_err(|e| HexaError::Fold {
                    repeat,
                    fold,
                    source: Box::new(e),
                })?;
            on_record(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// Ignores NaN entries.
    pub fn of(values: &[f64]) -> Summary {
        let vals: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
        let n = vals.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, n }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// One metric summarised over a record table.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub label: String,
    pub metric: String,
    /// Over all repeat × fold records.
    pub grand: Summary,
    /// Mean of each repeat, in repeat order.
    pub per_repeat: Vec<f64>,
    /// Over the per-repeat means.
    pub across_repeats: Summary,
}

pub fn aggregate(records: &[FoldRecord], label: &str) -> Vec<Aggregate> {
    let mut sorted: Vec<&FoldRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.repeat, r.fold));
    METRICS
        .iter()
        .map(|&metric| {
            let all: Vec<f64> = sorted.iter().filter_map(|r| r.metric(metric)).collect();
            let mut by_repeat: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in &sorted {
                by_repeat.entry(r.repeat).or_default().push(r.metric(metric).unwrap_or(f64::NAN));
            }
            let per_repeat: Vec<f64> = by_repeat.values().map(|v| Summary::of(v).mean).collect();
            Aggregate {
                label: label.to_string(),
                metric: metric.to_string(),
                grand: Summary::of(&all),
                across_repeats: Summary::of(&per_repeat),
                per_repeat,
            }
        })
        .collect()
}

/// Quantity varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    MissingRate,
    LabelRate,
    Lambda1,
    Lambda2,
    Alpha1,
    Alpha2,
    Alpha3,
    Alpha4,
    NCritic,
    NCg,
    LearningRate,
    BatchSize,
    Epochs,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 13] = [
        SweepAxis::MissingRate,
        SweepAxis::LabelRate,
        SweepAxis::Lambda1,
        SweepAxis::Lambda2,
        SweepAxis::Alpha1,
        SweepAxis::Alpha2,
        SweepAxis::Alpha3,
        SweepAxis::Alpha4,
        SweepAxis::NCritic,
        SweepAxis::NCg,
        SweepAxis::LearningRate,
        SweepAxis::BatchSize,
        SweepAxis::Epochs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MissingRate => "missing_rate",
            SweepAxis::LabelRate => "label_rate",
            SweepAxis::Lambda1 => "lambda1",
            SweepAxis::Lambda2 => "lambda2",
            SweepAxis::Alpha1 => "alpha1",
            SweepAxis::Alpha2 => "alpha2",
            SweepAxis::Alpha3 => "alpha3",
            SweepAxis::Alpha4 => "alpha4",
            SweepAxis::NCritic => "n_critic",
            SweepAxis::NCg => "n_cg",
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Epochs => "epochs",
        }
    }

    /// Copies of `cfg` and `protocol` with this axis set to `value`.
    pub fn apply(self, cfg: &TrainConfig, protocol: &Protocol, value: f64) -> Result<(TrainConfig, Protocol)> {
        let mut cfg = cfg.clone();
        let mut protocol = protocol.clone();
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(HexaError::config(format!("{} needs a whole number, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::MissingRate => protocol.missing_rate = value,
            SweepAxis::LabelRate => protocol.label_missing_rate = value,
            SweepAxis::Lambda1 => cfg.weights.lambda1 = value,
            SweepAxis::Lambda2 => cfg.weights.lambda2 = value,
            SweepAxis::Alpha1 => cfg.weights.alpha1 = value,
            SweepAxis::Alpha2 => cfg.weights.alpha2 = value,
            SweepAxis::Alpha3 => cfg.weights.alpha3 = value,
            SweepAxis::Alpha4 => cfg.weights.alpha4 = value,
            SweepAxis::NCritic => cfg.n_critic = count()?,
            SweepAxis::NCg => cfg.n_cg = count()?,
            SweepAxis::LearningRate => cfg.learning_rate = value,
            SweepAxis::BatchSize => cfg.batch_size = count()?,
            SweepAxis::Epochs => cfg.epochs = count()?,
        }
        cfg.validate()?;
        protocol.validate()?;
        Ok((cfg, protocol))
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = HexaError;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let known: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
            HexaError::config(format!("unknown sweep axis '{s}' (known: {})", known.join(", ")))
        })
    }
}

/// Records of one sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub records: Vec<FoldRecord>,
}

/// One [`run_cv_experiment`] per value with only `axis` changed.
pub fn sweep(
    clean: &DirtyDataset,
    cfg: &TrainConfig,
    protocol: &Protocol,
    axis: SweepAxis,
    values: &[f64],
    on_record: &mut dyn FnMut(f64, &FoldRecord),
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(HexaError::config("sweep needs at least one value"));
    }
    let settings = values
        .iter()
        .map(|&v| axis.apply(cfg, protocol, v))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(values.len());
    for (&value, (c, p)) in values.iter().zip(settings) {
        let records = run_cv_experiment(clean, &c, &p, &mut |r| on_record(value, r))?;
        points.push(SweepPoint { value, records });
    }
    Ok(points)
}

/// Parts that an ablation can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    /// Conditional generation and batch balancing.
    ConditionalGenerator,
    /// The label unit of `D_MI` and the pseudo-label term.
    LabelUnit,
    /// Adversarial imputation; missing inputs stay uniform noise.
    ImputationGenerator,
}

pub fn ablation_config(base: &TrainConfig, drop: &[Ablation]) -> TrainConfig {
    let mut cfg = base.clone();
    for a in drop {
        match a {
            Ablation::ConditionalGenerator => cfg.use_conditional = false,
            Ablation::LabelUnit => {
                cfg.use_label_unit = false;
                cfg.weights.alpha4 = 0.0;
            }
            Ablation::ImputationGenerator => {
                cfg.use_imputation = false;
                cfg.use_conditional = false;
                cfg.use_label_unit = false;
                cfg.weights.alpha4 = 0.0;
            }
        }
    }
    cfg
}

/// The five ablation rows, from plain MLP to the full model.
pub fn ablation_rows() -> Vec<(&'static str, Vec<Ablation>)> {
    use Ablation::*;
    vec![
        ("MLP", vec![ImputationGenerator, ConditionalGenerator, LabelUnit]),
        ("w/o G_CG & D_MI label unit", vec![ConditionalGenerator, LabelUnit]),
        ("w/o G_CG", vec![ConditionalGenerator]),
        ("w/o D_MI label unit", vec![LabelUnit]),
        ("HexaGAN", vec![]),
    ]
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// Long format: one line per (record, metric).
pub fn write_long_csv<W: Write>(out: W, rows: &[(String, f64, &FoldRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "axis_value", "run_id", "repeat", "fold", "seed", "config_hash", "metric", "value"])?;
    for (label, axis_value, r) in rows {
        for metric in METRICS {
            w.write_record([
                label.clone(),
                fmt_value(*axis_value),
                r.run_id.clone(),
                r.repeat.to_string(),
                r.fold.to_string(),
                r.seed.to_string(),
                r.config_hash.clone(),
                metric.to_string(),
                fmt_value(r.metric(metric).unwrap_or(f64::NAN)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(out: W, rows: &[(f64, Aggregate)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "axis_value", "metric", "mean", "std", "n", "repeat_mean_std", "formatted"])?;
    for (axis_value, a) in rows {
        w.write_record([
            a.label.clone(),
            fmt_value(*axis_value),
            a.metric.clone(),
            fmt_value(a.grand.mean),
            fmt_value(a.grand.std),
            a.grand.n.to_string(),
            fmt_value(a.across_repeats.std),
            a.grand.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
