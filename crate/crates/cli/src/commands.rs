//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and returns a short summary for the terminal.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use hexagan::data::{
    format_value, inject_label_missingness, inject_mcar, load_csv, minmax_scale, write_dataset_csv,
    write_label_mask_csv, write_mask_csv, DirtyDataset, Scaler,
};
use hexagan::engine::Tensor;
use hexagan::eval::{
    ablation_config, ablation_rows, aggregate, config_hash, derive_seed, run_cv_experiment, sweep as run_sweep,
    write_aggregate_csv, write_long_csv, Aggregate, FoldRecord, Protocol, SweepAxis,
};
use hexagan::networks::HexaGanParams;
use hexagan::trainer::{impute_dataset, train as run_training, EpochRecord, Probe, TrainObserver, TrainState};
use hexagan::HexaError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;

pub const MODEL_FILE: &str = "model.hxg";
pub const SCALER_FILE: &str = "scaler.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
const PROBE_SALT: u64 = 0x9e0b;

/// Column ranges and names needed to map a model back to original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerFile {
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes to a sibling temporary file, then renames over `path`.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = create(&tmp)?;
        write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("moving {} into place", path.display()))?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<DirtyDataset> {
    let path = cfg.data.require_path()?;
    load_csv(path, &cfg.data.load_options()).with_context(|| format!("loading {}", path.display()))
}

fn positive_class(cfg: &RunConfig, ds: &DirtyDataset) -> Result<Option<usize>> {
    match &cfg.data.positive_class {
        None => Ok(None),
        Some(name) => ds
            .class_names
            .iter()
            .position(|c| c == name)
            .map(Some)
            .ok_or_else(|| {
                HexaError::Config(format!("data.positive_class '{name}' is not one of {:?}", ds.class_names)).into()
            }),
    }
}

pub struct CorruptSummary {
    pub data: PathBuf,
    pub observed_fraction: f64,
    pub labeled: usize,
    pub rows: usize,
}

/// MCAR element and label corruption of the configured dataset.
pub fn corrupt(cfg: &RunConfig) -> Result<CorruptSummary> {
    let ds = load_dataset(cfg)?;
    let c = inject_mcar(&ds, cfg.corrupt.missing_rate, derive_seed(cfg.corrupt.seed, &[0]))?;
    let c = inject_label_missingness(&c, cfg.corrupt.label_missing_rate, derive_seed(cfg.corrupt.seed, &[1]))?;
    let dir = &cfg.output_dir;
    let data = dir.join("corrupted.csv");
    write_atomic(&data, |w| Ok(write_dataset_csv(w, &c, None, &cfg.data.label_column, &cfg.data.missing_token)?))?;
    write_atomic(&dir.join("mask.csv"), |w| Ok(write_mask_csv(w, &c)?))?;
    write_atomic(&dir.join("label_mask.csv"), |w| Ok(write_label_mask_csv(w, &c, &cfg.data.label_column)?))?;
    Ok(CorruptSummary {
        data,
        observed_fraction: c.observed_fraction(),
        labeled: c.n_labeled(),
        rows: c.n(),
    })
}

struct TrainArtifacts {
    dir: PathBuf,
    metrics: BufWriter<File>,
    started: Instant,
    seed: u64,
    config_hash: String,
    error: Option<anyhow::Error>,
}

impl TrainArtifacts {
    fn write_epoch(&mut self, record: &EpochRecord, state: &TrainState) -> Result<()> {
        let line = json!({
            "epoch": record.epoch,
            "losses": record.losses,
            "probe_rmse": record.probe_rmse,
            "updates": state.updates,
            "skipped_groups": state.skipped_groups,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "wall_clock_s": self.started.elapsed().as_secs_f64(),
        });
        writeln!(self.metrics, "{line}")?;
        self.metrics.flush()?;
        if record.checkpoint_due {
            let path = self.dir.join("checkpoints").join(format!("epoch_{:04}.hxg", record.epoch));
            write_atomic(&path, |w| Ok(state.params.save(w)?))?;
        }
        Ok(())
    }

    fn write_hidden(&self, epoch: usize, real: &Tensor, generated: &Tensor, labels: &Tensor) -> Result<()> {
        let path = self.dir.join("hidden").join(format!("epoch_{epoch:04}.csv"));
        let mut w = csv::Writer::from_writer(create(&path)?);
        let mut header = vec!["source".to_string(), "class".to_string()];
        header.extend((0..real.cols()).map(|i| format!("h{i}")));
        w.write_record(&header)?;
        for (source, h) in [("encoded", real), ("generated", generated)] {
            for j in 0..h.rows() {
                let class = labels.row(j).iter().position(|&v| v == 1.0).unwrap_or(0);
                let mut rec = vec![source.to_string(), class.to_string()];
                rec.extend(h.row(j).iter().map(|&v| format_value(v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl TrainObserver for TrainArtifacts {
    fn on_epoch(&mut self, record: &EpochRecord, state: &TrainState) -> hexagan::Result<()> {
        self.write_epoch(record, state).map_err(|e| {
            let msg = format!("{e:#}");
            self.error = Some(e);
            HexaError::Io(std::io::Error::other(msg))
        })
    }

    fn on_hidden(&mut self, epoch: usize, real: &Tensor, generated: &Tensor, labels: &Tensor) -> hexagan::Result<()> {
        self.write_hidden(epoch, real, generated, labels)
            .map_err(|e| HexaError::Io(std::io::Error::other(format!("{e:#}"))))
    }
}

pub struct TrainSummary {
    pub model: PathBuf,
    pub epochs: usize,
    pub final_losses: BTreeMap<String, f64>,
    pub probe_rmse: Option<f64>,
}

/// Held-out probe: a fraction of observed cells hidden from training.
fn make_probe(ds: &DirtyDataset, rate: f64, seed: u64) -> Result<Option<Probe>> {
    if rate == 0.0 {
        return Ok(None);
    }
    let data = inject_mcar(ds, rate, derive_seed(seed, &[PROBE_SALT]))?;
    let scored = ds.mask.zip_map(&data.mask, |a, b| if a == 1.0 && b == 0.0 { 1.0 } else { 0.0 })?;
    if !scored.data().contains(&1.0) {
        return Ok(None);
    }
    Ok(Some(Probe { data, truth: ds.x.clone(), scored }))
}

/// Trains on the configured (already dirty) dataset.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let raw = load_dataset(cfg)?;
    let ds = minmax_scale(&raw)?;
    let probe = make_probe(&ds, cfg.probe_rate, cfg.train.seed)?;
    let training = probe.as_ref().map(|p| &p.data).unwrap_or(&ds);
    let dir = cfg.output_dir.clone();
    let scaler = ds.scaler.clone().expect("scaled dataset");
    let scaler_file = ScalerFile {
        feature_names: ds.feature_names.clone(),
        class_names: ds.class_names.clone(),
        min: scaler.min,
        max: scaler.max,
    };
    write_atomic(&dir.join(SCALER_FILE), |w| Ok(serde_json::to_writer_pretty(w, &scaler_file)?))?;
    let mut artifacts = TrainArtifacts {
        metrics: create(&dir.join(METRICS_FILE))?,
        dir: dir.clone(),
        started: Instant::now(),
        seed: cfg.train.seed,
        config_hash: config_hash(&cfg.train),
        error: None,
    };
    let state = match run_training(training, &cfg.train, probe.as_ref(), &mut artifacts) {
        Ok(s) => s,
        Err(e) => return Err(artifacts.error.take().unwrap_or_else(|| e.into())),
    };
    let model = dir.join(MODEL_FILE);
    write_atomic(&model, |w| Ok(state.params.save(w)?))?;
    let last = state.history.last();
    Ok(TrainSummary {
        model,
        epochs: state.epoch,
        final_losses: last.map(|r| r.losses.clone()).unwrap_or_default(),
        probe_rmse: last.and_then(|r| r.probe_rmse),
    })
}

/// Fills the missing cells of `input` with a trained model; values are
/// written in original units and observed cells are copied unchanged.
pub fn impute(cfg: &RunConfig, checkpoint: &Path, scaler: Option<&Path>, input: &Path, output: &Path) -> Result<usize> {
    let params = HexaGanParams::load(File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let scaler_path = scaler
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(SCALER_FILE));
    let sf: ScalerFile = serde_json::from_reader(
        File::open(&scaler_path).with_context(|| format!("opening {}", scaler_path.display()))?,
    )
    .with_context(|| format!("parsing {}", scaler_path.display()))?;
    let raw = load_csv(input, &cfg.data.load_options()).with_context(|| format!("loading {}", input.display()))?;
    if raw.d() != params.d || sf.min.len() != raw.d() {
        return Err(HexaError::Data(format!(
            "{} has {} features but the model expects {}",
            input.display(),
            raw.d(),
            params.d
        ))
        .into());
    }
    let s = Scaler { min: sf.min, max: sf.max };
    let mut ds = raw.clone();
    for j in 0..ds.n() {
        for i in 0..ds.d() {
            if ds.mask.get(j, i) == 1.0 {
                ds.x.set(j, i, s.scale(i, raw.x.get(j, i)));
            }
        }
    }
    ds.scaler = Some(s.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x_hat = impute_dataset(&params, &ds, &mut rng)?;
    let mut filled = raw.x.clone();
    for j in 0..ds.n() {
        for i in 0..ds.d() {
            if ds.mask.get(j, i) == 0.0 {
                filled.set(j, i, s.unscale(i, x_hat.get(j, i)));
            }
        }
    }
    let mut out = raw;
    out.scaler = None;
    write_atomic(output, |w| {
        Ok(write_dataset_csv(w, &out, Some(&filled), &cfg.data.label_column, &cfg.data.missing_token)?)
    })?;
    Ok(out.n())
}

/// Records of one labelled configuration, with the sweep value if any.
pub struct Table {
    pub label: String,
    pub axis_value: f64,
    pub records: Vec<FoldRecord>,
}

fn fold_line(label: &str, axis_value: f64, r: &FoldRecord, epochs: usize) -> serde_json::Value {
    json!({
        "label": label,
        "axis_value": if axis_value.is_nan() { None } else { Some(axis_value) },
        "run_id": r.run_id,
        "repeat": r.repeat,
        "fold": r.fold,
        "epoch": epochs,
        "rmse": r.rmse,
        "rmse_zero": r.rmse_zero,
        "rmse_mean": r.rmse_mean,
        "f1": r.f1,
        "positive_class": r.positive_class,
        "losses": r.final_losses,
        "seed": r.seed,
        "config_hash": r.config_hash,
        "leaked_batches": r.leaked_batches,
        "wall_clock_s": r.wall_clock_s,
    })
}

/// Writes `records.csv`, `aggregate.csv` and `folds.jsonl`; returns the
/// aggregates in table order.
pub fn write_results(dir: &Path, tables: &[Table], epochs: &[usize]) -> Result<Vec<(f64, Aggregate)>> {
    let long: Vec<(String, f64, &FoldRecord)> = tables
        .iter()
        .flat_map(|t| t.records.iter().map(move |r| (t.label.clone(), t.axis_value, r)))
        .collect();
    write_atomic(&dir.join("records.csv"), |w| Ok(write_long_csv(w, &long)?))?;
    let aggregates: Vec<(f64, Aggregate)> = tables
        .iter()
        .flat_map(|t| aggregate(&t.records, &t.label).into_iter().map(move |a| (t.axis_value, a)))
        .collect();
    write_atomic(&dir.join("aggregate.csv"), |w| Ok(write_aggregate_csv(w, &aggregates)?))?;
    write_atomic(&dir.join("folds.jsonl"), |w| {
        for (t, &ep) in tables.iter().zip(epochs) {
            for r in &t.records {
                writeln!(w, "{}", fold_line(&t.label, t.axis_value, r, ep))?;
            }
        }
        Ok(())
    })?;
    Ok(aggregates)
}

/// Plain-text table of aggregates, one line per label and metric.
pub fn render(aggregates: &[(f64, Aggregate)]) -> String {
    let mut out = String::new();
    for (v, a) in aggregates {
        let point = if v.is_nan() { String::new() } else { format!(" @ {v}") };
        out.push_str(&format!(
            "{:<32} {:<10} {}  (n={}, per-repeat std {:.4})\n",
            format!("{}{point}", a.label),
            a.metric,
            a.grand,
            a.grand.n,
            a.across_repeats.std
        ));
    }
    out
}

fn experiment_inputs(cfg: &RunConfig) -> Result<(DirtyDataset, Protocol)> {
    let ds = minmax_scale(&load_dataset(cfg)?)?;
    let mut protocol = cfg.protocol();
    protocol.positive_class = positive_class(cfg, &ds)?;
    Ok((ds, protocol))
}

fn progress(label: &str) -> impl FnMut(&FoldRecord) + '_ {
    move |r| {
        eprintln!(
            "{label} repeat {} fold {}: rmse {:.4} (mean {:.4}, zero {:.4}) f1 {:.4} [{:.1}s]",
            r.repeat, r.fold, r.rmse, r.rmse_mean, r.rmse_zero, r.f1, r.wall_clock_s
        )
    }
}

/// Repeated k-fold evaluation of the configured model.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<(f64, Aggregate)>> {
    let (ds, protocol) = experiment_inputs(cfg)?;
    let label = "HexaGAN";
    let records = run_cv_experiment(&ds, &cfg.train, &protocol, &mut progress(label))?;
    let tables = [Table { label: label.to_string(), axis_value: f64::NAN, records }];
    write_results(&cfg.output_dir, &tables, &[cfg.train.epochs])
}

/// One evaluation per value of `axis`.
pub fn sweep(cfg: &RunConfig, axis: Option<SweepAxis>, values: &[f64]) -> Result<Vec<(f64, Aggregate)>> {
    let axis = axis
        .or(cfg.experiment.sweep_axis)
        .ok_or_else(|| HexaError::Config("no sweep axis given (experiment.sweep_axis or --axis)".into()))?;
    let values = if values.is_empty() { &cfg.experiment.sweep_values[..] } else { values };
    let (ds, protocol) = experiment_inputs(cfg)?;
    let points = run_sweep(&ds, &cfg.train, &protocol, axis, values, &mut |v, r| {
        progress(&format!("{}={v}", axis.name()))(r)
    })?;
    let mut epochs = Vec::new();
    for p in &points {
        epochs.push(axis.apply(&cfg.train, &protocol, p.value)?.0.epochs);
    }
    let tables: Vec<Table> = points
        .into_iter()
        .map(|p| Table { label: axis.name().to_string(), axis_value: p.value, records: p.records })
        .collect();
    write_results(&cfg.output_dir, &tables, &epochs)
}

/// The ablation rows named in `experiment.ablation` (or all of them).
pub fn ablation(cfg: &RunConfig) -> Result<Vec<(f64, Aggregate)>> {
    let rows = ablation_rows();
    let wanted = &cfg.experiment.ablation;
    let selected: Vec<_> = if wanted.iter().any(|w| w == "all") {
        rows
    } else {
        let mut sel = Vec::new();
        for w in wanted {
            let row = rows.iter().find(|(name, _)| name == w).ok_or_else(|| {
                let names: Vec<&str> = rows.iter().map(|r| r.0).collect();
                HexaError::Config(format!("unknown ablation row '{w}' (known: all, {})", names.join(", ")))
            })?;
            sel.push(row.clone());
        }
        sel
    };
    let (ds, protocol) = experiment_inputs(cfg)?;
    let mut tables = Vec::new();
    for (name, drop) in &selected {
        let row_cfg = ablation_config(&cfg.train, drop);
        let records = run_cv_experiment(&ds, &row_cfg, &protocol, &mut progress(name))?;
        tables.push(Table { label: name.to_string(), axis_value: f64::NAN, records });
    }
    write_results(&cfg.output_dir, &tables, &vec![cfg.train.epochs; tables.len()])
}
