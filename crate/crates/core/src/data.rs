//! Tabular ingestion and corruption: CSV loading, `[0,1]` scaling, MCAR
//! element and label masking, folds, and noise-filled training batches.
//!
//! Missing cells are stored as `0.0` with a `0` in the element mask; nothing
//! downstream reads a sentinel value.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::Tensor;
use crate::error::{HexaError, Result};

/// Per-column observed range used by [`minmax_scale`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn scale(&self, col: usize, v: f64) -> f64 {
        let range = self.max[col] - self.min[col];
        if range > 0.0 {
            (v - self.min[col]) / range
        } else {
            0.0
        }
    }

    pub fn unscale(&self, col: usize, v: f64) -> f64 {
        let range = self.max[col] - self.min[col];
        if range > 0.0 {
            self.min[col] + v * range
        } else {
            self.min[col]
        }
    }

    pub fn unscale_matrix(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.unscale(i % d, *v);
        }
        out
    }
}

/// Features, element mask, one-hot labels and label mask for `n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DirtyDataset {
    /// `n×d`; `0.0` wherever the mask is `0`.
    pub x: Tensor,
    /// `n×d` of `{0, 1}`; `1` marks an observed element.
    pub mask: Tensor,
    /// `n×n_c` one-hot; all-zero rows where the label is missing.
    pub y: Tensor,
    pub label_mask: Vec<bool>,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub scaler: Option<Scaler>,
    /// Row positions in the dataset this one was derived from.
    pub row_ids: Vec<usize>,
}

impl DirtyDataset {
    /// Builds a dataset from raw parts; `labels[j] = None` marks an unlabeled row.
    pub fn from_parts(x: Tensor, mask: Tensor, labels: &[Option<usize>], class_names: Vec<String>) -> Result<Self> {
        let (n, d) = x.dims();
        if mask.dims() != (n, d) || labels.len() != n {
            return Err(HexaError::data(format!(
                "inconsistent parts: x {:?}, mask {:?}, {} labels",
                x.shape(),
                mask.shape(),
                labels.len()
            )));
        }
        let n_c = class_names.len();
        let mut y = Tensor::zeros(n, n_c);
        for (j, l) in labels.iter().enumerate() {
            if let Some(c) = *l {
                if c >= n_c {
                    return Err(HexaError::data(format!("row {j}: class {c} of {n_c}")));
                }
                y.set(j, c, 1.0);
            }
        }
        let mut x = x.as_matrix();
        for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
        let ds = Self {
            x,
            mask: mask.as_matrix(),
            y,
            label_mask: labels.iter().map(Option::is_some).collect(),
            class_names,
            feature_names: (0..d).map(|i| format!("x{i}")).collect(),
            scaler: None,
            row_ids: (0..n).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_labeled(&self) -> usize {
        self.label_mask.iter().filter(|&&l| l).count()
    }

    pub fn label(&self, j: usize) -> Option<usize> {
        if !self.label_mask[j] {
            return None;
        }
        self.y.row(j).iter().position(|&v| v == 1.0)
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        (0..self.n()).map(|j| self.label(j)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for c in self.labels().into_iter().flatten() {
            counts[c] += 1;
        }
        counts
    }

    pub fn observed_fraction(&self) -> f64 {
        self.mask.data().iter().sum::<f64>() / self.mask.len().max(1) as f64
    }

    /// Rows at `indices`, keeping provenance in `row_ids`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(HexaError::contract(format!("row {bad} out of range for {} rows", self.n())));
        }
        Ok(Self {
            x: self.x.gather_rows(indices),
            mask: self.mask.gather_rows(indices),
            y: self.y.gather_rows(indices),
            label_mask: indices.iter().map(|&i| self.label_mask[i]).collect(),
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            scaler: self.scaler.clone(),
            row_ids: indices.iter().map(|&i| self.row_ids[i]).collect(),
        })
    }

    /// Checks the mask, range and one-hot invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, (&m, &v)) in self.mask.data().iter().zip(self.x.data()).enumerate() {
            if m != 0.0 && m != 1.0 {
                return Err(HexaError::data(format!("mask entry {i} is {m}")));
            }
            if m == 1.0 && self.scaler.is_some() && !(0.0..=1.0).contains(&v) {
                return Err(HexaError::data(format!("scaled entry {i} = {v} outside [0,1]")));
            }
        }
        for j in 0..self.n() {
            let ones = self.y.row(j).iter().filter(|&&v| v == 1.0).count();
            let nonzero = self.y.row(j).iter().filter(|&&v| v != 0.0).count();
            let ok = if self.label_mask[j] { ones == 1 && nonzero == 1 } else { nonzero == 0 };
            if !ok {
                return Err(HexaError::data(format!("row {j}: label row is not consistent with its mask")));
            }
        }
        Ok(())
    }
}

/// How to read a CSV file into a [`DirtyDataset`].
#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub label_column: String,
    /// Cell content marking a missing value; empty cells are always missing.
    pub missing_token: String,
    /// Raw label → merged label, e.g. `{"2": "2+3", "3": "2+3"}`.
    pub class_merge: BTreeMap<String, String>,
}

impl LoadOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            missing_token: "NA".to_string(),
            class_merge: BTreeMap::new(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<DirtyDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_from_reader(file, opts)
}

pub fn load_csv_from_reader<R: Read>(reader: R, opts: &LoadOptions) -> Result<DirtyDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == opts.label_column)
        .ok_or_else(|| HexaError::config(format!("label column '{}' not in header", opts.label_column)))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let d = feature_names.len();
    if d == 0 {
        return Err(HexaError::config("no feature columns"));
    }

    let is_missing = |cell: &str| cell.is_empty() || cell == opts.missing_token;
    let mut x = Vec::new();
    let mut mask = Vec::new();
    let mut raw_labels: Vec<Option<String>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(HexaError::Ingest {
                row: r + 1,
                column: String::new(),
                message: format!("{} cells, header has {}", rec.len(), headers.len()),
            });
        }
        for (i, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if i == label_idx {
                raw_labels.push(if is_missing(cell) {
                    None
                } else {
                    let merged = opts.class_merge.get(cell).cloned().unwrap_or_else(|| cell.to_string());
                    Some(merged)
                });
                continue;
            }
            if is_missing(cell) {
                x.push(0.0);
                mask.push(0.0);
            } else {
                let v: f64 = cell.parse().map_err(|_| HexaError::Ingest {
                    row: r + 1,
                    column: headers[i].to_string(),
                    message: format!("'{cell}' is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(HexaError::Ingest {
                        row: r + 1,
                        column: headers[i].to_string(),
                        message: format!("'{cell}' is not finite"),
                    });
                }
                x.push(v);
                mask.push(1.0);
            }
        }
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(HexaError::data("no data rows"));
    }

    let distinct: BTreeSet<&String> = raw_labels.iter().flatten().collect();
    let mut classes: Vec<String> = distinct.into_iter().cloned().collect();
    if classes.iter().all(|c| c.parse::<f64>().is_ok()) {
        classes.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .partial_cmp(&b.parse::<f64>().unwrap())
                .unwrap()
        });
    }
    if classes.len() < 2 {
        return Err(HexaError::config(format!(
            "label column '{}' has {} distinct class(es); at least two are needed",
            opts.label_column,
            classes.len()
        )));
    }
    let labels: Vec<Option<usize>> = raw_labels
        .iter()
        .map(|l| l.as_ref().map(|s| classes.iter().position(|c| c == s).expect("collected")))
        .collect();

    let mut ds = DirtyDataset::from_parts(
        Tensor::from_matrix(n, d, x)?,
        Tensor::from_matrix(n, d, mask)?,
        &labels,
        classes,
    )?;
    ds.feature_names = feature_names;
    Ok(ds)
}

/// Maps observed entries to `[0,1]` per column; constant columns map to 0.
pub fn minmax_scale(ds: &DirtyDataset) -> Result<DirtyDataset> {
    let (n, d) = ds.x.dims();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for j in 0..n {
        for i in 0..d {
            if ds.mask.get(j, i) == 1.0 {
                let v = ds.x.get(j, i);
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
    }
    if let Some(col) = min.iter().position(|v| !v.is_finite()) {
        return Err(HexaError::data(format!(
            "column '{}' has no observed entries",
            ds.feature_names.get(col).map(String::as_str).unwrap_or("?")
        )));
    }
    let scaler = Scaler { min, max };
    let mut out = ds.clone();
    for j in 0..n {
        for i in 0..d {
            if ds.mask.get(j, i) == 1.0 {
                out.x.set(j, i, scaler.scale(i, ds.x.get(j, i)).clamp(0.0, 1.0));
            }
        }
    }
    out.scaler = Some(scaler);
    Ok(out)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(HexaError::config(format!("missing rate must lie in [0,1), got {rate}")));
    }
    Ok(())
}

/// Hides each observed element independently with probability `rate`.
pub fn inject_mcar(ds: &DirtyDataset, rate: f64, seed: u64) -> Result<DirtyDataset> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for (m, v) in out.mask.data_mut().iter_mut().zip(out.x.data_mut()) {
        let u: f64 = rng.random();
        if *m == 1.0 && u < rate {
            *m = 0.0;
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Hides each present label independently with probability `rate`.
pub fn inject_label_missingness(ds: &DirtyDataset, rate: f64, seed: u64) -> Result<DirtyDataset> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for j in 0..out.n() {
        let u: f64 = rng.random();
        if out.label_mask[j] && u < rate {
            out.label_mask[j] = false;
            out.y.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// `k` disjoint folds covering `0..n`, sizes differing by at most one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// All indices outside `fold`, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 || k > n {
        return Err(HexaError::config(format!("need 2 <= k <= n, got k={k}, n={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = perm[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(FoldSplit { folds })
}

/// Rows gathered for one update, with fresh `U(0,1)` noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub m: Tensor,
    pub y: Tensor,
    pub label_mask: Vec<bool>,
    pub z: Tensor,
    /// Provenance of each row (see [`DirtyDataset::row_ids`]).
    pub row_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.label_mask.is_empty()
    }

    pub fn n_labeled(&self) -> usize {
        self.label_mask.iter().filter(|&&l| l).count()
    }

    /// Rows where `keep` is true.
    pub fn select(&self, keep: &[bool]) -> Batch {
        let idx: Vec<usize> = (0..self.len()).filter(|&j| keep[j]).collect();
        Batch {
            x: self.x.gather_rows(&idx),
            m: self.m.gather_rows(&idx),
            y: self.y.gather_rows(&idx),
            label_mask: idx.iter().map(|&j| self.label_mask[j]).collect(),
            z: self.z.gather_rows(&idx),
            row_ids: idx.iter().map(|&j| self.row_ids[j]).collect(),
        }
    }

    pub fn labeled(&self) -> Batch {
        self.select(&self.label_mask.clone())
    }

    pub fn unlabeled(&self) -> Batch {
        let keep: Vec<bool> = self.label_mask.iter().map(|l| !l).collect();
        self.select(&keep)
    }
}

pub fn uniform_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
    Tensor::from_matrix(rows, cols, data).expect("sized")
}

pub fn sample_batch<R: Rng + ?Sized>(ds: &DirtyDataset, indices: &[usize], rng: &mut R) -> Result<Batch> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.n()) {
        return Err(HexaError::contract(format!("batch index {bad} out of range for {} rows", ds.n())));
    }
    Ok(Batch {
        x: ds.x.gather_rows(indices),
        m: ds.mask.gather_rows(indices),
        y: ds.y.gather_rows(indices),
        label_mask: indices.iter().map(|&i| ds.label_mask[i]).collect(),
        z: uniform_noise(indices.len(), ds.d(), rng),
        row_ids: indices.iter().map(|&i| ds.row_ids[i]).collect(),
    })
}

/// Two-class Gaussian mixture with correlated features, scaled to `[0,1]`.
///
/// Features are `μ_c + A·s + 0.1·ε` with a shared low-rank `A`, so missing
/// coordinates are predictable from observed ones.
pub fn two_gaussians(n: usize, d: usize, seed: u64) -> Result<DirtyDataset> {
    if n < 2 || d < 2 {
        return Err(HexaError::config("two_gaussians needs n >= 2 and d >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = (d / 2).max(1);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let loading: Vec<f64> = (0..d * rank).map(|_| normal()).collect();
    let means: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| 1.5 * normal()).collect()).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let c = usize::from(j % 3 == 0);
        let s: Vec<f64> = (0..rank).map(|_| normal()).collect();
        for i in 0..d {
            let latent: f64 = (0..rank).map(|r| loading[i * rank + r] * s[r]).sum();
            x.push(means[c][i] + latent + 0.1 * normal());
        }
        labels.push(Some(c));
    }
    let ds = DirtyDataset::from_parts(
        Tensor::from_matrix(n, d, x)?,
        Tensor::ones(n, d),
        &labels,
        vec!["0".into(), "1".into()],
    )?;
    minmax_scale(&ds)
}

/// Writes `values` as CSV with `header`; `None` cells become `missing_token`.
pub fn write_matrix_csv<W: Write>(out: W, header: &[String], rows: &[Vec<Option<String>>], missing_token: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|c| c.as_deref().unwrap_or(missing_token)))?;
    }
    w.flush()?;
    Ok(())
}

/// Element mask as a 0/1 CSV with the feature header.
pub fn write_mask_csv<W: Write>(out: W, ds: &DirtyDataset) -> Result<()> {
    let rows: Vec<Vec<Option<String>>> = (0..ds.n())
        .map(|j| {
            ds.mask
                .row(j)
                .iter()
                .map(|&m| Some(if m == 1.0 { "1" } else { "0" }.to_string()))
                .collect()
        })
        .collect();
    write_matrix_csv(out, &ds.feature_names, &rows, "")
}

/// Label mask as a single 0/1 column.
pub fn write_label_mask_csv<W: Write>(out: W, ds: &DirtyDataset, column: &str) -> Result<()> {
    let rows: Vec<Vec<Option<String>>> = ds
        .label_mask
        .iter()
        .map(|&l| vec![Some(if l { "1" } else { "0" }.to_string())])
        .collect();
    write_matrix_csv(out, &[column.to_string()], &rows, "")
}

/// Formats a value the way it was most likely written in the source file.
pub fn format_value(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('e') || s.contains('.') {
        s
    } else {
        format!("{v:.1}")
    }
}

/// Writes features (in original units when a scaler is present) and labels.
///
/// `values` overrides `ds.x`, e.g. with an imputed matrix; missing cells of
/// `ds` are written as `missing_token` unless `values` is given.
pub fn write_dataset_csv<W: Write>(
    out: W,
    ds: &DirtyDataset,
    values: Option<&Tensor>,
    label_column: &str,
    missing_token: &str,
) -> Result<()> {
    let mut header = ds.feature_names.clone();
    header.push(label_column.to_string());
    let source = values.unwrap_or(&ds.x);
    let rows: Vec<Vec<Option<String>>> = (0..ds.n())
        .map(|j| {
            let mut row: Vec<Option<String>> = (0..ds.d())
                .map(|i| {
                    if values.is_none() && ds.mask.get(j, i) == 0.0 {
                        return None;
                    }
                    let v = source.get(j, i);
                    let v = match &ds.scaler {
                        Some(s) => s.unscale(i, v),
                        None => v,
                    };
                    Some(format_value(v))
                })
                .collect();
            row.push(ds.label(j).map(|c| ds.class_names[c].clone()));
            row
        })
        .collect();
    write_matrix_csv(out, &header, &rows, missing_token)
}
