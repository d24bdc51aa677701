//! Datasets: loading (CSV, IDX, sparse `index:value` text), normalization,
//! splitting and mini-batch iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihoods::Observation;
use crate::math::{DenseMatrix, RandomStream};

/// Targets of a dataset: real-valued rows (`N × P`) or class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Real(DenseMatrix),
    Classes { labels: Vec<usize>, num_classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.rows(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observation(&self, i: usize) -> Observation<'_> {
        match self {
            Targets::Real(y) => Observation::Real(y.row(i)),
            Targets::Classes { labels, .. } => Observation::Class(labels[i]),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Real(y) => Targets::Real(y.select_rows(indices)),
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Targets::Classes { .. })
    }
}

/// Whether labels are class indices or real values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Per-feature (and, for regression, per-output) affine transform
/// `x ↦ (x − mean) / scale`, estimated on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub target_means: Vec<f64>,
    pub target_scales: Vec<f64>,
    /// Number of zero-variance columns whose scale was forced to 1.
    pub degenerate_columns: usize,
}

impl Transform {
    pub fn identity(d: usize, p: usize) -> Self {
        Transform {
            feature_means: vec![0.0; d],
            feature_scales: vec![1.0; d],
            target_means: vec![0.0; p],
            target_scales: vec![1.0; p],
            degenerate_columns: 0,
        }
    }

    pub fn apply_inputs(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.feature_means.len() {
            return Err(Error::dims("transform input dimension", self.feature_means.len(), x.cols()));
        }
        Ok(DenseMatrix::from_fn(x.rows(), x.cols(), |i, d| {
            (x[(i, d)] - self.feature_means[d]) / self.feature_scales[d]
        }))
    }

    pub fn apply_targets(&self, y: &Targets) -> Result<Targets> {
        match y {
            Targets::Real(m) => {
                if m.cols() != self.target_means.len() {
                    return Err(Error::dims("transform output dimension", self.target_means.len(), m.cols()));
                }
                Ok(Targets::Real(DenseMatrix::from_fn(m.rows(), m.cols(), |i, p| {
                    (m[(i, p)] - self.target_means[p]) / self.target_scales[p]
                })))
            }
            other => Ok(other.clone()),
        }
    }

    /// Applies the stored statistics to another dataset (e.g. a test split).
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            name: d.name.clone(),
            x: self.apply_inputs(&d.x)?,
            targets: self.apply_targets(&d.targets)?,
            transform: self.clone(),
        })
    }
}

/// Inputs, targets, and the transform that produced them from raw data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub x: DenseMatrix,
    pub targets: Targets,
    pub transform: Transform,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: DenseMatrix, targets: Targets) -> Result<Self> {
        if x.rows() != targets.len() {
            return Err(Error::dims("dataset targets", x.rows(), targets.len()));
        }
        if let Some(index) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dataset inputs",
                index,
            });
        }
        if let Targets::Real(y) = &targets {
            if let Some(index) = y.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "dataset targets",
                    index,
                });
            }
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
            }
        }
        let p = match &targets {
            Targets::Real(y) => y.cols(),
            Targets::Classes { .. } => 0,
        };
        let transform = Transform::identity(x.cols(), p);
        Ok(Dataset {
            name: name.into(),
            x,
            targets,
            transform,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(indices),
            targets: self.targets.select(indices),
            transform: self.transform.clone(),
        }
    }

    /// Keeps only the listed classes, relabelled `0..classes.len()` in the given order.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let labels = match &self.targets {
            Targets::Classes { labels, .. } => labels,
            Targets::Real(_) => return Err(Error::invalid("class filter on a regression dataset")),
        };
        let map: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if map.len() != classes.len() || classes.len() < 2 {
            return Err(Error::invalid("class filter needs at least two distinct classes"));
        }
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| map.contains_key(&labels[i])).collect();
        Ok(Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(&keep),
            targets: Targets::Classes {
                labels: keep.iter().map(|&i| map[&labels[i]]).collect(),
                num_classes: classes.len(),
            },
            transform: self.transform.clone(),
        })
    }
}

/// Normalization applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    StandardizeInputs,
    StandardizeBoth,
}

fn column_stats(m: &DenseMatrix) -> (Vec<f64>, Vec<f64>, usize) {
    let n = m.rows() as f64;
    let mut means = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in means.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    means.iter_mut().for_each(|v| *v /= n);
    let mut vars = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for ((a, v), mu) in vars.iter_mut().zip(m.row(i)).zip(&means) {
            *a += (v - mu) * (v - mu);
        }
    }
    let mut degenerate = 0;
    let scales = vars
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                degenerate += 1;
                1.0
            }
        })
        .collect();
    (means, scales, degenerate)
}

/// Standardizes columns to zero mean and unit (population) variance.
///
/// Constant columns keep scale 1 and are counted in the transform. Target
/// standardization only affects regression targets.
pub fn normalize(d: &Dataset, mode: Normalization) -> Result<Dataset> {
    let p = match &d.targets {
        Targets::Real(y) => y.cols(),
        Targets::Classes { .. } => 0,
    };
    let mut t = Transform::identity(d.input_dim(), p);
    if mode != Normalization::None {
        if d.len() < 2 {
            return Err(Error::invalid("standardization needs at least two points"));
        }
        let (means, scales, degenerate) = column_stats(&d.x);
        t.feature_means = means;
        t.feature_scales = scales;
        t.degenerate_columns = degenerate;
        if mode == Normalization::StandardizeBoth {
            if let Targets::Real(y) = &d.targets {
                let (means, scales, degenerate) = column_stats(y);
                t.target_means = means;
                t.target_scales = scales;
                t.degenerate_columns += degenerate;
            }
        }
        if t.degenerate_columns > 0 {
            log::warn!("{} constant column(s) left unscaled", t.degenerate_columns);
        }
    }
    t.apply(d)
}

/// Seeded random split into `(train, test)` with `⌊N·f⌋` test points (at
/// least one), stratified by class for classification data.
pub fn split(d: &Dataset, test_fraction: f64, stream: &RandomStream) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid("splitting needs at least two points"));
    }
    let test_size = (((n as f64) * test_fraction).floor() as usize).clamp(1, n - 1);
    let mut rng = stream.rng();
    let mut test = Vec::with_capacity(test_size);
    let mut train = Vec::with_capacity(n - test_size);
    match &d.targets {
        Targets::Classes { labels, num_classes } => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); *num_classes];
            for (i, &l) in labels.iter().enumerate() {
                by_class[l].push(i);
            }
            // largest-remainder allocation of test slots per class
            let mut quotas: Vec<(usize, f64)> = by_class
                .iter()
                .map(|c| {
                    let exact = c.len() as f64 * test_size as f64 / n as f64;
                    (exact.floor() as usize, exact - exact.floor())
                })
                .collect();
            let assigned: usize = quotas.iter().map(|q| q.0).sum();
            let mut order: Vec<usize> = (0..quotas.len()).collect();
            order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
            let mut remaining = test_size.saturating_sub(assigned);
            while remaining > 0 {
                let mut progressed = false;
                for &c in &order {
                    if remaining > 0 && quotas[c].0 < by_class[c].len() {
                        quotas[c].0 += 1;
                        remaining -= 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            for (c, members) in by_class.iter_mut().enumerate() {
                members.shuffle(&mut rng);
                test.extend_from_slice(&members[..quotas[c].0]);
                train.extend_from_slice(&members[quotas[c].0..]);
            }
        }
        Targets::Real(_) => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            test.extend_from_slice(&perm[..test_size]);
            train.extend_from_slice(&perm[test_size..]);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((d.subset(&train), d.subset(&test)))
}

/// Permutation of `0..n` for a given epoch; depends only on `(stream, epoch)`.
pub fn epoch_permutation(n: usize, stream: &RandomStream, epoch: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream.split(epoch).rng());
    perm
}

/// Shuffled mini-batches; each epoch visits every index once and the last
/// batch of an epoch may be short.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchIterator {
    pub num_points: usize,
    pub batch_size: usize,
    pub stream: RandomStream,
    pub epoch: u64,
    pub cursor: usize,
    #[serde(skip)]
    perm: Vec<usize>,
}

impl BatchIterator {
    pub fn new(num_points: usize, batch_size: usize, stream: RandomStream) -> Result<Self> {
        if num_points == 0 || batch_size == 0 {
            return Err(Error::invalid("batch iterator needs N >= 1 and B >= 1"));
        }
        Ok(BatchIterator {
            num_points,
            batch_size: batch_size.min(num_points),
            stream,
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.num_points.div_ceil(self.batch_size)
    }

    /// Next batch of indices; `epoch` advances after the last batch of an epoch.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.perm.len() != self.num_points {
            self.perm = epoch_permutation(self.num_points, &self.stream, self.epoch);
        }
        let end = (self.cursor + self.batch_size).min(self.num_points);
        let batch = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor == self.num_points {
            self.cursor = 0;
            self.epoch += 1;
            self.perm.clear();
        }
        batch
    }
}

/// How class labels read from text were mapped to `0..C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRemap {
    pub original: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        location: location.into(),
        message: message.into(),
    }
}

/// Maps raw label strings to class indices. Non-negative integers are kept
/// as-is; anything else is remapped in sorted order and reported.
fn class_labels(raw: &[String]) -> (Vec<usize>, usize, Option<LabelRemap>) {
    let parsed: Option<Vec<usize>> = raw.iter().map(|s| s.trim().parse::<usize>().ok()).collect();
    if let Some(labels) = parsed {
        let c = labels.iter().copied().max().map_or(0, |m| m + 1);
        return (labels, c, None);
    }
    let numeric: Option<Vec<f64>> = raw.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
    let mut distinct: Vec<String> = raw.iter().map(|s| s.trim().to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    if numeric.is_some() {
        distinct.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let index: BTreeMap<&str, usize> = distinct.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels = raw.iter().map(|s| index[s.trim()]).collect();
    let c = distinct.len();
    (labels, c, Some(LabelRemap { original: distinct }))
}

/// Reads a headered, comma-separated file. `label_columns` name the target
/// columns; every other column is a feature.
pub fn load_csv(path: &Path, label_columns: &[String], task: Task) -> Result<(Dataset, Option<LabelRemap>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, "header", e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(path, "header", e.to_string()))?.clone();
    let mut label_idx = Vec::with_capacity(label_columns.len());
    for name in label_columns {
        let i = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, "header", format!("label column `{name}` not found")))?;
        label_idx.push(i);
    }
    if label_idx.is_empty() {
        return Err(parse_err(path, "header", "no label column given"));
    }
    if task == Task::Classification && label_idx.len() != 1 {
        return Err(parse_err(path, "header", "classification needs exactly one label column"));
    }
    let feature_idx: Vec<usize> = (0..headers.len()).filter(|i| !label_idx.contains(i)).collect();
    let d = feature_idx.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut raw_labels = Vec::new();
    let mut n = 0;
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| parse_err(path, format!("line {line}"), e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                path,
                format!("line {line}"),
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for &i in &feature_idx {
            let v: f64 = record[i]
                .parse()
                .map_err(|_| parse_err(path, format!("line {line}"), format!("bad number `{}`", &record[i])))?;
            xs.push(v);
        }
        match task {
            Task::Regression => {
                for &i in &label_idx {
                    let v: f64 = record[i].parse().map_err(|_| {
                        parse_err(path, format!("line {line}"), format!("bad target `{}`", &record[i]))
                    })?;
                    ys.push(v);
                }
            }
            Task::Classification => raw_labels.push(record[label_idx[0]].to_string()),
        }
        n += 1;
    }
    let x = DenseMatrix::from_vec(n, d, xs)?;
    let (targets, remap) = match task {
        Task::Regression => (Targets::Real(DenseMatrix::from_vec(n, label_idx.len(), ys)?), None),
        Task::Classification => {
            let (labels, num_classes, remap) = class_labels(&raw_labels);
            (Targets::Classes { labels, num_classes }, remap)
        }
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((Dataset::new(name, x, targets)?, remap))
}

/// Writes a dataset as CSV (`x1..xD`, then `y1..yP` or `label`) with
/// shortest round-trip float formatting, so reloading is bit-exact.
pub fn save_csv(d: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header: Vec<String> = (1..=d.input_dim()).map(|i| format!("x{i}")).collect();
    match &d.targets {
        Targets::Real(y) => header.extend((1..=y.cols()).map(|p| format!("y{p}"))),
        Targets::Classes { .. } => header.push("label".into()),
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..d.len() {
        let mut fields: Vec<String> = d.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        match &d.targets {
            Targets::Real(y) => fields.extend(y.row(i).iter().map(|v| format!("{v:?}"))),
            Targets::Classes { labels, .. } => fields.push(labels[i].to_string()),
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Label column names written by [`save_csv`] for a dataset.
pub fn csv_label_columns(d: &Dataset) -> Vec<String> {
    match &d.targets {
        Targets::Real(y) => (1..=y.cols()).map(|p| format!("y{p}")).collect(),
        Targets::Classes { .. } => vec!["label".into()],
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| io_err(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| parse_err(path, "byte 0", format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, format!("byte {offset}"), "truncated header"))
}

/// Parses IDX image (`0x00000803`) and label (`0x00000801`) files, gzip or
/// plain. Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != 0x0000_0803 {
        return Err(parse_err(images, "byte 0", format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let d = rows * cols;
    let body = &img[16..];
    if body.len() != n * d {
        return Err(parse_err(
            images,
            format!("byte {}", 16 + body.len().min(n * d)),
            format!("expected {} pixel bytes, found {}", n * d, body.len()),
        ));
    }
    let lab = read_maybe_gz(labels)?;
    let magic = be_u32(&lab, 0, labels)?;
    if magic != 0x0000_0801 {
        return Err(parse_err(labels, "byte 0", format!("bad label magic {magic:#010x}")));
    }
    let nl = be_u32(&lab, 4, labels)? as usize;
    if nl != n || lab.len() != 8 + n {
        return Err(parse_err(labels, "byte 4", format!("expected {n} labels, header says {nl}")));
    }
    let x = DenseMatrix::from_vec(n, d, body.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels_vec: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels_vec.iter().copied().max().map_or(0, |m| m + 1);
    let name = images.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(
        name,
        x,
        Targets::Classes {
            labels: labels_vec,
            num_classes,
        },
    )
}

/// Parses `label idx:val ...` lines with 1-based indices. `dim` fixes the
/// input dimension; otherwise the largest index seen is used.
pub fn load_sparse(path: &Path, dim: Option<usize>, task: Task) -> Result<(Dataset, Option<LabelRemap>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut entries: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut raw_labels = Vec::new();
    let mut label_lines = Vec::new();
    let mut max_index = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let loc = format!("line {}", lineno + 1);
        let mut parts = line.split_whitespace();
        let label = match parts.next() {
            Some(l) => l.to_string(),
            None => continue,
        };
        let mut row = Vec::new();
        for tok in parts {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, loc.as_str(), format!("expected idx:val, found `{tok}`")))?;
            let i: usize = i
                .parse()
                .map_err(|_| parse_err(path, loc.as_str(), format!("bad index `{i}`")))?;
            if i == 0 {
                return Err(parse_err(path, loc, "indices are 1-based"));
            }
            let v: f64 = v
                .parse()
                .map_err(|_| parse_err(path, loc.as_str(), format!("bad value `{v}`")))?;
            if let Some(d) = dim {
                if i > d {
                    return Err(parse_err(path, loc, format!("index {i} exceeds dimension {d}")));
                }
            }
            max_index = max_index.max(i);
            row.push((i - 1, v));
        }
        raw_labels.push(label);
        label_lines.push(lineno + 1);
        entries.push(row);
    }
    let d = dim.unwrap_or(max_index);
    let n = entries.len();
    let mut x = DenseMatrix::zeros(n, d);
    for (r, row) in entries.iter().enumerate() {
        for &(i, v) in row {
            x[(r, i)] = v;
        }
    }
    let (targets, remap) = match task {
        Task::Regression => {
            let ys: Vec<f64> = raw_labels
                .iter()
                .zip(&label_lines)
                .map(|(s, line)| {
                    s.parse()
                        .map_err(|_| parse_err(path, format!("line {line}"), format!("bad target `{s}`")))
                })
                .collect::<Result<_>>()?;
            (Targets::Real(DenseMatrix::from_vec(n, 1, ys)?), None)
        }
        Task::Classification => {
            let (labels, num_classes, remap) = class_labels(&raw_labels);
            (Targets::Classes { labels, num_classes }, remap)
        }
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((Dataset::new(name, x, targets)?, remap))
}

/// Synthetic datasets for examples and tests.
pub mod synthetic {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::{Dataset, Targets};
    use crate::error::Result;
    use crate::math::{DenseMatrix, RandomStream};

    /// `y = sin(3x) + 0.3·x + noise`, `x` uniform on `[-3, 3]`.
    pub fn regression_1d(n: usize, noise_std: f64, stream: &RandomStream) -> Result<Dataset> {
        let mut rng = stream.rng();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.random_range(-3.0..3.0);
            let e: f64 = rng.sample(StandardNormal);
            xs.push(x);
            ys.push((3.0 * x).sin() + 0.3 * x + noise_std * e);
        }
        Dataset::new(
            "regression_1d",
            DenseMatrix::from_vec(n, 1, xs)?,
            Targets::Real(DenseMatrix::from_vec(n, 1, ys)?),
        )
    }

    /// Two-output regression network toy: one node function `v(x) = sin(2x)`
    /// mixed by smoothly varying weights `w₁(x) = 1 + 0.5·cos(x)`,
    /// `w₂(x) = 0.8·x/3 − 0.5`, plus Gaussian noise.
    pub fn gprn_toy(n: usize, noise_std: f64, stream: &RandomStream) -> Result<Dataset> {
        let mut rng = stream.rng();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let x: f64 = rng.random_range(-3.0..3.0);
            let v = (2.0 * x).sin();
            let w1 = 1.0 + 0.5 * x.cos();
            let w2 = 0.8 * x / 3.0 - 0.5;
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            xs.push(x);
            ys.push(w1 * v + noise_std * e1);
            ys.push(w2 * v + noise_std * e2);
        }
        Dataset::new(
            "gprn_toy",
            DenseMatrix::from_vec(n, 1, xs)?,
            Targets::Real(DenseMatrix::from_vec(n, 2, ys)?),
        )
    }

    /// Isotropic Gaussian blobs around `centers`, labelled by blob.
    pub fn blobs(points_per_blob: usize, centers: &DenseMatrix, spread: f64, stream: &RandomStream) -> Result<Dataset> {
        let mut rng = stream.rng();
        let d = centers.cols();
        let n = points_per_blob * centers.rows();
        let mut xs = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for c in 0..centers.rows() {
            for _ in 0..points_per_blob {
                for dim in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    xs.push(centers[(c, dim)] + spread * e);
                }
                labels.push(c);
            }
        }
        Dataset::new(
            "blobs",
            DenseMatrix::from_vec(n, d, xs)?,
            Targets::Classes {
                labels,
                num_classes: centers.rows().max(2),
            },
        )
    }
}
