//! CSV ingestion, train-statistics standardization, chronological splits and
//! window/chain extraction.
//!
//! Every window and chain carries its start row in the coordinates of the full
//! series, so library entries and queries from different partitions can be
//! compared directly (the self-match exclusion relies on this).

use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multivariate series, rows are time steps and columns are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub column_names: Vec<String>,
}

impl RawSeries {
    pub fn new(values: Array2<f64>, column_names: Vec<String>) -> Result<Self> {
        if values.ncols() != column_names.len() {
            return Err(Error::shape(format!(
                "{} columns but {} column names",
                values.ncols(),
                column_names.len()
            )));
        }
        if values.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("series contains non-finite values"));
        }
        Ok(Self { values, column_names })
    }

    /// Builds a series with generated column names `c0, c1, ...`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|c| format!("c{c}")).collect();
        Self::new(values, names)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Reads a CSV file whose first row is a header.
///
/// With `drop_first_column` the leading column (a timestamp in the ETT layout)
/// is skipped; every remaining cell must parse as a finite real number.
pub fn load_csv(path: impl AsRef<Path>, drop_first_column: bool) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Open {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, drop_first_column)
}

pub fn read_csv<R: Read>(reader: R, drop_first_column: bool) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let skip = usize::from(drop_first_column);
    let headers: Vec<String> = rdr.headers()?.iter().skip(skip).map(str::to_owned).collect();
    if headers.is_empty() {
        return Err(Error::EmptyData);
    }
    let width = headers.len();

    let mut flat = Vec::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(rows as u64 + 2, |p| p.line());
        if record.len() != width + skip {
            return Err(Error::Malformed(format!(
                "line {line}: expected {} fields, found {}",
                width + skip,
                record.len()
            )));
        }
        for (column, cell) in record.iter().enumerate().skip(skip) {
            let parsed = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            match parsed {
                Some(v) => flat.push(v),
                None => {
                    return Err(Error::Parse {
                        row: line,
                        column,
                        name: headers[column - skip].clone(),
                        value: cell.to_owned(),
                    })
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyData);
    }
    let values = Array2::from_shape_vec((rows, width), flat).map_err(|e| Error::shape(e.to_string()))?;
    RawSeries::new(values, headers)
}

/// Per-channel mean and standard deviation, fitted on the training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population moments per column. A constant column gets std 1 and a warning.
    pub fn fit(train: ArrayView2<'_, f64>) -> Self {
        let n = train.nrows() as f64;
        let mut mean = Vec::with_capacity(train.ncols());
        let mut std = Vec::with_capacity(train.ncols());
        for (c, col) in train.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            if sd > 0.0 && sd.is_finite() {
                std.push(sd);
            } else {
                warn!("channel {c} is constant over the training rows; using std = 1");
                std.push(1.0);
            }
        }
        Self { mean, std }
    }

    pub fn transform(&self, values: ArrayView2<'_, f64>) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        (&values - &mean) / &std
    }

    pub fn inverse_transform(&self, values: ArrayView2<'_, f64>) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        &values * &std + &mean
    }
}

/// Applies `stats` to the whole series.
pub fn standardize(series: &RawSeries, stats: &Standardizer) -> Result<RawSeries> {
    if stats.mean.len() != series.channels() {
        return Err(Error::shape(format!(
            "standardizer has {} channels, series has {}",
            stats.mean.len(),
            series.channels()
        )));
    }
    Ok(RawSeries {
        values: stats.transform(series.values.view()),
        column_names: series.column_names.clone(),
    })
}

/// Chronological train/validation/test proportions.
///
/// `span` restricts the split to a prefix of the series. The ETT hourly
/// protocol, for instance, splits only the first 20 months (14 400 rows)
/// 6:2:2 and leaves the tail unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    #[serde(default)]
    pub span: Option<usize>,
}

impl SplitSpec {
    pub fn new(train_ratio: f64, val_ratio: f64, test_ratio: f64) -> Result<Self> {
        let spec = Self {
            train_ratio,
            val_ratio,
            test_ratio,
            span: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// ETT hourly files: 12/4/4 months of 720 rows.
    pub fn ett_hourly() -> Self {
        Self {
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
            span: Some(20 * 30 * 24),
        }
    }

    /// ETT 15-minute files: 12/4/4 months of 2880 rows.
    pub fn ett_minute() -> Self {
        Self {
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
            span: Some(20 * 30 * 24 * 4),
        }
    }

    /// Parses `6:2:2`, `7:1:2`, `ett-h` or `ett-m`.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "ett-h" | "etth" => return Ok(Self::ett_hourly()),
            "ett-m" | "ettm" => return Ok(Self::ett_minute()),
            _ => {}
        }
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("cannot parse split {text:?}")))?;
        if parts.len() != 3 {
            return Err(Error::config(format!("split {text:?} must have three parts")));
        }
        let total: f64 = parts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::config(format!("split {text:?} has zero total")));
        }
        Self::new(parts[0] / total, parts[1] / total, parts[2] / total)
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::config("split ratios must be positive"));
        }
        let total: f64 = ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Row ranges in series coordinates. Validation and test ranges start
    /// `seq_len` rows early so their first window has a full look-back.
    pub fn borders(&self, total_len: usize, seq_len: usize) -> Result<[Range<usize>; 3]> {
        self.validate()?;
        let n = match self.span {
            Some(span) if span > total_len => {
                return Err(Error::TooShort {
                    what: "series for the configured split span".into(),
                    needed: span,
                    available: total_len,
                })
            }
            Some(span) => span,
            None => total_len,
        };
        // The 1e-9 nudge keeps exact products such as 14400 * 0.6 from
        // flooring one row short.
        let num_train = (n as f64 * self.train_ratio + 1e-9).floor() as usize;
        let num_test = (n as f64 * self.test_ratio + 1e-9).floor() as usize;
        let num_val = n
            .checked_sub(num_train + num_test)
            .ok_or_else(|| Error::config("split ratios exceed the series length"))?;
        if num_train < seq_len {
            return Err(Error::TooShort {
                what: "training partition".into(),
                needed: seq_len,
                available: num_train,
            });
        }
        let val_start = num_train - seq_len;
        let test_start = (n - num_test)
            .checked_sub(seq_len)
            .ok_or_else(|| Error::config("test partition starts before the series"))?;
        Ok([0..num_train, val_start..num_train + num_val, test_start..n])
    }
}

/// A contiguous block of rows cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Row of the full series where this partition begins.
    pub offset: usize,
    pub values: Arc<Array2<f64>>,
}

impl Partition {
    pub fn new(offset: usize, values: Array2<f64>) -> Self {
        Self {
            offset,
            values: Arc::new(values),
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `[global_start, global_start + len)` using series coordinates.
    pub fn rows(&self, global_start: usize, len: usize) -> Option<ArrayView2<'_, f64>> {
        let local = global_start.checked_sub(self.offset)?;
        (local + len <= self.len()).then(|| self.values.slice(s![local..local + len, ..]))
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Partition,
    pub val: Partition,
    pub test: Partition,
}

/// Cuts `series` into chronological partitions. Each partition must hold at
/// least one `seq_len + pred_len` window.
pub fn split(series: &RawSeries, spec: &SplitSpec, seq_len: usize, pred_len: usize) -> Result<Split> {
    let [train, val, test] = spec.borders(series.len(), seq_len)?;
    let cut = |name: &str, range: Range<usize>| -> Result<Partition> {
        if range.len() < seq_len + pred_len {
            return Err(Error::TooShort {
                what: format!("{name} partition"),
                needed: seq_len + pred_len,
                available: range.len(),
            });
        }
        Ok(Partition::new(
            range.start,
            series.values.slice(s![range, ..]).to_owned(),
        ))
    };
    Ok(Split {
        train: cut("training", train)?,
        val: cut("validation", val)?,
        test: cut("test", test)?,
    })
}

/// One history/target/continuation triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub history: Array2<f64>,
    pub target: Array2<f64>,
    pub continuation: Array2<f64>,
    pub start: usize,
}

/// One chain per start index at `stride`; the chain spans `2 * seq_len + pred_len` rows.
pub fn extract_chains(partition: &Partition, seq_len: usize, pred_len: usize, stride: usize) -> Result<Vec<Chain>> {
    if seq_len == 0 || pred_len == 0 || stride == 0 {
        return Err(Error::config("seq_len, pred_len and stride must be positive"));
    }
    let span = 2 * seq_len + pred_len;
    if partition.len() < span {
        return Err(Error::TooShort {
            what: "partition for chain extraction".into(),
            needed: span,
            available: partition.len(),
        });
    }
    let v = &partition.values;
    Ok((0..=partition.len() - span)
        .step_by(stride)
        .map(|t| Chain {
            history: v.slice(s![t..t + seq_len, ..]).to_owned(),
            target: v.slice(s![t + seq_len..t + seq_len + pred_len, ..]).to_owned(),
            continuation: v.slice(s![t + seq_len + pred_len..t + span, ..]).to_owned(),
            start: partition.offset + t,
        })
        .collect())
}

/// An owned query window.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryWindow {
    pub x: Array2<f64>,
    pub y_true: Array2<f64>,
    /// The `seq_len` rows after the target, when the partition has them.
    pub f_true: Option<Array2<f64>>,
    pub start: usize,
}

/// All `seq_len + pred_len` windows of a partition, held as views into it.
#[derive(Debug, Clone)]
pub struct WindowSet {
    partition: Partition,
    seq_len: usize,
    pred_len: usize,
    starts: Vec<usize>,
}

impl WindowSet {
    pub fn new(partition: Partition, seq_len: usize, pred_len: usize) -> Result<Self> {
        if seq_len == 0 || pred_len == 0 {
            return Err(Error::config("seq_len and pred_len must be positive"));
        }
        if partition.len() < seq_len + pred_len {
            return Err(Error::TooShort {
                what: "partition for windowing".into(),
                needed: seq_len + pred_len,
                available: partition.len(),
            });
        }
        let starts = (0..=partition.len() - seq_len - pred_len).collect();
        Ok(Self {
            partition,
            seq_len,
            pred_len,
            starts,
        })
    }

    /// Keeps only the first `n` windows.
    pub fn truncated(mut self, n: usize) -> Self {
        self.starts.truncate(n);
        self
    }

    /// Keeps every `step`-th window.
    pub fn strided(mut self, step: usize) -> Self {
        let step = step.max(1);
        self.starts = self.starts.into_iter().step_by(step).collect();
        self
    }

    /// Keeps the windows at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            partition: self.partition.clone(),
            seq_len: self.seq_len,
            pred_len: self.pred_len,
            starts: positions.iter().map(|&i| self.starts[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn pred_len(&self) -> usize {
        self.pred_len
    }

    pub fn channels(&self) -> usize {
        self.partition.channels()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Start row of window `i` in series coordinates.
    pub fn start(&self, i: usize) -> usize {
        self.partition.offset + self.starts[i]
    }

    pub fn x(&self, i: usize) -> ArrayView2<'_, f64> {
        let t = self.starts[i];
        self.partition.values.slice(s![t..t + self.seq_len, ..])
    }

    pub fn y(&self, i: usize) -> ArrayView2<'_, f64> {
        let t = self.starts[i] + self.seq_len;
        self.partition.values.slice(s![t..t + self.pred_len, ..])
    }

    pub fn f_true(&self, i: usize) -> Option<ArrayView2<'_, f64>> {
        let t = self.starts[i] + self.seq_len + self.pred_len;
        (t + self.seq_len <= self.partition.len()).then(|| self.partition.values.slice(s![t..t + self.seq_len, ..]))
    }

    pub fn window(&self, i: usize) -> QueryWindow {
        QueryWindow {
            x: self.x(i).to_owned(),
            y_true: self.y(i).to_owned(),
            f_true: self.f_true(i).map(|v| v.to_owned()),
            start: self.start(i),
        }
    }
}
