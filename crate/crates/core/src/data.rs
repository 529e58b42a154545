//! Tabular loading, chronological splits and sliding windows.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Numeric table read from CSV; non-numeric columns (dates, labels) are
/// dropped on load.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    /// `[rows, columns]`.
    pub values: Tensor,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_csv(&mut reader, &path.display().to_string())
}

pub fn parse_csv_str(text: &str) -> Result<Table> {
    parse_csv(&mut csv::Reader::from_reader(text.as_bytes()), "<memory>")
}

fn parse_csv<R: std::io::Read>(reader: &mut csv::Reader<R>, origin: &str) -> Result<Table> {
    let csv_err = |e: csv::Error| Error::Data(format!("{origin}: {e}"));
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)?;
    let first = records
        .first()
        .ok_or_else(|| Error::Data(format!("{origin}: no data rows")))?;
    let keep: Vec<usize> = (0..header.len())
        .filter(|&c| {
            first
                .get(c)
                .is_some_and(|v| v.trim().parse::<f64>().is_ok())
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::Data(format!("{origin}: no numeric columns")));
    }
    let mut data = Vec::with_capacity(records.len() * keep.len());
    for (r, rec) in records.iter().enumerate() {
        for &c in &keep {
            let cell = rec.get(c).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{origin}: row {} column `{}`: `{cell}` is not a number",
                    r + 2,
                    header[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{origin}: row {} column `{}` is not finite",
                    r + 2,
                    header[c]
                )));
            }
            data.push(v);
        }
    }
    Ok(Table {
        columns: keep.iter().map(|&c| header[c].clone()).collect(),
        values: Tensor::new(vec![records.len(), keep.len()], data)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

/// Row ranges per split. A split too short to hold one window is merged into
/// its predecessor; a too-short train split takes over the next one instead.
pub fn split_rows(
    rows: usize,
    window: usize,
    fractions: &SplitFractions,
) -> Result<[Range<usize>; 3]> {
    fractions.validate()?;
    if rows < window {
        return Err(Error::Data(format!(
            "{rows} rows cannot hold a window of {window}"
        )));
    }
    let n_train = (rows as f64 * fractions.train).floor() as usize;
    let n_val = (rows as f64 * fractions.val).floor() as usize;
    let mut len = [n_train, n_val, rows - n_train - n_val];
    for i in (1..3).rev() {
        if len[i] < window {
            len[i - 1] += len[i];
            len[i] = 0;
        }
    }
    if len[0] < window {
        if let Some(j) = (1..3).find(|&j| len[j] > 0) {
            len[0] += len[j];
            len[j] = 0;
        }
    }
    let a = len[0];
    let b = a + len[1];
    Ok([0..a, a..b, b..rows])
}

/// Z-scored table cut into `(lookback, horizon)` windows per split.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub columns: Vec<String>,
    /// Normalized `[rows, features]`.
    pub data: Tensor,
    pub lookback: usize,
    pub horizon: usize,
    /// Columns the loss and metrics are computed on.
    pub targets: Vec<usize>,
    pub ranges: [Range<usize>; 3],
    /// Train-split column statistics used for normalization.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn make_windows(
    table: &Table,
    lookback: usize,
    horizon: usize,
    fractions: &SplitFractions,
    targets: &[usize],
) -> Result<WindowDataset> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config(
            "lookback and horizon must be positive".into(),
        ));
    }
    let (rows, f) = (table.rows(), table.columns.len());
    if targets.is_empty() || targets.iter().any(|&c| c >= f) {
        return Err(Error::Config(format!(
            "target columns {targets:?} out of range for {f} columns"
        )));
    }
    let ranges = split_rows(rows, lookback + horizon, fractions)?;
    let train = &ranges[0];
    let src = table.values.data();
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for j in 0..f {
        let col = train.clone().map(|r| src[r * f + j]);
        let n = train.len() as f64;
        mean[j] = col.clone().sum::<f64>() / n;
        let var = col.map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
        std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let data: Vec<f64> = src
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % f]) / std[i % f])
        .collect();
    Ok(WindowDataset {
        columns: table.columns.clone(),
        data: Tensor::new(vec![rows, f], data)?,
        lookback,
        horizon,
        targets: targets.to_vec(),
        ranges,
        mean,
        std,
    })
}

impl WindowDataset {
    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_windows(&self, split: Split) -> usize {
        (self.ranges[split.index()].len() + 1).saturating_sub(self.lookback + self.horizon)
    }

    /// Row where window `i` of `split` starts.
    pub fn window_start(&self, split: Split, i: usize) -> usize {
        self.ranges[split.index()].start + i
    }

    /// Inputs `[B, T, F]` and targets `[B, H, n_targets]` for the listed
    /// windows of `split`.
    pub fn batch(&self, split: Split, windows: &[usize]) -> Result<(Tensor, Tensor)> {
        let n = self.n_windows(split);
        let f = self.n_features();
        let (t, h) = (self.lookback, self.horizon);
        let src = self.data.data();
        let mut x = Vec::with_capacity(windows.len() * t * f);
        let mut y = Vec::with_capacity(windows.len() * h * self.targets.len());
        for &i in windows {
            if i >= n {
                return Err(Error::Data(format!(
                    "window {i} out of range for {n} {split:?} windows"
                )));
            }
            let s = self.window_start(split, i);
            x.extend_from_slice(&src[s * f..(s + t) * f]);
            for r in s + t..s + t + h {
                y.extend(self.targets.iter().map(|&c| src[r * f + c]));
            }
        }
        let b = windows.len();
        Ok((
            Tensor::new(vec![b, t, f], x)?,
            Tensor::new(vec![b, h, self.targets.len()], y)?,
        ))
    }

    /// Consecutive index chunks covering every window of `split`.
    pub fn chunks(&self, split: Split, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.n_windows(split)).collect();
        idx.chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}
