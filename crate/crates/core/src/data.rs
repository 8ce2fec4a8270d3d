//! Multivariate series loading, z-score normalization, splitting and
//! sliding windows.

use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to standard deviations before dividing.
pub const STD_EPS: f64 = 1e-8;

/// `K` entities observed over `L` timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub names: Vec<String>,
    /// One row of length `L` per entity.
    pub values: Vec<Vec<f64>>,
    /// Per-timestep anomaly labels, `true` = anomalous.
    pub labels: Option<Vec<bool>>,
    pub timestamps: Option<Vec<i64>>,
}

impl SeriesTable {
    pub fn new(
        names: Vec<String>,
        values: Vec<Vec<f64>>,
        labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        let table = Self {
            names,
            values,
            labels,
            timestamps: None,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.names.len() != self.values.len() {
            return Err(Error::Config(format!(
                "need at least one entity with a name each ({} names, {} rows)",
                self.names.len(),
                self.values.len()
            )));
        }
        let len = self.values[0].len();
        if len < 2 {
            return Err(Error::Config(format!(
                "need at least 2 timesteps, got {len}"
            )));
        }
        if self.values.iter().any(|row| row.len() != len) {
            return Err(Error::Config("entity rows differ in length".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != len {
                return Err(Error::Config(format!(
                    "{} labels for {len} timesteps",
                    labels.len()
                )));
            }
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != len {
                return Err(Error::Config(format!(
                    "{} timestamps for {len} timesteps",
                    ts.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Copy without labels, as handed to the trainer.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Timesteps in `range` as a new table.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Usage(format!(
                "range {range:?} outside series of length {}",
                self.len()
            )));
        }
        let table = Self {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|r| r[range.clone()].to_vec())
                .collect(),
            labels: self.labels.as_ref().map(|l| l[range.clone()].to_vec()),
            timestamps: self.timestamps.as_ref().map(|t| t[range.clone()].to_vec()),
        };
        Ok(table)
    }
}

/// Read a series from CSV.
///
/// The header names the entities. An optional leading `timestamp` column
/// holds integers and an optional trailing `label` column holds 0/1.
pub fn load_series(path: impl AsRef<Path>) -> Result<SeriesTable> {
    let mut text = String::new();
    File::open(path.as_ref())?.read_to_string(&mut text)?;
    parse_series(&text)
}

pub fn parse_series(text: &str) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse {
            line: 1,
            msg: "missing header row".into(),
        });
    }
    let has_ts = header
        .first()
        .is_some_and(|h| h.eq_ignore_ascii_case("timestamp"));
    let has_label = header.len() > 1
        && header
            .last()
            .is_some_and(|h| h.eq_ignore_ascii_case("label"));
    let first = usize::from(has_ts);
    let end = header.len() - usize::from(has_label);
    if first >= end {
        return Err(Error::Parse {
            line: 1,
            msg: "no entity columns".into(),
        });
    }
    let names = header[first..end].to_vec();
    let mut values = vec![Vec::new(); names.len()];
    let mut labels = Vec::new();
    let mut timestamps = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        if has_ts {
            let ts = record[0].parse::<i64>().map_err(|_| Error::Parse {
                line,
                msg: format!("timestamp `{}` is not an integer", &record[0]),
            })?;
            if timestamps.last().is_some_and(|&prev| ts < prev) {
                return Err(Error::Parse {
                    line,
                    msg: "timestamps are not monotone".into(),
                });
            }
            timestamps.push(ts);
        }
        for (col, row) in (first..end).zip(values.iter_mut()) {
            let cell = &record[col];
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!(
                        "`{cell}` in column `{}` is not a finite number",
                        header[col]
                    ),
                })?;
            row.push(v);
        }
        if has_label {
            let cell = &record[header.len() - 1];
            let flag = match cell.parse::<f64>() {
                Ok(0.0) => false,
                Ok(1.0) => true,
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("label `{cell}` is not 0 or 1"),
                    })
                }
            };
            labels.push(flag);
        }
    }
    let len = values[0].len();
    if len < 2 {
        return Err(Error::Parse {
            line: len + 1,
            msg: format!("need at least 2 data rows, found {len}"),
        });
    }
    Ok(SeriesTable {
        names,
        values,
        labels: has_label.then_some(labels),
        timestamps: has_ts.then_some(timestamps),
    })
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback_line);
    let msg = match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("expected {expected_len} fields, found {len}"),
        _ => e.to_string(),
    };
    Error::Parse { line, msg }
}

/// Write a series in the same CSV layout [`load_series`] reads.
pub fn write_series(table: &SeriesTable, mut out: impl Write) -> Result<()> {
    let mut header = Vec::new();
    if table.timestamps.is_some() {
        header.push("timestamp".to_string());
    }
    header.extend(table.names.iter().cloned());
    if table.labels.is_some() {
        header.push("label".to_string());
    }
    writeln!(out, "{}", header.join(","))?;
    for t in 0..table.len() {
        let mut row = Vec::with_capacity(header.len());
        if let Some(ts) = &table.timestamps {
            row.push(ts[t].to_string());
        }
        row.extend(table.values.iter().map(|r| r[t].to_string()));
        if let Some(labels) = &table.labels {
            row.push(if labels[t] { "1" } else { "0" }.to_string());
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Per-entity z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation (divides by N).
    pub std: Vec<f64>,
    pub fit_range: Range<usize>,
}

impl NormStats {
    pub fn fit(table: &SeriesTable, fit_range: Range<usize>) -> Result<Self> {
        if fit_range.start >= fit_range.end || fit_range.end > table.len() {
            return Err(Error::Config(format!(
                "fit range {fit_range:?} is not a nonempty subrange of [0, {})",
                table.len()
            )));
        }
        let n = fit_range.len() as f64;
        let (mean, std) = table
            .values
            .iter()
            .map(|row| {
                let xs = &row[fit_range.clone()];
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .unzip();
        Ok(Self {
            mean,
            std,
            fit_range,
        })
    }

    /// Indices of entities whose std falls below [`STD_EPS`].
    pub fn constant_entities(&self) -> Vec<usize> {
        (0..self.std.len())
            .filter(|&k| self.std[k] < STD_EPS)
            .collect()
    }

    /// Normalize every timestep of `table` with these statistics.
    pub fn apply(&self, table: &SeriesTable) -> Result<SeriesTable> {
        if table.num_entities() != self.mean.len() {
            return Err(Error::Config(format!(
                "normalization fitted on {} entities, table has {}",
                self.mean.len(),
                table.num_entities()
            )));
        }
        let values = table
            .values
            .iter()
            .enumerate()
            .map(|(k, row)| {
                if self.std[k] < STD_EPS {
                    vec![0.0; row.len()]
                } else {
                    let s = self.std[k].max(STD_EPS);
                    row.iter().map(|x| (x - self.mean[k]) / s).collect()
                }
            })
            .collect();
        Ok(SeriesTable {
            values,
            ..table.clone()
        })
    }
}

/// Fit statistics on `fit_range` and normalize the whole table with them.
pub fn fit_normalize(
    table: &SeriesTable,
    fit_range: Range<usize>,
) -> Result<(SeriesTable, NormStats)> {
    let stats = NormStats::fit(table, fit_range)?;
    for k in stats.constant_entities() {
        warn!(
            "entity `{}` is constant over the fit range; normalized to zeros",
            table.names[k]
        );
    }
    let normalized = stats.apply(table)?;
    Ok((normalized, stats))
}

/// `B` windows of `K` entities by `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// Shape `[B, K, T]`.
    pub values: Tensor,
    /// Start index of each window in the source series.
    pub starts: Vec<usize>,
    /// Window labels (any anomalous step inside), when the source has labels.
    pub labels: Option<Vec<bool>>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn window_len(&self) -> usize {
        self.values.shape()[2]
    }

    /// Windows at the given positions, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Usage("empty window selection".into()));
        }
        let per = self.num_entities() * self.window_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Usage(format!("window {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.values.data()[i * per..(i + 1) * per]);
        }
        Ok(Self {
            values: Tensor::new(
                vec![idx.len(), self.num_entities(), self.window_len()],
                data,
            )?,
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
    }

    /// Stack batches that share `K` and `T`.
    pub fn concat(parts: &[WindowBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("no batches to join".into()))?;
        let (k, t) = (first.num_entities(), first.window_len());
        let mut data = Vec::new();
        let mut starts = Vec::new();
        let mut labels = Some(Vec::new());
        for p in parts {
            if p.num_entities() != k || p.window_len() != t {
                return Err(Error::shape("concat_windows", "mismatched K or T"));
            }
            data.extend_from_slice(p.values.data());
            starts.extend_from_slice(&p.starts);
            labels = match (labels, &p.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
        }
        Ok(Self {
            values: Tensor::new(vec![starts.len(), k, t], data)?,
            starts,
            labels,
        })
    }
}

/// Number of windows of size `window` with stride `stride` over `len` steps.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > len {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Slide a window of `window` steps with stride `stride` over the whole table.
pub fn make_windows(table: &SeriesTable, window: usize, stride: usize) -> Result<WindowBatch> {
    make_windows_in(table, 0..table.len(), window, stride)
}

/// Windows lying entirely inside `range`; starts are absolute indices.
pub fn make_windows_in(
    table: &SeriesTable,
    range: Range<usize>,
    window: usize,
    stride: usize,
) -> Result<WindowBatch> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window ({window}) and stride ({stride}) must be at least 1"
        )));
    }
    if range.end > table.len() || range.start >= range.end {
        return Err(Error::Config(format!(
            "range {range:?} outside series of length {}",
            table.len()
        )));
    }
    if window > range.len() {
        return Err(Error::Config(format!(
            "window size {window} exceeds series length {}",
            range.len()
        )));
    }
    let n = window_count(range.len(), window, stride);
    let k = table.num_entities();
    let starts: Vec<usize> = (0..n).map(|i| range.start + i * stride).collect();
    let mut data = Vec::with_capacity(n * k * window);
    for &s in &starts {
        for row in &table.values {
            data.extend_from_slice(&row[s..s + window]);
        }
    }
    let labels = table.labels.as_ref().map(|l| {
        starts
            .iter()
            .map(|&s| l[s..s + window].iter().any(|&b| b))
            .collect()
    });
    Ok(WindowBatch {
        values: Tensor::new(vec![n, k, window], data)?,
        starts,
        labels,
    })
}

/// Contiguous train/validation/test fractions; test takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl SplitFractions {
    pub fn ranges(&self, len: usize) -> Result<SplitRanges> {
        if !(self.train > 0.0 && self.val >= 0.0 && self.train + self.val <= 1.0) {
            return Err(Error::Config(format!(
                "invalid split fractions train={} val={}",
                self.train, self.val
            )));
        }
        let train_end = (self.train * len as f64).round() as usize;
        let val_end = ((self.train + self.val) * len as f64).round() as usize;
        Ok(SplitRanges {
            train: 0..train_end,
            val: train_end..val_end.min(len),
            test: val_end.min(len)..len,
        })
    }
}

impl SplitRanges {
    pub fn get(&self, name: SplitName, len: usize) -> Range<usize> {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
            SplitName::All => 0..len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: Vec<Vec<f64>>) -> SeriesTable {
        let names = (0..rows.len()).map(|k| format!("e{k}")).collect();
        SeriesTable::new(names, rows, None).unwrap()
    }

    #[test]
    fn loads_three_columns_without_labels() {
        let t = parse_series("a,b,c\n1,2,3\n4,5,6\n7,8,9\n1,1,1\n0,0,0\n").unwrap();
        assert_eq!(t.num_entities(), 3);
        assert_eq!(t.len(), 5);
        assert!(t.labels.is_none());
        assert_eq!(t.values[1], vec![2., 5., 8., 1., 0.]);
    }

    #[test]
    fn loads_label_column() {
        let t = parse_series("a,b,label\n1,2,0\n3,4,1\n5,6,0\n").unwrap();
        assert_eq!(t.num_entities(), 2);
        assert_eq!(t.labels, Some(vec![false, true, false]));
    }

    #[test]
    fn loads_timestamp_column() {
        let t = parse_series("timestamp,a\n10,1.5\n11,2.5\n").unwrap();
        assert_eq!(t.timestamps, Some(vec![10, 11]));
        assert_eq!(t.names, vec!["a"]);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(parse_series(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_series("a,b\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn ragged_row_reports_line() {
        match parse_series("a,b\n1,2\n3\n4,5\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_line() {
        match parse_series("a,b\n1,2\n3,4\nx,5\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_then_parse_roundtrips() {
        let mut t = table(vec![vec![0.1, -2.5e-7, 3.0], vec![1.0, 2.0, 1e10]]);
        t.labels = Some(vec![false, true, false]);
        let mut buf = Vec::new();
        write_series(&t, &mut buf).unwrap();
        let back = parse_series(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn zscore_of_one_two_three() {
        let (n, stats) = fit_normalize(&table(vec![vec![1., 2., 3.]]), 0..3).unwrap();
        assert_eq!(stats.mean[0], 2.0);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in n.values[0].iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_row_normalizes_to_zeros() {
        let (n, stats) = fit_normalize(&table(vec![vec![5., 5., 5.]]), 0..3).unwrap();
        assert_eq!(n.values[0], vec![0.0; 3]);
        assert_eq!(stats.constant_entities(), vec![0]);
    }

    #[test]
    fn standardized_row_is_unchanged() {
        let z = vec![-1.224744871391589, 0.0, 1.224744871391589];
        let (n, _) = fit_normalize(&table(vec![z.clone()]), 0..3).unwrap();
        for (a, b) in n.values[0].iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_ignore_values_outside_fit_range() {
        let a = table(vec![vec![1., 2., 3., 4., 5.]]);
        let b = table(vec![vec![1., 2., 3., 400., -5.]]);
        assert_eq!(
            NormStats::fit(&a, 0..3).unwrap(),
            NormStats::fit(&b, 0..3).unwrap()
        );
        assert!(NormStats::fit(&a, 2..2).is_err());
        assert!(NormStats::fit(&a, 0..6).is_err());
    }

    #[test]
    fn window_starts_for_default_sizes() {
        let t = table(vec![(0..100).map(f64::from).collect()]);
        let w = make_windows(&t, 60, 10).unwrap();
        assert_eq!(w.starts, vec![0, 10, 20, 30, 40]);
        assert_eq!(w.values.shape(), &[5, 1, 60]);
        assert_eq!(w.values.at(&[2, 0, 0]), 20.0);
    }

    #[test]
    fn window_equal_to_length_gives_one() {
        let t = table(vec![vec![0.0; 7]]);
        assert_eq!(make_windows(&t, 7, 3).unwrap().len(), 1);
        assert!(matches!(make_windows(&t, 8, 1), Err(Error::Config(_))));
    }

    #[test]
    fn window_label_is_or_of_steps() {
        let mut t = table(vec![vec![0.0; 100]]);
        let mut labels = vec![false; 100];
        labels[65] = true;
        t.labels = Some(labels);
        let w = make_windows(&t, 60, 10).unwrap();
        assert_eq!(w.labels, Some(vec![false, true, true, true, true]));
    }

    #[test]
    fn split_defaults_are_sixty_twenty_twenty() {
        let r = SplitFractions::default().ranges(2000).unwrap();
        assert_eq!(r.train, 0..1200);
        assert_eq!(r.val, 1200..1600);
        assert_eq!(r.test, 1600..2000);
    }
}
