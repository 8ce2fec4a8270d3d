//! Anomaly scores, IQR thresholds, flags, AUROC and the report.

use std::fmt::Write as _;
use std::io::Write;

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::FlowModel;

pub const DEFAULT_ENTITY_LAMBDA: f64 = 0.8;

/// Window scores `S_c` and per-entity scores `S_ck`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    /// `S_c`, the mean of the entity scores.
    pub window: Vec<f64>,
    /// `S_ck = −log p(x_k^c)`, one row of `K` per window.
    pub entity: Vec<Vec<f64>>,
    pub starts: Vec<usize>,
}

impl ScoreSeries {
    pub fn from_entity_scores(entity: Vec<Vec<f64>>, starts: Vec<usize>) -> Self {
        let window = entity
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        Self {
            window,
            entity,
            starts,
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.entity.first().map_or(0, Vec::len)
    }

    /// Scores of entity `k` across windows.
    pub fn entity_column(&self, k: usize) -> Vec<f64> {
        self.entity.iter().map(|row| row[k]).collect()
    }
}

/// Score windows in eval mode.
pub fn score(model: &FlowModel, windows: &WindowBatch) -> Result<ScoreSeries> {
    let k = model.num_entities();
    if windows.is_empty() {
        return Ok(ScoreSeries {
            window: vec![],
            entity: vec![],
            starts: vec![],
        });
    }
    model.check_windows(&windows.values)?;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut entity = Vec::with_capacity(windows.len());
    for chunk in idx.chunks(model.config.batch_size) {
        let part = windows.select(chunk)?;
        let nll = model.entity_nll(&part.values)?;
        entity.extend(nll.chunks(k).map(<[f64]>::to_vec));
    }
    Ok(ScoreSeries::from_entity_scores(
        entity,
        windows.starts.clone(),
    ))
}

/// Linear-interpolation percentile of sorted values, `q ∈ [0, 1]`.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `λ · (Q3 + 1.5 · (Q3 − Q1))`.
pub fn iqr_threshold(scores: &[f64], lambda: f64) -> Result<f64> {
    if scores.len() < 4 {
        return Err(Error::Usage(format!(
            "IQR threshold needs at least 4 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            op: "iqr_threshold".into(),
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = percentile_sorted(&sorted, 0.25);
    let q3 = percentile_sorted(&sorted, 0.75);
    Ok(lambda * (q3 + 1.5 * (q3 - q1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub global: f64,
    pub entity: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl ThresholdSet {
    /// Fit on training-split scores. `lambdas` holds one multiplier per
    /// entity; the global threshold always uses 1.
    pub fn fit(train: &ScoreSeries, lambdas: &[f64]) -> Result<Self> {
        let k = train.num_entities();
        if lambdas.len() != k {
            return Err(Error::Config(format!(
                "{} entity multipliers for {k} entities",
                lambdas.len()
            )));
        }
        let global = iqr_threshold(&train.window, 1.0)?;
        let entity = (0..k)
            .map(|j| iqr_threshold(&train.entity_column(j), lambdas[j]))
            .collect::<Result<_>>()?;
        Ok(Self {
            global,
            entity,
            lambdas: lambdas.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flags {
    pub window: Vec<bool>,
    pub entity: Vec<Vec<bool>>,
}

/// `score > threshold`, strictly.
pub fn flag(scores: &ScoreSeries, thresholds: &ThresholdSet) -> Flags {
    Flags {
        window: scores
            .window
            .iter()
            .map(|&s| s > thresholds.global)
            .collect(),
        entity: scores
            .entity
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&thresholds.entity)
                    .map(|(s, t)| s > t)
                    .collect()
            })
            .collect(),
    }
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, ties
/// sharing their average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both anomalous and normal windows".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auroc".into() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub entity_names: Vec<String>,
    pub scores: ScoreSeries,
    pub thresholds: ThresholdSet,
    pub flags: Flags,
    pub labels: Option<Vec<bool>>,
    pub auroc: Option<f64>,
}

impl AnomalyReport {
    /// Score `windows`, flag them against `thresholds`, and compute AUROC
    /// when labels with both classes are present.
    pub fn build(
        model: &FlowModel,
        windows: &WindowBatch,
        thresholds: ThresholdSet,
    ) -> Result<Self> {
        let scores = score(model, windows)?;
        let flags = flag(&scores, &thresholds);
        let auroc = match &windows.labels {
            Some(l) => match auroc(&scores.window, l) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        Ok(Self {
            entity_names: model.entity_names.clone(),
            scores,
            thresholds,
            flags,
            labels: windows.labels.clone(),
            auroc,
        })
    }

    /// `window_start,S_c,flag,S_c<name>...,flag_<name>...`
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut header = vec!["window_start".to_string(), "S_c".into(), "flag".into()];
        header.extend(self.entity_names.iter().map(|n| format!("S_c_{n}")));
        header.extend(self.entity_names.iter().map(|n| format!("flag_{n}")));
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.scores.len() {
            let mut row = vec![
                self.scores.starts[i].to_string(),
                self.scores.window[i].to_string(),
                u8::from(self.flags.window[i]).to_string(),
            ];
            row.extend(self.scores.entity[i].iter().map(f64::to_string));
            row.extend(
                self.flags.entity[i]
                    .iter()
                    .map(|&f| u8::from(f).to_string()),
            );
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let n = self.scores.len();
        let flagged = self.flags.window.iter().filter(|&&f| f).count();
        let _ = writeln!(s, "windows: {n}");
        let _ = writeln!(s, "flagged: {flagged}");
        if let Some(labels) = &self.labels {
            let anomalous = labels.iter().filter(|&&l| l).count();
            let _ = writeln!(s, "labeled_anomalous: {anomalous}");
        }
        if let Some(a) = self.auroc {
            let _ = writeln!(s, "auroc: {a:.6}");
        }
        let _ = writeln!(s, "threshold: {}", self.thresholds.global);
        for (k, name) in self.entity_names.iter().enumerate() {
            let count = self.flags.entity.iter().filter(|row| row[k]).count();
            let _ = writeln!(
                s,
                "threshold_{name}: {} (lambda {}, flagged {count})",
                self.thresholds.entity[k], self.thresholds.lambdas[k]
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqr_of_one_to_five() {
        assert_eq!(iqr_threshold(&[1., 2., 3., 4., 5.], 1.0).unwrap(), 7.0);
        assert_eq!(iqr_threshold(&[5., 3., 1., 4., 2.], 1.0).unwrap(), 7.0);
    }

    #[test]
    fn iqr_of_constant_scores() {
        assert_eq!(iqr_threshold(&[2.5; 6], 1.0).unwrap(), 2.5);
    }

    #[test]
    fn iqr_scales_linearly_in_lambda() {
        let s = [0.3, 1.7, -2.0, 4.4, 0.9, 3.1];
        let base = iqr_threshold(&s, 1.0).unwrap();
        assert!((iqr_threshold(&s, 0.8).unwrap() - 0.8 * base).abs() < 1e-15);
    }

    #[test]
    fn iqr_needs_four_scores() {
        assert!(matches!(
            iqr_threshold(&[1., 2., 3.], 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn window_score_is_entity_mean() {
        let s = ScoreSeries::from_entity_scores(vec![vec![1.0, 3.0]], vec![0]);
        assert_eq!(s.window, vec![2.0]);
    }

    #[test]
    fn flag_is_strict() {
        let scores =
            ScoreSeries::from_entity_scores(vec![vec![1.0], vec![2.0], vec![3.0]], vec![0, 1, 2]);
        let t = ThresholdSet {
            global: 2.0,
            entity: vec![2.0],
            lambdas: vec![1.0],
        };
        let f = flag(&scores, &t);
        assert_eq!(f.window, vec![false, false, true]);
        assert_eq!(f.entity, vec![vec![false], vec![false], vec![true]]);
        let empty = ScoreSeries::from_entity_scores(vec![], vec![]);
        assert!(flag(&empty, &t).window.is_empty());
    }

    #[test]
    fn auroc_perfect_separation() {
        assert_eq!(
            auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
    }

    #[test]
    fn auroc_all_ties_is_chance() {
        assert_eq!(
            auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
    }

    #[test]
    fn auroc_three_scores() {
        // Positives {3, 1} against negative {2}: one win, one loss.
        assert_eq!(auroc(&[3.0, 2.0, 1.0], &[true, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        assert!(matches!(
            auroc(&[1.0, 2.0], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
