//! Classification metrics, probability fusion and the cumulative-accuracy
//! table of the incremental protocol.
//!
//! The positive class is "fake" (label 1). Threshold decisions use
//! `prob_fake >= threshold`, with the threshold fixed at 0.5 by default.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub id: String,
    pub label: Label,
    pub prob_fake: f64,
}

impl ScoredPrediction {
    pub fn new(id: impl Into<String>, label: Label, prob_fake: f64) -> Result<Self> {
        if !(prob_fake.is_finite() && (0.0..=1.0).contains(&prob_fake)) {
            return Err(Error::data(format!("probability {prob_fake} outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            label,
            prob_fake,
        })
    }

    fn predicts_fake(&self, threshold: f64) -> bool {
        self.prob_fake >= threshold
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn non_empty(preds: &[ScoredPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no predictions".into()));
    }
    Ok(())
}

pub fn confusion(preds: &[ScoredPrediction], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for p in preds {
        match (p.predicts_fake(threshold), p.label) {
            (true, Label::Fake) => c.tp += 1,
            (true, Label::Real) => c.fp += 1,
            (false, Label::Real) => c.tn += 1,
            (false, Label::Fake) => c.fn_ += 1,
        }
    }
    c
}

pub fn accuracy(preds: &[ScoredPrediction], threshold: f64) -> Result<f64> {
    non_empty(preds)?;
    let c = confusion(preds, threshold);
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// Harmonic mean of precision and recall for the fake class; 0 when
/// precision + recall is 0 (including the case of no positive predictions
/// and no positive labels).
pub fn f1(preds: &[ScoredPrediction], threshold: f64) -> Result<f64> {
    non_empty(preds)?;
    let c = confusion(preds, threshold);
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if c.tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    })
}

/// Probability that a random fake outranks a random real sample, ties
/// counting one half, computed from average ranks.
pub fn auc(preds: &[ScoredPrediction]) -> Result<f64> {
    let n_pos = preds.iter().filter(|p| p.label == Label::Fake).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} fake and {n_neg} real"
        )));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].prob_fake.total_cmp(&preds[b].prob_fake));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]].prob_fake == preds[order[i]].prob_fake {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if preds[k].label == Label::Fake {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Averages the fake-class probabilities of two predictions for the same
/// sample.
pub fn fuse(a: &ScoredPrediction, b: &ScoredPrediction) -> Result<ScoredPrediction> {
    if a.id != b.id || a.label != b.label {
        return Err(Error::data(format!(
            "cannot fuse predictions for {:?} ({:?}) and {:?} ({:?})",
            a.id, a.label, b.id, b.label
        )));
    }
    Ok(ScoredPrediction {
        id: a.id.clone(),
        label: a.label,
        prob_fake: (a.prob_fake + b.prob_fake) / 2.0,
    })
}

/// Fuses two prediction sets matched by id; both must cover the same ids.
pub fn fuse_all(a: &[ScoredPrediction], b: &[ScoredPrediction]) -> Result<Vec<ScoredPrediction>> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "prediction sets differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let index: BTreeMap<&str, &ScoredPrediction> = b.iter().map(|p| (p.id.as_str(), p)).collect();
    a.iter()
        .map(|p| {
            let q = index
                .get(p.id.as_str())
                .ok_or_else(|| Error::data(format!("no matching prediction for {:?}", p.id)))?;
            fuse(p, q)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub counts: Confusion,
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(preds: &[ScoredPrediction], threshold: f64) -> Result<Self> {
        non_empty(preds)?;
        Ok(Self {
            accuracy: accuracy(preds, threshold)?,
            f1: f1(preds, threshold)?,
            auc: auc(preds).ok(),
            counts: confusion(preds, threshold),
            n: preds.len(),
        })
    }

    /// `metric<TAB>value` lines, optionally prefixed (e.g. `video.`).
    pub fn write_lines(&self, prefix: &str, out: &mut String) {
        let auc = self.auc.map_or_else(|| "nan".to_string(), |a| format!("{a}"));
        let _ = writeln!(out, "{prefix}auc\t{auc}");
        let _ = writeln!(out, "{prefix}f1\t{}", self.f1);
        let _ = writeln!(out, "{prefix}accuracy\t{}", self.accuracy);
        let _ = writeln!(out, "{prefix}tp\t{}", self.counts.tp);
        let _ = writeln!(out, "{prefix}fp\t{}", self.counts.fp);
        let _ = writeln!(out, "{prefix}tn\t{}", self.counts.tn);
        let _ = writeln!(out, "{prefix}fn\t{}", self.counts.fn_);
        let _ = writeln!(out, "{prefix}n\t{}", self.n);
    }

    /// Parses the lines written by [`write_lines`](Self::write_lines) with
    /// the same prefix.
    pub fn parse_lines(text: &str, prefix: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("report line {} has no tab", i + 1)))?;
            if let Some(k) = k.strip_prefix(prefix) {
                if !k.contains('.') {
                    map.insert(k.to_string(), v.to_string());
                }
            }
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::data(format!("report lacks {prefix}{k}")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(format!("report value {prefix}{k} is not a number")))
        };
        let count = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(format!("report value {prefix}{k} is not a count")))
        };
        let auc = float("auc")?;
        Ok(Self {
            accuracy: float("accuracy")?,
            f1: float("f1")?,
            auc: (!auc.is_nan()).then_some(auc),
            counts: Confusion {
                tp: count("tp")?,
                fp: count("fp")?,
                tn: count("tn")?,
                fn_: count("fn")?,
            },
            n: count("n")?,
        })
    }
}

/// Scores for every window of a dataset plus the per-video means.
#[derive(Debug, Clone, Default)]
pub struct DatasetScores {
    /// One prediction per window, id `"<video>@<start>"`.
    pub windows: Vec<ScoredPrediction>,
    /// One prediction per video (mean over its windows), id `"<video>"`.
    pub videos: Vec<ScoredPrediction>,
}

/// Scores `window`-frame windows of every video. A model whose frame count
/// equals `window` scores each window directly; a single-frame model scores
/// every frame and a window receives the mean over its frames.
pub fn score_dataset<F: Real>(model: &Model<F>, dataset: &Dataset, window: usize, stride: usize) -> Result<DatasetScores> {
    if dataset.is_empty() {
        return Err(Error::data("evaluation dataset is empty"));
    }
    let t = model.config().frames;
    if t != window && t != 1 {
        return Err(Error::data(format!(
            "a {t}-frame model cannot score {window}-frame windows"
        )));
    }
    let mut out = DatasetScores::default();
    for (v, w_list) in group_windows(dataset, window, stride)? {
        let video = &dataset.videos[v];
        let mut sum = 0.0;
        for start in &w_list {
            let frames = &video.frames[*start..*start + window];
            let p = if t == window {
                model.predict(frames)?
            } else {
                let mut s = 0.0;
                for f in frames {
                    s += model.predict(std::slice::from_ref(f))?;
                }
                s / frames.len() as f64
            };
            sum += p;
            out.windows
                .push(ScoredPrediction::new(format!("{}@{start}", video.id), video.label, p)?);
        }
        out.videos.push(ScoredPrediction::new(
            video.id.clone(),
            video.label,
            sum / w_list.len() as f64,
        )?);
    }
    Ok(out)
}

fn group_windows(dataset: &Dataset, window: usize, stride: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut grouped: Vec<(usize, Vec<usize>)> = Vec::new();
    for w in dataset.windows(window, stride)? {
        match grouped.last_mut() {
            Some((v, starts)) if *v == w.video => starts.push(w.start),
            _ => grouped.push((w.video, vec![w.start])),
        }
    }
    Ok(grouped)
}

/// Accuracy on each dataset of an ordered sequence plus their unweighted
/// mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeRow {
    pub accuracies: Vec<f64>,
    pub cumulative: f64,
}

impl CumulativeRow {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::data("cumulative accuracy over no datasets"));
        }
        let cumulative = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        Ok(Self {
            accuracies,
            cumulative,
        })
    }
}

/// Window-level accuracy of `model` on every dataset, in order.
pub fn cumulative_table<F: Real>(model: &Model<F>, datasets: &[&Dataset], stride: usize) -> Result<CumulativeRow> {
    if datasets.is_empty() {
        return Err(Error::data("cumulative accuracy over no datasets"));
    }
    let window = model.config().frames;
    let accs = datasets
        .iter()
        .map(|d| accuracy(&score_dataset(model, d, window, stride)?.windows, DEFAULT_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    CumulativeRow::from_accuracies(accs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(probs: &[f64], labels: &[usize]) -> Vec<ScoredPrediction> {
        probs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&p, &l))| ScoredPrediction::new(format!("s{i}"), Label::from_index(l).unwrap(), p).unwrap())
            .collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&preds(&[0.9, 0.1], &[1, 0]), 0.5).unwrap(), 1.0);
        let a = accuracy(&preds(&[0.6, 0.6, 0.4], &[1, 0, 0]), 0.5).unwrap();
        assert!((a - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], 0.5).is_err());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1(&preds(&[0.9, 0.1], &[1, 0]), 0.5).unwrap(), 1.0);
        // predictions [1,1,0] vs labels [1,0,0]: precision 1/2, recall 1
        let v = f1(&preds(&[0.9, 0.8, 0.2], &[1, 0, 0]), 0.5).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&preds(&[0.1, 0.2], &[0, 0]), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&preds(&[0.9, 0.8, 0.1, 0.05], &[1, 1, 0, 0])).unwrap(), 1.0);
        let v = auc(&preds(&[0.9, 0.8, 0.1, 0.3], &[1, 1, 1, 0])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(auc(&preds(&[0.4; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert!(matches!(auc(&preds(&[0.4, 0.6], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn fuse_cases() {
        let p = preds(&[0.2, 0.8], &[1, 1]);
        let q = ScoredPrediction { id: "s0".into(), ..p[1].clone() };
        assert_eq!(fuse(&p[0], &q).unwrap().prob_fake, 0.5);
        assert_eq!(fuse(&p[0], &p[0]).unwrap(), p[0]);
        assert!(fuse(&p[0], &p[1]).is_err());
    }

    #[test]
    fn cumulative_row_arithmetic() {
        let r = CumulativeRow::from_accuracies(vec![0.8]).unwrap();
        assert_eq!(r.cumulative, 0.8);
        assert!(CumulativeRow::from_accuracies(vec![]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = MetricsReport::compute(&preds(&[0.9, 0.3, 0.6, 0.2], &[1, 1, 0, 0]), 0.5).unwrap();
        let mut s = String::new();
        r.write_lines("", &mut s);
        r.write_lines("video.", &mut s);
        let back = MetricsReport::parse_lines(&s, "").unwrap();
        assert_eq!(back, r);
        assert_eq!(MetricsReport::parse_lines(&s, "video.").unwrap().n, 4);
    }
}
