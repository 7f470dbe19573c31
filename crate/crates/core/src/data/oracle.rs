//! Hand-built classifiers that bound what a model can achieve on the
//! synthetic tasks. Each fits a single threshold on a scalar feature of the
//! training set and reports accuracy on the test set.

use super::{Dataset, FrameSample, Label, PatternSpec};
use crate::error::{Error, Result};

/// `fake` iff the score lies strictly above (or below) the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRule {
    pub threshold: f64,
    pub fake_above: bool,
}

impl ThresholdRule {
    /// The rule with the best training accuracy over all midpoints between
    /// consecutive distinct scores and both orientations.
    pub fn fit(scores: &[(f64, Label)]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::data("cannot fit a threshold to no scores"));
        }
        if scores.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::NonFinite {
                what: "oracle score".into(),
            });
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let fakes = sorted.iter().filter(|(_, l)| *l == Label::Fake).count();
        // (correct, threshold, fake_above); a threshold below every score
        // calls everything fake or everything real
        let mut best = (fakes, f64::NEG_INFINITY, true);
        let mut consider = |correct: usize, t: f64, fake_above: bool| {
            if correct > best.0 {
                best = (correct, t, fake_above);
            }
        };
        consider(n - fakes, f64::NEG_INFINITY, false);
        let (mut fake_below, mut real_below) = (0usize, 0usize);
        for i in 0..n {
            match sorted[i].1 {
                Label::Fake => fake_below += 1,
                Label::Real => real_below += 1,
            }
            if i + 1 < n && sorted[i + 1].0 == sorted[i].0 {
                continue;
            }
            let t = if i + 1 < n {
                (sorted[i].0 + sorted[i + 1].0) / 2.0
            } else {
                f64::INFINITY
            };
            let fake_above_correct = real_below + (fakes - fake_below);
            consider(fake_above_correct, t, true);
            consider(n - fake_above_correct, t, false);
        }
        Ok(Self {
            threshold: best.1,
            fake_above: best.2,
        })
    }

    pub fn predict(&self, score: f64) -> Label {
        if (score > self.threshold) == self.fake_above {
            Label::Fake
        } else {
            Label::Real
        }
    }

    pub fn accuracy(&self, scores: &[(f64, Label)]) -> f64 {
        let hits = scores.iter().filter(|(s, l)| self.predict(*s) == *l).count();
        hits as f64 / scores.len().max(1) as f64
    }
}

/// One score per frame of every video.
pub fn frame_scores(dataset: &Dataset, f: impl Fn(&FrameSample) -> f64) -> Vec<(f64, Label)> {
    dataset
        .videos
        .iter()
        .flat_map(|v| v.frames.iter().map(|fr| (f(fr), v.label)).collect::<Vec<_>>())
        .collect()
}

/// One score per video from all of its frames.
pub fn video_scores(dataset: &Dataset, f: impl Fn(&[FrameSample]) -> f64) -> Vec<(f64, Label)> {
    dataset.videos.iter().map(|v| (f(&v.frames), v.label)).collect()
}

/// Fits on `train`, returns test accuracy.
pub fn threshold_oracle(train: &[(f64, Label)], test: &[(f64, Label)]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::data("oracle test set is empty"));
    }
    Ok(ThresholdRule::fit(train)?.accuracy(test))
}

/// Spatial task: the face's response to the pattern template.
pub fn region_mean_oracle(train: &Dataset, test: &Dataset, pattern: &PatternSpec) -> Result<f64> {
    let f = |fr: &FrameSample| pattern.response(&fr.face);
    threshold_oracle(&frame_scores(train, f), &frame_scores(test, f))
}

/// Stream task, knowing which image is which: uv response minus face
/// response.
pub fn stream_aware_oracle(train: &Dataset, test: &Dataset, pattern: &PatternSpec) -> Result<f64> {
    let f = |fr: &FrameSample| pattern.response(&fr.uv) - pattern.response(&fr.face);
    threshold_oracle(&frame_scores(train, f), &frame_scores(test, f))
}

/// Stream task, blind to stream identity: the best of several features that
/// are symmetric in the two images, picked on the training set.
pub fn pooled_stream_oracle(train: &Dataset, test: &Dataset, pattern: &PatternSpec) -> Result<f64> {
    let pair = |fr: &FrameSample| (pattern.response(&fr.face), pattern.response(&fr.uv));
    let features: [fn(f64, f64) -> f64; 4] = [
        |a, b| a + b,
        |a, b| (a - b).abs(),
        f64::max,
        f64::min,
    ];
    let mut best: Option<(f64, f64)> = None;
    for g in features {
        let score = |fr: &FrameSample| {
            let (a, b) = pair(fr);
            g(a, b)
        };
        let tr = frame_scores(train, score);
        let rule = ThresholdRule::fit(&tr)?;
        let fit = rule.accuracy(&tr);
        if best.map_or(true, |(b, _)| fit > b) {
            best = Some((fit, threshold_oracle(&tr, &frame_scores(test, score))?));
        }
    }
    Ok(best.expect("four candidate features").1)
}

fn mean(image: &crate::Tensor<f32>) -> f64 {
    image.data().iter().map(|&x| f64::from(x)).sum::<f64>() / image.len() as f64
}

/// Flicker task from one frame at a time: the better of the face mean and
/// its distance from mid-grey.
pub fn single_frame_oracle(train: &Dataset, test: &Dataset) -> Result<f64> {
    let a = |fr: &FrameSample| mean(&fr.face);
    let b = |fr: &FrameSample| (mean(&fr.face) - 0.5).abs();
    let (ta, tb) = (frame_scores(train, a), frame_scores(train, b));
    let (ra, rb) = (ThresholdRule::fit(&ta)?, ThresholdRule::fit(&tb)?);
    if ra.accuracy(&ta) >= rb.accuracy(&tb) {
        Ok(ra.accuracy(&frame_scores(test, a)))
    } else {
        Ok(rb.accuracy(&frame_scores(test, b)))
    }
}

/// Flicker task from the mean absolute change of face intensity between
/// consecutive frames.
pub fn frame_difference_oracle(train: &Dataset, test: &Dataset) -> Result<f64> {
    let f = |frames: &[FrameSample]| {
        let m: Vec<f64> = frames.iter().map(|fr| mean(&fr.face)).collect();
        m.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (m.len().max(2) - 1) as f64
    };
    threshold_oracle(&video_scores(train, f), &video_scores(test, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_finds_the_separating_midpoint() {
        let s = [(0.0, Label::Real), (0.25, Label::Real), (0.75, Label::Fake), (1.0, Label::Fake)];
        let r = ThresholdRule::fit(&s).unwrap();
        assert_eq!(r, ThresholdRule { threshold: 0.5, fake_above: true });
        assert_eq!(r.accuracy(&s), 1.0);
        let flipped: Vec<_> = s.iter().map(|&(x, l)| (-x, l)).collect();
        let r = ThresholdRule::fit(&flipped).unwrap();
        assert!(!r.fake_above);
        assert_eq!(r.accuracy(&flipped), 1.0);
    }

    #[test]
    fn ties_are_never_split() {
        let s = [(1.0, Label::Real), (1.0, Label::Fake), (1.0, Label::Fake)];
        let r = ThresholdRule::fit(&s).unwrap();
        assert!((r.accuracy(&s) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(ThresholdRule::fit(&[]).is_err());
        assert!(ThresholdRule::fit(&[(f64::NAN, Label::Real)]).is_err());
    }
}
