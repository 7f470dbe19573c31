//! Samples, datasets and temporal windowing.

mod manifest;
pub mod oracle;
mod ppm;
mod synth;

pub use manifest::{load_manifest, write_manifest, MANIFEST_HEADER};
pub use ppm::{read_ppm, resize_bilinear, write_ppm};
pub use synth::{
    gen_spatial_task, gen_stream_identity_task, gen_task, gen_temporal_flicker_task, Geometry, PatternSpec,
    TaskKind, TaskParams, Texture,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 0 = real, 1 = fake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            _ => Err(Error::data(format!("label {i} is not 0 (real) or 1 (fake)"))),
        }
    }
}

/// One face crop and its UV texture map, both `C×H×W` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub face: Tensor<f32>,
    pub uv: Tensor<f32>,
}

impl FrameSample {
    pub fn new(face: Tensor<f32>, uv: Tensor<f32>) -> Result<Self> {
        if face.shape() != uv.shape() || face.rank() != 3 {
            return Err(Error::data(format!(
                "face {:?} and uv {:?} must share a [C,H,W] geometry",
                face.shape(),
                uv.shape()
            )));
        }
        Ok(Self { face, uv })
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.face.shape();
        (s[0], s[1], s[2])
    }

    /// Exchanges the face and UV images.
    pub fn swapped(&self) -> Self {
        Self {
            face: self.uv.clone(),
            uv: self.face.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: Label,
    pub frames: Vec<FrameSample>,
}

/// Consecutive `frames`-long windows of a video, `stride` frames apart.
pub fn sample_windows(video: &VideoSample, frames: usize, stride: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if frames == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be positive"));
    }
    let len = video.frames.len();
    if len < frames {
        return Err(Error::data(format!(
            "video {:?} has {len} frames, fewer than the window length {frames}",
            video.id
        )));
    }
    Ok((0..=len - frames).step_by(stride).map(|s| s..s + frames).collect())
}

/// A window of one video, the unit the model classifies.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub video: usize,
    pub start: usize,
    pub frames: &'a [FrameSample],
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn new(videos: Vec<VideoSample>) -> Self {
        Self { videos }
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Every window of every video, in video order.
    pub fn windows(&self, frames: usize, stride: usize) -> Result<Vec<Window<'_>>> {
        let mut out = Vec::new();
        for (v, video) in self.videos.iter().enumerate() {
            for r in sample_windows(video, frames, stride)? {
                out.push(Window {
                    video: v,
                    start: r.start,
                    frames: &video.frames[r],
                    label: video.label,
                });
            }
        }
        Ok(out)
    }

    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        self.videos.first().and_then(|v| v.frames.first()).map(FrameSample::geometry)
    }

    /// Checks that every frame has the given geometry.
    pub fn check_geometry(&self, geometry: (usize, usize, usize)) -> Result<()> {
        for v in &self.videos {
            for f in &v.frames {
                if f.geometry() != geometry {
                    return Err(Error::data(format!(
                        "video {:?} has frame geometry {:?}, expected {geometry:?}",
                        v.id,
                        f.geometry()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(len: usize) -> VideoSample {
        let frames = (0..len)
            .map(|i| {
                let t = Tensor::full(&[1, 2, 2], i as f32);
                FrameSample::new(t.clone(), t).unwrap()
            })
            .collect();
        VideoSample {
            id: "v".into(),
            label: Label::Fake,
            frames,
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(sample_windows(&video(9), 9, 1).unwrap().len(), 1);
        assert_eq!(sample_windows(&video(11), 9, 1).unwrap(), vec![0..9, 1..10, 2..11]);
        assert_eq!(sample_windows(&video(11), 9, 2).unwrap(), vec![0..9, 2..11]);
        assert!(sample_windows(&video(3), 9, 1).is_err());
    }

    #[test]
    fn window_frames_match_source() {
        let ds = Dataset::new(vec![video(5)]);
        let ws = ds.windows(3, 1).unwrap();
        assert_eq!(ws.len(), 3);
        for w in ws {
            for (k, f) in w.frames.iter().enumerate() {
                assert_eq!(f, &ds.videos[0].frames[w.start + k]);
            }
        }
    }

    #[test]
    fn labels_round_trip() {
        assert_eq!(Label::from_index(1).unwrap(), Label::Fake);
        assert_eq!(Label::Real.index(), 0);
        assert!(Label::from_index(2).is_err());
    }
}
