//! Seeded synthetic tasks, each isolating one modeling mechanism.
//!
//! * spatial: fake samples carry a bright square in the face image.
//! * stream identity: every sample carries a square in exactly one stream;
//!   the label says which (face → real, UV → fake). The unordered pair of
//!   images has the same distribution in both classes.
//! * temporal flicker: every frame is shifted by `±delta`; fake videos
//!   alternate the sign frame to frame, real videos keep it fixed. A single
//!   frame carries no label information.
//!
//! Pixels are `clamp(0.5 + noise + signal)` rounded to the 8-bit grid so
//! that images survive a P6 round trip exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ppm::to_level;
use super::{Dataset, FrameSample, Label, VideoSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frames per generated video.
    pub frames: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            frames: 9,
        }
    }
}

impl Geometry {
    fn check(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::config(format!("degenerate geometry {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    /// `+amplitude` everywhere in the square.
    Flat,
    /// `±amplitude` alternating pixel by pixel; zero mean over the square.
    Checker,
    /// `+amplitude` on alternating pixels and 0 in between.
    Dots,
}

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Flat => "flat",
            Texture::Checker => "checker",
            Texture::Dots => "dots",
        }
    }
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Texture::Flat),
            "checker" => Ok(Texture::Checker),
            "dots" => Ok(Texture::Dots),
            _ => Err(Error::config(format!("unknown texture {s:?} (expected flat, checker or dots)"))),
        }
    }
}

/// An axis-aligned square added to every channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub amplitude: f32,
    pub texture: Texture,
}

impl PatternSpec {
    fn check(&self, g: &Geometry) -> Result<()> {
        if self.size == 0 || self.top + self.size > g.height || self.left + self.size > g.width {
            return Err(Error::config(format!(
                "pattern {self:?} does not fit a {}x{} image",
                g.height, g.width
            )));
        }
        Ok(())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.size).contains(&y) && (self.left..self.left + self.size).contains(&x)
    }

    /// Unit-amplitude template value at `(y, x)`; zero outside the square.
    pub fn sign(&self, y: usize, x: usize) -> f32 {
        match (self.contains(y, x), self.texture) {
            (false, _) => 0.0,
            (true, Texture::Flat) => 1.0,
            (true, Texture::Checker) if (y + x) % 2 == 0 => 1.0,
            (true, Texture::Checker) => -1.0,
            (true, Texture::Dots) if (y + x) % 2 == 0 => 1.0,
            (true, Texture::Dots) => 0.0,
        }
    }

    /// Mean over the region of every channel of pixel times template sign.
    /// For a flat pattern this is the region mean.
    pub fn response(&self, image: &Tensor<f32>) -> f64 {
        let s = image.shape();
        let (h, w) = (s[1], s[2]);
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..s[0] {
            for y in self.top..self.top + self.size {
                for x in self.left..self.left + self.size {
                    total += f64::from(self.sign(y, x) * image.data()[(c * h + y) * w + x]);
                    count += 1;
                }
            }
        }
        total / count as f64
    }
}

/// Signal and noise levels of the synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskParams {
    pub noise_std: f32,
    pub spatial_pattern: PatternSpec,
    pub stream_pattern: PatternSpec,
    pub flicker_delta: f32,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            spatial_pattern: PatternSpec {
                top: 8,
                left: 8,
                size: 8,
                amplitude: 0.3,
                texture: Texture::Flat,
            },
            stream_pattern: PatternSpec {
                top: 16,
                left: 16,
                size: 8,
                amplitude: 0.3,
                texture: Texture::Checker,
            },
            flicker_delta: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Spatial,
    Stream,
    Flicker,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Spatial => "spatial",
            TaskKind::Stream => "stream",
            TaskKind::Flicker => "flicker",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(TaskKind::Spatial),
            "stream" => Ok(TaskKind::Stream),
            "flicker" => Ok(TaskKind::Flicker),
            _ => Err(Error::config(format!(
                "unknown task {s:?} (expected spatial, stream or flicker)"
            ))),
        }
    }
}

pub fn gen_task(kind: TaskKind, seed: u64, n: usize, geometry: Geometry, params: &TaskParams) -> Result<Dataset> {
    match kind {
        TaskKind::Spatial => gen_spatial_task(seed, n, geometry, params),
        TaskKind::Stream => gen_stream_identity_task(seed, n, geometry, params),
        TaskKind::Flicker => gen_temporal_flicker_task(seed, n, geometry, params),
    }
}

struct Painter {
    rng: ChaCha8Rng,
    noise: Normal<f32>,
    g: Geometry,
}

impl Painter {
    fn new(seed: u64, g: Geometry, noise_std: f32) -> Result<Self> {
        g.check()?;
        let noise = Normal::new(0.0, noise_std).map_err(|e| Error::config(format!("noise_std: {e}")))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            g,
        })
    }

    fn image(&mut self, offset: f32, pattern: Option<&PatternSpec>) -> Tensor<f32> {
        let Geometry {
            channels: c,
            height: h,
            width: w,
            ..
        } = self.g;
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.5 + offset + self.noise.sample(&mut self.rng);
                    if let Some(p) = pattern {
                        v += p.amplitude * p.sign(y, x);
                    }
                    data.push(f32::from(to_level(v)) / 255.0);
                }
            }
        }
        Tensor::new(vec![c, h, w], data).expect("geometry checked")
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 1 {
        return Err(Error::config("a balanced task needs n = 0 or n >= 2"));
    }
    Ok(())
}

/// Alternating labels: even index real, odd index fake.
fn label_of(i: usize) -> Label {
    if i % 2 == 0 {
        Label::Real
    } else {
        Label::Fake
    }
}

pub fn gen_spatial_task(seed: u64, n: usize, geometry: Geometry, params: &TaskParams) -> Result<Dataset> {
    check_n(n)?;
    params.spatial_pattern.check(&geometry)?;
    let mut p = Painter::new(seed, geometry, params.noise_std)?;
    let videos = (0..n)
        .map(|i| {
            let label = label_of(i);
            let pattern = (label == Label::Fake).then_some(&params.spatial_pattern);
            let frames = (0..geometry.frames)
                .map(|_| FrameSample {
                    face: p.image(0.0, pattern),
                    uv: p.image(0.0, None),
                })
                .collect();
            VideoSample {
                id: format!("spatial-{i:06}"),
                label,
                frames,
            }
        })
        .collect();
    Ok(Dataset::new(videos))
}

pub fn gen_stream_identity_task(seed: u64, n: usize, geometry: Geometry, params: &TaskParams) -> Result<Dataset> {
    check_n(n)?;
    params.stream_pattern.check(&geometry)?;
    let mut p = Painter::new(seed, geometry, params.noise_std)?;
    let pat = &params.stream_pattern;
    let videos = (0..n)
        .map(|i| {
            let label = label_of(i);
            let frames = (0..geometry.frames)
                .map(|_| {
                    let patterned = p.image(0.0, Some(pat));
                    let plain = p.image(0.0, None);
                    match label {
                        Label::Real => FrameSample {
                            face: patterned,
                            uv: plain,
                        },
                        Label::Fake => FrameSample {
                            face: plain,
                            uv: patterned,
                        },
                    }
                })
                .collect();
            VideoSample {
                id: format!("stream-{i:06}"),
                label,
                frames,
            }
        })
        .collect();
    Ok(Dataset::new(videos))
}

pub fn gen_temporal_flicker_task(seed: u64, n: usize, geometry: Geometry, params: &TaskParams) -> Result<Dataset> {
    check_n(n)?;
    if geometry.frames < 2 {
        return Err(Error::config("the flicker task needs at least 2 frames per video"));
    }
    let mut p = Painter::new(seed, geometry, params.noise_std)?;
    let delta = params.flicker_delta;
    let videos = (0..n)
        .map(|i| {
            let label = label_of(i);
            let start: f32 = if p.rng.gen::<bool>() { 1.0 } else { -1.0 };
            let frames = (0..geometry.frames)
                .map(|t| {
                    let sign = match label {
                        Label::Fake if t % 2 == 1 => -start,
                        _ => start,
                    };
                    FrameSample {
                        face: p.image(sign * delta, None),
                        uv: p.image(sign * delta, None),
                    }
                })
                .collect();
            VideoSample {
                id: format!("flicker-{i:06}"),
                label,
                frames,
            }
        })
        .collect();
    Ok(Dataset::new(videos))
}
