//! Architecture configuration and its token-count arithmetic.

use crate::autodiff::{conv_out_extent, Activation};
use crate::error::{Error, Result};

/// How segment embeddings are indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegmentMode {
    /// One row for the face stream and one for the UV stream.
    Two,
    /// A separate row for every (frame, stream) pair: row `2t` for the face
    /// tokens of frame `t`, row `2t + 1` for its UV tokens.
    #[default]
    PerFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

/// Convolutional feature extractor used by hybrid models: a stack of
/// `conv → bias → ReLU` stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: Vec<ConvStage>,
}

impl BackboneConfig {
    /// 3×299×299 → 2048×10×10.
    pub fn paper() -> Self {
        Self {
            stages: vec![
                ConvStage::new(16, 3, 2),
                ConvStage::new(32, 3, 2),
                ConvStage::new(64, 3, 2),
                ConvStage::new(64, 3, 2),
                ConvStage::new(64, 3, 1),
                ConvStage::new(2048, 6, 1),
            ],
        }
    }

    /// 3×32×32 → 64×4×4.
    pub fn desk() -> Self {
        Self {
            stages: vec![
                ConvStage::new(16, 3, 2),
                ConvStage::new(32, 3, 2),
                ConvStage::new(64, 4, 1),
            ],
        }
    }

    /// Output geometry `(channels, height, width)` for an input image.
    pub fn output_geometry(&self, channels: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        if self.stages.is_empty() {
            return Err(Error::config("backbone needs at least one stage"));
        }
        let (mut c, mut h, mut w) = (channels, height, width);
        for (i, s) in self.stages.iter().enumerate() {
            let next = (
                conv_out_extent(h, s.kernel, s.stride),
                conv_out_extent(w, s.kernel, s.stride),
            );
            match next {
                (Some(nh), Some(nw)) if s.out_channels > 0 => {
                    (c, h, w) = (s.out_channels, nh, nw);
                }
                _ => {
                    return Err(Error::config(format!(
                        "backbone stage {i} (kernel {}, stride {}, {} channels) does not fit a {c}x{h}x{w} input",
                        s.kernel, s.stride, s.out_channels
                    )))
                }
            }
        }
        Ok((c, h, w))
    }
}

/// Every architecture dimension and ablation switch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token dimension D.
    pub d_model: usize,
    /// Frames per sample T (1 for image models).
    pub frames: usize,
    /// Total token count N over all frames and streams (excluding the
    /// classification token).
    pub n_tokens: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// MLP hidden width as a multiple of D.
    pub mlp_ratio: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Patch side length for patch-tokenized models.
    pub patch_size: usize,
    pub hybrid: bool,
    pub backbone: BackboneConfig,
    pub freeze_backbone: bool,
    pub use_uv: bool,
    pub use_segment: bool,
    pub segment_mode: SegmentMode,
    pub use_pos: bool,
    pub activation: Activation,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_patch()
    }
}

impl ModelConfig {
    /// Hybrid video model at the paper's dimensions: 9 frames of 3×299×299
    /// face/UV pairs, 32 tokens per stream per frame, D = 768, 12 blocks.
    pub fn paper_video() -> Self {
        Self {
            d_model: 768,
            frames: 9,
            n_tokens: 576,
            n_heads: 12,
            n_blocks: 12,
            mlp_ratio: 4,
            channels: 3,
            height: 299,
            width: 299,
            patch_size: 16,
            hybrid: true,
            backbone: BackboneConfig::paper(),
            freeze_backbone: false,
            use_uv: true,
            use_segment: true,
            segment_mode: SegmentMode::PerFrame,
            use_pos: true,
            activation: Activation::Gelu,
            init_std: 0.02,
        }
    }

    /// Face-only patch image model at the paper's dimensions (18×18 grid
    /// of 16-pixel patches on 288×288 inputs).
    pub fn paper_patch_face() -> Self {
        Self {
            frames: 1,
            n_tokens: 324,
            height: 288,
            width: 288,
            hybrid: false,
            use_uv: false,
            use_segment: false,
            ..Self::paper_video()
        }
    }

    /// Small dual-stream patch image model on 3×32×32 inputs.
    pub fn desk_patch() -> Self {
        Self {
            d_model: 32,
            frames: 1,
            n_tokens: 32,
            n_heads: 2,
            n_blocks: 2,
            mlp_ratio: 4,
            channels: 3,
            height: 32,
            width: 32,
            patch_size: 8,
            hybrid: false,
            backbone: BackboneConfig::desk(),
            freeze_backbone: false,
            use_uv: true,
            use_segment: true,
            segment_mode: SegmentMode::PerFrame,
            use_pos: true,
            activation: Activation::Gelu,
            init_std: 0.1,
        }
    }

    /// Small dual-stream hybrid video model on 3×32×32 inputs.
    pub fn desk_hybrid_video() -> Self {
        Self {
            d_model: 64,
            frames: 9,
            n_tokens: 72,
            n_heads: 4,
            hybrid: true,
            ..Self::desk_patch()
        }
    }

    pub fn streams(&self) -> usize {
        if self.use_uv {
            2
        } else {
            1
        }
    }

    /// Tokens contributed by one stream of one frame.
    pub fn tokens_per_stream(&self) -> usize {
        self.n_tokens / (self.streams() * self.frames.max(1))
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.n_tokens / self.frames.max(1)
    }

    /// Sequence length including the classification token.
    pub fn seq_len(&self) -> usize {
        self.n_tokens + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn segment_rows(&self) -> usize {
        match self.segment_mode {
            SegmentMode::Two => 2,
            SegmentMode::PerFrame => 2 * self.frames,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Backbone feature-map geometry for hybrid models.
    pub fn feature_geometry(&self) -> Result<(usize, usize, usize)> {
        self.backbone.output_geometry(self.channels, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("frames", self.frames),
            ("n_tokens", self.n_tokens),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        let per = self.streams() * self.frames;
        if self.n_tokens % per != 0 {
            return err(format!(
                "n_tokens {} is not divisible by {per} (streams x frames)",
                self.n_tokens
            ));
        }
        let per_stream = self.tokens_per_stream();
        if self.hybrid {
            self.feature_geometry()?;
        } else {
            if self.patch_size == 0
                || self.height % self.patch_size != 0
                || self.width % self.patch_size != 0
            {
                return err(format!(
                    "{}x{} images are not divisible into {}-pixel patches",
                    self.height, self.width, self.patch_size
                ));
            }
            let grid = (self.height / self.patch_size) * (self.width / self.patch_size);
            if grid != per_stream {
                return err(format!(
                    "patch grid yields {grid} tokens per stream, n_tokens requires {per_stream}"
                ));
            }
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return err(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}
