//! Input assembly: tokenization of face and UV images, segment and
//! positional embeddings, and the classification token.
//!
//! A frame contributes `[face tokens; uv tokens]` (or face tokens only for
//! face-only models). Frames are stacked in temporal order, the
//! classification token is prepended and the positional table is added,
//! giving an `(N + 1) × D` sequence.

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, SegmentMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Face,
    Uv,
}

impl Stream {
    fn offset(self) -> usize {
        match self {
            Stream::Face => 0,
            Stream::Uv => 1,
        }
    }
}

/// Tokens of one stream of one frame.
#[derive(Debug, Clone, Copy)]
pub struct TokenMatrix {
    pub tokens: Var,
    pub stream: Stream,
    pub frame_index: usize,
}

/// Tape handles of the learnable embedding tables.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    /// `[S × D]`, S = 2 or 2T depending on the segment mode.
    pub seg: Option<Var>,
    /// `[(N + 1) × D]`.
    pub pos: Option<Var>,
    /// `[1 × D]`.
    pub cls: Var,
}

/// Index of the segment row for a stream of a frame.
pub fn segment_row(mode: SegmentMode, stream: Stream, frame_index: usize) -> usize {
    match mode {
        SegmentMode::Two => stream.offset(),
        SegmentMode::PerFrame => 2 * frame_index + stream.offset(),
    }
}

/// Splits an image into non-overlapping patches and projects each
/// flattened patch (`C·p²` values) to D with `proj[C·p² × D]` plus `bias[D]`.
pub fn patchify(tape: &mut Tape<impl crate::Real>, image: Var, patch_size: usize, proj: Var, bias: Var) -> Result<Var> {
    let patches = tape.extract_patches(image, patch_size)?;
    let projected = tape.matmul(patches, proj)?;
    tape.add_row(projected, bias)
}

/// Runs the convolutional stages `(kernel, bias, stride)`, each followed by
/// ReLU.
pub fn backbone_features<F: crate::Real>(tape: &mut Tape<F>, image: Var, stages: &[(Var, Var, usize)]) -> Result<Var> {
    let mut x = image;
    for &(w, b, stride) in stages {
        let y = tape.conv2d(x, w, stride)?;
        let y = tape.add_channel(y, b)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Maps a `C_f × h × w` feature map to tokens: a 1×1 convolution to D
/// channels (`conv_w[D × C_f × 1 × 1]`, `conv_b[D]`), reshaped to
/// `(h·w) × D`, then mixed along the token axis by `mix[n_tok × h·w]`.
pub fn tokens_from_features<F: crate::Real>(
    tape: &mut Tape<F>,
    features: Var,
    conv_w: Var,
    conv_b: Var,
    mix: Var,
) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 {
        return Err(Error::dim(format!("feature map must be [C,h,w], got {fs:?}")));
    }
    let hw = fs[1] * fs[2];
    let mix_shape = tape.shape(mix).to_vec();
    if mix_shape.len() != 2 || mix_shape[1] != hw {
        return Err(Error::dim(format!(
            "token mixer {mix_shape:?} does not take {hw} feature positions"
        )));
    }
    let y = tape.conv2d(features, conv_w, 1)?;
    let y = tape.add_channel(y, conv_b)?;
    let d = tape.shape(y)[0];
    let y = tape.reshape(y, &[d, hw])?;
    let rows = tape.transpose(y)?;
    tape.matmul(mix, rows)
}

/// Concatenates the face and UV tokens of one frame and adds their
/// segment rows when segment embeddings are enabled.
pub fn assemble_frame<F: crate::Real>(
    tape: &mut Tape<F>,
    face: TokenMatrix,
    uv: Option<TokenMatrix>,
    seg: Option<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let per_stream = cfg.tokens_per_stream();
    let mut parts = vec![face];
    if face.stream != Stream::Face {
        return Err(Error::data("first token matrix of a frame must be the face stream"));
    }
    match (cfg.use_uv, uv) {
        (true, Some(u)) => {
            if u.stream != Stream::Uv {
                return Err(Error::data("second token matrix of a frame must be the UV stream"));
            }
            if u.frame_index != face.frame_index {
                return Err(Error::data(format!(
                    "face tokens of frame {} paired with UV tokens of frame {}",
                    face.frame_index, u.frame_index
                )));
            }
            parts.push(u);
        }
        (true, None) => return Err(Error::data("dual-stream model requires UV tokens")),
        (false, Some(_)) => return Err(Error::data("face-only model was given UV tokens")),
        (false, None) => {}
    }
    if face.frame_index >= cfg.frames {
        return Err(Error::data(format!(
            "frame index {} out of range for {} frames",
            face.frame_index, cfg.frames
        )));
    }
    let d = cfg.d_model;
    let mut rows = Vec::with_capacity(parts.len());
    for part in parts {
        let shape = tape.shape(part.tokens);
        if shape != [per_stream, d] {
            return Err(Error::dim(format!(
                "{:?} stream carries {shape:?} tokens, expected [{per_stream}, {d}]",
                part.stream
            )));
        }
        let v = match (cfg.use_segment, seg) {
            (true, Some(seg)) => {
                let r = segment_row(cfg.segment_mode, part.stream, part.frame_index);
                let row = tape.slice_rows(seg, r, 1)?;
                tape.add_row(part.tokens, row)?
            }
            (true, None) => return Err(Error::data("segment embeddings enabled but no table given")),
            (false, _) => part.tokens,
        };
        rows.push(v);
    }
    tape.concat_rows(&rows)
}

/// Stacks the frames in temporal order, prepends the classification token
/// and adds the positional table.
pub fn assemble_sequence<F: crate::Real>(
    tape: &mut Tape<F>,
    frames: &[Var],
    table: EmbeddingVars,
    cfg: &ModelConfig,
) -> Result<Var> {
    if frames.len() != cfg.frames {
        return Err(Error::data(format!(
            "expected {} frames, got {}",
            cfg.frames,
            frames.len()
        )));
    }
    let mut parts = Vec::with_capacity(frames.len() + 1);
    parts.push(table.cls);
    parts.extend_from_slice(frames);
    let seq = tape.concat_rows(&parts)?;
    if tape.shape(seq) != [cfg.seq_len(), cfg.d_model] {
        return Err(Error::dim(format!(
            "assembled sequence has shape {:?}, expected [{}, {}]",
            tape.shape(seq),
            cfg.seq_len(),
            cfg.d_model
        )));
    }
    match table.pos {
        Some(pos) => tape.add(seq, pos),
        None => Ok(seq),
    }
}
