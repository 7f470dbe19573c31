//! `key = value` run configuration files.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.preset = desk_patch
//! model.use_segment = false
//! train.epochs = 20
//! data.task = stream
//! ```
//!
//! `model.preset` is applied before every other `model.*` key wherever it
//! appears. Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use dfvt_core::config::{BackboneConfig, ConvStage, ModelConfig, SegmentMode};
use dfvt_core::data::{Geometry, PatternSpec, TaskKind, TaskParams};
use dfvt_core::learn::TrainConfig;
use dfvt_core::{Activation, Error, Result};

/// Synthetic data settings used by `gen-data`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub n: usize,
    pub geometry: Geometry,
    pub params: TaskParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Spatial,
            seed: 0,
            n: 512,
            geometry: Geometry::default(),
            params: TaskParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Frames per scored window; defaults to the model's frame count.
    pub window: Option<usize>,
    pub stride: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: None,
            stride: 1,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub checkpoint: String,
    pub history: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: "model.dfvt".into(),
            history: "history.tsv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_patch(),
            model_seed: 0,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "desk_patch" => Ok(ModelConfig::desk_patch()),
        "desk_hybrid_video" => Ok(ModelConfig::desk_hybrid_video()),
        "paper_video" => Ok(ModelConfig::paper_video()),
        "paper_patch_face" => Ok(ModelConfig::paper_patch_face()),
        _ => Err(Error::Config(format!(
            "unknown model preset {name:?} (expected desk_patch, desk_hybrid_video, paper_video or paper_patch_face)"
        ))),
    }
}

fn parse<T: FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: {v:?} is not {what}")))
}

fn count(key: &str, v: &str) -> Result<usize> {
    parse(key, v, "a non-negative integer")
}

fn positive(key: &str, v: &str) -> Result<usize> {
    match count(key, v)? {
        0 => Err(Error::Config(format!("{key} must be positive"))),
        n => Ok(n),
    }
}

fn real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(key, v, "a number")?;
    if !x.is_finite() {
        return Err(Error::Config(format!("{key} must be finite")));
    }
    Ok(x)
}

fn non_negative(key: &str, v: &str) -> Result<f64> {
    match real(key, v)? {
        x if x < 0.0 => Err(Error::Config(format!("{key} must be non-negative, got {x}"))),
        x => Ok(x),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

/// `out:kernel:stride` stages separated by commas, or `paper` / `desk`.
pub fn parse_backbone(v: &str) -> Result<BackboneConfig> {
    match v {
        "paper" => return Ok(BackboneConfig::paper()),
        "desk" => return Ok(BackboneConfig::desk()),
        _ => {}
    }
    let stages = v
        .split(',')
        .map(|s| {
            let parts: Vec<&str> = s.trim().split(':').collect();
            match parts[..] {
                [c, k, st] => Ok(ConvStage::new(
                    positive("model.backbone", c)?,
                    positive("model.backbone", k)?,
                    positive("model.backbone", st)?,
                )),
                _ => Err(Error::Config(format!(
                    "model.backbone: stage {s:?} is not out:kernel:stride"
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BackboneConfig { stages })
}

pub fn format_backbone(b: &BackboneConfig) -> String {
    b.stages
        .iter()
        .map(|s| format!("{}:{}:{}", s.out_channels, s.kernel, s.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "model.d_model" => m.d_model = positive(key, v)?,
        "model.frames" => m.frames = positive(key, v)?,
        "model.n_tokens" => m.n_tokens = positive(key, v)?,
        "model.n_heads" => m.n_heads = positive(key, v)?,
        "model.n_blocks" => m.n_blocks = positive(key, v)?,
        "model.mlp_ratio" => m.mlp_ratio = positive(key, v)?,
        "model.channels" => m.channels = positive(key, v)?,
        "model.height" => m.height = positive(key, v)?,
        "model.width" => m.width = positive(key, v)?,
        "model.patch_size" => m.patch_size = positive(key, v)?,
        "model.hybrid" => m.hybrid = boolean(key, v)?,
        "model.backbone" => m.backbone = parse_backbone(v)?,
        "model.freeze_backbone" => m.freeze_backbone = boolean(key, v)?,
        "model.use_uv" => m.use_uv = boolean(key, v)?,
        "model.use_segment" => m.use_segment = boolean(key, v)?,
        "model.use_pos" => m.use_pos = boolean(key, v)?,
        "model.segment_mode" => {
            m.segment_mode = match v {
                "two" => SegmentMode::Two,
                "per_frame" => SegmentMode::PerFrame,
                _ => return Err(Error::Config(format!("{key}: expected two or per_frame, got {v:?}"))),
            }
        }
        "model.activation" => {
            m.activation = match v {
                "gelu" => Activation::Gelu,
                "relu" => Activation::Relu,
                _ => return Err(Error::Config(format!("{key}: expected gelu or relu, got {v:?}"))),
            }
        }
        "model.init_std" => {
            let s = real(key, v)?;
            if s <= 0.0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
            m.init_std = s;
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_pattern(p: &mut PatternSpec, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "top" => p.top = count(key, v)?,
        "left" => p.left = count(key, v)?,
        "size" => p.size = positive(key, v)?,
        "amplitude" => p.amplitude = real(key, v)? as f32,
        "texture" => p.texture = v.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some((first, _)) = entries.get(&k) {
                return Err(Error::Config(format!(
                    "line {}: {k} already set on line {first}",
                    i + 1
                )));
            }
            entries.insert(k, (i + 1, v));
        }
        let mut cfg = RunConfig::default();
        if let Some((line, v)) = entries.remove("model.preset") {
            cfg.model = preset(&v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        let mut ordered: Vec<(usize, String, String)> =
            entries.into_iter().map(|(k, (l, v))| (l, k, v)).collect();
        ordered.sort();
        for (line, k, v) in ordered {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_model(&mut self.model, key, v)? {
            return Ok(());
        }
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.preset" => self.model = preset(v)?,
            "model.seed" => self.model_seed = parse(key, v, "an integer seed")?,
            "train.epochs" => t.epochs = count(key, v)?,
            "train.learning_rate" => t.learning_rate = non_negative(key, v)?,
            "train.batch_size" => t.batch_size = positive(key, v)?,
            "train.seed" => t.seed = parse(key, v, "an integer seed")?,
            "train.anchor_weight" => t.anchor_weight = non_negative(key, v)?,
            "train.shuffle" => t.shuffle = boolean(key, v)?,
            "train.window_stride" => t.window_stride = positive(key, v)?,
            "data.task" => d.task = v.parse()?,
            "data.seed" => d.seed = parse(key, v, "an integer seed")?,
            "data.n" => d.n = count(key, v)?,
            "data.frames" => d.geometry.frames = positive(key, v)?,
            "data.channels" => d.geometry.channels = positive(key, v)?,
            "data.height" => d.geometry.height = positive(key, v)?,
            "data.width" => d.geometry.width = positive(key, v)?,
            "data.noise_std" => d.params.noise_std = non_negative(key, v)? as f32,
            "data.flicker_delta" => d.params.flicker_delta = real(key, v)? as f32,
            "eval.window" => self.eval.window = Some(positive(key, v)?),
            "eval.stride" => self.eval.stride = positive(key, v)?,
            "eval.threshold" => {
                let th = real(key, v)?;
                if !(0.0..=1.0).contains(&th) {
                    return Err(Error::Config(format!("{key} must lie in [0, 1]")));
                }
                self.eval.threshold = th;
            }
            "output.checkpoint" => self.output.checkpoint = file_name(key, v)?,
            "output.history" => self.output.history = file_name(key, v)?,
            _ => {
                let pattern = key
                    .strip_prefix("data.spatial.")
                    .map(|f| (&mut d.params.spatial_pattern, f))
                    .or_else(|| key.strip_prefix("data.stream.").map(|f| (&mut d.params.stream_pattern, f)));
                let known = match pattern {
                    Some((p, field)) => set_pattern(p, field, key, v)?,
                    None => false,
                };
                if !known {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn file_name(key: &str, v: &str) -> Result<String> {
    if v.is_empty() || v.contains(['/', '\\']) {
        return Err(Error::Config(format!("{key} must be a plain file name, got {v:?}")));
    }
    Ok(v.to_string())
}

/// Every `model.*` key of a config, one `key = value` line each.
pub fn model_lines(m: &ModelConfig) -> String {
    let mut s = String::new();
    let b = |x: bool| if x { "true" } else { "false" };
    let _ = writeln!(s, "model.d_model = {}", m.d_model);
    let _ = writeln!(s, "model.frames = {}", m.frames);
    let _ = writeln!(s, "model.n_tokens = {}", m.n_tokens);
    let _ = writeln!(s, "model.n_heads = {}", m.n_heads);
    let _ = writeln!(s, "model.n_blocks = {}", m.n_blocks);
    let _ = writeln!(s, "model.mlp_ratio = {}", m.mlp_ratio);
    let _ = writeln!(s, "model.channels = {}", m.channels);
    let _ = writeln!(s, "model.height = {}", m.height);
    let _ = writeln!(s, "model.width = {}", m.width);
    let _ = writeln!(s, "model.patch_size = {}", m.patch_size);
    let _ = writeln!(s, "model.hybrid = {}", b(m.hybrid));
    let _ = writeln!(s, "model.backbone = {}", format_backbone(&m.backbone));
    let _ = writeln!(s, "model.freeze_backbone = {}", b(m.freeze_backbone));
    let _ = writeln!(s, "model.use_uv = {}", b(m.use_uv));
    let _ = writeln!(s, "model.use_segment = {}", b(m.use_segment));
    let _ = writeln!(s, "model.use_pos = {}", b(m.use_pos));
    let mode = match m.segment_mode {
        SegmentMode::Two => "two",
        SegmentMode::PerFrame => "per_frame",
    };
    let _ = writeln!(s, "model.segment_mode = {mode}");
    let act = match m.activation {
        Activation::Gelu => "gelu",
        Activation::Relu => "relu",
    };
    let _ = writeln!(s, "model.activation = {act}");
    // `{:?}` keeps enough digits to round-trip exactly
    let _ = writeln!(s, "model.init_std = {:?}", m.init_std);
    s
}

/// Inverse of [`model_lines`]; every key must be present.
pub fn parse_model_lines(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::desk_patch();
    let mut seen = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
        if !set_model(&mut m, k.trim(), v.trim())? {
            return Err(Error::Config(format!("unknown model key {:?}", k.trim())));
        }
        seen += 1;
    }
    if seen != model_lines(&m).lines().count() {
        return Err(Error::Config("model description is incomplete".into()));
    }
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn preset_applies_before_overrides_regardless_of_order() {
        let a = RunConfig::parse("model.use_segment = false\nmodel.preset = desk_hybrid_video\n").unwrap();
        assert!(a.model.hybrid);
        assert!(!a.model.use_segment);
    }

    #[test]
    fn rejects_unknown_repeated_and_invalid() {
        let cases = [
            ("model.d_modl = 8", "unknown key"),
            ("train.epochs = 2\ntrain.epochs = 3", "already set"),
            ("train.learning_rate = -1", "non-negative"),
            ("model.use_uv = yes", "true or false"),
            ("model.n_heads = 5", "divisible"),
            ("eval.threshold = 2", "[0, 1]"),
            ("data.spatial.texture = plaid", "unknown texture"),
            ("data.stream.colour = 1", "unknown key"),
            ("just words", "key = value"),
        ];
        for (text, needle) in cases {
            let msg = RunConfig::parse(text).unwrap_err().to_string();
            assert!(msg.contains(needle), "{text:?}: {msg}");
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let msg = RunConfig::parse("# header\ntrain.epochs = 1\ntrain.batch_size = 0\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn model_description_round_trips() {
        for m in [
            ModelConfig::desk_patch(),
            ModelConfig::desk_hybrid_video(),
            ModelConfig::paper_video(),
            ModelConfig::paper_patch_face(),
        ] {
            assert_eq!(parse_model_lines(&model_lines(&m)).unwrap(), m);
        }
        let partial: String = model_lines(&ModelConfig::desk_patch()).lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(parse_model_lines(&partial).is_err());
    }

    #[test]
    fn backbone_strings() {
        assert_eq!(parse_backbone("paper").unwrap(), BackboneConfig::paper());
        let b = parse_backbone("8:3:2, 16:3:1").unwrap();
        assert_eq!(format_backbone(&b), "8:3:2,16:3:1");
        assert!(parse_backbone("8:3").is_err());
        assert!(parse_backbone("8:0:1").is_err());
    }
}
