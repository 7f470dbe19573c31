//! Encoder stack, classification head and the end-to-end forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::config::ModelConfig;
use crate::data::FrameSample;
use crate::embed::{self, EmbeddingVars, Stream, TokenMatrix};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    backbone: bool,
}

/// Canonical parameter list (names, shapes, initializers) for a config.
fn layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let std = cfg.init_std;
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init, backbone: bool| {
        specs.push(ParamSpec {
            name,
            shape,
            init,
            backbone,
        })
    };
    add("embed.cls".into(), vec![1, d], Init::Normal(std), false);
    if cfg.use_pos {
        add("embed.pos".into(), vec![cfg.seq_len(), d], Init::Normal(std), false);
    }
    if cfg.use_segment {
        add("embed.seg".into(), vec![cfg.segment_rows(), d], Init::Normal(std), false);
    }
    if cfg.hybrid {
        let mut c_in = cfg.channels;
        for (i, s) in cfg.backbone.stages.iter().enumerate() {
            let fan_in = c_in * s.kernel * s.kernel;
            add(
                format!("tokenizer.backbone.{i}.weight"),
                vec![s.out_channels, c_in, s.kernel, s.kernel],
                Init::Normal((2.0 / fan_in as f64).sqrt()),
                true,
            );
            add(format!("tokenizer.backbone.{i}.bias"), vec![s.out_channels], Init::Zeros, true);
            c_in = s.out_channels;
        }
        let (cf, h, w) = cfg.feature_geometry()?;
        add("tokenizer.proj.weight".into(), vec![d, cf, 1, 1], Init::Normal(std), false);
        add("tokenizer.proj.bias".into(), vec![d], Init::Zeros, false);
        add(
            "tokenizer.mix.weight".into(),
            vec![cfg.tokens_per_stream(), h * w],
            Init::Normal(1.0 / ((h * w) as f64).sqrt()),
            false,
        );
    } else {
        add("tokenizer.patch.weight".into(), vec![cfg.patch_len(), d], Init::Normal(std), false);
        add("tokenizer.patch.bias".into(), vec![d], Init::Zeros, false);
    }
    let hidden = cfg.mlp_hidden();
    for b in 0..cfg.n_blocks {
        let p = |s: &str| format!("blocks.{b}.{s}");
        add(p("norm1.gain"), vec![d], Init::Ones, false);
        add(p("norm1.bias"), vec![d], Init::Zeros, false);
        for m in ["q", "k", "v", "o"] {
            add(p(&format!("attn.{m}")), vec![d, d], Init::Normal(std), false);
        }
        add(p("norm2.gain"), vec![d], Init::Ones, false);
        add(p("norm2.bias"), vec![d], Init::Zeros, false);
        add(p("mlp.fc1.weight"), vec![d, hidden], Init::Normal(std), false);
        add(p("mlp.fc1.bias"), vec![hidden], Init::Zeros, false);
        add(p("mlp.fc2.weight"), vec![hidden, d], Init::Normal(std), false);
        add(p("mlp.fc2.bias"), vec![d], Init::Zeros, false);
    }
    add("final_norm.gain".into(), vec![d], Init::Ones, false);
    add("final_norm.bias".into(), vec![d], Init::Zeros, false);
    add("head.weight".into(), vec![d, 2], Init::Normal(std), false);
    add("head.bias".into(), vec![2], Init::Zeros, false);
    Ok(specs)
}

#[derive(Debug, Clone)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum TokenizerIds {
    Patch {
        weight: ParamId,
        bias: ParamId,
    },
    Hybrid {
        stages: Vec<(ParamId, ParamId, usize)>,
        proj: (ParamId, ParamId),
        mix: ParamId,
    },
}

#[derive(Debug, Clone)]
struct ModelIds {
    cls: ParamId,
    pos: Option<ParamId>,
    seg: Option<ParamId>,
    tokenizer: TokenizerIds,
    blocks: Vec<BlockIds>,
    final_norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

impl ModelIds {
    fn resolve<F: Real>(cfg: &ModelConfig, s: &ParamStore<F>) -> Result<Self> {
        let id = |n: &str| s.id(n);
        let pair = |a: &str, b: &str| Ok::<_, Error>((id(a)?, id(b)?));
        let tokenizer = if cfg.hybrid {
            TokenizerIds::Hybrid {
                stages: cfg
                    .backbone
                    .stages
                    .iter()
                    .enumerate()
                    .map(|(i, st)| {
                        Ok((
                            id(&format!("tokenizer.backbone.{i}.weight"))?,
                            id(&format!("tokenizer.backbone.{i}.bias"))?,
                            st.stride,
                        ))
                    })
                    .collect::<Result<_>>()?,
                proj: pair("tokenizer.proj.weight", "tokenizer.proj.bias")?,
                mix: id("tokenizer.mix.weight")?,
            }
        } else {
            TokenizerIds::Patch {
                weight: id("tokenizer.patch.weight")?,
                bias: id("tokenizer.patch.bias")?,
            }
        };
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let n = |x: &str| format!("blocks.{b}.{x}");
                Ok(BlockIds {
                    norm1: pair(&n("norm1.gain"), &n("norm1.bias"))?,
                    q: id(&n("attn.q"))?,
                    k: id(&n("attn.k"))?,
                    v: id(&n("attn.v"))?,
                    o: id(&n("attn.o"))?,
                    norm2: pair(&n("norm2.gain"), &n("norm2.bias"))?,
                    fc1: pair(&n("mlp.fc1.weight"), &n("mlp.fc1.bias"))?,
                    fc2: pair(&n("mlp.fc2.weight"), &n("mlp.fc2.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cls: id("embed.cls")?,
            pos: cfg.use_pos.then(|| id("embed.pos")).transpose()?,
            seg: cfg.use_segment.then(|| id("embed.seg")).transpose()?,
            tokenizer,
            blocks,
            final_norm: pair("final_norm.gain", "final_norm.bias")?,
            head: pair("head.weight", "head.bias")?,
        })
    }
}

/// Tape handles for one encoder block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl BlockVars {
    fn place<F: Real>(ids: &BlockIds, tape: &mut Tape<F>, s: &ParamStore<F>) -> Self {
        let mut p = |id| tape.param(s, id);
        Self {
            norm1: (p(ids.norm1.0), p(ids.norm1.1)),
            q: p(ids.q),
            k: p(ids.k),
            v: p(ids.v),
            o: p(ids.o),
            norm2: (p(ids.norm2.0), p(ids.norm2.1)),
            fc1: (p(ids.fc1.0), p(ids.fc1.1)),
            fc2: (p(ids.fc2.0), p(ids.fc2.1)),
        }
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `L × L` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention without masking:
/// per head `softmax(Q Kᵀ / √d_h) V`, heads concatenated, then `W_o`.
pub fn attention<F: Real>(tape: &mut Tape<F>, x: Var, p: &BlockVars, n_heads: usize) -> Result<AttentionOutput> {
    let d = tape.value(x).last_dim();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!(
            "model width {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = tape.matmul(x, p.q)?;
    let k = tape.matmul(x, p.k)?;
    let v = tape.matmul(x, p.v)?;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax(scores);
        weights.push(w);
        heads.push(tape.matmul(w, vh)?);
    }
    let joined = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let output = tape.matmul(joined, p.o)?;
    Ok(AttentionOutput { output, weights })
}

/// Pre-norm residual block: `y = x + attn(norm1(x))`, `y + mlp(norm2(y))`.
pub fn encoder_block<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    p: &BlockVars,
    n_heads: usize,
    act: Activation,
) -> Result<Var> {
    let n1 = tape.layer_norm(x, p.norm1.0, p.norm1.1)?;
    let a = attention(tape, n1, p, n_heads)?.output;
    let y = tape.add(x, a)?;
    let n2 = tape.layer_norm(y, p.norm2.0, p.norm2.1)?;
    let h = tape.matmul(n2, p.fc1.0)?;
    let h = tape.add_row(h, p.fc1.1)?;
    let h = tape.activation(h, act);
    let m = tape.matmul(h, p.fc2.0)?;
    let m = tape.add_row(m, p.fc2.1)?;
    tape.add(y, m)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// The assembled `(N + 1) × D` input sequence.
    pub sequence: Var,
    /// Two logits: index 0 real, index 1 fake.
    pub logits: Var,
    pub probs: Var,
}

/// Named intermediate shapes recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ShapeTrace {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    fn record(&mut self, name: &str, shape: &[usize]) {
        if !self.entries.iter().any(|(n, _)| n == name) {
            self.entries.push((name.to_string(), shape.to_vec()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

/// A configured model with its parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    cfg: ModelConfig,
    params: ParamStore<F>,
    ids: ModelIds,
}

impl<F: Real> Model<F> {
    /// Seeded initialization: normal(0, init_std) for projections and
    /// embedding tables, He-normal for backbone kernels, zero biases and
    /// unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in layout(cfg)? {
            let id = match spec.init {
                Init::Normal(std) => params.insert_normal(&spec.name, &spec.shape, std, &mut rng)?,
                Init::Zeros => params.insert_zeros(&spec.name, &spec.shape)?,
                Init::Ones => params.insert_ones(&spec.name, &spec.shape)?,
            };
            if spec.backbone && cfg.freeze_backbone {
                params.set_trainable(id, false);
            }
        }
        Self::from_params(cfg.clone(), params)
    }

    /// Wraps an existing store, checking names and shapes against the config.
    pub fn from_params(cfg: ModelConfig, mut params: ParamStore<F>) -> Result<Self> {
        let specs = layout(&cfg)?;
        if specs.len() != params.len() {
            return Err(Error::Param(format!(
                "config expects {} parameters, store has {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (id, p)) in specs.iter().zip(params.iter()) {
            if spec.name != p.name() || spec.shape != p.value().shape() {
                return Err(Error::Param(format!(
                    "parameter {} is {:?} {:?}, config expects {:?} {:?}",
                    id.index(),
                    p.name(),
                    p.value().shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        for spec in specs.iter().filter(|s| s.backbone) {
            let id = params.id(&spec.name)?;
            params.set_trainable(id, !cfg.freeze_backbone);
        }
        let ids = ModelIds::resolve(&cfg, &params)?;
        Ok(Self { cfg, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn embedding_vars(&self, tape: &mut Tape<F>) -> EmbeddingVars {
        EmbeddingVars {
            seg: self.ids.seg.map(|id| tape.param(&self.params, id)),
            pos: self.ids.pos.map(|id| tape.param(&self.params, id)),
            cls: tape.param(&self.params, self.ids.cls),
        }
    }

    pub fn block_vars(&self, tape: &mut Tape<F>, block: usize) -> BlockVars {
        BlockVars::place(&self.ids.blocks[block], tape, &self.params)
    }

    /// Checks a window against the configuration before any computation.
    pub fn check_window(&self, frames: &[FrameSample]) -> Result<()> {
        if frames.len() != self.cfg.frames {
            return Err(Error::data(format!(
                "model expects {} frames per sample, got {}",
                self.cfg.frames,
                frames.len()
            )));
        }
        let want = (self.cfg.channels, self.cfg.height, self.cfg.width);
        for f in frames {
            if f.geometry() != want {
                return Err(Error::data(format!(
                    "frame geometry {:?} does not match the model's {want:?}",
                    f.geometry()
                )));
            }
        }
        Ok(())
    }

    /// Token matrix for one image of one stream.
    fn tokenize(
        &self,
        tape: &mut Tape<F>,
        tok: &TokenizerVars,
        image: &Tensor<f32>,
        trace: &mut ShapeTrace,
    ) -> Result<Var> {
        // pixels in [0, 1] enter the tokenizer rescaled to [-1, 1]
        let img = tape.constant(image.map(|x| 2.0 * x - 1.0).cast());
        trace.record("image", tape.shape(img));
        match tok {
            TokenizerVars::Patch { weight, bias } => {
                embed::patchify(tape, img, self.cfg.patch_size, *weight, *bias)
            }
            TokenizerVars::Hybrid { stages, proj, mix } => {
                let feat = embed::backbone_features(tape, img, stages)?;
                trace.record("backbone_features", tape.shape(feat));
                embed::tokens_from_features(tape, feat, proj.0, proj.1, *mix)
            }
        }
    }

    fn tokenizer_vars(&self, tape: &mut Tape<F>) -> TokenizerVars {
        match &self.ids.tokenizer {
            TokenizerIds::Patch { weight, bias } => TokenizerVars::Patch {
                weight: tape.param(&self.params, *weight),
                bias: tape.param(&self.params, *bias),
            },
            TokenizerIds::Hybrid { stages, proj, mix } => TokenizerVars::Hybrid {
                stages: stages
                    .iter()
                    .map(|&(w, b, s)| (tape.param(&self.params, w), tape.param(&self.params, b), s))
                    .collect(),
                proj: (tape.param(&self.params, proj.0), tape.param(&self.params, proj.1)),
                mix: tape.param(&self.params, *mix),
            },
        }
    }

    /// Tokenizes every frame and assembles the `(N + 1) × D` input sequence.
    pub fn embed(&self, tape: &mut Tape<F>, frames: &[FrameSample], trace: &mut ShapeTrace) -> Result<Var> {
        self.check_window(frames)?;
        let tok = self.tokenizer_vars(tape);
        let table = self.embedding_vars(tape);
        let mut assembled = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let face = self.tokenize(tape, &tok, &frame.face, trace)?;
            trace.record("stream_tokens", tape.shape(face));
            let face = TokenMatrix {
                tokens: face,
                stream: Stream::Face,
                frame_index: t,
            };
            let uv = if self.cfg.use_uv {
                let u = self.tokenize(tape, &tok, &frame.uv, trace)?;
                Some(TokenMatrix {
                    tokens: u,
                    stream: Stream::Uv,
                    frame_index: t,
                })
            } else {
                None
            };
            let f = embed::assemble_frame(tape, face, uv, table.seg, &self.cfg)?;
            trace.record("frame_tokens", tape.shape(f));
            assembled.push(f);
        }
        trace.record(
            "frames_concatenated",
            &[self.cfg.tokens_per_frame() * assembled.len(), self.cfg.d_model],
        );
        let seq = embed::assemble_sequence(tape, &assembled, table, &self.cfg)?;
        trace.record("sequence", tape.shape(seq));
        Ok(seq)
    }

    /// Encoder stack, final norm, class-token readout and head.
    pub fn classify(&self, tape: &mut Tape<F>, sequence: Var, trace: &mut ShapeTrace) -> Result<(Var, Var)> {
        let mut x = sequence;
        for b in 0..self.cfg.n_blocks {
            let p = self.block_vars(tape, b);
            x = encoder_block(tape, x, &p, self.cfg.n_heads, self.cfg.activation)?;
        }
        trace.record("encoder_output", tape.shape(x));
        let (g, bias) = self.ids.final_norm;
        let (g, bias) = (tape.param(&self.params, g), tape.param(&self.params, bias));
        let x = tape.layer_norm(x, g, bias)?;
        let cls = tape.slice_rows(x, 0, 1)?;
        let (hw, hb) = (tape.param(&self.params, self.ids.head.0), tape.param(&self.params, self.ids.head.1));
        let z = tape.matmul(cls, hw)?;
        let z = tape.add_row(z, hb)?;
        let logits = tape.reshape(z, &[2])?;
        trace.record("logits", tape.shape(logits));
        let probs = tape.softmax(logits);
        Ok((logits, probs))
    }

    pub fn forward(&self, tape: &mut Tape<F>, frames: &[FrameSample]) -> Result<ForwardOutput> {
        self.forward_traced(tape, frames, &mut ShapeTrace::default())
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape<F>,
        frames: &[FrameSample],
        trace: &mut ShapeTrace,
    ) -> Result<ForwardOutput> {
        let sequence = self.embed(tape, frames, trace)?;
        let (logits, probs) = self.classify(tape, sequence, trace)?;
        Ok(ForwardOutput {
            sequence,
            logits,
            probs,
        })
    }

    /// Probability of the fake class for one window.
    pub fn predict(&self, frames: &[FrameSample]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, frames)?;
        Ok(tape.value(out.probs).data()[1].to_f64_lossy())
    }
}

enum TokenizerVars {
    Patch {
        weight: Var,
        bias: Var,
    },
    Hybrid {
        stages: Vec<(Var, Var, usize)>,
        proj: (Var, Var),
        mix: Var,
    },
}
