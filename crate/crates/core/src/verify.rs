//! The finite-difference verification suite: every differentiable
//! operation on small random inputs, plus tiny end-to-end models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, CustomOp, Tape, Var};
use crate::config::{BackboneConfig, ConvStage, ModelConfig, SegmentMode};
use crate::data::{FrameSample, Label};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, CoordCheck, GradCheckOptions};
use crate::learn::{incremental_loss, AnchorSnapshot};
use crate::model::{attention, encoder_block, BlockVars, Model};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Route the named check through an operation with a wrong gradient
    /// rule; the suite must then report that check as failing.
    pub fault: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<CoordCheck>,
    /// Set when the check could not be evaluated (e.g. non-finite values).
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < TOLERANCE
    }
}

/// Identity in the forward pass, gradient scaled by 1.5 in the backward
/// pass.
struct Miswired;

impl CustomOp<f64> for Miswired {
    fn name(&self) -> &str {
        "miswired-identity"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].clone())
    }

    fn backward(&self, _inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad_out: &[f64]) -> Vec<Vec<f64>> {
        vec![grad_out.iter().map(|g| 1.5 * g).collect()]
    }
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId]) -> Result<Var>>;

struct Check {
    name: &'static str,
    inputs: Vec<(&'static str, Tensor<f64>)>,
    build: Builder,
    max_coords: Option<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for kinked operations.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.5);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut v = Vec::new();
    macro_rules! check {
        ($name:expr, [$($input:expr),*], |$t:ident, $x:ident| $body:expr) => {
            v.push(Check {
                name: $name,
                inputs: vec![$($input),*],
                build: Box::new(|$t: &mut Tape<f64>, s: &ParamStore<f64>, ids: &[ParamId]| {
                    let $x: Vec<Var> = ids.iter().map(|&id| $t.param(s, id)).collect();
                    $body
                }),
                max_coords: None,
            })
        };
    }
    check!("matmul", [("a", uniform(rng, &[4, 5], -1.0, 1.0)), ("b", uniform(rng, &[5, 3], -1.0, 1.0))], |t, x| t.matmul(x[0], x[1]));
    check!("add", [("a", uniform(rng, &[3, 4], -1.0, 1.0)), ("b", uniform(rng, &[3, 4], -1.0, 1.0))], |t, x| t.add(x[0], x[1]));
    check!("sub", [("a", uniform(rng, &[3, 4], -1.0, 1.0)), ("b", uniform(rng, &[3, 4], -1.0, 1.0))], |t, x| t.sub(x[0], x[1]));
    check!("mul", [("a", uniform(rng, &[3, 4], -1.0, 1.0)), ("b", uniform(rng, &[3, 4], -1.0, 1.0))], |t, x| t.mul(x[0], x[1]));
    check!("add_row", [("x", uniform(rng, &[3, 4], -1.0, 1.0)), ("b", uniform(rng, &[4], -1.0, 1.0))], |t, x| t.add_row(x[0], x[1]));
    check!("add_channel", [("x", uniform(rng, &[2, 3, 3], -1.0, 1.0)), ("b", uniform(rng, &[2], -1.0, 1.0))], |t, x| t.add_channel(x[0], x[1]));
    check!("scale", [("x", uniform(rng, &[5], -1.0, 1.0))], |t, x| Ok(t.scale(x[0], -0.7)));
    check!("conv2d", [("x", uniform(rng, &[3, 8, 8], -1.0, 1.0)), ("w", uniform(rng, &[4, 3, 3, 3], -0.5, 0.5))], |t, x| t.conv2d(x[0], x[1], 1));
    check!("conv2d_stride2", [("x", uniform(rng, &[2, 7, 9], -1.0, 1.0)), ("w", uniform(rng, &[3, 2, 3, 2], -0.5, 0.5))], |t, x| t.conv2d(x[0], x[1], 2));
    check!("extract_patches", [("x", uniform(rng, &[2, 4, 6], -1.0, 1.0))], |t, x| t.extract_patches(x[0], 2));
    check!(
        "layer_norm",
        [("x", uniform(rng, &[3, 6], -2.0, 2.0)), ("g", uniform(rng, &[6], 0.5, 1.5)), ("b", uniform(rng, &[6], -0.5, 0.5))],
        |t, x| t.layer_norm(x[0], x[1], x[2])
    );
    check!("softmax", [("x", uniform(rng, &[3, 5], -2.0, 2.0))], |t, x| Ok(t.softmax(x[0])));
    check!("gelu", [("x", uniform(rng, &[12], -3.0, 3.0))], |t, x| Ok(t.gelu(x[0])));
    check!("relu", [("x", away_from_zero(rng, &[12]))], |t, x| Ok(t.relu(x[0])));
    check!("reshape", [("x", uniform(rng, &[2, 6], -1.0, 1.0))], |t, x| t.reshape(x[0], &[3, 4]));
    check!("transpose", [("x", uniform(rng, &[3, 5], -1.0, 1.0))], |t, x| t.transpose(x[0]));
    check!(
        "concat_rows",
        [("a", uniform(rng, &[2, 3], -1.0, 1.0)), ("b", uniform(rng, &[1, 3], -1.0, 1.0))],
        |t, x| t.concat_rows(&[x[0], x[1], x[0]])
    );
    check!(
        "concat_cols",
        [("a", uniform(rng, &[2, 3], -1.0, 1.0)), ("b", uniform(rng, &[2, 2], -1.0, 1.0))],
        |t, x| t.concat_cols(&[x[0], x[1]])
    );
    check!("slice_rows", [("x", uniform(rng, &[4, 3], -1.0, 1.0))], |t, x| t.slice_rows(x[0], 1, 2));
    check!("slice_cols", [("x", uniform(rng, &[3, 5], -1.0, 1.0))], |t, x| t.slice_cols(x[0], 2, 3));
    check!("sum", [("x", uniform(rng, &[2, 3], -1.0, 1.0))], |t, x| Ok(t.sum(x[0])));
    let target = std::sync::Arc::new(uniform(rng, &[2, 3], -1.0, 1.0));
    v.push(Check {
        name: "sq_diff_sum",
        inputs: vec![("x", uniform(rng, &[2, 3], -1.0, 1.0))],
        build: Box::new(move |t, s, ids| {
            let x = t.param(s, ids[0]);
            t.sq_diff_sum(x, std::sync::Arc::clone(&target))
        }),
        max_coords: None,
    });
    check!("cross_entropy", [("z", uniform(rng, &[2], -2.0, 2.0))], |t, x| t.cross_entropy(x[0], 1));

    let d = 8;
    let block_inputs = |rng: &mut ChaCha8Rng| {
        vec![
            ("x", uniform(rng, &[5, d], -1.0, 1.0)),
            ("norm1.gain", uniform(rng, &[d], 0.5, 1.5)),
            ("norm1.bias", uniform(rng, &[d], -0.2, 0.2)),
            ("q", uniform(rng, &[d, d], -0.5, 0.5)),
            ("k", uniform(rng, &[d, d], -0.5, 0.5)),
            ("v", uniform(rng, &[d, d], -0.5, 0.5)),
            ("o", uniform(rng, &[d, d], -0.5, 0.5)),
            ("norm2.gain", uniform(rng, &[d], 0.5, 1.5)),
            ("norm2.bias", uniform(rng, &[d], -0.2, 0.2)),
            ("fc1.w", uniform(rng, &[d, 4 * d], -0.3, 0.3)),
            ("fc1.b", uniform(rng, &[4 * d], -0.2, 0.2)),
            ("fc2.w", uniform(rng, &[4 * d, d], -0.3, 0.3)),
            ("fc2.b", uniform(rng, &[d], -0.2, 0.2)),
        ]
    };
    fn block_vars(x: &[Var]) -> BlockVars {
        BlockVars {
            norm1: (x[1], x[2]),
            q: x[3],
            k: x[4],
            v: x[5],
            o: x[6],
            norm2: (x[7], x[8]),
            fc1: (x[9], x[10]),
            fc2: (x[11], x[12]),
        }
    }
    let inputs = block_inputs(rng);
    check!("attention", [inputs[0].clone(), inputs[1].clone(), inputs[2].clone(), inputs[3].clone(), inputs[4].clone(), inputs[5].clone(), inputs[6].clone()], |t, x| {
        let mut all = x.clone();
        all.extend_from_slice(&[x[0]; 6]);
        Ok(attention(t, x[0], &block_vars(&all), 2)?.output)
    });
    let inputs = block_inputs(rng);
    v.push(Check {
        name: "encoder_block",
        inputs,
        build: Box::new(|t, s, ids| {
            let x: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
            encoder_block(t, x[0], &block_vars(&x), 2, Activation::Gelu)
        }),
        max_coords: None,
    });
    v
}

/// D = 16, T = 2, 2 blocks, 2 heads, 2 tokens per stream per frame.
pub fn tiny_config(hybrid: bool) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        frames: 2,
        n_tokens: 8,
        n_heads: 2,
        n_blocks: 2,
        mlp_ratio: 4,
        channels: 3,
        height: if hybrid { 9 } else { 4 },
        width: if hybrid { 9 } else { 8 },
        patch_size: 4,
        hybrid,
        backbone: BackboneConfig {
            stages: vec![ConvStage::new(4, 3, 2), ConvStage::new(5, 3, 1)],
        },
        freeze_backbone: false,
        use_uv: true,
        use_segment: true,
        segment_mode: SegmentMode::PerFrame,
        use_pos: true,
        activation: Activation::Gelu,
        init_std: 0.3,
    }
}

pub fn tiny_window(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<FrameSample> {
    let shape = [cfg.channels, cfg.height, cfg.width];
    (0..cfg.frames)
        .map(|_| FrameSample {
            face: Tensor::from_fn(&shape, |_| rng.gen_range(0.0f32..1.0)),
            uv: Tensor::from_fn(&shape, |_| rng.gen_range(0.0f32..1.0)),
        })
        .collect()
}

fn run_check(check: Check, fault: bool, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = check
        .inputs
        .iter()
        .map(|(n, t)| store.insert(*n, t.clone()).expect("unique input names"))
        .collect();
    // random reduction weights make every output coordinate matter
    let mut weights: Option<Tensor<f64>> = None;
    {
        let mut tape = Tape::new();
        if let Ok(out) = (check.build)(&mut tape, &store, &ids) {
            weights = Some(uniform(rng, tape.shape(out), -1.0, 1.0));
        }
    }
    let build = &check.build;
    let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let mut out = build(tape, s, &ids)?;
        if fault {
            out = tape.custom(&[out], Box::new(Miswired))?;
        }
        let w = tape.constant(weights.clone().ok_or_else(|| Error::Gradient("check failed to build".into()))?);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };
    let opts = GradCheckOptions {
        max_coords: check.max_coords,
        ..*opts
    };
    match grad_check(f, &mut store, opts) {
        Ok(r) => CheckResult {
            name: check.name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            worst: r.worst,
            error: None,
        },
        Err(e) => CheckResult {
            name: check.name.to_string(),
            max_rel_error: f64::INFINITY,
            checked: 0,
            worst: None,
            error: Some(e.to_string()),
        },
    }
}

fn model_check(name: &'static str, hybrid: bool, incremental: bool, rng: &mut ChaCha8Rng) -> Result<Check> {
    let cfg = tiny_config(hybrid);
    let model = Model::<f64>::init(&cfg, rng.gen())?;
    let window = tiny_window(&cfg, rng);
    // anchor is a random perturbation of the initial values
    let anchor_store = {
        let mut s = model.params().clone();
        for id in s.ids().collect::<Vec<_>>() {
            for v in s.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        s
    };
    let anchor = AnchorSnapshot::capture(&anchor_store);
    Ok(Check {
        name,
        inputs: model
            .params()
            .iter()
            .map(|(_, p)| (leak(p.name()), p.value().clone()))
            .collect(),
        build: Box::new(move |t, s, _ids| {
            let m = Model::from_params(cfg.clone(), s.clone())?;
            let out = m.forward(t, &window)?;
            if incremental {
                let loss = incremental_loss(t, out.logits, Label::Fake, m.params(), &anchor, 0.7)?;
                Ok(loss)
            } else {
                Ok(out.logits)
            }
        }),
        max_coords: Some(24),
    })
}

/// Parameter names of the tiny models live for the whole suite run.
fn leak(name: &str) -> &'static str {
    Box::leak(name.to_string().into_boxed_str())
}

/// Names of every check in suite order.
pub fn check_names() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut names: Vec<String> = op_checks(&mut rng).iter().map(|c| c.name.to_string()).collect();
    names.extend(["model_patch", "model_hybrid", "incremental_loss"].map(String::from));
    names
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    if let Some(f) = &opts.fault {
        if !check_names().contains(f) {
            return Err(Error::config(format!("unknown check {f:?} for fault injection")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = op_checks(&mut rng);
    checks.push(model_check("model_patch", false, false, &mut rng)?);
    checks.push(model_check("model_hybrid", true, false, &mut rng)?);
    checks.push(model_check("incremental_loss", false, true, &mut rng)?);
    let gopts = GradCheckOptions {
        seed: opts.seed,
        ..Default::default()
    };
    Ok(checks
        .into_iter()
        .map(|c| {
            let fault = opts.fault.as_deref() == Some(c.name);
            run_check(c, fault, &gopts, &mut rng)
        })
        .collect())
}

/// Sets the positional and segment tables of `model` (where present) to
/// zero.
pub fn zero_position_and_segment<F: crate::Real>(model: &mut Model<F>) -> Result<()> {
    for name in ["embed.pos", "embed.seg"] {
        if let Ok(id) = model.params().id(name) {
            let shape = model.params().value(id).shape().to_vec();
            model.params_mut().set_value(id, Tensor::zeros(&shape))?;
        }
    }
    Ok(())
}

/// Largest relative change of the class-token logits when the tokens are
/// shuffled before the positional and segment tables are added, over
/// `trials` seeded permutations of the non-class rows. The change is
/// measured against the largest logit magnitude.
pub fn permutation_deviation<F: crate::Real>(
    model: &Model<F>,
    frames: &[FrameSample],
    trials: usize,
    seed: u64,
) -> Result<f64> {
    use crate::model::ShapeTrace;
    use rand::seq::SliceRandom;

    let mut trace = ShapeTrace::default();
    let mut bare = model.clone();
    zero_position_and_segment(&mut bare)?;
    let mut tape = Tape::new();
    let full_var = model.embed(&mut tape, frames, &mut trace)?;
    let raw_var = bare.embed(&mut tape, frames, &mut trace)?;
    let (base, _) = model.classify(&mut tape, full_var, &mut trace)?;
    let (full, raw) = (tape.value(full_var).clone(), tape.value(raw_var).clone());
    let base: Vec<f64> = tape.value(base).to_f64_vec();
    let scale = base.iter().fold(0.0f64, |m, z| m.max(z.abs())).max(f64::MIN_POSITIVE);

    let (rows, d) = (raw.rows(), raw.last_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut order: Vec<usize> = (0..rows).collect();
        order[1..].shuffle(&mut rng);
        // shuffled raw tokens plus the table contribution of each slot
        let data: Vec<F> = (0..rows)
            .flat_map(|r| {
                let (src, slot) = (raw.row(order[r]), r);
                (0..d).map(move |j| (slot, j, src[j]))
            })
            .map(|(slot, j, x)| x + (full.row(slot)[j] - raw.row(slot)[j]))
            .collect();
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::new(vec![rows, d], data)?);
        let (z, _) = model.classify(&mut tape, input, &mut trace)?;
        for (a, b) in tape.value(z).to_f64_vec().iter().zip(&base) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffled_tokens_leave_logits_unchanged_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::<f64>::init(&tiny_config(false), 2).unwrap();
        let frames = tiny_window(model.config(), &mut rng);
        assert!(permutation_deviation(&model, &frames, 5, 3).unwrap() > 1e-6);
        zero_position_and_segment(&mut model).unwrap();
        assert!(permutation_deviation(&model, &frames, 5, 3).unwrap() < 1e-12);
    }

    #[test]
    fn every_check_passes() {
        let results = run_suite(&SuiteOptions::default()).unwrap();
        assert_eq!(results.len(), check_names().len());
        for r in &results {
            assert!(r.passed(), "{}: {:e} {:?} {:?}", r.name, r.max_rel_error, r.worst, r.error);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn injected_fault_is_caught_by_name() {
        for name in ["matmul", "layer_norm", "model_hybrid"] {
            let results = run_suite(&SuiteOptions {
                seed: 3,
                fault: Some(name.into()),
            })
            .unwrap();
            for r in &results {
                assert_eq!(r.passed(), r.name != name, "{} {:e}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn unknown_fault_target_rejected() {
        let opts = SuiteOptions {
            seed: 0,
            fault: Some("nope".into()),
        };
        assert!(run_suite(&opts).is_err());
    }
}
