//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Base step; the step for coordinate `θ` is `step · max(1, |θ|)`.
    pub step: f64,
    /// Check at most this many coordinates per parameter (seeded sample).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error, so that two gradients
    /// that are both ~0 do not produce a huge ratio.
    pub floor: f64,
    /// Errors below this need no re-measurement with a smaller step.
    pub accept: f64,
}

const KINK_REFINEMENTS: i32 = 3;

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            floor: 1e-6,
            accept: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against `(f(θ+h) − f(θ−h)) / 2h` for every trainable
/// parameter coordinate (or a seeded subsample of them).
///
/// `f` must build a scalar loss on the supplied tape and be deterministic.
pub fn grad_check<Fun>(f: Fun, store: &mut ParamStore<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };

    store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "loss at the unperturbed point".into(),
            });
        }
        tape.backward(loss, store)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable()).collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic_all: Vec<f64> = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in coords {
            let orig = store.value(id).data()[i];
            let name = store.name(id).to_string();
            let analytic = analytic_all[i];
            if !analytic.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("{name}[{i}] analytic gradient"),
                });
            }
            // a mismatch is re-measured with smaller steps: when the
            // interval straddles a ReLU kink only a step that stays on one
            // side of it estimates the derivative at θ
            let mut numeric = 0.0;
            let mut rel = f64::INFINITY;
            for refine in 0..KINK_REFINEMENTS {
                let h = opts.step * orig.abs().max(1.0) / 10f64.powi(refine);
                store.value_mut(id).data_mut()[i] = orig + h;
                let plus = eval(store);
                store.value_mut(id).data_mut()[i] = orig - h;
                let minus = eval(store);
                store.value_mut(id).data_mut()[i] = orig;
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("{name}[{i}] perturbed loss"),
                    });
                }
                let n = (plus - minus) / (2.0 * h);
                let r = relative_error(analytic, n, opts.floor);
                if r < rel {
                    (numeric, rel) = (n, r);
                }
                if rel < opts.accept {
                    break;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CoordCheck {
                    param: name,
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
