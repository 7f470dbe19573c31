use proptest::prelude::*;

use dfvt_core::data::Label;
use dfvt_core::eval::{accuracy, auc, f1, fuse, CumulativeRow, ScoredPrediction};
use dfvt_core::learn::{anchor_penalty, sgd_step, AnchorSnapshot};
use dfvt_core::model::{attention, Model};
use dfvt_core::verify::{tiny_config, tiny_window};
use dfvt_core::{ModelConfig, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn shaped(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, scale))
}

fn predictions(min: usize) -> impl Strategy<Value = Vec<ScoredPrediction>> {
    prop::collection::vec((any::<bool>(), 0.0..=1.0f64), min..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (fake, p))| {
                let label = if fake { Label::Fake } else { Label::Real };
                ScoredPrediction::new(format!("s{i}"), label, p).unwrap()
            })
            .collect()
    })
}

fn both_classes(p: &[ScoredPrediction]) -> bool {
    p.iter().any(|x| x.label == Label::Fake) && p.iter().any(|x| x.label == Label::Real)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in shaped(6, 9, 30.0)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v);
        let out = tape.value(s);
        for r in 0..out.rows() {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in shaped(5, 12, 10.0)) {
        prop_assume!(x.last_dim() >= 2);
        let d = x.last_dim();
        let variances: Vec<f64> = (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().sum::<f64>() / d as f64;
                row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64
            })
            .collect();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let g = tape.constant(Tensor::full(&[d], 1.0));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(v, g, b).unwrap();
        let out = tape.value(y);
        for (r, var) in variances.iter().enumerate() {
            // eps is 1e-5; only rows with variance far above it are standardized
            if *var < 1e-2 {
                continue;
            }
            let row = out.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mismatched_matmul_is_rejected(a in 1..6usize, b in 1..6usize, c in 1..6usize, e in 1..6usize) {
        prop_assume!(b != c);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[a, b]));
        let y = tape.constant(Tensor::zeros(&[c, e]));
        let before = tape.len();
        prop_assert!(tape.matmul(x, y).is_err());
        prop_assert_eq!(tape.len(), before);
    }

    #[test]
    fn attention_weights_are_row_stochastic(seed in any::<u64>(), len in 1..7usize) {
        let mut cfg = tiny_config(false);
        cfg.n_blocks = 1;
        let model = Model::<f64>::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len * cfg.d_model).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![len, cfg.d_model], x).unwrap());
        let p = model.block_vars(&mut tape, 0);
        let out = attention(&mut tape, x, &p, cfg.n_heads).unwrap();
        prop_assert_eq!(out.weights.len(), cfg.n_heads);
        for w in out.weights {
            let w = tape.value(w);
            prop_assert_eq!(w.shape(), &[len, len][..]);
            for r in 0..len {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let model = Model::<f32>::init(&tiny_config(false), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = tiny_window(model.config(), &mut rng);
        let a = model.predict(&frames).unwrap();
        let b = model.predict(&frames).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let again = Model::<f32>::init(&tiny_config(false), seed).unwrap();
        prop_assert_eq!(again.predict(&frames).unwrap().to_bits(), a.to_bits());
    }

    #[test]
    fn token_arithmetic_holds(frames in 1..10usize, per_stream in 1..40usize, uv in any::<bool>()) {
        let cfg = ModelConfig {
            frames,
            use_uv: uv,
            n_tokens: per_stream * frames * if uv { 2 } else { 1 },
            ..ModelConfig::desk_hybrid_video()
        };
        prop_assert_eq!(cfg.tokens_per_stream(), per_stream);
        prop_assert_eq!(cfg.tokens_per_frame() * frames, cfg.n_tokens);
        prop_assert_eq!(cfg.seq_len(), cfg.n_tokens + 1);
    }

    #[test]
    fn metrics_lie_in_the_unit_interval(p in predictions(1), t in 0.0..=1.0f64) {
        for m in [accuracy(&p, t).unwrap(), f1(&p, t).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        if both_classes(&p) {
            prop_assert!((0.0..=1.0).contains(&auc(&p).unwrap()));
        }
    }

    #[test]
    fn auc_ignores_increasing_transforms(p in predictions(2)) {
        prop_assume!(both_classes(&p));
        let squashed: Vec<ScoredPrediction> = p
            .iter()
            .map(|x| ScoredPrediction::new(x.id.clone(), x.label, x.prob_fake.powi(3) * 0.5 + 0.1).unwrap())
            .collect();
        prop_assert!((auc(&p).unwrap() - auc(&squashed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fuse_is_commutative_and_idempotent(a in 0.0..=1.0f64, b in 0.0..=1.0f64, fake in any::<bool>()) {
        let label = if fake { Label::Fake } else { Label::Real };
        let pa = ScoredPrediction::new("x", label, a).unwrap();
        let pb = ScoredPrediction::new("x", label, b).unwrap();
        let ab = fuse(&pa, &pb).unwrap();
        prop_assert_eq!(ab.prob_fake.to_bits(), fuse(&pb, &pa).unwrap().prob_fake.to_bits());
        prop_assert_eq!(fuse(&pa, &pa).unwrap(), pa.clone());
        prop_assert!((0.0..=1.0).contains(&ab.prob_fake));
    }

    #[test]
    fn cumulative_mean_is_bracketed(acc in prop::collection::vec(0.0..=1.0f64, 1..8)) {
        let row = CumulativeRow::from_accuracies(acc.clone()).unwrap();
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(row.cumulative >= lo - 1e-12 && row.cumulative <= hi + 1e-12);
    }

    #[test]
    fn anchor_penalty_is_non_negative_and_zero_only_at_the_anchor(
        a in matrix(2, 3, 2.0),
        b in matrix(2, 3, 2.0),
        lambda in 0.0..10.0f64,
    ) {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", a.clone()).unwrap();
        let mut anchor_store = ParamStore::<f64>::new();
        anchor_store.insert("w", b.clone()).unwrap();
        let anchor = AnchorSnapshot::capture(&anchor_store);
        let mut tape = Tape::new();
        let pen = anchor_penalty(&mut tape, &store, &anchor, lambda).unwrap();
        let value = tape.scalar(pen);
        prop_assert!(value >= 0.0);
        let differs = a.data() != b.data();
        prop_assert_eq!(value > 0.0, lambda > 0.0 && differs);

        let at_anchor = AnchorSnapshot::capture(&store);
        let mut tape = Tape::new();
        let pen = anchor_penalty(&mut tape, &store, &at_anchor, lambda).unwrap();
        prop_assert_eq!(tape.scalar(pen), 0.0);
    }

    #[test]
    fn sgd_moves_each_value_by_exactly_rate_times_grad(w in matrix(3, 2, 3.0), lr in 1e-4..1.0f64) {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", w.clone()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        let grad = store.get(id).grad().unwrap().to_vec();
        sgd_step(&mut store, lr).unwrap();
        for ((new, old), g) in store.value(id).data().iter().zip(w.data()).zip(&grad) {
            prop_assert_eq!(new.to_bits(), (old - lr * g).to_bits());
        }
    }
}
