use dfvt_core::data::{gen_spatial_task, Dataset, Geometry, TaskParams};
use dfvt_core::learn::{finetune_incremental, train, AnchorSnapshot, TrainConfig};
use dfvt_core::model::Model;
use dfvt_core::ModelConfig;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        ..ModelConfig::desk_patch()
    }
}

fn data(seed: u64, n: usize) -> Dataset {
    let g = Geometry {
        frames: 1,
        ..Geometry::default()
    };
    gen_spatial_task(seed, n, g, &TaskParams::default()).unwrap()
}

fn cfg(lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        learning_rate: 0.03,
        batch_size: 4,
        seed: 3,
        anchor_weight: lambda,
        ..TrainConfig::default()
    }
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.params().iter().flat_map(|(_, p)| p.value().data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn training_is_bitwise_reproducible() {
    let ds = data(1, 16);
    let mut a = Model::<f32>::init(&small_model(), 7).unwrap();
    let mut b = Model::<f32>::init(&small_model(), 7).unwrap();
    let ha = train(&mut a, &ds, &cfg(0.0)).unwrap();
    let hb = train(&mut b, &ds, &cfg(0.0)).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ha.to_tsv(), hb.to_tsv());
}

#[test]
fn zero_lambda_finetune_matches_plain_training() {
    let ds = data(2, 16);
    let base = Model::<f32>::init(&small_model(), 11).unwrap();
    let anchor = AnchorSnapshot::capture(base.params());
    let mut plain = base.clone();
    let mut tuned = base.clone();
    train(&mut plain, &ds, &cfg(0.0)).unwrap();
    finetune_incremental(&mut tuned, &ds, &anchor, &cfg(0.0)).unwrap();
    assert_eq!(bits(&plain), bits(&tuned));
}

#[test]
fn stronger_anchor_keeps_parameters_closer() {
    let ds = data(3, 16);
    let base = Model::<f32>::init(&small_model(), 13).unwrap();
    let anchor = AnchorSnapshot::capture(base.params());
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.01, 0.1, 1.0, 10.0] {
        let mut m = base.clone();
        let c = TrainConfig {
            learning_rate: 0.01,
            ..cfg(lambda)
        };
        finetune_incremental(&mut m, &ds, &anchor, &c).unwrap();
        let d = anchor.squared_distance(m.params()).unwrap();
        assert!(d <= last * (1.0 + 1e-6), "lambda {lambda}: {d} > {last}");
        last = d;
    }
}

#[test]
fn huge_anchor_pins_parameters() {
    let ds = data(4, 16);
    let base = Model::<f32>::init(&small_model(), 17).unwrap();
    let anchor = AnchorSnapshot::capture(base.params());
    let mut m = base.clone();
    let c = TrainConfig {
        learning_rate: 1e-5,
        ..cfg(1e4)
    };
    finetune_incremental(&mut m, &ds, &anchor, &c).unwrap();
    assert!(anchor.squared_distance(m.params()).unwrap() < 1e-3);
}

#[test]
fn empty_dataset_and_bad_rate_rejected() {
    let mut m = Model::<f32>::init(&small_model(), 1).unwrap();
    assert!(train(&mut m, &Dataset::default(), &cfg(0.0)).is_err());
    let c = TrainConfig {
        learning_rate: 0.0,
        ..cfg(0.0)
    };
    assert!(train(&mut m, &data(5, 4), &c).is_err());
}
