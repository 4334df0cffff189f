use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scrapline::model::{
    train_mil, train_mtl, Bag, BagLabel, Instance, LabeledBag, MilModel, ModelDims, PoolingKind, TrainingConfig,
};
use scrapline::tensor::{GradCheckOptions, OptimizerConfig};

fn dims() -> ModelDims {
    ModelDims {
        feature_dim: 4,
        enc_dim: 8,
        attn_dim: 4,
        head_hidden: 8,
        class_num: 3,
    }
}

fn dataset(n: usize, seed: u64) -> Vec<LabeledBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c: f64 = rng.random_range(0.0..5.0);
            let layers = rng.random_range(3..7);
            let inst = (0..layers)
                .map(|j| {
                    let f = (0..4)
                        .map(|k| c / 5.0 * (k as f64 + 1.0) + rng.random_range(-0.1..0.1))
                        .collect();
                    Instance::new(j, f)
                })
                .collect();
            let bag = Bag::new(format!("rc{i}"), inst).unwrap();
            LabeledBag::new(
                bag,
                BagLabel {
                    contamination: c,
                    grade: Some((c as usize).min(2)),
                },
            )
            .unwrap()
        })
        .collect()
}

fn cfg() -> TrainingConfig {
    TrainingConfig {
        epochs: 4,
        batch_size: 4,
        samples_per_bag: 3,
        dims: dims(),
        seed: 17,
        ..TrainingConfig::default()
    }
}

#[test]
fn lambda_zero_reproduces_mil_losses_bitwise() {
    let data = dataset(13, 1);
    let mil = train_mil(&data, &[], &cfg()).unwrap();
    let mtl = train_mtl(
        &data,
        &[],
        &TrainingConfig {
            lambda_cls: 0.0,
            ..cfg()
        },
    )
    .unwrap();
    assert_eq!(mil.log.steps.len(), mtl.log.steps.len());
    for (a, b) in mil.log.steps.iter().zip(&mtl.log.steps) {
        assert_eq!(a.total.to_bits(), b.regression.to_bits());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
}

#[test]
fn same_seed_same_weights() {
    let data = dataset(9, 2);
    let a = train_mtl(&data, &data, &cfg()).unwrap();
    let b = train_mtl(&data, &data, &cfg()).unwrap();
    assert_eq!(a.model.param_digest(), b.model.param_digest());
    assert_eq!(a.log, b.log);
    let c = train_mtl(&data, &data, &TrainingConfig { seed: 18, ..cfg() }).unwrap();
    assert_ne!(a.model.param_digest(), c.model.param_digest());
}

#[test]
fn overfits_a_single_bag() {
    let data = dataset(1, 3);
    let target = data[0].label.contamination;
    let cfg = TrainingConfig {
        epochs: 400,
        batch_size: 1,
        dropout: 0.0,
        optimizer: OptimizerConfig::adam(1e-2),
        ..cfg()
    };
    let out = train_mil(&data, &[], &cfg).unwrap();
    let last = out.log.steps.last().unwrap().total;
    assert!(last < 1e-3, "final loss {last}");
    let pred = out.model.predict(&data[0].bag).unwrap().contamination;
    assert!((pred - target).abs() < 0.05, "{pred} vs {target}");
}

#[test]
fn training_loss_decreases() {
    let data = dataset(40, 4);
    let out = train_mil(&data, &[], &TrainingConfig { epochs: 30, ..cfg() }).unwrap();
    let first = out.log.epochs[0].train_loss;
    let last = out.log.epochs.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn mil_and_mtl_gradients_match_finite_differences() {
    let data = dataset(3, 5);
    let bags: Vec<&Bag> = data.iter().map(|d| &d.bag).collect();
    let targets: Vec<f64> = data.iter().map(|d| d.label.contamination).collect();
    let grades: Vec<usize> = data.iter().map(|d| d.label.grade.unwrap()).collect();
    let mut model = MilModel::init(dims(), PoolingKind::Attention, 8).unwrap();
    let opts = GradCheckOptions::default();
    let r = model.check_gradients(&bags, &targets, None, &opts).unwrap();
    assert!(r.passed(), "{r:?}");
    assert_eq!(r.coords_checked, r.coords_total);
    let r = model
        .check_gradients(&bags, &targets, Some((&grades, 0.7)), &opts)
        .unwrap();
    assert!(r.passed(), "{r:?}");
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn embedding_is_permutation_invariant_exhaustively() {
    let model = MilModel::init(dims(), PoolingKind::Attention, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for n in 1..=8 {
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let base_rows: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let base = model.forward_bag(&base_rows).unwrap();
        for perm in permutations(n) {
            let rows: Vec<&[f64]> = perm.iter().map(|&i| feats[i].as_slice()).collect();
            let emb = model.forward_bag(&rows).unwrap();
            let total: f64 = emb.attention.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            for (a, b) in emb.z.iter().zip(&base.z) {
                assert!((a - b).abs() <= 1e-9);
            }
            for (k, &i) in perm.iter().enumerate() {
                assert!((emb.attention[k] - base.attention[i]).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn attention_weights_form_a_distribution(
        seed in 0u64..1000,
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..20),
    ) {
        let model = MilModel::init(dims(), PoolingKind::Attention, seed).unwrap();
        let r: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
        let emb = model.forward_bag(&r).unwrap();
        prop_assert!(emb.attention.iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert!((emb.attention.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn mean_pooling_is_uniform(n in 1usize..12) {
        let model = MilModel::init(dims(), PoolingKind::Mean, 0).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64; 4]).collect();
        let r: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
        let emb = model.forward_bag(&r).unwrap();
        for a in emb.attention {
            prop_assert!((a - 1.0 / n as f64).abs() < 1e-15);
        }
    }
}

/// Five-layer railcars where exactly one layer runs hot: the trained
/// attention should put its largest weight on that layer in 80% of test bags.
/// The campaign label is the plain layer mean, so nothing in the loss rewards
/// this and the measured rate sits near 50% (chance is 20%).
#[test]
#[ignore = "learned-model property that does not hold on this simulator; run with --ignored"]
fn attention_finds_the_hot_layer() {
    use scrapline::annotation::Partition;
    use scrapline::simulator::{gen_campaign, CampaignConfig, LabelSource};

    let c = gen_campaign(&CampaignConfig {
        p_hot: 0.2,
        layers_min: 5,
        layers_max: 5,
        ..CampaignConfig::default()
    })
    .unwrap();
    let bags = |p| c.labeled_bags(p, LabelSource::Consensus).unwrap();
    let model = train_mil(
        &bags(Partition::Train),
        &bags(Partition::Val),
        &TrainingConfig::default(),
    )
    .unwrap()
    .model;
    let (mut n, mut hit) = (0, 0);
    for d in bags(Partition::Test) {
        let mut lc: Vec<(f64, u32)> = c
            .truth_of(d.bag.railcar_id())
            .unwrap()
            .layer_contamination
            .iter()
            .zip(0..)
            .map(|(&v, i)| (v, i))
            .collect();
        lc.sort_by(|a, b| b.0.total_cmp(&a.0));
        if lc[0].0 < 2.5 * lc[1].0 {
            continue;
        }
        let p = model.predict(&d.bag).unwrap();
        let top = (0..p.attention.len())
            .max_by(|&a, &b| p.attention[a].total_cmp(&p.attention[b]))
            .unwrap();
        n += 1;
        hit += (p.layers[top] == lc[0].1) as usize;
    }
    assert!(n >= 10, "only {n} single-hot bags");
    let rate = hit as f64 / n as f64;
    assert!(
        rate >= 0.8,
        "hot layer gets the top weight in {hit}/{n} bags ({:.1}%)",
        100.0 * rate
    );
}
