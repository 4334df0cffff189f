//! Train attention-pooled MIL and mean-pooled MIL on the same campaign and
//! inspect where the attention weights go.
//!
//! `cargo run --release -p scrapline --example mil_attention`

use scrapline::annotation::Partition;
use scrapline::metrics::{mae, r2};
use scrapline::model::{train_mil, Bag, LabeledBag, MilModel, PoolingKind, TrainingConfig};
use scrapline::simulator::{gen_campaign, CampaignConfig, LabelSource};

fn score(model: &MilModel, data: &[LabeledBag]) -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let bags: Vec<&Bag> = data.iter().map(|d| &d.bag).collect();
    let pred: Vec<f64> = model.predict_batch(&bags)?.iter().map(|p| p.contamination).collect();
    let truth: Vec<f64> = data.iter().map(|d| d.label.contamination).collect();
    Ok((mae(&pred, &truth)?, r2(&pred, &truth)?))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let campaign = gen_campaign(&CampaignConfig {
        n_train: 160,
        n_val: 40,
        n_test: 40,
        p_hot: 0.15,
        seed: 4,
        ..CampaignConfig::default()
    })?;
    let train = campaign.labeled_bags(Partition::Train, LabelSource::Consensus)?;
    let val = campaign.labeled_bags(Partition::Val, LabelSource::Consensus)?;
    let test = campaign.labeled_bags(Partition::Test, LabelSource::Consensus)?;

    let mut attention = None;
    for pooling in [PoolingKind::Attention, PoolingKind::Mean] {
        let cfg = TrainingConfig {
            epochs: 15,
            pooling,
            ..TrainingConfig::default()
        };
        let out = train_mil(&train, &val, &cfg)?;
        let (m, r) = score(&out.model, &test)?;
        println!("{pooling:?}: test MAE {m:.3}, R2 {r:.3}");
        if pooling == PoolingKind::Attention {
            attention = Some(out.model);
        }
    }

    // Per-layer weights on the test railcar with the sharpest hot layer.
    let model = attention.expect("trained");
    let spike = |d: &LabeledBag| {
        let t = campaign.truth_of(d.bag.railcar_id()).expect("truth");
        t.layer_contamination.iter().cloned().fold(0.0, f64::max) / t.contamination.max(1e-9)
    };
    let rc = test
        .iter()
        .max_by(|a, b| spike(a).total_cmp(&spike(b)))
        .expect("non-empty");
    let truth = campaign.truth_of(rc.bag.railcar_id()).expect("truth");
    let pred = model.predict(&rc.bag)?;
    println!(
        "{}: predicted {:.2}%, consensus {:.2}%",
        rc.bag.railcar_id(),
        pred.contamination,
        rc.label.contamination
    );
    for (layer, w) in pred.layers.iter().zip(&pred.attention) {
        let c = truth.layer_contamination[*layer as usize];
        println!("  layer {layer:>2}  true {c:5.2}%  weight {w:.3}");
    }
    Ok(())
}
