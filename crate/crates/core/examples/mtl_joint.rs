//! Joint regression and grade classification with a shared encoder, plus
//! the lambda sweep that picks the classification weight on validation.
//!
//! `cargo run --release -p scrapline --example mtl_joint`

use scrapline::annotation::Partition;
use scrapline::metrics::{classification_metrics, mae};
use scrapline::model::{select_lambda, train_mtl, Bag, TrainingConfig};
use scrapline::simulator::{gen_campaign, CampaignConfig, LabelSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let campaign = gen_campaign(&CampaignConfig {
        n_train: 160,
        n_val: 40,
        n_test: 40,
        seed: 8,
        ..CampaignConfig::default()
    })?;
    let train = campaign.labeled_bags(Partition::Train, LabelSource::Consensus)?;
    let val = campaign.labeled_bags(Partition::Val, LabelSource::Consensus)?;
    let test = campaign.labeled_bags(Partition::Test, LabelSource::Consensus)?;
    let cfg = TrainingConfig {
        epochs: 10,
        ..TrainingConfig::default()
    };

    let sweep = select_lambda(&[0.1, 0.5, 1.0], &train, &val, &cfg)?;
    for s in &sweep.scores {
        println!(
            "lambda {:.1}: val MAE {:.3}, macro F1 {:.3}",
            s.lambda, s.val_mae, s.val_macro_f1
        );
    }
    println!("selected lambda {}", sweep.best);

    let out = train_mtl(
        &train,
        &val,
        &TrainingConfig {
            lambda_cls: sweep.best,
            ..cfg
        },
    )?;
    let bags: Vec<&Bag> = test.iter().map(|d| &d.bag).collect();
    let preds = out.model.predict_batch(&bags)?;
    let pc: Vec<f64> = preds.iter().map(|p| p.contamination).collect();
    let tc: Vec<f64> = test.iter().map(|d| d.label.contamination).collect();
    let pg: Vec<usize> = preds.iter().map(|p| p.grade.expect("mtl grade")).collect();
    let tg: Vec<usize> = test.iter().map(|d| d.label.grade.expect("labeled grade")).collect();
    let cm = classification_metrics(&pg, &tg, out.model.dims().class_num)?;
    println!(
        "test MAE {:.3}, accuracy {:.3}, macro F1 {:.3}",
        mae(&pc, &tc)?,
        cm.accuracy,
        cm.macro_f1
    );
    println!("confusion (rows = truth): {:?}", cm.confusion);
    Ok(())
}
