//! Generate a small synthetic campaign, write it to disk and read it back.
//!
//! `cargo run -p scrapline --example simulate_campaign [out-dir]`

use scrapline::annotation::Partition;
use scrapline::simulator::{gen_campaign, load_campaign, write_campaign, CampaignConfig, LabelSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CampaignConfig {
        n_train: 40,
        n_val: 10,
        n_test: 10,
        seed: 21,
        ..CampaignConfig::default()
    };
    let campaign = gen_campaign(&cfg)?;
    println!("digest {}", cfg.digest());
    println!(
        "annotator noise floor (MAE of consensus vs truth): {:.4}",
        campaign.noise_floor
    );

    for p in [Partition::Train, Partition::Val, Partition::Test] {
        let cars: Vec<_> = campaign.railcars_in(p).collect();
        let layers: usize = cars.iter().map(|r| r.layers.len()).sum();
        let eligible: usize = cars.iter().map(|r| r.eligible_layers()).sum();
        println!("{p:?}: {} railcars, {layers} layers, {eligible} eligible", cars.len());
    }

    let rc = &campaign.railcars[0];
    let truth = campaign.truth_of(&rc.railcar_id).expect("truth");
    let consensus = rc.consensus()?;
    println!(
        "{} on line {}: truth {:.2}%, consensus {:.2}% (std {:.2}) from {} raters",
        rc.railcar_id,
        rc.line,
        truth.contamination,
        consensus.contamination,
        consensus.std,
        rc.ratings.len()
    );

    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("scrapline-campaign"),
    };
    let manifest = write_campaign(&dir, &campaign)?;
    let back = load_campaign(&dir)?;
    let bags = back.labeled_bags(Partition::Train, LabelSource::Consensus)?;
    println!(
        "wrote {} railcars to {} ({} training bags on reload)",
        manifest.railcars,
        dir.display(),
        bags.len()
    );
    Ok(())
}
