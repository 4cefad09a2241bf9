//! The enhancement ablation: every setting from none to all three
//! resolutions, several seeds each, scored on the unseen domains.
//! Defaults to a reduced budget; pass `key=value` pairs to change it, for
//! example `epochs=30 train_scenes=200 val_scenes=50 lr=1e-4 ablation_seeds=0,1,2`
//! for the full run.

use cmformer::harness::{ablate_with_progress, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::parse("epochs = 12\ntrain_scenes = 100\nval_scenes = 20\nlr = 3e-4\nablation_seeds = 0,1")?;
    for kv in std::env::args().skip(1) {
        let (k, v) = kv.split_once('=').ok_or("arguments are key=value")?;
        cfg.set(k, v)?;
    }
    let out = std::env::temp_dir().join("cmformer_ablation");
    let table = ablate_with_progress(&cfg, &out, &mut |r| {
        println!(
            "{:<8} seed {}  params {:>6}  source {:.4}  unseen mean {:.4}",
            r.enhancement.to_string(),
            r.seed,
            r.num_params,
            r.source_miou.unwrap_or(f64::NAN),
            r.mean_target_miou().unwrap_or(f64::NAN)
        );
    })?;
    println!();
    print!("{}", table.to_csv());
    println!("\nwritten to {}", out.display());
    Ok(())
}
