//! Trains the full model on the "clear" source domain and prints one line
//! per epoch. Any `key=value` argument overrides the default configuration,
//! e.g. `cargo run --release --example train_clear -- seed=2 epochs=10`.

use std::time::Instant;

use cmformer::harness::{source_splits, train_with_progress, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    for kv in std::env::args().skip(1) {
        let (k, v) = kv.split_once('=').ok_or("arguments are key=value")?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let (train, val) = source_splits(&cfg)?;
    let out = std::env::temp_dir().join("cmformer_train_clear");
    println!(
        "{} train / {} val scenes, seed {}, enhancement {}, writing to {}",
        train.len(),
        val.len(),
        cfg.seed,
        cfg.enhancement,
        out.display()
    );
    let t = Instant::now();
    train_with_progress(&cfg, &train, &val, &out, &mut |r| {
        let miou = r.val_miou.map_or("NA".into(), |m| format!("{m:.4}"));
        println!(
            "epoch {:>2}  loss {:.4}  ce {:.4}  dice {:.4}  cls {:.4}  val mIoU {miou}  [{:.0}s]",
            r.epoch,
            r.loss,
            r.ce,
            r.dice,
            r.cls,
            t.elapsed().as_secs_f64()
        );
    })?;
    Ok(())
}
