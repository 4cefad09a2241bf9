//! Leave-one-domain-out evaluation: trains briefly on "clear", then scores
//! the checkpoint on the held-out scenes of every style domain and appends
//! the rows to a CSV report.
//!
//! The default budget is a short demo run at a raised learning rate;
//! `cargo run --release --example evaluate_domains -- epochs=30 lr=1e-4`
//! restores the standard settings.

use cmformer::harness::{evaluate, source_splits, split_file_names, target_split, train, TrainConfig};
use cmformer::synthbench::write_dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::parse("epochs = 12\ntrain_scenes = 100\nval_scenes = 20\nlr = 3e-4")?;
    for kv in std::env::args().skip(1) {
        let (k, v) = kv.split_once('=').ok_or("arguments are key=value")?;
        cfg.set(k, v)?;
    }
    let dir = std::env::temp_dir().join("cmformer_evaluate_domains");
    let (tr, va) = source_splits(&cfg)?;
    let outcome = train(&cfg, &tr, &va, &dir)?;
    println!("in-domain val mIoU after {} epochs: {:?}", cfg.epochs, outcome.log.last().and_then(|r| r.val_miou));

    let report = dir.join("report.csv");
    let _ = std::fs::remove_file(&report);
    let val_path = dir.join(split_file_names(&cfg.source_domain).1);
    write_dataset(&va, &val_path)?;
    let r = evaluate(&outcome.checkpoint_path, &val_path, &cfg.source_domain, Some(&report))?;
    println!("{:<9} {:.4} (seen)", cfg.source_domain, r.miou.unwrap_or(f64::NAN));
    for domain in &cfg.target_domains {
        let path = dir.join(split_file_names(domain).1);
        write_dataset(&target_split(&cfg, domain)?, &path)?;
        let r = evaluate(&outcome.checkpoint_path, &path, domain, Some(&report))?;
        println!("{domain:<9} {:.4}", r.miou.unwrap_or(f64::NAN));
    }
    println!("report: {}", report.display());
    Ok(())
}
