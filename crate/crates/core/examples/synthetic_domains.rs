//! Renders a few scenes in every style domain, prints per-domain pixel
//! statistics and the shared class histogram, and writes the datasets.
//!
//! `cargo run --release --example synthetic_domains -- OUT_DIR`

use cmformer::synthbench::{generate_domain, write_dataset, SceneConfig, CLASS_NAMES, DOMAIN_PRESETS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("cmformer_domains"), Into::into);
    std::fs::create_dir_all(&out)?;
    let cfg = SceneConfig::default();
    let mut reference = None;
    for (name, style) in DOMAIN_PRESETS {
        let ds = generate_domain(name, &style, 0, 16, &cfg)?;
        let pixels: Vec<f64> = ds.samples.iter().flat_map(|s| s.image.iter().map(|&v| f64::from(v))).collect();
        let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
        let var = pixels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pixels.len() as f64;
        let labels: Vec<&[u8]> = ds.samples.iter().map(|s| s.labels.as_slice()).collect();
        let same = reference.get_or_insert_with(|| labels.iter().map(|l| l.to_vec()).collect::<Vec<_>>())
            .iter()
            .zip(&labels)
            .all(|(a, b)| a.as_slice() == *b);
        println!("{name:<9} mean {mean:.3}  std {:.3}  labels identical to clear: {same}", var.sqrt());
        let path = out.join(format!("{name}.cmsb"));
        write_dataset(&ds, &path)?;
        if name == "clear" {
            let hist = ds.class_histogram();
            let total: u64 = hist.iter().sum();
            for (c, n) in hist.iter().enumerate() {
                println!("    {:<8} {:5.1}%", CLASS_NAMES[c], 100.0 * *n as f64 / total as f64);
            }
        }
    }
    println!("datasets written to {}", out.display());
    Ok(())
}
