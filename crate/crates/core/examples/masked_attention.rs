//! Masked cross-attention on a toy 4×4 feature map: each query is limited
//! to its predicted foreground, and a query with an empty mask falls back
//! to attending everywhere.

use cmformer::attention::{mask_to_bias, masked_attention, AttentionParams};
use cmformer::ndtensor::{Tape, Tensor};
use cmformer::params::{Binder, ParamInit, ParamStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n, h, w, d) = (3, 4, 4, 8);
    // Query 0 owns the left half, query 1 the top-right corner, query 2
    // has no foreground at all.
    let mut logits = vec![-4.0; n * h * w];
    for y in 0..h {
        for x in 0..w {
            if x < 2 {
                logits[y * w + x] = 4.0;
            }
            if y < 2 && x >= 2 {
                logits[h * w + y * w + x] = 4.0;
            }
        }
    }
    let bias = mask_to_bias(&Tensor::new(&[n, h, w], logits)?, (h, w))?;
    for q in 0..n {
        let visible: String = (0..h * w).map(|j| if bias.is_masked(q, j) { '.' } else { '#' }).collect();
        let rows: Vec<&str> = (0..h).map(|y| &visible[y * w..(y + 1) * w]).collect();
        println!("query {q}: {}", rows.join(" "));
    }
    println!("rows with the empty-mask fallback: {:?}", bias.empty_rows());

    let mut store = ParamStore::new();
    let params = AttentionParams::new(&mut store, &mut ParamInit::new(7), "demo", d);
    let tape = Tape::new();
    let b = Binder::infer(&tape, &store);
    let x = b.constant(&Tensor::zeros(&[n, d]));
    let feat: Vec<f64> = (0..h * w * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let f = b.constant(&Tensor::new(&[h * w, d], feat)?);
    let out = masked_attention(&b, x, f, &bias, &params)?;
    for (q, row) in out.data().chunks(d).enumerate() {
        println!("updated query {q}: {:?}", row.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
    Ok(())
}
