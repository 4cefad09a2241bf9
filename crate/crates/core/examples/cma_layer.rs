//! One content-enhanced decoder layer next to its plain counterpart on the
//! same inputs. With the fusion set to pass only the high-resolution
//! stream, the two agree exactly.

use cmformer::cma::{baseline_layer, cma_layer, CmaLayerParams, LayerInputs};
use cmformer::ndtensor::{Tape, Tensor};
use cmformer::params::{Binder, ParamInit, ParamStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n, d, h, w) = (20, 32, 16, 16);
    let mut store = ParamStore::new();
    let params = CmaLayerParams::new(&mut store, &mut ParamInit::new(1), &mut ParamInit::new(2), "layer", d, true, false);
    println!("layer parameters: {}", store.num_scalars());

    let wave = |len: usize, k: f64| -> Vec<f64> { (0..len).map(|i| (i as f64 * k).sin()).collect() };
    let x = Tensor::new(&[n, d], wave(n * d, 0.37))?;
    let f = Tensor::new(&[h, w, d], wave(h * w * d, 0.11))?;
    let masks = Tensor::new(&[n, h, w], wave(n * h * w, 0.53))?;

    let run = |store: &ParamStore| -> Result<(Vec<f64>, Vec<f64>), Box<dyn std::error::Error>> {
        let tape = Tape::new();
        let b = Binder::infer(&tape, store);
        let inputs = LayerInputs {
            x_prev: b.constant(&x),
            x_prev_d: b.constant(&x),
            q_pos: None,
            feature: b.constant(&f),
            mask_logits: &masks,
        };
        let enhanced = cma_layer(&b, inputs, &params)?;
        let plain = baseline_layer(&b, inputs, &params)?;
        let nrm = enhanced.diagnostics;
        println!(
            "  branch norms: high {:.3}, low {:.3}, output {:.3}",
            nrm.hi,
            nrm.lo.unwrap_or(f64::NAN),
            nrm.out
        );
        Ok((enhanced.x_final.data(), plain.x_final.data()))
    };

    println!("trained-from-scratch fusion:");
    let (a, b) = run(&store)?;
    println!("  output shape {n}×{d}, max |enhanced − plain| = {:.3e}", max_diff(&a, &b));

    let lo = params.lo.expect("enhanced layer");
    let mut pass_high = vec![0.0; 2 * d * d];
    for i in 0..d {
        pass_high[i * d + i] = 1.0;
    }
    lo.fuse.set(&mut store, &pass_high, &vec![0.0; d]);
    println!("fusion = [I | 0]:");
    let (a, b) = run(&store)?;
    println!("  max |enhanced − plain| = {:.3e}", max_diff(&a, &b));
    Ok(())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
