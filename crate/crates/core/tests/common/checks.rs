//! Library-versus-oracle comparisons on random instances. Each returns the
//! largest absolute deviation it observed.

use cmformer::attention::{masked_attention_with_pos, scaled_self_attention, AttentionBias, AttentionParams};
use cmformer::cma::{branch_forward, decoder_layer, CmaLayerParams, LayerInputs};
use cmformer::ndtensor::{Tape, Tensor};
use cmformer::params::{Binder, ParamInit, ParamStore};
use cmformer::pixelnet::{encode, pixel_decode_multiscale};
use cmformer::segmodel::{predict_heads, Enhancement, ModelConfig, SegModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Random masked and self attention with `N ≤ 8`, `H·W ≤ 64`, `d ≤ 16`.
pub fn attention_vs_oracle(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=8);
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=64 / h);
        let p = h * w;
        let d = 2 * rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, &mut ParamInit::new(seed), "a", d);
        perturb_params(&mut store, &mut rng, 0.3);
        let x = random_mat(&mut rng, n, d, 1.0);
        let f = random_mat(&mut rng, p, d, 1.0);
        let q_pos = random_mat(&mut rng, n, d, 1.0);
        let f_pos = random_mat(&mut rng, p, d, 1.0);
        let fg: Vec<bool> = (0..n * p).map(|_| rng.random_bool(0.6)).collect();
        let bias = AttentionBias::from_foreground(n, p, &fg);
        let oracle_bias: Vec<f64> = fg
            .chunks(p)
            .flat_map(|row| {
                let any = row.iter().any(|&b| b);
                row.iter()
                    .map(move |&b| if b || !any { 0.0 } else { f64::NEG_INFINITY })
                    .collect::<Vec<_>>()
            })
            .collect();
        let use_pos = rng.random_bool(0.5);

        let tape = Tape::new();
        let b = Binder::infer(&tape, &store);
        let (xv, fv) = (b.constant(&to_tensor(&x)), b.constant(&to_tensor(&f)));
        let (qp, fp) = (b.constant(&to_tensor(&q_pos)), b.constant(&to_tensor(&f_pos)));
        let got = if use_pos {
            masked_attention_with_pos(&b, xv, Some(qp), fv, Some(fp), &bias, &params)
        } else {
            masked_attention_with_pos(&b, xv, None, fv, None, &bias, &params)
        }
        .unwrap()
        .data();
        let want = if use_pos {
            masked_attention(&x, Some(&q_pos), &f, Some(&f_pos), &oracle_bias, &params, &store)
        } else {
            masked_attention(&x, None, &f, None, &oracle_bias, &params, &store)
        };
        worst = worst.max(max_abs_diff(&got, &flat(&want)));

        let got = scaled_self_attention(&b, xv, &params).unwrap().data();
        let want = self_attention(&x, &params, &store);
        worst = worst.max(max_abs_diff(&got, &flat(&want)));
    }
    worst
}

pub struct LayerCase {
    pub store: ParamStore,
    pub params: CmaLayerParams,
    pub x: Mat,
    pub x_d: Mat,
    pub q_pos: Mat,
    pub f: Mat,
    pub h: usize,
    pub w: usize,
    pub mask_logits: Tensor,
}

/// A random layer instance with perturbed parameters and a mask source at
/// twice the feature resolution.
pub fn layer_case(seed: u64, enhanced: bool) -> LayerCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let d = 2 * rng.random_range(2..=6);
    let (h, w) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4));
    let mut store = ParamStore::new();
    let params = CmaLayerParams::new(
        &mut store,
        &mut ParamInit::new(seed),
        &mut ParamInit::new(seed + 1),
        "layer",
        d,
        enhanced,
        false,
    );
    perturb_params(&mut store, &mut rng, 0.3);
    let logits: Vec<f64> = (0..n * 4 * h * w).map(|_| rng.random_range(-2.0..1.0)).collect();
    LayerCase {
        params,
        x: random_mat(&mut rng, n, d, 1.0),
        x_d: random_mat(&mut rng, n, d, 1.0),
        q_pos: random_mat(&mut rng, n, d, 1.0),
        f: random_mat(&mut rng, h * w, d, 1.0),
        h,
        w,
        mask_logits: Tensor::new(&[n, 2 * h, 2 * w], logits).unwrap(),
        store,
    }
}

/// Library layer output (and low stream) for a case.
pub fn run_layer(case: &LayerCase) -> (Vec<f64>, Option<Vec<f64>>) {
    let tape = Tape::new();
    let b = Binder::infer(&tape, &case.store);
    let d = case.x[0].len();
    let f = Tensor::new(&[case.h, case.w, d], flat(&case.f)).unwrap();
    let out = decoder_layer(
        &b,
        LayerInputs {
            x_prev: b.constant(&to_tensor(&case.x)),
            x_prev_d: b.constant(&to_tensor(&case.x_d)),
            q_pos: Some(b.constant(&to_tensor(&case.q_pos))),
            feature: b.constant(&f),
            mask_logits: &case.mask_logits,
        },
        &case.params,
    )
    .unwrap();
    (out.x_final.data(), out.x_lo.map(|v| v.data()))
}

pub fn cma_vs_oracle(seed: u64, enhanced: bool) -> f64 {
    let case = layer_case(seed, enhanced);
    let (got, got_lo) = run_layer(&case);
    let want = super::cma_layer(
        &case.x,
        &case.x_d,
        Some(&case.q_pos),
        &case.f,
        case.h,
        case.w,
        &case.mask_logits,
        &case.params,
        &case.store,
    );
    let mut err = max_abs_diff(&got, &flat(&want.out));
    if let (Some(a), Some(b)) = (got_lo, want.x_lo) {
        err = err.max(max_abs_diff(&a, &flat(&b)));
    }
    err
}

/// With the fusion set to `[I | 0]` the enhanced layer must equal the
/// high-branch-only layer built from the same parameters.
pub fn fused_out_low_branch_deviation(seed: u64) -> f64 {
    let mut case = layer_case(seed, true);
    let d = case.x[0].len();
    let lo = case.params.lo.expect("enhanced");
    let mut wt = vec![0.0; 2 * d * d];
    for i in 0..d {
        wt[i * d + i] = 1.0;
    }
    lo.fuse.set(&mut case.store, &wt, &vec![0.0; d]);
    let (enhanced, _) = run_layer(&case);
    let baseline = CmaLayerParams {
        lo: None,
        ..case.params
    };
    let (plain, _) = run_layer(&LayerCase {
        params: baseline,
        store: case.store.clone(),
        x: case.x.clone(),
        x_d: case.x_d.clone(),
        q_pos: case.q_pos.clone(),
        f: case.f.clone(),
        mask_logits: case.mask_logits.clone(),
        ..case
    });
    max_abs_diff(&enhanced, &plain)
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(&[size, size, 3], data).unwrap()
}

/// Compares the full model with enhancement switched off against a plain
/// mask-transformer decoder assembled here from the public building blocks
/// (masked attention, self-attention, norms, feed-forward, heads). Returns
/// the worst deviation over all class and mask logits of all stages, and
/// whether the parameter count matches the enhanced model minus its
/// low-resolution parameters.
pub fn degenerate_decoder_deviation(seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = ModelConfig::default();
    config.decoder.enhancement = Enhancement::NONE;
    let model = SegModel::new(config.clone(), seed).unwrap();
    let image = random_image(&mut rng, 64);

    let tape = Tape::new();
    let b = Binder::infer(&tape, &model.store);
    let got = model.forward(&b, &image).unwrap();

    let img = b.constant(&image);
    let decoded = pixel_decode_multiscale(&b, &encode(&b, img, &model.pixel).unwrap(), &model.pixel).unwrap();
    let mf = decoded.mask_features;
    let q_pos = b.p(model.queries.q_pos);
    let mut x = b.p(model.queries.x0);
    let mut preds = vec![predict_heads(&b, x, mf, &model.heads).unwrap()];
    for (l, layer) in model.layers.iter().enumerate() {
        let stride = model.config.decoder.resolution_schedule[l];
        let mask = preds.last().unwrap().values().mask_logits;
        let feature = decoded.levels.level(stride).unwrap();
        let attended = branch_forward(&b, x, Some(q_pos), feature, &mask, &layer.hi).unwrap();
        let hidden = layer.ffn_in.forward(&b, attended).unwrap().relu().unwrap();
        let ffn = layer.ffn_out.forward(&b, hidden).unwrap();
        x = layer.ffn_norm.forward(&b, attended.add(ffn).unwrap()).unwrap();
        preds.push(predict_heads(&b, x, mf, &model.heads).unwrap());
    }

    let mut worst: f64 = 0.0;
    assert_eq!(got.predictions.len(), preds.len());
    for (a, p) in got.predictions.iter().zip(&preds) {
        worst = worst.max(max_abs_diff(&a.class_logits.data(), &p.class_logits.data()));
        worst = worst.max(max_abs_diff(&a.mask_logits.data(), &p.mask_logits.data()));
    }

    let full = SegModel::new(ModelConfig::default(), seed).unwrap();
    let low_only: usize = full
        .store
        .iter()
        .filter(|(name, _)| name.contains(".lo.") || name.contains(".fuse."))
        .map(|(_, t)| t.numel())
        .sum();
    (worst, model.num_params() == full.num_params() - low_only)
}

/// Leaves only pixel (0,0) of the mask source in the foreground, so each
/// query sees feature row 0 at high resolution and pooled cell (0,0) at
/// low resolution. Perturbing every other feature row must leave both
/// output streams unchanged; returns the largest change.
pub fn hidden_positions_change(seed: u64) -> f64 {
    let mut case = layer_case(seed, true);
    let n = case.x.len();
    let (h0, w0) = (2 * case.h, 2 * case.w);
    let mut logits = vec![-5.0; n * h0 * w0];
    for q in 0..n {
        logits[q * h0 * w0] = 5.0;
    }
    case.mask_logits = Tensor::new(&[n, h0, w0], logits).unwrap();
    let (before, before_lo) = run_layer(&case);
    let visible = [0, 1, case.w, case.w + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (i, row) in case.f.iter_mut().enumerate() {
        if !visible.contains(&i) {
            for v in row.iter_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
    }
    let (after, after_lo) = run_layer(&case);
    max_abs_diff(&before, &after).max(max_abs_diff(&before_lo.unwrap(), &after_lo.unwrap()))
}

/// Number of random matrices (rows ≤ 6, columns ≤ rows) on which the
/// library's matching differs from exhaustive search, out of `cases`.
pub fn hungarian_disagreements(seed: u64, cases: usize) -> usize {
    use cmformer::objective::{assignment_cost, hungarian_match};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(0..=rows);
        let cost = random_cost(&mut rng, rows, cols);
        let (want, opt) = brute_force_match(&cost);
        let got = hungarian_match(&cost).unwrap();
        let seq: Vec<usize> = got.iter().map(|m| m.query).collect();
        let in_order = got.iter().enumerate().all(|(i, m)| m.segment == i);
        let cost_ok = (assignment_cost(&cost, &got) - opt).abs() <= 1e-9 * (1.0 + opt.abs());
        if seq != want || !in_order || !cost_ok {
            bad += 1;
        }
    }
    bad
}

/// Write→read identity for both file formats and typed errors for broken
/// headers. Returns a description of the first problem found.
pub fn format_round_trips(seed: u64) -> Result<(), String> {
    use cmformer::segmodel::CheckpointError;
    use cmformer::synthbench::{domain_preset, generate_domain, read_dataset, write_dataset, Dataset, DatasetError, SceneConfig};

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = generate_domain("fog", &domain_preset("fog").unwrap(), seed, 3, &SceneConfig::default())?;
    let path = dir.path().join("fog.cmsb");
    write_dataset(&ds, &path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = read_dataset(&path).map_err(|e| e.to_string())?;
    if back != ds || back.to_bytes().map_err(|e| e.to_string())? != bytes {
        return Err("dataset round trip is not bitwise".into());
    }

    let model = SegModel::new(ModelConfig::default(), seed)?.quantized();
    let ckpt = dir.path().join("m.cmck");
    model.save_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let cbytes = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    let loaded = SegModel::load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    if loaded != model || loaded.to_checkpoint_bytes() != cbytes {
        return Err("checkpoint round trip is not bitwise".into());
    }

    let mut b = bytes.clone();
    b[0] = b'X';
    if !matches!(Dataset::from_bytes(&b), Err(DatasetError::BadMagic(_))) {
        return Err("dataset magic".into());
    }
    let mut b = bytes.clone();
    b[4] = 9;
    if !matches!(Dataset::from_bytes(&b), Err(DatasetError::UnsupportedVersion(9))) {
        return Err("dataset version".into());
    }
    let mut c = cbytes.clone();
    c[1] = 0;
    if !matches!(SegModel::from_checkpoint_bytes(&c), Err(CheckpointError::BadMagic(_))) {
        return Err("checkpoint magic".into());
    }
    let mut c = cbytes.clone();
    c[4] = 7;
    if !matches!(SegModel::from_checkpoint_bytes(&c), Err(CheckpointError::UnsupportedVersion(7))) {
        return Err("checkpoint version".into());
    }
    for cut in [0, 3, 7, 20, 27, 28, 1000, bytes.len() - 1] {
        if !matches!(Dataset::from_bytes(&bytes[..cut]), Err(DatasetError::Truncated)) {
            return Err(format!("dataset cut at {cut}"));
        }
    }
    for cut in [0, 3, 7, 11, 12, 40, 500, cbytes.len() - 1] {
        if !matches!(SegModel::from_checkpoint_bytes(&cbytes[..cut]), Err(CheckpointError::Truncated)) {
            return Err(format!("checkpoint cut at {cut}"));
        }
    }
    // Arbitrary header damage must come back as an error value or a valid
    // object, never a panic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..300 {
        let mut b = bytes.clone();
        let mut c = cbytes.clone();
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(0..28);
            b[i] = rng.random();
            let j = rng.random_range(0..64);
            c[j] = rng.random();
        }
        let ok = std::panic::catch_unwind(|| {
            let _ = Dataset::from_bytes(&b);
            let _ = SegModel::from_checkpoint_bytes(&c);
        });
        if ok.is_err() {
            return Err("corrupted header caused a panic".into());
        }
    }
    Ok(())
}

/// Labels of each scene seed must be identical across every domain preset.
pub fn content_is_style_invariant(seeds: std::ops::Range<u64>) -> Result<(), String> {
    use cmformer::synthbench::{generate_domain, SceneConfig, DOMAIN_PRESETS};
    let cfg = SceneConfig::default();
    let count = (seeds.end - seeds.start) as usize;
    let sets: Vec<_> = DOMAIN_PRESETS
        .iter()
        .map(|(name, style)| generate_domain(name, style, seeds.start, count, &cfg))
        .collect::<Result<_, _>>()?;
    for i in 0..count {
        let reference = &sets[0].samples[i].labels;
        for (k, set) in sets.iter().enumerate().skip(1) {
            if &set.samples[i].labels != reference {
                return Err(format!("seed {} differs in {}", seeds.start + i as u64, DOMAIN_PRESETS[k].0));
            }
        }
    }
    Ok(())
}
