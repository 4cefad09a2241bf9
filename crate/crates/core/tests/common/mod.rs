//! Explicit-loop reference implementations shared by the integration tests
//! and the acceptance suite. Nothing here calls the library's tensor ops.

#![allow(dead_code)]

use cmformer::attention::AttentionParams;
use cmformer::cma::CmaLayerParams;
use cmformer::ndtensor::Tensor;
use cmformer::objective::CostMatrix;
use cmformer::params::{Affine, Norm, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Adds uniform noise to every parameter so that zero biases, unit gains
/// and other special values do not hide mistakes.
pub fn perturb_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn affine(x: &Mat, a: &Affine, store: &ParamStore) -> Mat {
    let w = store.get(a.weight).data();
    let bias = a.bias.map(|id| store.get(id).data().to_vec());
    x.iter()
        .map(|row| {
            (0..a.d_out)
                .map(|j| {
                    let mut s = bias.as_ref().map_or(0.0, |b| b[j]);
                    for (i, &xi) in row.iter().enumerate() {
                        s += xi * w[i * a.d_out + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layernorm(x: &Mat, n: &Norm, store: &ParamStore) -> Mat {
    let g = store.get(n.gamma).data();
    let b = store.get(n.beta).data();
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * g[j] + b[j])
                .collect()
        })
        .collect()
}

/// Softmax over the entries whose bias is not `-inf`.
fn masked_softmax(logits: &[f64], bias: &[f64]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(bias)
        .filter(|(_, b)| b.is_finite())
        .map(|(l, b)| l + b)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(bias)
        .map(|(l, b)| if b.is_finite() { (l + b - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Single-head attention with the residual, loop by loop.
/// `bias` is `N × P` with entries `0` or `-inf`.
pub fn masked_attention(
    x_prev: &Mat,
    q_pos: Option<&Mat>,
    f: &Mat,
    f_pos: Option<&Mat>,
    bias: &[f64],
    p: &AttentionParams,
    store: &ParamStore,
) -> Mat {
    let q_in = q_pos.map_or_else(|| x_prev.clone(), |qp| add(x_prev, qp));
    let k_in = f_pos.map_or_else(|| f.clone(), |fp| add(f, fp));
    let q = affine(&q_in, &p.q, store);
    let k = affine(&k_in, &p.k, store);
    let v = affine(f, &p.v, store);
    let positions = f.len();
    let scale = (p.d_k as f64).sqrt();
    let mut out = Vec::with_capacity(x_prev.len());
    for (i, qi) in q.iter().enumerate() {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        let a = masked_softmax(&logits, &bias[i * positions..(i + 1) * positions]);
        let mut row = x_prev[i].clone();
        for (j, aj) in a.iter().enumerate() {
            for (c, r) in row.iter_mut().enumerate() {
                *r += aj * v[j][c];
            }
        }
        out.push(row);
    }
    out
}

/// Scaled dot-product self-attention without residual.
pub fn self_attention(x: &Mat, p: &AttentionParams, store: &ParamStore) -> Mat {
    let zeros = vec![0.0; x.len() * x.len()];
    let with_residual = masked_attention(x, None, x, None, &zeros, p, store);
    with_residual
        .iter()
        .zip(x)
        .map(|(r, xr)| r.iter().zip(xr).map(|(a, b)| a - b).collect())
        .collect()
}

/// Binarizes `N × H₀ × W₀` logits at `σ ≥ ½`, samples the top-left pixel
/// of each block for a `th × tw` grid, and unmasks rows with no foreground.
pub fn attention_bias(logits: &Tensor, th: usize, tw: usize) -> Vec<f64> {
    let s = logits.shape();
    let (n, h0, w0) = (s[0], s[1], s[2]);
    let mut out = Vec::new();
    for q in 0..n {
        let row: Vec<bool> = (0..th * tw)
            .map(|k| {
                let (y, x) = (k / tw * (h0 / th), k % tw * (w0 / tw));
                1.0 / (1.0 + (-logits.get(&[q, y, x])).exp()) >= 0.5
            })
            .collect();
        let any = row.iter().any(|&b| b);
        out.extend(row.iter().map(|&b| if b || !any { 0.0 } else { f64::NEG_INFINITY }));
    }
    out
}

/// 2×2 mean pooling of an `h × w × d` map stored as `(h·w) × d` rows.
pub fn avgpool(f: &Mat, h: usize, w: usize) -> Mat {
    let mut out = Vec::new();
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let idx = [
                2 * y * w + 2 * x,
                2 * y * w + 2 * x + 1,
                (2 * y + 1) * w + 2 * x,
                (2 * y + 1) * w + 2 * x + 1,
            ];
            let d = f[0].len();
            out.push((0..d).map(|c| idx.iter().map(|&i| f[i][c]).sum::<f64>() / 4.0).collect());
        }
    }
    out
}

/// Fixed 2-D sinusoidal code: the first half of the channels encodes the
/// row, the second half the column, alternating sin and cos with
/// geometrically spaced wavelengths.
pub fn sine_positions(h: usize, w: usize, d: usize) -> Mat {
    let half = d / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut row = Vec::with_capacity(d);
            for (coord, extent) in [(y, h), (x, w)] {
                let phase = (coord as f64 + 1.0) / extent as f64 * two_pi;
                for i in 0..half {
                    let pair = (i - i % 2) as f64;
                    let arg = phase / 10000f64.powf(pair / half as f64);
                    row.push(if i % 2 == 0 { arg.sin() } else { arg.cos() });
                }
            }
            out.push(row);
        }
    }
    out
}

pub struct BranchTrace {
    pub attended: Mat,
    pub out: Mat,
}

fn branch(
    x_prev: &Mat,
    q_pos: Option<&Mat>,
    f: &Mat,
    h: usize,
    w: usize,
    mask_logits: &Tensor,
    p: &cmformer::cma::BranchParams,
    store: &ParamStore,
) -> BranchTrace {
    let bias = attention_bias(mask_logits, h, w);
    let pos = sine_positions(h, w, x_prev[0].len());
    let attended = masked_attention(x_prev, q_pos, f, Some(&pos), &bias, &p.cross, store);
    let x = layernorm(&attended, &p.cross_norm, store);
    let refined = add(&x, &self_attention(&x, &p.self_attn, store));
    BranchTrace {
        attended,
        out: layernorm(&refined, &p.self_norm, store),
    }
}

pub struct CmaTrace {
    pub x_hi: Mat,
    pub x_lo: Option<Mat>,
    pub out: Mat,
}

/// One decoder layer, step by step: high-resolution masked attention and
/// self-attention; average pooling of the feature; the same pipeline on
/// the pooled feature with the second query stream; concatenation and the
/// linear fusion; then the residual feed-forward block.
/// Without a low branch the fusion step is skipped.
pub fn cma_layer(
    x_prev: &Mat,
    x_prev_d: &Mat,
    q_pos: Option<&Mat>,
    f: &Mat,
    h: usize,
    w: usize,
    mask_logits: &Tensor,
    params: &CmaLayerParams,
    store: &ParamStore,
) -> CmaTrace {
    let hi = branch(x_prev, q_pos, f, h, w, mask_logits, &params.hi, store);
    let (fused, x_lo) = match &params.lo {
        Some(lo) => {
            let f_d = avgpool(f, h, w);
            let lo_out = branch(x_prev_d, q_pos, &f_d, h / 2, w / 2, mask_logits, &lo.branch, store);
            let cat: Mat = hi
                .out
                .iter()
                .zip(&lo_out.out)
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect();
            (affine(&cat, &lo.fuse, store), Some(lo_out.out))
        }
        None => (hi.out.clone(), None),
    };
    let hidden: Mat = affine(&fused, &params.ffn_in, store)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let ffn = affine(&hidden, &params.ffn_out, store);
    CmaTrace {
        x_hi: hi.out,
        x_lo,
        out: layernorm(&add(&fused, &ffn), &params.ffn_norm, store),
    }
}

/// Exhaustive search over injective segment→query maps in lexicographic
/// order of the query sequence; returns the first one whose cost is
/// within the tie tolerance of the optimum, and that optimum.
pub fn brute_force_match(cost: &CostMatrix) -> (Vec<usize>, f64) {
    fn rec(c: &CostMatrix, seg: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, all: &mut Vec<(Vec<usize>, f64)>) {
        if seg == c.cols {
            all.push((cur.clone(), acc));
            return;
        }
        for q in 0..c.rows {
            if !used[q] {
                used[q] = true;
                cur.push(q);
                rec(c, seg + 1, used, cur, acc + c.at(q, seg), all);
                cur.pop();
                used[q] = false;
            }
        }
    }
    let mut all = Vec::new();
    rec(cost, 0, &mut vec![false; cost.rows], &mut Vec::new(), 0.0, &mut all);
    let opt = all.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + opt.abs());
    let best = all.into_iter().find(|(_, v)| *v <= opt + tol).expect("at least one assignment");
    (best.0, opt)
}

/// Random `rows × cols` cost matrix; half the time integer valued so that
/// ties between optimal assignments are common.
pub fn random_cost(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
    let integer = rng.random_bool(0.5);
    let data = (0..rows * cols)
        .map(|_| {
            if integer {
                f64::from(rng.random_range(0..4u8))
            } else {
                rng.random_range(-5.0..5.0)
            }
        })
        .collect();
    CostMatrix::new(rows, cols, data)
}

pub mod checks;
