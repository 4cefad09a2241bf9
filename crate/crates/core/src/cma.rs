//! Content-enhanced mask attention layer.
//!
//! A layer runs the mask-attention pipeline twice: on the feature map
//! `F` (high-resolution branch) and on its 2×2 average-pooled copy `F^d`
//! (low-resolution branch, with its own recurrent query stream). The two
//! refined query sets are concatenated and mapped back to width `d` by an
//! affine fusion, then passed through a shared feed-forward block.
//!
//! Sublayer anatomy per branch:
//! `LN(masked_attention(x))` → `LN(x + self_attention(x))`; after fusion
//! `LN(x + FFN(x))`. Sinusoidal 2-D position codes are added to the key
//! input of masked attention and the learned query embedding to its query
//! input.

use crate::attention::{
    mask_to_bias, masked_attention_with_pos, scaled_self_attention, AttentionParams,
};
use crate::ndtensor::{Result, Tensor, TensorError, Var};
use crate::params::{Affine, Binder, Norm, ParamInit, ParamStore};

/// Parameters of one branch: masked cross-attention then self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchParams {
    pub cross: AttentionParams,
    pub cross_norm: Norm,
    pub self_attn: AttentionParams,
    pub self_norm: Norm,
}

impl BranchParams {
    pub fn new(store: &mut ParamStore, init: &mut ParamInit, name: &str, d: usize) -> Self {
        Self::build(store, init, name, d, None)
    }

    fn build(
        store: &mut ParamStore,
        init: &mut ParamInit,
        name: &str,
        d: usize,
        shared_query: Option<Affine>,
    ) -> Self {
        let cross = match shared_query {
            Some(q) => AttentionParams::with_shared_query(store, init, &format!("{name}.cross"), d, q),
            None => AttentionParams::new(store, init, &format!("{name}.cross"), d),
        };
        let cross_norm = Norm::new(store, &format!("{name}.cross_norm"), d);
        let self_attn = AttentionParams::new(store, init, &format!("{name}.self"), d);
        let self_norm = Norm::new(store, &format!("{name}.self_norm"), d);
        Self {
            cross,
            cross_norm,
            self_attn,
            self_norm,
        }
    }
}

/// Low-resolution branch plus the fusion map `h_l: 2d → d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowResolution {
    pub branch: BranchParams,
    pub fuse: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmaLayerParams {
    pub d: usize,
    pub hi: BranchParams,
    /// `None` for a plain (non-enhanced) mask-attention layer.
    pub lo: Option<LowResolution>,
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub ffn_norm: Norm,
}

impl CmaLayerParams {
    /// `enhanced` adds the low-resolution branch and the fusion map, drawn
    /// from `lo_init` so the shared parameters do not depend on it;
    /// `share_query_proj` makes the low branch reuse the high branch's
    /// query projection in masked attention.
    pub fn new(
        store: &mut ParamStore,
        init: &mut ParamInit,
        lo_init: &mut ParamInit,
        name: &str,
        d: usize,
        enhanced: bool,
        share_query_proj: bool,
    ) -> Self {
        let hi = BranchParams::new(store, init, &format!("{name}.hi"), d);
        let ffn_in = Affine::new(store, init, &format!("{name}.ffn.0"), d, 4 * d);
        let ffn_out = Affine::new(store, init, &format!("{name}.ffn.1"), 4 * d, d);
        let ffn_norm = Norm::new(store, &format!("{name}.ffn_norm"), d);
        let lo = enhanced.then(|| {
            let shared = share_query_proj.then_some(hi.cross.q);
            let branch = BranchParams::build(store, lo_init, &format!("{name}.lo"), d, shared);
            let fuse = Affine::new(store, lo_init, &format!("{name}.fuse"), 2 * d, d);
            LowResolution { branch, fuse }
        });
        Self {
            d,
            hi,
            lo,
            ffn_in,
            ffn_out,
            ffn_norm,
        }
    }
}

/// Frobenius norms of the per-branch outputs of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchNorms {
    pub hi: f64,
    pub lo: Option<f64>,
    pub out: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CmaLayerOutput<'t> {
    /// Fused layer output; the next layer's `x_prev`.
    pub x_final: Var<'t>,
    /// Low-branch output `X̃^d`; the next layer's `x_prev_d`.
    pub x_lo: Option<Var<'t>>,
    pub diagnostics: BranchNorms,
}

/// Inputs shared by both branches of a layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerInputs<'t, 'a> {
    pub x_prev: Var<'t>,
    pub x_prev_d: Var<'t>,
    /// Learned per-query embedding added to the masked-attention query input.
    pub q_pos: Option<Var<'t>>,
    /// `H×W×d` feature map.
    pub feature: Var<'t>,
    /// Previous layer's `N×H₀×W₀` mask logits.
    pub mask_logits: &'a Tensor,
}

/// 2×2 average pooling: `H×W×d → (H/2)×(W/2)×d`.
pub fn downsample_feature(f: Var<'_>) -> Result<Var<'_>> {
    f.avgpool2x2()
}

/// `h_l([x_hi, x_lo])`: affine map of the concatenated query streams.
pub fn fuse<'t>(
    b: &Binder<'t, '_>,
    x_hi: Var<'t>,
    x_lo: Var<'t>,
    fuse_w: &Affine,
) -> Result<Var<'t>> {
    let (sa, sb) = (x_hi.shape(), x_lo.shape());
    if sa != sb {
        return Err(TensorError::Shape {
            op: "fuse",
            lhs: sa,
            rhs: sb,
        });
    }
    fuse_w.forward(b, x_hi.concat_lastdim(x_lo)?)
}

/// Fixed 2-D sinusoidal position code, `[H·W × d]`. The first `d/2`
/// channels encode the row, the rest the column; positions are normalized
/// to `(0, 2π]`.
pub fn sine_position_encoding(h: usize, w: usize, d: usize) -> Tensor {
    assert!(d.is_multiple_of(2), "position code width must be even");
    let half = d / 2;
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    let tau = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for (pos, extent) in [(y, h), (x, w)] {
                let p = (pos + 1) as f64 / extent as f64 * tau;
                for i in 0..half {
                    let v = p / freq(i);
                    data.push(if i % 2 == 0 { v.sin() } else { v.cos() });
                }
            }
        }
    }
    Tensor::new(&[h * w, d], data).expect("shape")
}

fn feature_dims(f: &Var<'_>, d: usize) -> Result<(usize, usize)> {
    match f.shape()[..] {
        [h, w, c] if c == d => Ok((h, w)),
        ref s => Err(TensorError::Shape {
            op: "cma_layer",
            lhs: s.to_vec(),
            rhs: vec![d],
        }),
    }
}

/// Masked attention → norm → self-attention (+residual) → norm, on one
/// resolution. Returns `X̃`.
pub fn branch_forward<'t>(
    b: &Binder<'t, '_>,
    x_prev: Var<'t>,
    q_pos: Option<Var<'t>>,
    feature: Var<'t>,
    mask_logits: &Tensor,
    params: &BranchParams,
) -> Result<Var<'t>> {
    let d = params.cross.d_k;
    let (h, w) = feature_dims(&feature, d)?;
    let bias = mask_to_bias(mask_logits, (h, w))?;
    let flat = feature.reshape(&[h * w, d])?;
    let pos = b.constant(&sine_position_encoding(h, w, d));
    let attended =
        masked_attention_with_pos(b, x_prev, q_pos, flat, Some(pos), &bias, &params.cross)?;
    let x = params.cross_norm.forward(b, attended)?;
    let refined = x.add(scaled_self_attention(b, x, &params.self_attn)?)?;
    params.self_norm.forward(b, refined)
}

fn ffn_block<'t>(b: &Binder<'t, '_>, x: Var<'t>, params: &CmaLayerParams) -> Result<Var<'t>> {
    let hidden = params.ffn_in.forward(b, x)?.relu()?;
    let out = params.ffn_out.forward(b, hidden)?;
    params.ffn_norm.forward(b, x.add(out)?)
}

fn frob(v: Var<'_>, sublayer: &'static str) -> Result<f64> {
    let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if n.is_finite() {
        Ok(n)
    } else {
        Err(TensorError::NonFinite { op: sublayer })
    }
}

/// One content-enhanced layer. Requires `params.lo`.
pub fn cma_layer<'t>(
    b: &Binder<'t, '_>,
    inputs: LayerInputs<'t, '_>,
    params: &CmaLayerParams,
) -> Result<CmaLayerOutput<'t>> {
    let lo = params.lo.as_ref().ok_or(TensorError::Invalid {
        op: "cma_layer",
        msg: "layer has no low-resolution branch".into(),
    })?;
    let x_hi = branch_forward(
        b,
        inputs.x_prev,
        inputs.q_pos,
        inputs.feature,
        inputs.mask_logits,
        &params.hi,
    )?;
    let f_d = downsample_feature(inputs.feature)?;
    let x_lo = branch_forward(
        b,
        inputs.x_prev_d,
        inputs.q_pos,
        f_d,
        inputs.mask_logits,
        &lo.branch,
    )?;
    let fused = fuse(b, x_hi, x_lo, &lo.fuse)?;
    let x_final = ffn_block(b, fused, params)?;
    let diagnostics = BranchNorms {
        hi: frob(x_hi, "cma.high_branch")?,
        lo: Some(frob(x_lo, "cma.low_branch")?),
        out: frob(x_final, "cma.ffn")?,
    };
    Ok(CmaLayerOutput {
        x_final,
        x_lo: Some(x_lo),
        diagnostics,
    })
}

/// The plain mask-attention layer: high branch then FFN, no fusion.
pub fn baseline_layer<'t>(
    b: &Binder<'t, '_>,
    inputs: LayerInputs<'t, '_>,
    params: &CmaLayerParams,
) -> Result<CmaLayerOutput<'t>> {
    let x_hi = branch_forward(
        b,
        inputs.x_prev,
        inputs.q_pos,
        inputs.feature,
        inputs.mask_logits,
        &params.hi,
    )?;
    let x_final = ffn_block(b, x_hi, params)?;
    let diagnostics = BranchNorms {
        hi: frob(x_hi, "cma.high_branch")?,
        lo: None,
        out: frob(x_final, "cma.ffn")?,
    };
    Ok(CmaLayerOutput {
        x_final,
        x_lo: None,
        diagnostics,
    })
}

/// Runs [`cma_layer`] when the layer has a low branch, else [`baseline_layer`].
pub fn decoder_layer<'t>(
    b: &Binder<'t, '_>,
    inputs: LayerInputs<'t, '_>,
    params: &CmaLayerParams,
) -> Result<CmaLayerOutput<'t>> {
    if params.lo.is_some() {
        cma_layer(b, inputs, params)
    } else {
        baseline_layer(b, inputs, params)
    }
}
