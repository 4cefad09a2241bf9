//! Mask-biased cross-attention and scaled self-attention (single head).

use std::collections::BTreeSet;

use crate::ndtensor::{Result, Tensor, TensorError, Var};
use crate::params::{Affine, Binder, ParamInit, ParamStore};

/// Additive attention bias with entries in `{0, -inf}`.
///
/// Rows whose binarized mask has no foreground are stored as all-zero
/// (unmasked attention) and their indices kept in `empty_rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    n: usize,
    positions: usize,
    values: Vec<f64>,
    empty_rows: BTreeSet<usize>,
}

impl AttentionBias {
    /// No masking at all.
    pub fn zeros(n: usize, positions: usize) -> Self {
        Self {
            n,
            positions,
            values: vec![0.0; n * positions],
            empty_rows: BTreeSet::new(),
        }
    }

    /// Builds a bias from a row-major foreground mask, applying the
    /// empty-row fallback.
    pub fn from_foreground(n: usize, positions: usize, foreground: &[bool]) -> Self {
        assert_eq!(foreground.len(), n * positions);
        let mut values = Vec::with_capacity(n * positions);
        let mut empty_rows = BTreeSet::new();
        for (i, row) in foreground.chunks(positions).enumerate() {
            if row.iter().any(|&f| f) {
                values.extend(row.iter().map(|&f| if f { 0.0 } else { f64::NEG_INFINITY }));
            } else {
                empty_rows.insert(i);
                values.extend(std::iter::repeat_n(0.0, positions));
            }
        }
        Self {
            n,
            positions,
            values,
            empty_rows,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.positions..(i + 1) * self.positions]
    }

    pub fn empty_rows(&self) -> &BTreeSet<usize> {
        &self.empty_rows
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.values[i * self.positions + j] == f64::NEG_INFINITY
    }

    /// Reorders query rows: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        let mut empty_rows = BTreeSet::new();
        for (i, &src) in perm.iter().enumerate() {
            values.extend_from_slice(self.row(src));
            if self.empty_rows.contains(&src) {
                empty_rows.insert(i);
            }
        }
        Self {
            n: self.n,
            positions: self.positions,
            values,
            empty_rows,
        }
    }
}

/// Binarizes `N×H₀×W₀` mask logits at probability 0.5 (logit ≥ 0), resizes
/// them to `target` by nearest neighbour and turns them into a bias.
pub fn mask_to_bias(mask_logits: &Tensor, target: (usize, usize)) -> Result<AttentionBias> {
    let &[n, h0, w0] = mask_logits.shape() else {
        return Err(TensorError::Invalid {
            op: "mask_to_bias",
            msg: format!("expected N×H×W logits, got {:?}", mask_logits.shape()),
        });
    };
    let (th, tw) = target;
    if th == 0 || tw == 0 || h0 % th != 0 || w0 % tw != 0 {
        return Err(TensorError::Invalid {
            op: "mask_to_bias",
            msg: format!("cannot resize {h0}×{w0} to {th}×{tw} by an integer factor"),
        });
    }
    let (sy, sx) = (h0 / th, w0 / tw);
    let data = mask_logits.data();
    let mut fg = Vec::with_capacity(n * th * tw);
    for q in 0..n {
        for y in 0..th {
            for x in 0..tw {
                fg.push(data[(q * h0 + y * sy) * w0 + x * sx] >= 0.0);
            }
        }
    }
    Ok(AttentionBias::from_foreground(n, th * tw, &fg))
}

/// Query/key/value projections of one attention block. The key map has
/// no bias: a key bias adds the same `q_i·b` to every logit of row `i`,
/// which the softmax cancels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, init: &mut ParamInit, name: &str, d: usize) -> Self {
        Self {
            q: Affine::new(store, init, &format!("{name}.q"), d, d),
            k: Affine::without_bias(store, init, &format!("{name}.k"), d, d),
            v: Affine::new(store, init, &format!("{name}.v"), d, d),
            d_k: d,
        }
    }

    /// Same as [`Self::new`] but reusing an existing query projection.
    pub fn with_shared_query(
        store: &mut ParamStore,
        init: &mut ParamInit,
        name: &str,
        d: usize,
        q: Affine,
    ) -> Self {
        Self {
            q,
            k: Affine::without_bias(store, init, &format!("{name}.k"), d, d),
            v: Affine::new(store, init, &format!("{name}.v"), d, d),
            d_k: d,
        }
    }
}

/// `softmax(bias + Q·Kᵀ/√d_k)·V + x_prev` with `Q = f_Q(x_prev)`,
/// `K = f_K(f)`, `V = f_V(f)`.
pub fn masked_attention<'t>(
    b: &Binder<'t, '_>,
    x_prev: Var<'t>,
    f: Var<'t>,
    bias: &AttentionBias,
    params: &AttentionParams,
) -> Result<Var<'t>> {
    masked_attention_with_pos(b, x_prev, None, f, None, bias, params)
}

/// [`masked_attention`] with optional positional terms: `q_pos` is added to
/// the query input and `f_pos` to the key input (never to the values or the
/// residual).
pub fn masked_attention_with_pos<'t>(
    b: &Binder<'t, '_>,
    x_prev: Var<'t>,
    q_pos: Option<Var<'t>>,
    f: Var<'t>,
    f_pos: Option<Var<'t>>,
    bias: &AttentionBias,
    params: &AttentionParams,
) -> Result<Var<'t>> {
    let (xs, fs) = (x_prev.shape(), f.shape());
    if xs.len() != 2 || fs.len() != 2 || xs[1] != fs[1] {
        return Err(TensorError::Shape {
            op: "masked_attention",
            lhs: xs,
            rhs: fs,
        });
    }
    if bias.n_queries() != xs[0] || bias.positions() != fs[0] {
        return Err(TensorError::Shape {
            op: "masked_attention",
            lhs: vec![bias.n_queries(), bias.positions()],
            rhs: vec![xs[0], fs[0]],
        });
    }
    let q_in = match q_pos {
        Some(p) => x_prev.add(p)?,
        None => x_prev,
    };
    let k_in = match f_pos {
        Some(p) => f.add(p)?,
        None => f,
    };
    let q = params.q.forward(b, q_in)?;
    let k = params.k.forward(b, k_in)?;
    let v = params.v.forward(b, f)?;
    let logits = q
        .matmul(k.transpose()?)?
        .scale(1.0 / (params.d_k as f64).sqrt())?
        .add_bias(bias.values())?;
    logits.softmax_lastdim()?.matmul(v)?.add(x_prev)
}

/// `Softmax(Q_X·K_Xᵀ/√d_k)·V_X` over the rows of `x`.
pub fn scaled_self_attention<'t>(
    b: &Binder<'t, '_>,
    x: Var<'t>,
    params: &AttentionParams,
) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 2 || s[1] != params.q.d_in {
        return Err(TensorError::Shape {
            op: "scaled_self_attention",
            lhs: s,
            rhs: vec![params.q.d_in],
        });
    }
    let q = params.q.forward(b, x)?;
    let k = params.k.forward(b, x)?;
    let v = params.v.forward(b, x)?;
    q.matmul(k.transpose()?)?
        .scale(1.0 / (params.d_k as f64).sqrt())?
        .softmax_lastdim()?
        .matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tape;

    fn logits(n: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(&[n, h, w], v).unwrap()
    }

    #[test]
    fn all_positive_logits_mean_no_masking() {
        let b = mask_to_bias(&logits(2, 4, 4, vec![3.0; 32]), (2, 2)).unwrap();
        assert!(b.values().iter().all(|&v| v == 0.0));
        assert!(b.empty_rows().is_empty());
    }

    #[test]
    fn all_negative_logits_fall_back_to_unmasked() {
        let b = mask_to_bias(&logits(3, 4, 4, vec![-3.0; 48]), (4, 4)).unwrap();
        assert!(b.values().iter().all(|&v| v == 0.0));
        assert_eq!(b.empty_rows().iter().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn threshold_is_half_probability() {
        let b = mask_to_bias(&logits(1, 1, 2, vec![1.0, -1.0]), (1, 2)).unwrap();
        assert_eq!(b.values(), &[0.0, f64::NEG_INFINITY]);
        // exactly 0.5 counts as foreground
        let b = mask_to_bias(&logits(1, 1, 2, vec![0.0, -1e-9]), (1, 2)).unwrap();
        assert_eq!(b.values(), &[0.0, f64::NEG_INFINITY]);
    }

    #[test]
    fn nearest_resize_takes_block_origin() {
        let mut v = vec![-1.0; 16];
        v[2 * 4 + 2] = 1.0; // (2,2) is the origin of block (1,1)
        v[1] = 1.0; // inside block (0,0) but not its origin
        let b = mask_to_bias(&logits(1, 4, 4, v), (2, 2)).unwrap();
        assert_eq!(
            b.values(),
            &[f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]
        );
    }

    #[test]
    fn non_divisible_resize_is_rejected() {
        assert!(mask_to_bias(&logits(1, 4, 4, vec![0.0; 16]), (3, 4)).is_err());
        assert!(mask_to_bias(&Tensor::zeros(&[4, 4]), (2, 2)).is_err());
    }

    #[test]
    fn bias_shape_is_checked() {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(0);
        let p = AttentionParams::new(&mut store, &mut init, "a", 4);
        let tape = Tape::new();
        let b = Binder::infer(&tape, &store);
        let x = tape.constant(&Tensor::zeros(&[2, 4]));
        let f = tape.constant(&Tensor::zeros(&[5, 4]));
        let err = masked_attention(&b, x, f, &AttentionBias::zeros(2, 6), &p).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
        let f3 = tape.constant(&Tensor::zeros(&[5, 3]));
        assert!(masked_attention(&b, x, f3, &AttentionBias::zeros(2, 5), &p).is_err());
    }
}
