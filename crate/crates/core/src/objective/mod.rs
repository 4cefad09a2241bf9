//! Set-prediction objective: queries are matched one-to-one to ground-truth
//! segments, then scored with mask BCE, dice and classification losses.

mod matching;

pub use matching::{assignment_cost, hungarian_match, CostMatrix, Match};

use thiserror::Error;

use crate::ndtensor::{TensorError, Var};
use crate::segmodel::{LabelMap, LayerPrediction, Prediction, MASK_STRIDE};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("too many segments for query budget ({segments} segments, {queries} queries)")]
    TooManySegments { segments: usize, queries: usize },
    #[error("matching cost is not finite")]
    NonFiniteCost,
    #[error("label {label} outside 0..{n_classes} and not the ignore value 255")]
    BadLabel { label: u8, n_classes: usize },
    #[error("ground-truth mask has {got} pixels, predictions have {expected}")]
    MaskSize { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Label value excluded from supervision and metrics.
pub const IGNORE: u8 = 255;

/// One ground-truth segment: all pixels of a class at mask resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtSegment {
    pub class_id: usize,
    pub mask: Vec<bool>,
}

impl GtSegment {
    fn target(&self) -> impl Iterator<Item = f64> + '_ {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 })
    }
}

/// Reduces a full-resolution label map to mask resolution by majority vote
/// over each `MASK_STRIDE × MASK_STRIDE` block (ignored pixels abstain, ties
/// go to the lower class), then splits it into one segment per present
/// class in ascending class order. Blocks with no labelled pixel become
/// background for every segment.
pub fn segments_from_labels(labels: &LabelMap, n_classes: usize) -> Result<Vec<GtSegment>> {
    if let Some(&label) = labels
        .labels
        .iter()
        .find(|&&l| l != IGNORE && l as usize >= n_classes)
    {
        return Err(ObjectiveError::BadLabel { label, n_classes });
    }
    let s = MASK_STRIDE;
    let (h, w) = (labels.h / s, labels.w / s);
    let mut low = vec![IGNORE; h * w];
    let mut votes = vec![0usize; n_classes];
    for by in 0..h {
        for bx in 0..w {
            votes.iter_mut().for_each(|v| *v = 0);
            for y in by * s..(by + 1) * s {
                for x in bx * s..(bx + 1) * s {
                    let l = labels.get(y, x);
                    if l != IGNORE {
                        votes[l as usize] += 1;
                    }
                }
            }
            let best = votes
                .iter()
                .enumerate()
                .fold((0, 0), |acc, (c, &n)| if n > acc.1 { (c, n) } else { acc });
            if best.1 > 0 {
                low[by * w + bx] = best.0 as u8;
            }
        }
    }
    Ok((0..n_classes)
        .filter_map(|c| {
            let mask: Vec<bool> = low.iter().map(|&l| l as usize == c).collect();
            mask.contains(&true).then_some(GtSegment { class_id: c, mask })
        })
        .collect())
}

/// Loss weights and knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    /// Class weight of the no-object target.
    pub no_object: f64,
    pub dice_eps: f64,
    /// Weight of every prediction except the last (deep supervision).
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 5.0,
            dice: 5.0,
            cls: 2.0,
            no_object: 0.1,
            dice_eps: 1.0,
            aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, ce: f64, dice: f64, cls: f64) -> f64 {
        self.ce * ce + self.dice * dice + self.cls * cls
    }
}

/// Detached loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(ce: f64, dice: f64, cls: f64, weights: LossWeights) -> Self {
        Self {
            ce,
            dice,
            cls,
            total: weights.combine(ce, dice, cls),
            weights,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `N × M` matching cost from detached predictions, mirroring the loss:
/// `−λ_cls·p_i(c_j) + λ_ce·BCE(i, j) + λ_dice·Dice(i, j)`.
pub fn build_match_cost(
    pred: &Prediction,
    gt: &[GtSegment],
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let n = pred.n_queries();
    let k1 = pred.n_classes() + 1;
    let (h, w) = pred.mask_hw();
    let p = h * w;
    if gt.len() > n {
        return Err(ObjectiveError::TooManySegments {
            segments: gt.len(),
            queries: n,
        });
    }
    if let Some(bad) = gt.iter().find(|g| g.mask.len() != p) {
        return Err(ObjectiveError::MaskSize {
            got: bad.mask.len(),
            expected: p,
        });
    }
    let logits = pred.class_logits.data();
    let masks = pred.mask_logits.data();
    let targets: Vec<Vec<f64>> = gt.iter().map(|g| g.target().collect()).collect();
    let t_sums: Vec<f64> = targets.iter().map(|t| t.iter().sum()).collect();
    let mut data = Vec::with_capacity(n * gt.len());
    for i in 0..n {
        let row = &logits[i * k1..(i + 1) * k1];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let x = &masks[i * p..(i + 1) * p];
        let sp: f64 = x.iter().map(|&v| softplus(v)).sum();
        let sig: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        let sig_sum: f64 = sig.iter().sum();
        for (j, g) in gt.iter().enumerate() {
            let t = &targets[j];
            let prob = (row[g.class_id] - max).exp() / z;
            let xt: f64 = x.iter().zip(t).map(|(a, b)| a * b).sum();
            let st: f64 = sig.iter().zip(t).map(|(a, b)| a * b).sum();
            let bce = (sp - xt) / p as f64;
            let dice = 1.0
                - (2.0 * st + weights.dice_eps) / (sig_sum + t_sums[j] + weights.dice_eps);
            data.push(-weights.cls * prob + weights.ce * bce + weights.dice * dice);
        }
    }
    Ok(CostMatrix::new(n, gt.len(), data))
}

fn as_rows<'t>(x: Var<'t>, target_len: usize) -> Result<Var<'t>> {
    let numel = x.numel();
    if numel != target_len || numel == 0 {
        return Err(TensorError::Shape {
            op: "mask_loss",
            lhs: x.shape(),
            rhs: vec![target_len],
        }
        .into());
    }
    let cols = *x.shape().last().unwrap_or(&1);
    Ok(x.reshape(&[numel / cols, cols])?)
}

/// Row-averaged dice loss `1 − (2Σσ(x)t + ε)/(Σσ(x) + Σt + ε)`. `x` is
/// one mask (`[P]`) or a stack of masks (`[M, P]`); `target` matches it.
pub fn dice_loss<'t>(x: Var<'t>, target: &[f64], eps: f64) -> Result<Var<'t>> {
    let x = as_rows(x, target.len())?;
    let shape = x.shape();
    let tape = x.tape();
    let t = tape.constant_from(&shape, target.to_vec())?;
    let s = x.sigmoid()?;
    let rows = shape[0];
    let t_sum: Vec<f64> = target.chunks(shape[1]).map(|c| c.iter().sum()).collect();
    let num = s.mul(t)?.sum_lastdim()?.scale(2.0)?.add_bias(&vec![eps; rows])?;
    let den = s
        .sum_lastdim()?
        .add_bias(&t_sum.iter().map(|v| v + eps).collect::<Vec<_>>())?;
    let ratio = num.div(den)?;
    Ok(ratio.scale(-1.0)?.add_bias(&vec![1.0; rows])?.mean()?)
}

/// Mean binary cross-entropy with logits, `softplus(x) − t·x` per pixel.
pub fn bce_mask_loss<'t>(x: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    let x = as_rows(x, target.len())?;
    let t = x.tape().constant_from(&x.shape(), target.to_vec())?;
    Ok(x.softplus()?.sub(x.mul(t)?)?.mean()?)
}

/// Cross-entropy over all queries. Matched queries target their segment's
/// class; the rest target no-object (last column) with weight
/// `no_object_weight`. Normalized by the number of queries.
pub fn cls_loss<'t>(
    class_logits: Var<'t>,
    matches: &[Match],
    gt: &[GtSegment],
    no_object_weight: f64,
) -> Result<Var<'t>> {
    let shape = class_logits.shape();
    let (n, k1) = match shape[..] {
        [n, k1] if k1 >= 2 => (n, k1),
        _ => {
            return Err(TensorError::Invalid {
                op: "cls_loss",
                msg: format!("class logits must be N×(K+1), got {shape:?}"),
            }
            .into())
        }
    };
    let mut weight = vec![0.0; n * k1];
    for i in 0..n {
        weight[i * k1 + k1 - 1] = no_object_weight;
    }
    for m in matches {
        let row = m.query * k1;
        weight[row + k1 - 1] = 0.0;
        weight[row + gt[m.segment].class_id] = 1.0;
    }
    let w = class_logits.tape().constant_from(&shape, weight)?;
    let logp = class_logits.log_softmax_lastdim()?;
    Ok(logp.mul(w)?.sum()?.scale(-1.0 / n as f64)?)
}

/// Differentiable per-prediction loss terms (ce, dice, cls).
pub struct LayerLoss<'t> {
    pub ce: Var<'t>,
    pub dice: Var<'t>,
    pub cls: Var<'t>,
    pub matches: Vec<Match>,
}

/// Matches one prediction to `gt` and evaluates the three loss terms.
/// Mask terms average over matched pairs and are zero without segments.
pub fn layer_loss<'t>(
    pred: &LayerPrediction<'t>,
    gt: &[GtSegment],
    weights: &LossWeights,
) -> Result<LayerLoss<'t>> {
    let cost = build_match_cost(&pred.values(), gt, weights)?;
    let matches = hungarian_match(&cost)?;
    let cls = cls_loss(pred.class_logits, &matches, gt, weights.no_object)?;
    let tape = pred.class_logits.tape();
    let (ce, dice) = if matches.is_empty() {
        let zero = tape.constant_from(&[], vec![0.0])?;
        (zero, zero)
    } else {
        let rows: Vec<usize> = matches.iter().map(|m| m.query).collect();
        let x = pred.mask_logits.gather_rows(&rows)?;
        let target: Vec<f64> = matches.iter().flat_map(|m| gt[m.segment].target()).collect();
        (
            bce_mask_loss(x, &target)?,
            dice_loss(x, &target, weights.dice_eps)?,
        )
    };
    Ok(LayerLoss {
        ce,
        dice,
        cls,
        matches,
    })
}

/// Sum of weighted per-prediction losses over every supervised prediction.
/// The last prediction has weight 1, the others `weights.aux`.
pub fn total_loss<'t>(
    preds: &[LayerPrediction<'t>],
    gt: &[GtSegment],
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let last = preds.len().checked_sub(1).ok_or(TensorError::Invalid {
        op: "total_loss",
        msg: "no predictions".into(),
    })?;
    let (mut ce, mut dice, mut cls) = (0.0, 0.0, 0.0);
    let mut total: Option<Var<'t>> = None;
    for (l, pred) in preds.iter().enumerate() {
        let lw = if l == last { 1.0 } else { weights.aux };
        let part = layer_loss(pred, gt, weights)?;
        ce += lw * part.ce.item();
        dice += lw * part.dice.item();
        cls += lw * part.cls.item();
        let layer = part
            .ce
            .scale(weights.ce)?
            .add(part.dice.scale(weights.dice)?)?
            .add(part.cls.scale(weights.cls)?)?
            .scale(lw)?;
        total = Some(match total {
            Some(t) => t.add(layer)?,
            None => layer,
        });
    }
    let total = total.expect("at least one prediction");
    Ok((total, LossBreakdown::new(ce, dice, cls, *weights)))
}
