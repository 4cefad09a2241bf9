use super::Prediction;

/// Mask logits live at this fraction of the input resolution.
pub const MASK_STRIDE: usize = 4;

/// Row-major `u8` label map; 255 marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), h * w, "label map size");
        Self { h, w, labels }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Self {
        let (h, w) = (self.h * factor, self.w * factor);
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                labels.push(self.get(y / factor, x / factor));
            }
        }
        Self { h, w, labels }
    }
}

/// Per-pixel argmax over real classes of
/// `Σ_i softmax(class_logits_i)[c] · sigmoid(mask_logits_i(p))`, at mask
/// resolution. Ties go to the lowest class index; the no-object column only
/// enters through the softmax normalization.
pub fn semantic_inference_lowres(pred: &Prediction) -> LabelMap {
    let n = pred.n_queries();
    let k = pred.n_classes();
    let (h, w) = pred.mask_hw();
    let p = h * w;
    let logits = pred.class_logits.data();
    let mut probs = Vec::with_capacity(n * (k + 1));
    for row in logits.chunks(k + 1) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / total));
    }
    let masks = pred.mask_logits.data();
    let mut labels = Vec::with_capacity(p);
    let mut scores = vec![0.0; k];
    for px in 0..p {
        scores.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..n {
            let m = sigmoid(masks[i * p + px]);
            for (c, s) in scores.iter_mut().enumerate() {
                *s += probs[i * (k + 1) + c] * m;
            }
        }
        let mut best = 0;
        for c in 1..k {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    LabelMap::new(h, w, labels)
}

/// [`semantic_inference_lowres`] upsampled to input resolution.
pub fn semantic_inference(pred: &Prediction) -> LabelMap {
    semantic_inference_lowres(pred).upsample(MASK_STRIDE)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
