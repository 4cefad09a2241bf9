use super::HarnessError;
use crate::objective::IGNORE;

/// Accumulated `K × K` confusion counts, rows = ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// Adds one prediction/ground-truth pair; pixels whose ground truth is
    /// the ignore value are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<(), HarnessError> {
        if pred.len() != gt.len() {
            return Err(HarnessError::Config(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.n_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            for l in [p, g] {
                if l != IGNORE && l as usize >= k {
                    return Err(HarnessError::Config(format!("label {l} outside 0..{k}")));
                }
            }
            if g == IGNORE || p == IGNORE {
                continue;
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU, `None` for classes absent from both prediction and
    /// ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.n_classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
                let pred: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over defined IoUs; `None` if no class is defined.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Evaluation outcome for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub domain: String,
    pub checkpoint: String,
}

/// Single-image convenience around [`Confusion`].
pub fn confusion_and_miou(
    pred: &[u8],
    gt: &[u8],
    n_classes: usize,
) -> Result<(Confusion, Vec<Option<f64>>, Option<f64>), HarnessError> {
    let mut c = Confusion::new(n_classes);
    c.add(pred, gt)?;
    let ious = c.per_class_iou();
    let miou = c.miou();
    Ok((c, ious, miou))
}
