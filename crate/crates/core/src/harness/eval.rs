use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use super::metrics::{Confusion, MetricsReport};
use super::HarnessError;
use crate::segmodel::{LabelMap, SegModel};
use crate::synthbench::{read_dataset, Dataset};

/// Aggregated confusion of `predict(i)` against every sample's labels.
pub fn evaluate_with(
    ds: &Dataset,
    mut predict: impl FnMut(usize) -> Result<LabelMap, HarnessError>,
) -> Result<Confusion, HarnessError> {
    let mut conf = Confusion::new(ds.n_classes);
    for i in 0..ds.len() {
        let pred = predict(i)?;
        conf.add(&pred.labels, &ds.samples[i].labels)?;
    }
    Ok(conf)
}

pub fn evaluate_model(model: &SegModel, ds: &Dataset) -> Result<Confusion, HarnessError> {
    if ds.n_classes != model.config.n_classes {
        return Err(HarnessError::Config(format!(
            "dataset has {} classes, model predicts {}",
            ds.n_classes, model.config.n_classes
        )));
    }
    if !ds.h.is_multiple_of(32) || !ds.w.is_multiple_of(32) {
        return Err(HarnessError::Config(format!(
            "dataset images are {}×{}, the model needs multiples of 32",
            ds.h, ds.w
        )));
    }
    evaluate_with(ds, |i| Ok(model.predict_labels(&ds.image_tensor(i))?))
}

/// Short stable identifier: file name plus an FNV-1a hash of the bytes.
pub fn checkpoint_id(path: &Path, bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    format!("{name}@{h:016x}")
}

pub fn report_header(n_classes: usize) -> String {
    let mut s = String::from("domain");
    for c in 0..n_classes {
        let _ = write!(s, ",iou_{c}");
    }
    s.push_str(",miou,checkpoint,seed");
    s
}

pub fn report_row(r: &MetricsReport, seed: u64) -> String {
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:?}"));
    let mut s = r.domain.clone();
    for &iou in &r.per_class_iou {
        let _ = write!(s, ",{}", fmt(iou));
    }
    let _ = write!(s, ",{},{},{}", fmt(r.miou), r.checkpoint, seed);
    s
}

/// Loads a checkpoint and a dataset, evaluates, and appends one row to the
/// CSV at `report` (writing the header if the file is new or empty).
pub fn evaluate(
    ckpt: &Path,
    data: &Path,
    domain: &str,
    report: Option<&Path>,
) -> Result<MetricsReport, HarnessError> {
    let bytes = std::fs::read(ckpt).map_err(crate::segmodel::CheckpointError::from)?;
    let model = SegModel::from_checkpoint_bytes(&bytes)?;
    let ds = read_dataset(data)?;
    let conf = evaluate_model(&model, &ds)?;
    let result = MetricsReport {
        per_class_iou: conf.per_class_iou(),
        miou: conf.miou(),
        domain: domain.to_string(),
        checkpoint: checkpoint_id(ckpt, &bytes),
    };
    if let Some(path) = report {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", report_header(ds.n_classes))?;
        }
        writeln!(f, "{}", report_row(&result, model.seed))?;
    }
    Ok(result)
}
