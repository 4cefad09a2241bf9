use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::evaluate_model;
use super::optim::{clip_grad_norm, AdamW};
use super::{HarnessError, TrainConfig};
use crate::ndtensor::{Tape, Tensor, TensorError};
use crate::objective::{segments_from_labels, total_loss, GtSegment, LossBreakdown};
use crate::params::Binder;
use crate::segmodel::SegModel;
use crate::synthbench::Dataset;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cmck";
pub const LOG_COLUMNS: &str = "epoch,loss,ce,dice,cls,val_miou";

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample total loss over the epoch.
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    /// In-domain validation mIoU of the checkpoint written this epoch.
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegModel,
    pub log: Vec<EpochRecord>,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Ground-truth segments and image tensor of every sample.
pub(crate) fn prepare(ds: &Dataset, n_classes: usize) -> Result<Vec<(Tensor, Vec<GtSegment>)>, HarnessError> {
    (0..ds.len())
        .map(|i| Ok((ds.image_tensor(i), segments_from_labels(&ds.label_map(i), n_classes)?)))
        .collect()
}

pub(crate) fn check_compatible(cfg: &TrainConfig, ds: &Dataset, what: &str) -> Result<(), HarnessError> {
    if ds.n_classes != cfg.n_classes {
        return Err(HarnessError::Config(format!(
            "{what} has {} classes, config expects {}",
            ds.n_classes, cfg.n_classes
        )));
    }
    if !ds.h.is_multiple_of(32) || !ds.w.is_multiple_of(32) || ds.is_empty() {
        return Err(HarnessError::Config(format!(
            "{what} must be non-empty with sides that are multiples of 32, got {}×{}",
            ds.h, ds.w
        )));
    }
    Ok(())
}

fn log_text(cfg: &TrainConfig, log: &[EpochRecord]) -> String {
    let l = &cfg.loss;
    let mut s = String::new();
    let _ = writeln!(s, "# lambda_ce={:?}", l.ce);
    let _ = writeln!(s, "# lambda_dice={:?}", l.dice);
    let _ = writeln!(s, "# lambda_cls={:?}", l.cls);
    let _ = writeln!(s, "# seed={} enhancement={}", cfg.seed, cfg.enhancement);
    let _ = writeln!(s, "{LOG_COLUMNS}");
    for r in log {
        let miou = r.val_miou.map_or("NA".to_string(), |m| format!("{m:?}"));
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{}",
            r.epoch, r.loss, r.ce, r.dice, r.cls, miou
        );
    }
    s
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One forward/backward pass; adds `scale · ∇loss` into the store's
/// gradient buffers and returns the loss breakdown.
pub fn accumulate_sample_gradients(
    model: &mut SegModel,
    image: &Tensor,
    gt: &[GtSegment],
    cfg: &TrainConfig,
    scale: f64,
) -> Result<LossBreakdown, HarnessError> {
    let tape = Tape::new();
    let grads = {
        let b = Binder::train(&tape, &model.store);
        let out = model.forward(&b, image)?;
        let (loss, breakdown) = total_loss(&out.predictions, gt, &cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(TensorError::NonFinite { op: "total_loss" }.into());
        }
        let g = loss.backward()?;
        (b.collect(&g), breakdown)
    };
    model.store.accumulate(&grads.0, scale);
    Ok(grads.1)
}

/// One pass over the shuffled training set followed by validation of the
/// `f32` snapshot. Any non-finite value surfaces as `TensorError::NonFinite`.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    cfg: &TrainConfig,
    model: &mut SegModel,
    opt: &mut AdamW,
    samples: &[(Tensor, Vec<GtSegment>)],
    order: &mut [usize],
    rng: &mut ChaCha8Rng,
    val_ds: &Dataset,
    epoch: usize,
) -> Result<EpochRecord, HarnessError> {
    order.shuffle(rng);
    let (mut loss, mut ce, mut dice, mut cls) = (0.0, 0.0, 0.0, 0.0);
    for batch in order.chunks(cfg.batch_size) {
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let (image, gt) = &samples[i];
            let bd = accumulate_sample_gradients(model, image, gt, cfg, scale)?;
            loss += bd.total;
            ce += bd.ce;
            dice += bd.dice;
            cls += bd.cls;
        }
        clip_grad_norm(&mut model.store, cfg.grad_clip);
        opt.step(&mut model.store);
    }
    if model.store.iter().any(|(_, t)| !t.all_finite()) {
        return Err(TensorError::NonFinite { op: "optimizer step" }.into());
    }
    let n = samples.len() as f64;
    let val_miou = evaluate_model(&model.quantized(), val_ds)?.miou();
    Ok(EpochRecord {
        epoch,
        loss: loss / n,
        ce: ce / n,
        dice: dice / n,
        cls: cls / n,
        val_miou,
    })
}

/// Trains from scratch on `train_ds`, validating on `val_ds` after every
/// epoch. Writes `train_log.csv` and `checkpoint.cmck` into `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome, HarnessError> {
    train_with_progress(cfg, train_ds, val_ds, out_dir, &mut |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with_progress(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    check_compatible(cfg, train_ds, "training data")?;
    check_compatible(cfg, val_ds, "validation data")?;
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let samples = prepare(train_ds, cfg.n_classes)?;
    let mut model = SegModel::new(cfg.model_config(), cfg.seed).map_err(HarnessError::Config)?;
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let record = match run_epoch(cfg, &mut model, &mut opt, &samples, &mut order, &mut shuffle_rng, val_ds, epoch) {
            Ok(r) => r,
            Err(HarnessError::Tensor(TensorError::NonFinite { .. })) => {
                write_atomic(&log_path, log_text(cfg, &log).as_bytes())?;
                return Err(HarnessError::NonFiniteLoss { epoch });
            }
            Err(e) => return Err(e),
        };
        model.quantized().save_checkpoint(&checkpoint_path)?;
        log.push(record);
        write_atomic(&log_path, log_text(cfg, &log).as_bytes())?;
        on_epoch(log.last().expect("just pushed"));
    }
    Ok(TrainOutcome {
        model,
        log,
        log_path,
        checkpoint_path,
    })
}
