//! Scene-seed bookkeeping for the leave-one-domain-out protocol.
//!
//! Training scenes use seeds `data_seed .. data_seed + train_scenes`; the
//! held-out scenes follow directly after. Unseen-domain evaluation renders
//! the held-out scenes in each target style, so source validation and
//! target evaluation share content and differ only in appearance.

use std::ops::Range;

use super::{HarnessError, TrainConfig};
use crate::synthbench::{domain_preset, generate_domain, Dataset, SceneConfig};

pub fn train_seeds(cfg: &TrainConfig) -> Range<u64> {
    cfg.data_seed..cfg.data_seed + cfg.train_scenes as u64
}

pub fn heldout_seeds(cfg: &TrainConfig) -> Range<u64> {
    let start = train_seeds(cfg).end;
    start..start + cfg.val_scenes as u64
}

/// Renders `seeds` in the named domain at `size × size`.
pub fn render_split(domain: &str, seeds: Range<u64>, size: usize) -> Result<Dataset, HarnessError> {
    let style = domain_preset(domain)
        .ok_or_else(|| HarnessError::Config(format!("unknown domain `{domain}`")))?;
    let scene = SceneConfig { h: size, w: size };
    let count = (seeds.end - seeds.start) as usize;
    generate_domain(domain, &style, seeds.start, count, &scene).map_err(HarnessError::Config)
}

/// `(train, val)` of the source domain.
pub fn source_splits(cfg: &TrainConfig) -> Result<(Dataset, Dataset), HarnessError> {
    let train = render_split(&cfg.source_domain, train_seeds(cfg), cfg.image_size)?;
    let val = render_split(&cfg.source_domain, heldout_seeds(cfg), cfg.image_size)?;
    Ok((train, val))
}

/// The held-out scenes rendered in an unseen target style.
pub fn target_split(cfg: &TrainConfig, domain: &str) -> Result<Dataset, HarnessError> {
    if domain.eq_ignore_ascii_case(&cfg.source_domain) {
        return Err(HarnessError::Config(format!(
            "`{domain}` is the source domain, not an unseen target"
        )));
    }
    render_split(domain, heldout_seeds(cfg), cfg.image_size)
}

/// File names used by `gen-data` and read back by `train`.
pub fn split_file_names(domain: &str) -> (String, String) {
    (format!("{domain}_train.cmsb"), format!("{domain}_val.cmsb"))
}
