//! Procedural multi-domain segmentation benchmark.
//!
//! Scenes (the content) are generated from a seed alone; domain styles
//! only change appearance. Rendering one scene seed under any two styles
//! therefore yields the same label map.

mod format;
mod scene;
mod style;

pub use format::{encoded_len, read_dataset, write_dataset, DatasetError, HEADER_BYTES};
pub use scene::{
    gen_scene, Primitive, SceneConfig, SceneSpec, Shape, CLASS_NAMES, POLE, ROAD, SIGN, SKY,
    TERRAIN, VEHICLE,
};
pub use style::{
    apply_style, domain_preset, render_base, stylize, DomainStyle, Image, DOMAIN_PRESETS,
    FOG_GRAY,
};

use crate::ndtensor::Tensor;
use crate::objective::IGNORE;
use crate::segmodel::LabelMap;

/// One image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H×W×3` row-major.
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Homogeneous collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_classes == 0 || self.n_classes > 255 {
            return Err(format!("class count {} out of range", self.n_classes));
        }
        if self.h == 0 || self.w == 0 {
            return Err(format!("empty {}×{} images", self.h, self.w));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != self.h * self.w * 3 || s.labels.len() != self.h * self.w {
                return Err(format!("sample {i} does not match {}×{}", self.h, self.w));
            }
            if let Some(l) = s
                .labels
                .iter()
                .find(|&&l| l != IGNORE && l as usize >= self.n_classes)
            {
                return Err(format!("sample {i} has label {l} ≥ {}", self.n_classes));
            }
        }
        Ok(())
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        let s = &self.samples[i];
        Tensor::new(
            &[self.h, self.w, 3],
            s.image.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated sample size")
    }

    pub fn label_map(&self, i: usize) -> LabelMap {
        LabelMap::new(self.h, self.w, self.samples[i].labels.clone())
    }

    /// Pixel count per class (ignored pixels excluded).
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.n_classes];
        for s in &self.samples {
            for &l in &s.labels {
                if l != IGNORE {
                    hist[l as usize] += 1;
                }
            }
        }
        hist
    }
}

/// Seed for the per-sample style jitter of `scene_seed` in `domain`.
pub fn jitter_seed(scene_seed: u64, domain: &str) -> u64 {
    // FNV-1a over the domain name, mixed with the scene seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    (h ^ scene_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_left(17)
}

/// Renders scenes `first_seed .. first_seed + count` in one domain.
pub fn generate_domain(
    domain: &str,
    style: &DomainStyle,
    first_seed: u64,
    count: usize,
    cfg: &SceneConfig,
) -> Result<Dataset, String> {
    style.validate()?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let seed = first_seed + i;
        let (scene, labels) = gen_scene(seed, cfg)?;
        let image = apply_style(&scene, style, jitter_seed(seed, domain));
        samples.push(Sample {
            image: image.data,
            labels: labels.labels,
        });
    }
    Ok(Dataset {
        h: cfg.h,
        w: cfg.w,
        n_classes: SceneConfig::N_CLASSES,
        samples,
    })
}

#[cfg(test)]
mod tests;
