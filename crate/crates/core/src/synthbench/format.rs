// Dataset file layout (little-endian):
//   "CMSB" | u32 version = 1 | u32 count | u32 H | u32 W | u32 channels = 3 | u32 K
//   per sample: f32 image[H·W·3] row-major, then u8 labels[H·W] (255 = ignore)

use std::path::Path;

use thiserror::Error;

use super::{Dataset, Sample};
use crate::binio::{put_f32s, put_u32, Reader, Truncated};

pub const MAGIC: &[u8; 4] = b"CMSB";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 28;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset file is truncated")]
    Truncated,
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

impl From<Truncated> for DatasetError {
    fn from(_: Truncated) -> Self {
        DatasetError::Truncated
    }
}

/// Exact file size for `count` samples of `h × w`.
pub fn encoded_len(count: usize, h: usize, w: usize) -> usize {
    HEADER_BYTES + count * (h * w * 3 * 4 + h * w)
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        self.validate().map_err(DatasetError::Malformed)?;
        let mut out = Vec::with_capacity(encoded_len(self.samples.len(), self.h, self.w));
        out.extend_from_slice(MAGIC);
        for v in [VERSION as usize, self.samples.len(), self.h, self.w, 3, self.n_classes] {
            put_u32(&mut out, v as u32);
        }
        for s in &self.samples {
            put_f32s(&mut out, s.image.iter().copied());
            out.extend_from_slice(&s.labels);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(DatasetError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let channels = r.u32()?;
        let n_classes = r.u32()? as usize;
        if channels != 3 {
            return Err(DatasetError::Malformed(format!("{channels} channels, expected 3")));
        }
        if h == 0 || w == 0 {
            return Err(DatasetError::Malformed(format!("empty {h}×{w} images")));
        }
        let per_sample = h
            .checked_mul(w)
            .and_then(|p| p.checked_mul(13))
            .ok_or_else(|| DatasetError::Malformed("image size overflows".into()))?;
        if count.checked_mul(per_sample).is_none_or(|n| n > r.remaining()) {
            return Err(DatasetError::Truncated);
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let image = r.f32s(h * w * 3)?;
            let labels = r.take(h * w)?.to_vec();
            samples.push(Sample { image, labels });
        }
        if r.remaining() != 0 {
            return Err(DatasetError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        let ds = Dataset {
            h,
            w,
            n_classes,
            samples,
        };
        ds.validate().map_err(DatasetError::Malformed)?;
        Ok(ds)
    }
}

/// Writes atomically (temporary file then rename).
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ds.to_bytes()?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
