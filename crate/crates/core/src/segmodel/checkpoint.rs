// Checkpoint layout (little-endian):
//   "CMCK" | u32 version = 1 | u32 tensor count
//   per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload
// Architecture and seed live in three extra tensors, `meta.config`,
// `meta.schedule` and `meta.seed`, written first. The seed is split into
// four 16-bit pieces so each is exact in f32.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use super::{DecoderConfig, Enhancement, ModelConfig, SegModel};
use crate::binio::{put_f32s, put_u32, Reader, Truncated};

pub const MAGIC: &[u8; 4] = b"CMCK";
pub const VERSION: u32 = 1;
const META_TENSORS: usize = 3;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl From<Truncated> for CheckpointError {
    fn from(_: Truncated) -> Self {
        CheckpointError::Truncated
    }
}

struct Entry {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl IntoIterator<Item = f32>) {
    let bytes = name.as_bytes();
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    out.push(shape.len() as u8);
    for &d in shape {
        put_u32(out, d as u32);
    }
    put_f32s(out, data);
}

fn meta_config(cfg: &ModelConfig) -> Vec<f32> {
    let e = cfg.decoder.enhancement;
    [
        cfg.d,
        cfg.n_queries,
        cfg.n_classes,
        cfg.decoder.n_layers,
        e.x32 as usize,
        e.x16 as usize,
        e.x8 as usize,
        cfg.share_query_proj as usize,
    ]
    .iter()
    .map(|&v| v as f32)
    .collect()
}

impl SegModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, (self.store.len() + META_TENSORS) as u32);
        let meta = meta_config(&self.config);
        push_tensor(&mut out, "meta.config", &[meta.len()], meta);
        let sched = &self.config.decoder.resolution_schedule;
        push_tensor(
            &mut out,
            "meta.schedule",
            &[sched.len()],
            sched.iter().map(|&s| s as f32),
        );
        let seed = (0..4).map(|i| ((self.seed >> (16 * i)) & 0xffff) as f32);
        push_tensor(&mut out, "meta.seed", &[4], seed);
        for (name, t) in self.store.iter() {
            push_tensor(&mut out, name, t.shape(), t.data().iter().map(|&v| v as f32));
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut entries: HashMap<String, Entry> = HashMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or(CheckpointError::Truncated)?;
            let data = r.f32s(n)?;
            if entries.insert(name.clone(), Entry { shape, data }).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        let (config, seed) = config_from_meta(&entries)?;
        // A genuine checkpoint stores every parameter, so the dimensions it
        // claims can never need more values than the file holds. Checking
        // first keeps damaged headers from requesting absurd allocations.
        let stored: usize = entries.values().map(|e| e.data.len()).sum();
        let d = config.d;
        let needed = [
            d.checked_mul(d),
            config.n_queries.checked_mul(d),
            config.n_classes.checked_add(1).and_then(|k| k.checked_mul(d)),
            config.decoder.n_layers.checked_mul(d),
        ];
        if needed.iter().any(|n| n.is_none_or(|n| n > stored)) {
            return Err(CheckpointError::Malformed(
                "model dimensions exceed the stored parameters".into(),
            ));
        }
        let mut model = SegModel::new(config, seed).map_err(CheckpointError::Malformed)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_owned();
            let entry = entries
                .get(&name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))?;
            let t = model.store.get_mut(id);
            if entry.shape != t.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&entry.data) {
                *dst = f64::from(src);
            }
        }
        if entries.len() != model.store.len() + META_TENSORS {
            return Err(CheckpointError::Malformed(
                "checkpoint holds tensors the model does not use".into(),
            ));
        }
        Ok(model)
    }

    /// Writes atomically (temporary file then rename).
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_checkpoint_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

fn config_from_meta(
    entries: &HashMap<String, Entry>,
) -> Result<(ModelConfig, u64), CheckpointError> {
    let get = |name: &str| {
        entries
            .get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing {name}")))
    };
    let meta = &get("meta.config")?.data;
    if meta.len() != 8 || meta.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(CheckpointError::Malformed("bad meta.config".into()));
    }
    let m: Vec<usize> = meta.iter().map(|&v| v as usize).collect();
    let schedule: Vec<usize> = get("meta.schedule")?.data.iter().map(|&v| v as usize).collect();
    let pieces = &get("meta.seed")?.data;
    if pieces.len() != 4 || pieces.iter().any(|v| !(0.0..65536.0).contains(v) || v.fract() != 0.0) {
        return Err(CheckpointError::Malformed("bad meta.seed".into()));
    }
    let seed = pieces
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
    let config = ModelConfig {
        d: m[0],
        n_queries: m[1],
        n_classes: m[2],
        decoder: DecoderConfig {
            n_layers: m[3],
            resolution_schedule: schedule,
            enhancement: Enhancement {
                x32: m[4] == 1,
                x16: m[5] == 1,
                x8: m[6] == 1,
            },
        },
        share_query_proj: m[7] == 1,
    };
    Ok((config, seed))
}
