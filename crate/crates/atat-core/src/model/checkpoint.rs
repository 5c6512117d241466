//! Versioned binary checkpoints: magic, format version, the model config as
//! JSON, run metadata, then named tensors as row-major little-endian f64.
//! Save followed by load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::ParamGroup;
use super::{AtatModel, ModelConfig, ModelError, Scalar};

const MAGIC: &[u8; 8] = b"ATATCKP1";
const VERSION: u32 = 1;

/// What a checkpoint knows about its own training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Task names the model was trained on (e.g. "slu", "asr").
    pub trained_tasks: Vec<String>,
    pub step: u64,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn has_audio_task(&self) -> bool {
        self.trained_tasks.iter().any(|t| t != "nlu")
    }

    pub fn has_text_task(&self) -> bool {
        self.trained_tasks.iter().any(|t| t == "nlu")
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, ModelError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &AtatModel<F>,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg_json = serde_json::to_vec(model.cfg()).expect("config serializes");
    write_bytes(&mut w, &cfg_json)?;
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    write_bytes(&mut w, &meta_json)?;

    let store = model.store();
    let metas = store.layout().metas().to_vec();
    w.write_all(&(metas.len() as u64).to_le_bytes())?;
    for m in &metas {
        write_bytes(&mut w, m.name.as_bytes())?;
        write_bytes(&mut w, m.group.name().as_bytes())?;
        w.write_all(&[m.shape.len() as u8])?;
        for &d in &m.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let data = &store.data()[m.offset..m.offset + m.len()];
        for &v in data {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(AtatModel<F>, CheckpointMeta), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(ModelError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let cfg: ModelConfig = serde_json::from_slice(&read_bytes(&mut r)?)
        .map_err(|e| ModelError::BadCheckpoint(format!("bad config json: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_slice(&read_bytes(&mut r)?)
        .map_err(|e| ModelError::BadCheckpoint(format!("bad meta json: {e}")))?;

    // Structure from the config; every value then comes from the file.
    let mut model = AtatModel::<F>::new(cfg, 0)?;

    let mut count = [0u8; 8];
    r.read_exact(&mut count)?;
    let n_tensors = u64::from_le_bytes(count) as usize;
    let expected = model.store().layout().metas().len();
    if n_tensors != expected {
        return Err(ModelError::BadCheckpoint(format!(
            "checkpoint has {n_tensors} tensors, model expects {expected}"
        )));
    }
    for _ in 0..n_tensors {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| ModelError::BadCheckpoint("non-utf8 tensor name".into()))?;
        let group_name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| ModelError::BadCheckpoint("non-utf8 group name".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 8];
            r.read_exact(&mut d)?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let id = model
            .store()
            .layout()
            .id_by_name(&name)
            .ok_or_else(|| ModelError::BadCheckpoint(format!("unknown tensor '{name}'")))?;
        {
            let meta = model.store().layout().meta(id);
            if meta.shape != shape {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor '{name}' shape {shape:?} does not match model {:?}",
                    meta.shape
                )));
            }
            if ParamGroup::from_name(&group_name) != Some(meta.group) {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor '{name}' group '{group_name}' does not match model"
                )));
            }
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let slot = model.store_mut().slice_mut(id);
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            slot[i] = F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    model.store_mut().clear_new_rows();
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = AtatModel::<f32>::new(ModelConfig::grad_check(17), 42).unwrap();
        let meta = CheckpointMeta {
            trained_tasks: vec!["slu".into(), "asr".into()],
            step: 123,
            seed: 42,
        };
        save_checkpoint(&path, &model, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(model.cfg(), loaded.cfg());
        let a = model.store().data();
        let b = loaded.store().data();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = AtatModel::<f32>::new(ModelConfig::grad_check(17), 42).unwrap();
        save_checkpoint(&path, &model, &CheckpointMeta::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn meta_task_queries() {
        let m = CheckpointMeta {
            trained_tasks: vec!["slu".into(), "nlu".into()],
            ..Default::default()
        };
        assert!(m.has_audio_task());
        assert!(m.has_text_task());
        let m2 = CheckpointMeta { trained_tasks: vec!["nlu".into()], ..Default::default() };
        assert!(!m2.has_audio_task());
    }
}
