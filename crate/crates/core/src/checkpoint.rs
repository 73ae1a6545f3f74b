//! Model checkpoints: a self-describing binary format.
//!
//! Layout: `u64` little-endian header length, then a JSON header
//! ([`CheckpointHeader`]) carrying the schema version, element
//! precision, full model config, and a parameter table, then the raw
//! little-endian parameter bytes in table order. Offsets are relative
//! to the start of the data section; `len` counts elements.

use crate::autodiff::{Element, Precision};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Byte offset into the data section.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub precision: Precision,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

fn append_values<E: Element>(values: &[E], out: &mut Vec<u8>) {
    match E::PRECISION {
        Precision::F32 => {
            for &v in values {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in values {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
}

fn decode_values<E: Element>(bytes: &[u8]) -> Vec<E> {
    match E::PRECISION {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| E::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

/// Serialize the model (config + every parameter) to `path`.
pub fn save_model<E: Element>(model: &Model<E>, path: &Path) -> Result<()> {
    let width = E::PRECISION.byte_width() as u64;
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for p in model.parameters() {
        let t = p.tensor();
        entries.push(ParamEntry {
            name: p.name().to_string(),
            shape: t.shape(),
            trainable: p.trainable(),
            offset: data.len() as u64,
            len: t.numel() as u64,
        });
        append_values(&t.data_vec(), &mut data);
        debug_assert_eq!(
            data.len() as u64,
            entries.last().unwrap().offset + entries.last().unwrap().len * width
        );
    }
    let header = CheckpointHeader {
        schema_version: CKPT_SCHEMA_VERSION,
        precision: E::PRECISION,
        model: model.config().clone(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&data)?;
    Ok(())
}

/// Read and validate just the header.
pub fn load_header(path: &Path) -> Result<CheckpointHeader> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    if header.schema_version != CKPT_SCHEMA_VERSION {
        return Err(Error::format(format!(
            "checkpoint schema version {} (supported: {CKPT_SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    Ok(header)
}

/// Rebuild a model from a checkpoint. The element type must match the
/// stored precision exactly; loading f32 weights as f64 is refused.
pub fn load_model<E: Element>(path: &Path) -> Result<Model<E>> {
    let header = load_header(path)?;
    if header.precision != E::PRECISION {
        return Err(Error::format(format!(
            "checkpoint stores {} weights, requested {}",
            header.precision,
            E::PRECISION
        )));
    }
    let width = E::PRECISION.byte_width() as u64;
    let mut file = std::fs::File::open(path)?;
    let mut all = Vec::new();
    file.read_to_end(&mut all)?;
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&all[..8]);
    let data_start = 8 + u64::from_le_bytes(len_bytes) as usize;
    let data = &all[data_start..];

    // Seed value is irrelevant: every parameter is overwritten below.
    let model = Model::<E>::new(&header.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params = model.parameters();
    if params.len() != header.params.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, model defines {}",
            header.params.len(),
            params.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &crate::autodiff::Parameter<E>> =
        params.iter().map(|p| (p.name(), p)).collect();
    for entry in &header.params {
        let p = by_name
            .get(entry.name.as_str())
            .ok_or_else(|| Error::format(format!("unknown parameter {:?}", entry.name)))?;
        let t = p.tensor();
        if t.shape() != entry.shape {
            return Err(Error::format(format!(
                "parameter {:?}: stored shape {:?}, model shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + (entry.len * width) as usize;
        if entry.len as usize != t.numel() || end > data.len() {
            return Err(Error::format(format!(
                "parameter {:?}: data range {start}..{end} out of bounds ({} bytes)",
                entry.name,
                data.len()
            )));
        }
        t.set_data(&decode_values::<E>(&data[start..end]));
        p.set_trainable(entry.trainable);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, Tensor};
    use crate::backbone::BackboneConfig;
    use crate::peft::PeftConfig;
    use crate::task::Task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 12,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                final_stage_blocks: 1,
            },
            peft: PeftConfig {
                r: 3,
                ..PeftConfig::default()
            },
            tasks: Task::ALL.to_vec(),
            head_dropout: 0.0,
        }
    }

    #[test]
    fn round_trip_preserves_weights_flags_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let model = Model::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        model.set_backbone_frozen(true);
        // leave nonzero values in an up-projection so the round trip is
        // tested on non-trivial weights
        model
            .peft
            .adapter(Task::Ballooning, 1)
            .unwrap()
            .up()
            .tensor()
            .set_data(&Tensor::<f64>::randn(&mut rng, 0.3, &[3, 12]).data_vec());
        save_model(&model, &path).unwrap();

        let loaded = load_model::<f64>(&path).unwrap();
        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.trainable(), b.trainable());
            let (da, db) = (a.tensor().data_vec(), b.tensor().data_vec());
            assert!(da.iter().zip(&db).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(loaded.backbone.is_frozen());

        let images = Tensor::randn(&mut rng, 1.0, &[2, 8, 8, 3]);
        let a = model.forward_all(&images, Mode::Eval, &mut rng).unwrap();
        let b = loaded.forward_all(&images, Mode::Eval, &mut rng).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data_vec(), y.data_vec());
        }
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model32.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let model = Model::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model::<f32>(&path).unwrap();
        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            let (da, db) = (a.tensor().data_vec(), b.tensor().data_vec());
            assert!(da.iter().zip(&db).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn precision_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let model = Model::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        save_model(&model, &path).unwrap();
        let err = load_model::<f64>(&path)
            .err()
            .expect("precision mismatch must fail");
        assert!(err.to_string().contains("f32"), "{err}");
    }

    #[test]
    fn header_describes_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let model = Model::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        save_model(&model, &path).unwrap();
        let header = load_header(&path).unwrap();
        assert_eq!(header.schema_version, CKPT_SCHEMA_VERSION);
        assert_eq!(header.precision, Precision::F32);
        assert_eq!(header.model, tiny_cfg());
        assert_eq!(header.params.len(), model.parameters().len());
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let model = Model::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        let err = load_model::<f32>(&path)
            .err()
            .expect("truncated data must fail");
        assert!(err.to_string().contains("out of bounds"), "{err}");
    }
}
