//! Dataset directory I/O: `manifest.json` + one packed `images.bin`.
//!
//! Images are stored as raw little-endian `f32`, so a save/load round
//! trip is bit-exact.

use super::{Dataset, GeneratorConfig, Labels, MultiTaskSample, CHANNELS};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const IMAGES_NAME: &str = "images.bin";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    labels: [u8; 3],
    severity: f64,
    /// Byte offset into `images.bin`.
    offset: u64,
    /// Byte length of this sample's image blob.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    image_size: usize,
    channels: usize,
    n_samples: usize,
    config: GeneratorConfig,
    samples: Vec<ManifestSample>,
}

/// Write `manifest.json` and `images.bin` into `dir` (created if absent).
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let per_image = ds.image_size * ds.image_size * CHANNELS * 4;
    let mut blob = Vec::with_capacity(ds.len() * per_image);
    let mut samples = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let offset = blob.len() as u64;
        for &v in &s.image {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        samples.push(ManifestSample {
            labels: s.labels.as_array(),
            severity: s.severity,
            offset,
            len: (blob.len() as u64) - offset,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        image_size: ds.image_size,
        channels: CHANNELS,
        n_samples: ds.len(),
        config: ds.config.clone(),
        samples,
    };
    fs::write(dir.join(IMAGES_NAME), &blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// Read a dataset directory back; validates schema version, channel
/// count, and every sample's blob extent.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset schema_version {}, expected {SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    if manifest.channels != CHANNELS {
        return Err(Error::format(format!(
            "dataset has {} channels, expected {CHANNELS}",
            manifest.channels
        )));
    }
    if manifest.samples.len() != manifest.n_samples {
        return Err(Error::format(format!(
            "manifest lists {} samples but declares n_samples = {}",
            manifest.samples.len(),
            manifest.n_samples
        )));
    }
    let blob = fs::read(dir.join(IMAGES_NAME))?;
    let expect_len = (manifest.image_size * manifest.image_size * CHANNELS * 4) as u64;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, ms) in manifest.samples.iter().enumerate() {
        if ms.len != expect_len {
            return Err(Error::format(format!(
                "sample {i}: blob length {} does not match image dims ({expect_len})",
                ms.len
            )));
        }
        let start = ms.offset as usize;
        let end = start + ms.len as usize;
        if end > blob.len() {
            return Err(Error::format(format!(
                "sample {i}: blob extent {start}..{end} exceeds images.bin ({} bytes)",
                blob.len()
            )));
        }
        let image: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        samples.push(MultiTaskSample {
            image,
            labels: Labels::from_array(ms.labels)?,
            severity: ms.severity,
        });
    }
    Ok(Dataset {
        image_size: manifest.image_size,
        samples,
        config: manifest.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GeneratorConfig};

    fn small_dataset() -> Dataset {
        generate(&GeneratorConfig {
            n_samples: 12,
            seed: 9,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        save(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(ds, back);
        // and a second save produces identical bytes (byte-stable output)
        let first = fs::read(dir.path().join(MANIFEST_NAME)).unwrap();
        save(&back, dir.path()).unwrap();
        let second = fs::read(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn truncated_blob_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        save(&ds, dir.path()).unwrap();
        let blob_path = dir.path().join(IMAGES_NAME);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 100]).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("sample 11"), "got: {err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(&small_dataset(), dir.path()).unwrap();
        let mp = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&mp).unwrap();
        fs::write(
            &mp,
            text.replace("\"schema_version\": 1", "\"schema_version\": 2"),
        )
        .unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Io(_))));
    }
}
