//! Binary tensor files: an 8-byte magic, a little-endian `u64` header length,
//! a UTF-8 JSON header, then raw little-endian `f64` tensors in manifest
//! order. Model checkpoints and images share the format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::image::ImageTensor;
use super::params::{manifest, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"SIFTOY1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
}

/// Serializes tensors under a header made of `fields` plus the format
/// version and tensor manifest. Header keys come out sorted.
pub fn write_tensor_file(fields: Map<String, Value>, entries: &[TensorEntry]) -> Vec<u8> {
    let mut offset = 0u64;
    let mut listed = Vec::with_capacity(entries.len());
    for e in entries {
        listed.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
        });
        offset += 8 * e.data.len() as u64;
    }
    let mut header = fields;
    header.insert("format_version".into(), Value::from(FORMAT_VERSION));
    header.insert(
        "tensors".into(),
        serde_json::to_value(&listed).expect("manifest serializes"),
    );
    let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in entries {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_tensor_file(bytes: &[u8]) -> Result<(Map<String, Value>, Vec<TensorEntry>)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing SIFTOY1 magic".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("header length field cut short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header claims {hlen} bytes")))?;
    let header: Value = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let Value::Object(mut header) = header else {
        return Err(Error::Format("header is not a JSON object".into()));
    };
    let version = header
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("header lacks format_version".into()))? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let listed: Vec<ManifestEntry> = serde_json::from_value(
        header
            .remove("tensors")
            .ok_or_else(|| Error::Format("header lacks tensor manifest".into()))?,
    )
    .map_err(|e| Error::Format(format!("tensor manifest: {e}")))?;
    let data = &bytes[data_start..];
    let mut entries = Vec::with_capacity(listed.len());
    for m in listed {
        let n: usize = m.shape.iter().product();
        let start = m.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(Error::Truncated(format!(
                "tensor {} needs bytes {start}..{end}, file has {}",
                m.name,
                data.len()
            )));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push(TensorEntry {
            name: m.name,
            shape: m.shape,
            data: values,
        });
    }
    Ok((header, entries))
}

pub fn checkpoint_bytes<F: Real>(params: &ModelParams<F>, meta: Option<Value>) -> Vec<u8> {
    let mut fields = Map::new();
    fields.insert("kind".into(), Value::from("model"));
    fields.insert(
        "config".into(),
        serde_json::to_value(params.config()).expect("config serializes"),
    );
    if let Some(meta) = meta {
        fields.insert("meta".into(), meta);
    }
    let entries: Vec<TensorEntry> = params
        .manifest()
        .into_iter()
        .zip(params.tensors())
        .map(|(spec, t)| TensorEntry {
            name: spec.name,
            shape: spec.shape,
            data: t.iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    write_tensor_file(fields, &entries)
}

pub fn checkpoint_from_bytes<F: Real>(bytes: &[u8]) -> Result<ModelParams<F>> {
    let (header, entries) = read_tensor_file(bytes)?;
    let config: ModelConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint header lacks config".into()))?,
    )
    .map_err(|e| Error::Format(format!("config: {e}")))?;
    config.validate()?;
    let specs = manifest(&config);
    if specs.len() != entries.len() {
        return Err(Error::Consistency(format!(
            "config implies {} tensors, file lists {}",
            specs.len(),
            entries.len()
        )));
    }
    for (spec, e) in specs.iter().zip(&entries) {
        if spec.name != e.name || spec.shape != e.shape {
            return Err(Error::Consistency(format!(
                "tensor {} {:?} does not match config ({} {:?})",
                e.name, e.shape, spec.name, spec.shape
            )));
        }
    }
    let tensors = entries
        .into_iter()
        .map(|e| e.data.into_iter().map(F::lit).collect())
        .collect();
    ModelParams::from_tensors(config, tensors)
}

pub fn save_checkpoint<F: Real>(params: &ModelParams<F>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, None)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ModelParams<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// SHA-256 of the metadata-free checkpoint serialization.
pub fn model_digest<F: Real>(params: &ModelParams<F>) -> String {
    hex::encode(Sha256::digest(checkpoint_bytes(params, None)))
}

pub fn image_bytes<F: Real>(image: &ImageTensor<F>) -> Vec<u8> {
    let mut fields = Map::new();
    fields.insert("kind".into(), Value::from("image"));
    let entry = TensorEntry {
        name: "image".into(),
        shape: image.shape().to_vec(),
        data: image.data().iter().map(|v| v.as_f64()).collect(),
    };
    write_tensor_file(fields, &[entry])
}

pub fn image_from_bytes<F: Real>(bytes: &[u8]) -> Result<ImageTensor<F>> {
    let (_, mut entries) = read_tensor_file(bytes)?;
    if entries.len() != 1 || entries[0].shape.len() != 3 {
        return Err(Error::Consistency("image file must hold one rank-3 tensor".into()));
    }
    let e = entries.pop().expect("one entry");
    ImageTensor::new(
        e.shape[0],
        e.shape[1],
        e.shape[2],
        e.data.into_iter().map(F::lit).collect(),
    )
}

pub fn save_image<F: Real>(image: &ImageTensor<F>, path: &Path) -> Result<()> {
    std::fs::write(path, image_bytes(image)).map_err(|e| Error::io(path, e))
}

pub fn load_image<F: Real>(path: &Path) -> Result<ImageTensor<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::init_model;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            vocab_size: 16,
            embed_dim: 8,
            max_seq_len: 24,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = init_model::<f64>(3, small()).unwrap();
        let back: ModelParams<f64> = checkpoint_from_bytes(&checkpoint_bytes(&p, None)).unwrap();
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            let a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let p = init_model::<f64>(3, small()).unwrap();
        let mut bytes = checkpoint_bytes(&p, None);
        bytes[0] = b'X';
        assert!(matches!(checkpoint_from_bytes::<f64>(&bytes), Err(Error::Format(_))));
        assert!(matches!(checkpoint_from_bytes::<f64>(b"SIF"), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_version_are_distinct_errors() {
        let p = init_model::<f64>(3, small()).unwrap();
        let bytes = checkpoint_bytes(&p, None);
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(checkpoint_from_bytes::<f64>(cut), Err(Error::Truncated(_))));
        assert!(matches!(checkpoint_from_bytes::<f64>(&bytes[..20]), Err(Error::Truncated(_))));

        let mut fields = Map::new();
        fields.insert("config".into(), serde_json::to_value(small()).unwrap());
        let mut forged = write_tensor_file(fields, &[]);
        let text = String::from_utf8_lossy(&forged[16..]).replace("\"format_version\":1", "\"format_version\":9");
        forged.truncate(16);
        forged.extend_from_slice(text.as_bytes());
        assert!(matches!(
            checkpoint_from_bytes::<f64>(&forged),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn config_disagreeing_with_tensors_is_consistency_error() {
        let p = init_model::<f64>(3, small()).unwrap();
        let (mut header, entries) = read_tensor_file(&checkpoint_bytes(&p, None)).unwrap();
        let other = ModelConfig {
            embed_dim: 16,
            ..small()
        };
        header.insert("config".into(), serde_json::to_value(other).unwrap());
        header.remove("format_version");
        let bytes = write_tensor_file(header, &entries);
        assert!(matches!(checkpoint_from_bytes::<f64>(&bytes), Err(Error::Consistency(_))));
    }

    #[test]
    fn image_round_trip() {
        let img = ImageTensor::from_fn(3, 4, 4, |c, y, x| ((c + y + x) % 5) as f64 / 4.0).unwrap();
        let back: ImageTensor<f64> = image_from_bytes(&image_bytes(&img)).unwrap();
        assert_eq!(img, back);
    }
}
