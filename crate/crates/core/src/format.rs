//! `.mpmdl` model files.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE manifest length, UTF-8
//! JSON manifest, raw f32 LE weight blobs in manifest order, and a CRC-32 (LE)
//! over every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::layers::{Conv2DSpec, DenseSpec, DropoutSpec, LayerSpec, MaxPool2DSpec, Padding};
use crate::network::{ModelMetadata, ModelSpec, Task};

pub const MAGIC: [u8; 8] = *b"MPMDL\0\r\n";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const CRC_LEN: usize = 4;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerEntry {
    Dropout { rate: f64 },
    Dense { in_dim: usize, out_dim: usize },
    Conv2d { out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize, padding: Padding, stride: usize },
    Maxpool2d { size: usize },
    Relu,
    Flatten,
    Softmax,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    layer: usize,
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    task: Task,
    input_shape: Vec<usize>,
    tau: Option<f64>,
    standardization: Option<Standardization>,
    metadata: ModelMetadata,
    layers: Vec<LayerEntry>,
    blobs: Vec<BlobEntry>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedModel(msg.into())
}

/// Serialises a model to bytes.
pub fn encode_model(model: &ModelSpec) -> Result<Vec<u8>> {
    let mut layers = Vec::new();
    let mut blobs = Vec::new();
    let mut weights: Vec<&[f64]> = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let mut params: Vec<(&str, &[f64])> = Vec::new();
        let entry = match layer {
            LayerSpec::Dropout(d) => LayerEntry::Dropout { rate: d.rate() },
            LayerSpec::Dense(d) => {
                params.push(("weights", d.weights()));
                params.push(("bias", d.bias()));
                LayerEntry::Dense { in_dim: d.in_dim(), out_dim: d.out_dim() }
            }
            LayerSpec::Conv2d(c) => {
                params.push(("kernel", c.kernel()));
                params.push(("bias", c.bias()));
                let (kernel_h, kernel_w) = c.kernel_size();
                LayerEntry::Conv2d {
                    out_channels: c.out_channels(),
                    in_channels: c.in_channels(),
                    kernel_h,
                    kernel_w,
                    padding: c.padding(),
                    stride: c.stride(),
                }
            }
            LayerSpec::MaxPool2d(p) => LayerEntry::Maxpool2d { size: p.size() },
            LayerSpec::Relu => LayerEntry::Relu,
            LayerSpec::Flatten => LayerEntry::Flatten,
            LayerSpec::Softmax => LayerEntry::Softmax,
        };
        layers.push(entry);
        for (name, values) in params {
            blobs.push(BlobEntry { layer: i, name: name.to_string(), len: values.len() });
            weights.push(values);
        }
    }
    let manifest = Manifest {
        task: model.task(),
        input_shape: model.input_shape().to_vec(),
        tau: model.tau(),
        standardization: model.standardization().cloned(),
        metadata: model.metadata.clone(),
        layers,
        blobs,
    };
    let json = serde_json::to_vec(&manifest)?;
    let n_weights: usize = weights.iter().map(|w| w.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 4 * n_weights + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for w in weights {
        for &v in w {
            // Weights are held at f32 precision, so this cast is exact.
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses bytes produced by [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<ModelSpec> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(malformed(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(malformed("bad magic bytes"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version });
    }
    let manifest_len = u64::from_le_bytes(body[12..20].try_into().unwrap());
    let manifest_end = usize::try_from(manifest_len)
        .ok()
        .and_then(|l| HEADER_LEN.checked_add(l))
        .filter(|&end| end <= body.len())
        .ok_or_else(|| malformed("manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&body[HEADER_LEN..manifest_end])
        .map_err(|e| malformed(format!("manifest: {e}")))?;
    let blob_bytes = &body[manifest_end..];
    let declared: usize = manifest.blobs.iter().map(|b| b.len).sum();
    if declared.checked_mul(4) != Some(blob_bytes.len()) {
        return Err(malformed(format!(
            "manifest declares {declared} weights but {} bytes of weight data follow",
            blob_bytes.len()
        )));
    }
    let mut values = blob_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut blobs = manifest.blobs.iter();
    let mut take = |layer: usize, name: &str, expected: usize| -> Result<Vec<f64>> {
        let b = blobs.next().ok_or_else(|| malformed(format!("missing blob {name} of layer {layer}")))?;
        if b.layer != layer || b.name != name || b.len != expected {
            return Err(malformed(format!(
                "blob {}:{} (len {}) does not match layer {layer} {name} (len {expected})",
                b.layer, b.name, b.len
            )));
        }
        Ok(values.by_ref().take(expected).collect())
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let layer = match *entry {
            LayerEntry::Dropout { rate } => LayerSpec::Dropout(DropoutSpec::new(rate)?),
            LayerEntry::Dense { in_dim, out_dim } => {
                let w = take(i, "weights", in_dim * out_dim)?;
                let b = take(i, "bias", out_dim)?;
                LayerSpec::Dense(DenseSpec::new(in_dim, out_dim, w, b)?)
            }
            LayerEntry::Conv2d { out_channels, in_channels, kernel_h, kernel_w, padding, stride } => {
                let k = take(i, "kernel", out_channels * in_channels * kernel_h * kernel_w)?;
                let b = take(i, "bias", out_channels)?;
                LayerSpec::Conv2d(Conv2DSpec::new(out_channels, in_channels, kernel_h, kernel_w, k, b, padding, stride)?)
            }
            LayerEntry::Maxpool2d { size } => LayerSpec::MaxPool2d(MaxPool2DSpec::new(size)?),
            LayerEntry::Relu => LayerSpec::Relu,
            LayerEntry::Flatten => LayerSpec::Flatten,
            LayerEntry::Softmax => LayerSpec::Softmax,
        };
        layers.push(layer);
    }
    if blobs.next().is_some() {
        return Err(malformed("more blobs than layers use"));
    }
    let model = ModelSpec::new(layers, manifest.input_shape, manifest.task, manifest.tau, manifest.metadata)
        .map_err(|e| malformed(format!("invalid model: {e}")))?;
    Ok(model.with_standardization(manifest.standardization))
}

pub fn save_model(model: &ModelSpec, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelMetadata;

    fn sample_model() -> ModelSpec {
        let conv = Conv2DSpec::new(2, 1, 3, 3, (0..18).map(|i| i as f64 * 0.1 - 0.7).collect(), vec![0.1, -0.2], Padding::Same, 1)
            .unwrap();
        let dense = DenseSpec::new(8, 3, (0..24).map(|i| (i as f64).sin()).collect(), vec![0.3, 0.0, -1.0 / 3.0]).unwrap();
        let layers = vec![
            LayerSpec::Conv2d(conv),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d(MaxPool2DSpec::new(2).unwrap()),
            LayerSpec::Dropout(DropoutSpec::new(0.3).unwrap()),
            LayerSpec::Flatten,
            LayerSpec::Dense(dense),
            LayerSpec::Softmax,
        ];
        let meta = ModelMetadata { name: "m".into(), seed: 42, config_digest: "abc".into() };
        ModelSpec::new(layers, vec![1, 4, 4], Task::Classification, None, meta).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let m = sample_model();
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn regression_round_trip_keeps_tau_and_standardization() {
        let dense = DenseSpec::new(2, 1, vec![0.5, -0.25], vec![0.1]).unwrap();
        let s = Standardization {
            feature_mean: vec![0.1, 1.0 / 3.0],
            feature_std: vec![2.0, 0.7],
            target_mean: std::f64::consts::PI,
            target_std: 1.1,
        };
        let m = ModelSpec::new(vec![LayerSpec::Dense(dense)], vec![2], Task::Regression, Some(0.123456789), Default::default())
            .unwrap()
            .with_standardization(Some(s));
        assert_eq!(decode_model(&encode_model(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = encode_model(&sample_model()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_model(cut), Err(Error::Checksum { .. })));
        assert!(matches!(decode_model(&bytes[..10]), Err(Error::MalformedModel(_))));
    }

    fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn blob_length_disagreement_is_malformed() {
        let bytes = encode_model(&sample_model()).unwrap();
        // Drop one weight but re-sign the file so only the length check can catch it.
        let body = bytes[..bytes.len() - CRC_LEN - 4].to_vec();
        assert!(matches!(decode_model(&with_crc(body)), Err(Error::MalformedModel(_))));
    }

    #[test]
    fn version_mismatch() {
        let bytes = encode_model(&sample_model()).unwrap();
        let mut body = bytes[..bytes.len() - CRC_LEN].to_vec();
        body[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_model(&with_crc(body)), Err(Error::VersionMismatch { expected: 1, found: 7 })));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_model(&sample_model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::MalformedModel(_))));
    }
}
