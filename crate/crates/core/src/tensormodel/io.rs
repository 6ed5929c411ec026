//! On-disk bundle format.
//!
//! A bundle is a pretty-printed JSON manifest plus one binary blob. Tensors
//! are concatenated in manifest order, each starting on a 64-byte boundary,
//! words little-endian at their native width. A quantized tensor's row
//! scales follow it as little-endian f64, again 64-byte aligned. The
//! manifest carries the SHA-256 of the whole blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitcodec::FormatSpec;
use crate::error::{BundleError, Result};
use crate::nnet::Architecture;

use super::{ModelBundle, Tensor, TensorMeta};

pub const MANIFEST_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    architecture: Architecture,
    blob: String,
    blob_len: usize,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct TensorEntry {
    name: String,
    layer_index: usize,
    param_kind: String,
    shape: Vec<usize>,
    format: String,
    quantized: bool,
    offset: usize,
    byte_len: usize,
    scale_offset: Option<usize>,
}

fn pad_to_alignment(buf: &mut Vec<u8>) {
    let rem = buf.len() % ALIGN;
    if rem != 0 {
        buf.resize(buf.len() + ALIGN - rem, 0);
    }
}

pub(super) fn encode_blob(bundle: &ModelBundle) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(bundle.tensors.len());
    for t in &bundle.tensors {
        pad_to_alignment(&mut blob);
        let offset = blob.len();
        let width = t.meta.format.byte_width();
        for &w in &t.words {
            blob.extend_from_slice(&w.to_le_bytes()[..width]);
        }
        let byte_len = blob.len() - offset;
        let scale_offset = t.meta.quantized.then(|| {
            pad_to_alignment(&mut blob);
            let at = blob.len();
            for s in &t.meta.scales {
                blob.extend_from_slice(&s.to_le_bytes());
            }
            at
        });
        entries.push(TensorEntry {
            name: t.meta.name.clone(),
            layer_index: t.meta.layer_index,
            param_kind: t.meta.param_kind.clone(),
            shape: t.meta.shape.clone(),
            format: t.meta.format.tag().to_string(),
            quantized: t.meta.quantized,
            offset,
            byte_len,
            scale_offset,
        });
    }
    (blob, entries)
}

pub(super) fn blob_checksum(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (manifest) and a sibling `.bin` blob.
pub fn save_bundle(bundle: &ModelBundle, manifest_path: &Path) -> Result<()> {
    let (blob, tensors) = encode_blob(bundle);
    let blob_file = blob_path(manifest_path);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        architecture: bundle.architecture.clone(),
        blob: blob_file.file_name().expect("blob file name").to_string_lossy().into_owned(),
        blob_len: blob.len(),
        blob_sha256: blob_checksum(&blob),
        tensors,
    };
    fs::write(&blob_file, &blob).map_err(io_err(&blob_file))?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path, text).map_err(io_err(manifest_path))?;
    Ok(())
}

pub fn load_bundle(manifest_path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob_file = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(io_err(&blob_file))?;

    let layout_err = |name: &str, reason: String| BundleError::Layout { tensor: name.to_string(), reason };
    let expected_layout = manifest.architecture.layout();
    if expected_layout.len() != manifest.tensors.len() {
        return Err(BundleError::Architecture(format!(
            "architecture declares {} tensors, manifest lists {}",
            expected_layout.len(),
            manifest.tensors.len()
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for (entry, spec) in manifest.tensors.iter().zip(&expected_layout) {
        let format = FormatSpec::from_tag(&entry.format)?;
        if entry.name != spec.name || entry.shape != spec.shape {
            return Err(layout_err(&entry.name, format!("does not match architecture slot `{}`", spec.name)));
        }
        let numel: usize = entry.shape.iter().product();
        let width = format.byte_width();
        if entry.byte_len != numel * width {
            return Err(layout_err(
                &entry.name,
                format!("byte length {} disagrees with shape {:?} x {} bytes", entry.byte_len, entry.shape, width),
            ));
        }
        let end = entry.offset + entry.byte_len;
        if end > blob.len() {
            return Err(layout_err(&entry.name, format!("needs bytes up to {end}, blob has {}", blob.len())));
        }
        let words = blob[entry.offset..end]
            .chunks_exact(width)
            .map(|c| {
                let mut b = [0u8; 4];
                b[..width].copy_from_slice(c);
                u32::from_le_bytes(b)
            })
            .collect();

        let rows = entry.shape.first().copied().unwrap_or(1);
        let scales = match (entry.quantized, entry.scale_offset) {
            (false, None) => Vec::new(),
            (false, Some(_)) => return Err(layout_err(&entry.name, "scales given for an unquantized tensor".into())),
            (true, None) => return Err(layout_err(&entry.name, "quantized tensor without scales".into())),
            (true, Some(at)) => {
                if format != FormatSpec::INT8 || entry.shape.len() < 2 {
                    return Err(layout_err(&entry.name, "only 2D+ int8 tensors may be quantized".into()));
                }
                let end = at + rows * 8;
                if end > blob.len() {
                    return Err(layout_err(&entry.name, format!("scales need bytes up to {end}, blob has {}", blob.len())));
                }
                blob[at..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
        };

        tensors.push(Tensor {
            meta: TensorMeta {
                name: entry.name.clone(),
                layer_index: entry.layer_index,
                param_kind: entry.param_kind.clone(),
                shape: entry.shape.clone(),
                format,
                quantized: entry.quantized,
                scales,
            },
            words,
        });
    }

    if blob.len() != manifest.blob_len {
        return Err(BundleError::Layout {
            tensor: "<blob>".into(),
            reason: format!("blob is {} bytes, manifest says {}", blob.len(), manifest.blob_len),
        });
    }
    let actual = blob_checksum(&blob);
    if actual != manifest.blob_sha256 {
        return Err(BundleError::Checksum { expected: manifest.blob_sha256, actual });
    }
    Ok(ModelBundle::from_tensors(manifest.architecture, tensors))
}
