//! Single-file tensor container: an 8-byte magic, a length-prefixed TOML
//! manifest (format version, configs, tensor directory with byte offsets),
//! then raw little-endian f32 blobs in directory order.

use std::io::{Read, Write};
use std::path::Path;

use super::{DiscriminatorConfig, GeneratorConfig};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"F2FCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// "training-checkpoint" or "feature-extractor".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step_gen: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step_disc: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new(kind: &str) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            epoch: None,
            adam_step_gen: None,
            adam_step_disc: None,
            generator: None,
            discriminator: None,
            tensors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: u64,
}

/// Writes the container; tensor directory order is the given order.
pub fn write_tensors(
    path: &Path,
    mut manifest: Manifest,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    manifest.tensors.clear();
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let toml = toml::to_string(&manifest)
        .map_err(|e| Error::Data(format!("serializing manifest: {e}")))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(toml.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(toml.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(path, e))
}

/// Reads the container back; every tensor is materialized and shape-checked
/// against its directory entry.
pub fn read_tensors(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let toml_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + toml_len {
        return Err(Error::Data(format!(
            "{}: truncated manifest",
            path.display()
        )));
    }
    let manifest: Manifest = toml::from_str(
        std::str::from_utf8(&bytes[16..16 + toml_len])
            .map_err(|e| Error::Data(format!("{}: manifest not utf-8: {e}", path.display())))?,
    )
    .map_err(|e| Error::Data(format!("{}: manifest parse error: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            manifest.format_version
        )));
    }
    let blob = &bytes[16 + toml_len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Data(format!(
                "{}: tensor {} extends past end of file",
                path.display(),
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)));
    }
    Ok((manifest, tensors))
}
