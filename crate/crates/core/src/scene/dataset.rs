//! On-disk dataset layout:
//!
//! ```text
//! manifest.json
//! images/NNNNNN.png      8-bit RGB
//! instances/NNNNNN_k.png single-channel, 0 or 255
//! masks/NNNNNN.png       intent field, 0 / 128 / 255
//! ```
//!
//! Every file listed in the manifest carries a SHA-256 checksum.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::{LabeledScene, SampleMode};
use super::palette::{texture_kind, BACKGROUND_PALETTE, OBJECT_PALETTE, TEXTURE_COUNT};
use super::{Instance, SceneSample, ShapeKind};
use crate::error::{Error, Result};
use crate::wire;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileRef {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceEntry {
    shape: ShapeKind,
    color_index: usize,
    mask: FileRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleEntry {
    id: usize,
    seed: u64,
    mode: SampleMode,
    image: FileRef,
    intent: FileRef,
    texture: usize,
    background_colors: [usize; 2],
    #[serde(default)]
    removal_targets: Vec<usize>,
    instances: Vec<InstanceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    image_size: usize,
    object_palette: Vec<[f32; 3]>,
    background_palette: Vec<[f32; 3]>,
    samples: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub samples: Vec<LabeledScene>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put(root: &Path, rel: String, bytes: &[u8]) -> Result<FileRef> {
    fs::write(root.join(&rel), bytes)?;
    Ok(FileRef {
        path: rel,
        sha256: sha256_hex(bytes),
    })
}

pub fn write_dataset(path: &Path, samples: &[LabeledScene]) -> Result<()> {
    let image_size = samples.first().map_or(0, |s| s.scene.size());
    if let Some(bad) = samples.iter().find(|s| s.scene.size() != image_size) {
        return Err(Error::Dataset(format!(
            "sample {} has size {} but the dataset uses {image_size}",
            bad.id,
            bad.scene.size()
        )));
    }
    for dir in ["images", "instances", "masks"] {
        fs::create_dir_all(path.join(dir))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let stem = format!("{:06}", s.id);
        let image = put(path, format!("images/{stem}.png"), &wire::encode_rgb(&s.scene.image)?)?;
        let intent = put(path, format!("masks/{stem}.png"), &wire::encode_intent(&s.intent)?)?;
        let instances = s
            .scene
            .instances
            .iter()
            .enumerate()
            .map(|(k, inst)| {
                Ok(InstanceEntry {
                    shape: inst.shape,
                    color_index: inst.color_index,
                    mask: put(path, format!("instances/{stem}_{k}.png"), &wire::encode_binary(&inst.mask)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = SampleEntry {
            id: s.id,
            seed: s.seed,
            mode: s.mode,
            image,
            intent,
            texture: s.scene.texture,
            background_colors: s.scene.background_colors,
            removal_targets: s.removal_targets.clone(),
            instances,
        };
        entries.push(serde_json::to_value(entry).map_err(|e| Error::Dataset(e.to_string()))?);
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        image_size,
        object_palette: OBJECT_PALETTE.to_vec(),
        background_palette: BACKGROUND_PALETTE.to_vec(),
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(path.join("manifest.json"), text)?;
    Ok(())
}

fn fetch(root: &Path, entry: usize, file: &FileRef) -> Result<Vec<u8>> {
    let ctx = |msg: String| Error::Dataset(format!("manifest entry {entry} ({}): {msg}", file.path));
    if file.path.contains("..") || Path::new(&file.path).is_absolute() {
        return Err(ctx("path escapes the dataset directory".into()));
    }
    let bytes = fs::read(root.join(&file.path)).map_err(|e| ctx(e.to_string()))?;
    let actual = sha256_hex(&bytes);
    if actual != file.sha256 {
        return Err(ctx(format!("checksum mismatch: manifest {}, file {actual}", file.sha256)));
    }
    Ok(bytes)
}

fn load_entry(root: &Path, index: usize, value: serde_json::Value, size: usize) -> Result<LabeledScene> {
    let ctx = |msg: String| Error::Dataset(format!("manifest entry {index}: {msg}"));
    let e: SampleEntry = serde_json::from_value(value).map_err(|err| ctx(err.to_string()))?;
    if e.texture >= TEXTURE_COUNT {
        return Err(ctx(format!("texture {} out of range", e.texture)));
    }
    if e.background_colors.iter().any(|&c| c >= BACKGROUND_PALETTE.len()) {
        return Err(ctx("background colour index out of range".into()));
    }
    let with_entry = |err: Error| ctx(err.to_string());
    let image = wire::decode_rgb(&fetch(root, index, &e.image)?).map_err(with_entry)?;
    let intent = wire::decode_intent(&fetch(root, index, &e.intent)?).map_err(with_entry)?;
    if image.height() != size || image.width() != size || intent.height() != size || intent.width() != size {
        return Err(ctx(format!("files do not match image_size {size}")));
    }
    let mut instances = Vec::with_capacity(e.instances.len());
    for inst in &e.instances {
        if inst.color_index >= OBJECT_PALETTE.len() {
            return Err(ctx(format!("object colour index {} out of range", inst.color_index)));
        }
        let mask = wire::decode_binary(&fetch(root, index, &inst.mask)?).map_err(with_entry)?;
        if mask.height() != size || mask.width() != size {
            return Err(ctx(format!("{} does not match image_size {size}", inst.mask.path)));
        }
        instances.push(Instance {
            mask,
            shape: inst.shape,
            color_index: inst.color_index,
        });
    }
    if let Some(&t) = e.removal_targets.iter().find(|&&t| t >= instances.len()) {
        return Err(ctx(format!("removal target {t} has no instance")));
    }
    Ok(LabeledScene {
        id: e.id,
        seed: e.seed,
        scene: SceneSample {
            image,
            instances,
            background_kind: texture_kind(e.texture),
            texture: e.texture,
            background_colors: e.background_colors,
        },
        intent,
        mode: e.mode,
        removal_targets: e.removal_targets,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path.join("manifest.json"))
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.join("manifest.json").display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("malformed manifest: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "format_version {} is not supported (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.object_palette != OBJECT_PALETTE || manifest.background_palette != BACKGROUND_PALETTE {
        return Err(Error::Dataset("manifest palettes differ from this build's palettes".into()));
    }
    let samples = manifest
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, v)| load_entry(path, i, v, manifest.image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_size: manifest.image_size,
        samples,
    })
}
