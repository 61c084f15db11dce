//! JSON manifests for multi-label image collections.
//!
//! A manifest is a JSON array; each element names an image and its class
//! indices:
//!
//! ```json
//! [
//!   {"image": "imgs/beach.rgb", "labels": [2, 5], "width": 16, "height": 16},
//!   {"image": {"base64": "AAAA..."}, "labels": [5], "width": 16, "height": 16}
//! ]
//! ```
//!
//! Image bytes are raw RGB in channel planes (all red bytes, then green,
//! then blue), `3 * width * height` bytes total, either in a file referenced
//! relative to the manifest or embedded as standard base64. The class count
//! is the highest label index in the manifest plus one.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::tensor::Tensor;

/// Where an entry's pixel bytes live.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    /// Path to a raw RGB file, relative to the manifest.
    Path(String),
    /// Base64-encoded raw RGB bytes carried inline.
    Embedded {
        base64: String,
    },
}

/// One manifest element.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: ImageSource,
    pub labels: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

/// Loads a manifest and the images it references.
pub fn load_manifest<P: AsRef<Path>>(path: P) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| crate::data::file_err(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| {
        use serde::de::Error as _;
        Error::Json(serde_json::Error::custom(format!("{}: {e}", path.display())))
    })?;
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "{}: manifest lists no images",
            path.display()
        )));
    }

    let mut num_classes = 0usize;
    for (i, entry) in entries.iter().enumerate() {
        if entry.labels.is_empty() {
            return Err(Error::Data(format!("manifest entry {i} has no labels")));
        }
        for &label in &entry.labels {
            num_classes = num_classes.max(label + 1);
        }
        if (entry.width, entry.height) != (entries[0].width, entries[0].height) {
            return Err(Error::Data(format!(
                "manifest entry {i} is {}x{}, entry 0 is {}x{}; dimensions must match",
                entry.width, entry.height, entries[0].width, entries[0].height
            )));
        }
        if entry.width == 0 || entry.height == 0 {
            return Err(Error::Data(format!(
                "manifest entry {i} declares a zero-sized image"
            )));
        }
    }

    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut dataset = LabeledDataset::new(num_classes)?;
    for (i, entry) in entries.iter().enumerate() {
        let bytes = match &entry.image {
            ImageSource::Path(rel) => {
                let image_path = base_dir.join(rel);
                std::fs::read(&image_path).map_err(|e| crate::data::file_err(&image_path, e))?
            }
            ImageSource::Embedded { base64 } => BASE64.decode(base64).map_err(|e| {
                Error::Data(format!("manifest entry {i}: invalid base64: {e}"))
            })?,
        };
        let expected = 3 * entry.width * entry.height;
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "manifest entry {i}: {} bytes of pixel data, expected {expected} \
                 for 3x{}x{}",
                bytes.len(),
                entry.height,
                entry.width
            )));
        }
        let pixels = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        dataset.push(
            Tensor::from_vec(&[3, entry.height, entry.width], pixels)?,
            LabelSet::from_indices(num_classes, &entry.labels)?,
        )?;
    }
    Ok(dataset)
}

/// Writes a dataset as a self-contained manifest with every image embedded
/// as base64. Pixels are quantized to bytes, so values must already lie in
/// [0, 1]. Because the loader recovers the class count from the labels, the
/// highest class must actually appear in some entry.
pub fn save_manifest<P: AsRef<Path>>(dataset: &LabeledDataset, path: P) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot write a manifest for an empty dataset".into()));
    }
    let top = dataset.num_classes() - 1;
    if !dataset.labels().iter().any(|l| l.contains(top)) {
        return Err(Error::Data(format!(
            "class {top} has no examples; the manifest format recovers the class \
             count from the labels"
        )));
    }
    let (height, width) = dataset.image_hw().expect("non-empty dataset has an image size");

    let mut entries = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let mut bytes = Vec::with_capacity(3 * height * width);
        for &p in dataset.images()[i].data() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Data(format!("image {i} has pixel {p} outside [0, 1]")));
            }
            bytes.push((p * 255.0).round() as u8);
        }
        entries.push(ManifestEntry {
            image: ImageSource::Embedded { base64: BASE64.encode(&bytes) },
            labels: dataset.labels()[i].iter().collect(),
            width,
            height,
        });
    }

    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(path, text).map_err(|e| crate::data::file_err(path, e))
}
