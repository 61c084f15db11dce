//! CIFAR-10 binary batches: 3073-byte records of one label byte followed
//! by a 32x32 image as three channel planes (red, green, blue) of 1024
//! bytes each.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::tensor::Tensor;

/// Edge length of a CIFAR-10 image.
pub const CIFAR_EDGE: usize = 32;

/// Number of CIFAR-10 classes.
pub const CIFAR_CLASSES: usize = 10;

const PLANE: usize = CIFAR_EDGE * CIFAR_EDGE;
const RECORD: usize = 1 + 3 * PLANE;

/// Reads CIFAR-10 binary batch files, in order, into one dataset. Pixel
/// bytes map to reals as `byte / 255`; each record's label byte becomes a
/// one-element label set. A record cut short is reported with the byte
/// offset where it started.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut dataset = LabeledDataset::new(CIFAR_CLASSES)?;
    for path in paths {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| crate::data::file_err(path, e))?;
        let mut reader = BufReader::new(file);
        let mut buf = [0u8; RECORD];
        let mut offset = 0u64;
        loop {
            let mut filled = 0;
            while filled < RECORD {
                let n = reader
                    .read(&mut buf[filled..])
                    .map_err(|e| crate::data::file_err(path, e))?;
                if n == 0 {
                    break;
                }
                filled += n;
            }
            if filled == 0 {
                break;
            }
            if filled < RECORD {
                return Err(Error::Data(format!(
                    "{}: truncated record at offset {offset} ({filled} of {RECORD} bytes)",
                    path.display()
                )));
            }
            let label = buf[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Data(format!(
                    "{}: label byte {label} at offset {offset} is not a CIFAR-10 class",
                    path.display()
                )));
            }
            let pixels = buf[1..]
                .iter()
                .map(|&b| f32::from(b) / 255.0)
                .collect::<Vec<f32>>();
            dataset.push(
                Tensor::from_vec(&[3, CIFAR_EDGE, CIFAR_EDGE], pixels)?,
                LabelSet::from_indices(CIFAR_CLASSES, &[label])?,
            )?;
            offset += RECORD as u64;
        }
    }
    Ok(dataset)
}

/// Writes a dataset back out in the CIFAR-10 binary layout. Only datasets
/// of 32x32 images with 10 classes and single labels qualify; pixel reals
/// are scaled by 255 and rounded to the nearest byte, which inverts the
/// loader exactly.
pub fn save_cifar10_bin<P: AsRef<Path>>(dataset: &LabeledDataset, path: P) -> Result<()> {
    if dataset.num_classes() != CIFAR_CLASSES {
        return Err(Error::Usage(format!(
            "CIFAR-10 files hold {CIFAR_CLASSES} classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    if let Some(hw) = dataset.image_hw() {
        if hw != (CIFAR_EDGE, CIFAR_EDGE) {
            return Err(Error::Usage(format!(
                "CIFAR-10 images are {CIFAR_EDGE}x{CIFAR_EDGE}, dataset has {}x{}",
                hw.0, hw.1
            )));
        }
    }
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| crate::data::file_err(path, e))?;
    let mut writer = BufWriter::new(file);
    for i in 0..dataset.len() {
        let labels = &dataset.labels()[i];
        if labels.len() != 1 {
            return Err(Error::Usage(format!(
                "image {i} has {} labels; CIFAR-10 records hold exactly one",
                labels.len()
            )));
        }
        let label = labels.iter().next().unwrap() as u8;
        let mut record = Vec::with_capacity(RECORD);
        record.push(label);
        for &p in dataset.images()[i].data() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Data(format!(
                    "image {i} has pixel {p} outside [0, 1]"
                )));
            }
            record.push((p * 255.0).round() as u8);
        }
        writer
            .write_all(&record)
            .map_err(|e| crate::data::file_err(path, e))?;
    }
    writer
        .flush()
        .map_err(|e| crate::data::file_err(path, e))
}
