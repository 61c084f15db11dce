//! Flat binary container for named parameter tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HEGH"  magic
//! u32     format version
//! u64     entry count
//! entry:  u32 name length, UTF-8 name,
//!         u32 rank, u64 extent per axis,
//!         f32 values (extent product of them)
//! ```
//!
//! Values are stored as raw `f32` bits, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HEGH";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 16;
const MAX_NUMEL: u64 = 1 << 31;

pub fn write_checkpoint<W: Write>(w: &mut W, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        if name.len() > MAX_NAME_LEN as usize {
            return Err(Error::Data(format!("parameter name too long ({} bytes)", name.len())));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = read_u64(r)?;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = read_u32(r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Data(format!("entry {i}: name length {name_len} out of range")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Data(format!("entry {i}: name is not valid UTF-8")))?;
        let rank = read_u32(r)?;
        if rank > MAX_RANK {
            return Err(Error::Data(format!("entry '{name}': rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let extent = read_u64(r)?;
            numel = numel
                .checked_mul(extent)
                .filter(|&n| n <= MAX_NUMEL)
                .ok_or_else(|| Error::Data(format!("entry '{name}': element count overflows")))?;
            shape.push(extent as usize);
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Data(format!("entry '{name}': {e}")))?;
        entries.push((name, tensor));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => Ok(entries),
        _ => Err(Error::Data("trailing bytes after the last entry".into())),
    }
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("conv1.weight".into(), Tensor::from_vec(&[2, 1, 1, 2], vec![0.5, -1.25, 3.0e-8, 7.5]).unwrap()),
            ("conv1.bias".into(), Tensor::vector(vec![0.0, -0.0])),
            ("head.weight".into(), Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = sample_entries();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &entries).unwrap();
        let loaded = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(entries.len(), loaded.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (&a, &b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Writing the loaded entries again reproduces the same bytes.
        let mut again = Vec::new();
        write_checkpoint(&mut again, &loaded).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn header_layout_is_stable() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &[("x".into(), Tensor::vector(vec![1.0f32]))]).unwrap();
        assert_eq!(&bytes[0..4], b"HEGH");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1); // name length
        assert_eq!(bytes[20], b'x');
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_checkpoint(&mut &b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample_entries()).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample_entries()).unwrap();
        bytes.push(0);
        let err = read_checkpoint(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.hegh");
        let entries = sample_entries();
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(entries, loaded);
    }
}
