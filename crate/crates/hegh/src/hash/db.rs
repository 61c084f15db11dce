//! The code database: quantized codes with their labels and stable ids,
//! plus its binary file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::code::{code_words, HashCode};
use crate::labels::{label_words, LabelSet};

const MAGIC: &[u8; 8] = b"HEGHCODE";
const VERSION: u32 = 1;

/// Insertion-ordered collection of equal-length codes, one label set and
/// one caller-chosen id per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDatabase {
    bits: usize,
    num_classes: usize,
    ids: Vec<u64>,
    codes: Vec<HashCode>,
    labels: Vec<LabelSet>,
}

impl CodeDatabase {
    pub fn new(bits: usize, num_classes: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::Usage("codes need at least one bit".into()));
        }
        if num_classes == 0 {
            return Err(Error::Usage("databases need at least one class".into()));
        }
        Ok(CodeDatabase {
            bits,
            num_classes,
            ids: Vec::new(),
            codes: Vec::new(),
            labels: Vec::new(),
        })
    }

    pub fn push(&mut self, id: u64, code: HashCode, labels: LabelSet) -> Result<()> {
        if code.bits() != self.bits {
            return Err(Error::Usage(format!(
                "{}-bit code pushed into a {}-bit database",
                code.bits(),
                self.bits
            )));
        }
        if labels.num_classes() != self.num_classes {
            return Err(Error::Usage(format!(
                "labels over {} classes pushed into a {}-class database",
                labels.num_classes(),
                self.num_classes
            )));
        }
        self.ids.push(id);
        self.codes.push(code);
        self.labels.push(labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn codes(&self) -> &[HashCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn entry(&self, i: usize) -> (u64, &HashCode, &LabelSet) {
        (self.ids[i], &self.codes[i], &self.labels[i])
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.bits as u32).to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            w.write_all(&self.ids[i].to_le_bytes())?;
            for word in self.codes[i].words() {
                w.write_all(&word.to_le_bytes())?;
            }
            for word in self.labels[i].words() {
                w.write_all(&word.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a code database file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported code database version {version}")));
        }
        let bits = read_u32(&mut r)? as usize;
        let num_classes = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        let mut db = CodeDatabase::new(bits, num_classes)
            .map_err(|e| Error::Data(format!("invalid header: {e}")))?;
        for _ in 0..count {
            let id = read_u64(&mut r)?;
            let code_buf = read_words(&mut r, code_words(bits))?;
            let label_buf = read_words(&mut r, label_words(num_classes))?;
            db.push(id, HashCode::from_words(bits, code_buf)?, LabelSet::from_words(num_classes, label_buf)?)?;
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Data("trailing bytes after code database entries".into()));
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
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

fn read_words<R: Read>(r: &mut R, n: usize) -> Result<Vec<u64>> {
    (0..n).map(|_| read_u64(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_db() -> CodeDatabase {
        let mut db = CodeDatabase::new(12, 10).unwrap();
        for i in 0..5u64 {
            let values: Vec<f64> = (0..12).map(|j| ((i as f64) - (j as f64)).sin()).collect();
            let code = HashCode::quantize(&values).unwrap();
            let labels = LabelSet::from_indices(10, &[(i % 10) as usize]).unwrap();
            db.push(i * 3, code, labels).unwrap();
        }
        db
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let db = sample_db();
        let mut buf = Vec::new();
        db.write_to(&mut buf).unwrap();
        let back = CodeDatabase::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, db);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn header_layout_is_fixed() {
        let db = sample_db();
        let mut buf = Vec::new();
        db.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"HEGHCODE");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 10);
        assert_eq!(u64::from_le_bytes(buf[20..28].try_into().unwrap()), 5);
        // Entries are id + one code word + one label word, 24 bytes each.
        assert_eq!(buf.len(), 28 + 5 * 24);
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let db = sample_db();
        let mut buf = Vec::new();
        db.write_to(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(CodeDatabase::read_from(bad_magic.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(CodeDatabase::read_from(truncated).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(CodeDatabase::read_from(trailing.as_slice()).is_err());

        // Spare code bits must stay clear: flip bit 13 of entry 0's code.
        let mut dirty = buf;
        dirty[28 + 8 + 1] |= 0b0010_0000;
        assert!(CodeDatabase::read_from(dirty.as_slice()).is_err());
    }

    #[test]
    fn push_validates_widths() {
        let mut db = CodeDatabase::new(12, 10).unwrap();
        let code = HashCode::zero(8);
        let labels = LabelSet::empty(10);
        assert!(db.push(0, code, labels).is_err());
        let code = HashCode::zero(12);
        let labels = LabelSet::empty(4);
        assert!(db.push(0, code, labels).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.heghcode");
        let db = sample_db();
        db.save(&path).unwrap();
        assert_eq!(CodeDatabase::load(&path).unwrap(), db);
    }
}
