//! Multi-label ground truth as fixed-width bitsets.
//!
//! Every example carries a set of class indices out of a fixed universe of
//! `num_classes`. Two examples count as similar when their sets intersect;
//! single-label data is the special case of one bit per set.

use crate::error::{Error, Result};

/// Number of `u64` words needed for `num_classes` bits.
pub fn label_words(num_classes: usize) -> usize {
    num_classes.div_ceil(64)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSet {
    num_classes: usize,
    words: Vec<u64>,
}

impl LabelSet {
    pub fn empty(num_classes: usize) -> Self {
        LabelSet { num_classes, words: vec![0; label_words(num_classes)] }
    }

    pub fn from_indices(num_classes: usize, indices: &[usize]) -> Result<Self> {
        let mut set = LabelSet::empty(num_classes);
        for &i in indices {
            set.insert(i)?;
        }
        Ok(set)
    }

    /// Rebuilds a set from its raw words, e.g. when reading a code database.
    /// Bits at or above `num_classes` must be clear.
    pub fn from_words(num_classes: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != label_words(num_classes) {
            return Err(Error::Data(format!(
                "label set for {num_classes} classes needs {} words, got {}",
                label_words(num_classes),
                words.len()
            )));
        }
        let spare = words.len() * 64 - num_classes;
        if spare > 0 {
            let mask = !0u64 >> spare;
            if let Some(last) = words.last() {
                if last & !mask != 0 {
                    return Err(Error::Data(format!(
                        "label set has bits above class {num_classes}"
                    )));
                }
            }
        }
        Ok(LabelSet { num_classes, words })
    }

    pub fn insert(&mut self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::Data(format!(
                "class index {class} out of range for {} classes",
                self.num_classes
            )));
        }
        self.words[class / 64] |= 1u64 << (class % 64);
        Ok(())
    }

    pub fn contains(&self, class: usize) -> bool {
        class < self.num_classes && self.words[class / 64] >> (class % 64) & 1 == 1
    }

    /// True when the two sets share at least one class. Sets must come from
    /// the same class universe.
    pub fn intersects(&self, other: &LabelSet) -> bool {
        assert_eq!(
            self.num_classes, other.num_classes,
            "label sets from different class universes"
        );
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Class indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            (0..64).filter(move |b| w >> b & 1 == 1).map(move |b| wi * 64 + b)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_iterate_round_trips() {
        let set = LabelSet::from_indices(100, &[3, 64, 99, 3]).unwrap();
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![3, 64, 99]);
        assert_eq!(set.len(), 3);
        assert!(set.contains(64));
        assert!(!set.contains(4));
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        assert!(LabelSet::from_indices(10, &[10]).is_err());
    }

    #[test]
    fn intersection_requires_a_shared_class() {
        let a = LabelSet::from_indices(10, &[1, 5]).unwrap();
        let b = LabelSet::from_indices(10, &[5, 7]).unwrap();
        let c = LabelSet::from_indices(10, &[0, 9]).unwrap();
        assert!(a.intersects(&b));
        assert!(b.intersects(&a));
        assert!(!a.intersects(&c));
        assert!(!LabelSet::empty(10).intersects(&a));
    }

    #[test]
    fn word_round_trip_validates_width_and_spare_bits() {
        let set = LabelSet::from_indices(70, &[0, 69]).unwrap();
        let back = LabelSet::from_words(70, set.words().to_vec()).unwrap();
        assert_eq!(set, back);
        assert!(LabelSet::from_words(70, vec![0]).is_err());
        assert!(LabelSet::from_words(70, vec![0, 1 << 6]).is_err());
    }
}
