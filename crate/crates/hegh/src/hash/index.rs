//! Exact Hamming-distance retrieval over a code database.
//!
//! The contract is a linear scan with word-parallel popcount; results are
//! sorted by distance, then by id, so repeated runs and reordered scans
//! always agree.

use crate::error::{Error, Result};
use crate::hash::code::HashCode;
use crate::hash::db::CodeDatabase;

/// Immutable view over a database supporting ranked and radius queries.
/// Queries take `&self` and are safe to run from many threads at once.
#[derive(Debug, Clone, Copy)]
pub struct Index<'a> {
    db: &'a CodeDatabase,
}

impl<'a> Index<'a> {
    pub fn build(db: &'a CodeDatabase) -> Result<Self> {
        if db.is_empty() {
            return Err(Error::Usage("cannot index an empty code database".into()));
        }
        Ok(Index { db })
    }

    pub fn database(&self) -> &'a CodeDatabase {
        self.db
    }

    fn check_query(&self, query: &HashCode) -> Result<()> {
        if query.bits() != self.db.bits() {
            return Err(Error::Usage(format!(
                "{}-bit query against a {}-bit database",
                query.bits(),
                self.db.bits()
            )));
        }
        Ok(())
    }

    /// Every entry as (row, id, distance), sorted ascending by distance
    /// with ties broken by ascending id, then insertion order.
    fn scan(&self, query: &HashCode) -> Vec<(usize, u64, u32)> {
        let mut hits: Vec<(usize, u64, u32)> = self
            .db
            .ids()
            .iter()
            .zip(self.db.codes())
            .enumerate()
            .map(|(row, (&id, code))| {
                let d = query.hamming_distance(code).expect("widths checked at query entry");
                (row, id, d)
            })
            .collect();
        hits.sort_unstable_by_key(|&(row, id, d)| (d, id, row));
        hits
    }

    /// The `topk` nearest entries (fewer when the database is smaller).
    pub fn topk(&self, query: &HashCode, topk: usize) -> Result<Vec<(u64, u32)>> {
        if topk == 0 {
            return Err(Error::Usage("topk must be at least 1".into()));
        }
        self.check_query(query)?;
        let mut hits = self.scan(query);
        hits.truncate(topk);
        Ok(hits.into_iter().map(|(_, id, d)| (id, d)).collect())
    }

    /// All entries within Hamming distance `radius`, same order as `topk`.
    pub fn radius(&self, query: &HashCode, radius: u32) -> Result<Vec<(u64, u32)>> {
        if radius as usize > self.db.bits() {
            return Err(Error::Usage(format!(
                "radius {radius} exceeds the code length {}",
                self.db.bits()
            )));
        }
        self.check_query(query)?;
        let mut hits = self.scan(query);
        hits.retain(|&(_, _, d)| d <= radius);
        Ok(hits.into_iter().map(|(_, id, d)| (id, d)).collect())
    }

    /// The full ranking: every entry ordered by (distance, id).
    pub fn ranking(&self, query: &HashCode) -> Result<Vec<(u64, u32)>> {
        self.check_query(query)?;
        Ok(self.scan(query).into_iter().map(|(_, id, d)| (id, d)).collect())
    }

    /// The full ranking as database row positions instead of ids, for
    /// callers that need each hit's labels.
    pub fn ranked_rows(&self, query: &HashCode) -> Result<Vec<(usize, u32)>> {
        self.check_query(query)?;
        Ok(self.scan(query).into_iter().map(|(row, _, d)| (row, d)).collect())
    }
}
