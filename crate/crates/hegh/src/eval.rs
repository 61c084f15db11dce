//! Retrieval-quality metrics over a query set and a code database.
//!
//! Relevance is label overlap: a retrieved entry counts as relevant to a
//! query when the two share at least one class. Three metrics are
//! reported: mean average precision over the full ranking, precision at
//! fixed cutoffs, and precision within a Hamming radius.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{CodeDatabase, Index};
use crate::parallel;

/// Average precision of one full-database ranking.
///
/// `relevance` flags each ranked result in order; `relevant_count` is the
/// number of relevant items in the database, which must equal the number
/// of flags set. The score averages `i / position(i)` over the relevant
/// items, where `position(i)` is the 1-based rank of the i-th one.
pub fn average_precision(relevance: &[bool], relevant_count: usize) -> Result<f64> {
    if relevant_count == 0 {
        return Err(Error::Usage(
            "average precision is undefined with no relevant items".into(),
        ));
    }
    let found = relevance.iter().filter(|&&r| r).count();
    if found != relevant_count {
        return Err(Error::Usage(format!(
            "ranking contains {found} relevant items, expected {relevant_count}"
        )));
    }
    let mut sum = 0.0;
    let mut seen = 0usize;
    for (pos0, &rel) in relevance.iter().enumerate() {
        if rel {
            seen += 1;
            sum += seen as f64 / (pos0 + 1) as f64;
        }
    }
    Ok(sum / relevant_count as f64)
}

/// What [`evaluate`] computes besides the mean average precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cutoffs for precision@k, each at least 1.
    pub precision_ks: Vec<usize>,
    /// Hamming radius for the within-radius precision.
    pub radius: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { precision_ks: Vec::new(), radius: 2 }
    }
}

/// All metrics of one evaluation run.
///
/// `per_query_ap` is aligned with the query set; queries with no relevant
/// database entry carry `None` and are excluded from `map`'s mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub precision_at_k: Vec<(usize, f64)>,
    pub p_at_h: f64,
    pub radius: u32,
    pub per_query_ap: Vec<Option<f64>>,
    pub queries: usize,
    pub database_size: usize,
    pub hash_bits: usize,
}

impl EvalReport {
    /// JSON with every metric rounded to 6 significant digits, so equal
    /// inputs always produce byte-identical output.
    pub fn to_json_string(&self) -> Result<String> {
        let mut rounded = self.clone();
        rounded.map = round_sig6(rounded.map);
        rounded.p_at_h = round_sig6(rounded.p_at_h);
        for (_, v) in &mut rounded.precision_at_k {
            *v = round_sig6(*v);
        }
        for ap in rounded.per_query_ap.iter_mut().flatten() {
            *ap = round_sig6(*ap);
        }
        Ok(serde_json::to_string_pretty(&rounded)?)
    }

    /// The precision@k curve as CSV, one `k,precision` row per cutoff.
    pub fn precision_csv(&self) -> String {
        let mut out = String::from("k,precision\n");
        for &(k, v) in &self.precision_at_k {
            out.push_str(&format!("{k},{}\n", round_sig6(v)));
        }
        out
    }
}

/// Radius-precision against code length across several runs, as CSV.
pub fn radius_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("bits,p_at_h\n");
    for report in reports {
        out.push_str(&format!("{},{}\n", report.hash_bits, round_sig6(report.p_at_h)));
    }
    out
}

/// Rounds to 6 significant digits. Report values pass through this before
/// serialization so equal inputs always print identically.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("scientific notation round trip")
}

struct QueryOutcome {
    ap: Option<f64>,
    hits_at_k: Vec<usize>,
    radius_precision: f64,
}

/// Ranks the database for every query and reads all metrics off the
/// rankings in one pass. Queries run in parallel; results are merged in
/// query order.
pub fn evaluate(queries: &CodeDatabase, index: &Index, cfg: &EvalConfig) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Usage("evaluation needs at least one query".into()));
    }
    let db = index.database();
    if queries.bits() != db.bits() {
        return Err(Error::Usage(format!(
            "{}-bit queries against a {}-bit database",
            queries.bits(),
            db.bits()
        )));
    }
    if queries.num_classes() != db.num_classes() {
        return Err(Error::Usage(format!(
            "queries labeled over {} classes, database over {}",
            queries.num_classes(),
            db.num_classes()
        )));
    }
    if let Some(&k) = cfg.precision_ks.iter().find(|&&k| k == 0) {
        return Err(Error::Usage(format!("precision cutoff must be at least 1, got {k}")));
    }
    if cfg.radius as usize > db.bits() {
        return Err(Error::Usage(format!(
            "radius {} exceeds the code length {}",
            cfg.radius,
            db.bits()
        )));
    }

    let outcomes: Vec<Result<QueryOutcome>> = parallel::map_indices(queries.len(), |qi| {
        let (_, code, labels) = queries.entry(qi);
        let ranking = index.ranked_rows(code)?;
        let relevance: Vec<bool> =
            ranking.iter().map(|&(row, _)| labels.intersects(&db.labels()[row])).collect();
        let relevant_count = relevance.iter().filter(|&&r| r).count();

        let ap = if relevant_count == 0 {
            None
        } else {
            Some(average_precision(&relevance, relevant_count)?)
        };

        let mut hits_at_k = Vec::with_capacity(cfg.precision_ks.len());
        for &k in &cfg.precision_ks {
            hits_at_k.push(relevance.iter().take(k).filter(|&&r| r).count());
        }

        let within = ranking.iter().take_while(|&&(_, d)| d <= cfg.radius).count();
        let radius_precision = if within == 0 {
            0.0
        } else {
            relevance[..within].iter().filter(|&&r| r).count() as f64 / within as f64
        };

        Ok(QueryOutcome { ap, hits_at_k, radius_precision })
    });

    let mut per_query_ap = Vec::with_capacity(queries.len());
    let mut k_totals = vec![0usize; cfg.precision_ks.len()];
    let mut radius_total = 0.0;
    for outcome in outcomes {
        let outcome = outcome?;
        per_query_ap.push(outcome.ap);
        for (total, hits) in k_totals.iter_mut().zip(&outcome.hits_at_k) {
            *total += hits;
        }
        radius_total += outcome.radius_precision;
    }

    let scored: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Data(
            "no query has a relevant database entry; mean average precision is undefined".into(),
        ));
    }
    let map = scored.iter().sum::<f64>() / scored.len() as f64;
    let q = queries.len() as f64;
    let precision_at_k = cfg
        .precision_ks
        .iter()
        .zip(&k_totals)
        .map(|(&k, &total)| (k, total as f64 / (k as f64 * q)))
        .collect();

    Ok(EvalReport {
        map,
        precision_at_k,
        p_at_h: radius_total / q,
        radius: cfg.radius,
        per_query_ap,
        queries: queries.len(),
        database_size: db.len(),
        hash_bits: db.bits(),
    })
}
