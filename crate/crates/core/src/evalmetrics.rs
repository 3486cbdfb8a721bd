//! Retrieval quality: mAP, Hamming-radius precision/recall, top-N precision.
//!
//! A database item is relevant to a query when the two share at least one label.

use std::fmt::Write as _;
use std::path::Path;

use crate::datamodel::LabelMatrix;
use crate::error::{Error, Result};
use crate::retrieval::{hamming, rank_database, PackedCodes};

/// Average precision of a ranked relevance list; 0 when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Config(
            "average precision of an empty ranking".into(),
        ));
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { acc / hits as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MapOptions {
    /// Only the top `N` ranks count; relevant items past the cutoff are ignored.
    pub cutoff: Option<usize>,
    /// Drop queries with no relevant item instead of scoring them 0.
    pub exclude_empty: bool,
}

fn check_inputs(
    queries: &PackedCodes,
    db: &PackedCodes,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
) -> Result<()> {
    if db.is_empty() {
        return Err(Error::Config("database is empty".into()));
    }
    if queries.bits() != db.bits() {
        return Err(Error::shape(
            "eval",
            (queries.len(), queries.bits()),
            (db.len(), db.bits()),
        ));
    }
    if query_labels.n() != queries.len() {
        return Err(Error::shape(
            "eval query labels",
            (queries.len(), 0),
            (query_labels.n(), 0),
        ));
    }
    if db_labels.n() != db.len() {
        return Err(Error::shape(
            "eval db labels",
            (db.len(), 0),
            (db_labels.n(), 0),
        ));
    }
    if query_labels.classes() != db_labels.classes() {
        return Err(Error::shape(
            "eval label classes",
            (0, query_labels.classes()),
            (0, db_labels.classes()),
        ));
    }
    Ok(())
}

fn relevance_row(q: usize, query_labels: &LabelMatrix, db_labels: &LabelMatrix) -> Vec<bool> {
    (0..db_labels.n())
        .map(|j| query_labels.shared(q, db_labels, j) > 0)
        .collect()
}

/// Per-query ranked relevance lists (ascending query index).
pub fn ranked_relevance(
    queries: &PackedCodes,
    db: &PackedCodes,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
) -> Result<Vec<Vec<bool>>> {
    check_inputs(queries, db, query_labels, db_labels)?;
    Ok((0..queries.len())
        .map(|q| {
            let rel = relevance_row(q, query_labels, db_labels);
            rank_database(db, queries.row(q))
                .iter()
                .map(|nb| rel[nb.index])
                .collect()
        })
        .collect())
}

/// Mean of per-query average precision from precomputed ranked relevance.
pub fn map_from_rankings(rankings: &[Vec<bool>], opts: MapOptions) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for ranked in rankings {
        let cut = match opts.cutoff {
            Some(0) => return Err(Error::Config("map cutoff must be positive".into())),
            Some(n) => &ranked[..n.min(ranked.len())],
            None => &ranked[..],
        };
        if opts.exclude_empty && !ranked.iter().any(|&r| r) {
            continue;
        }
        total += average_precision(cut)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Data("no query left to score".into()));
    }
    Ok(total / counted as f64)
}

pub fn mean_average_precision(
    queries: &PackedCodes,
    db: &PackedCodes,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
    opts: MapOptions,
) -> Result<f64> {
    map_from_rankings(
        &ranked_relevance(queries, db, query_labels, db_labels)?,
        opts,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    PrecisionRecall,
    TopN,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSeries {
    kind: CurveKind,
    points: Vec<(f64, f64)>,
}

impl CurveSeries {
    pub fn new(kind: CurveKind, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Data("curve x values must strictly increase".into()));
        }
        if points.iter().any(|&(_, y)| !(0.0..=1.0).contains(&y)) {
            return Err(Error::Data("curve y values must lie in [0, 1]".into()));
        }
        Ok(CurveSeries { kind, points })
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// CSV text: `recall,precision` or `n,precision`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match self.kind {
            CurveKind::PrecisionRecall => {
                s.push_str("recall,precision\n");
                for &(x, y) in &self.points {
                    writeln!(s, "{x:.6},{y:.6}").unwrap();
                }
            }
            CurveKind::TopN => {
                s.push_str("n,precision\n");
                for &(x, y) in &self.points {
                    writeln!(s, "{},{y:.6}", x as usize).unwrap();
                }
            }
        }
        s
    }
}

/// `(recall, precision)` of `{d : dist ≤ ρ}` for each ρ = 0..=r, averaged over
/// queries. An empty retrieved set has precision 1; a query without relevant
/// items has recall 1.
pub fn pr_by_radius(
    queries: &PackedCodes,
    db: &PackedCodes,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
) -> Result<Vec<(f64, f64)>> {
    check_inputs(queries, db, query_labels, db_labels)?;
    let r = db.bits();
    let mut precision = vec![0.0; r + 1];
    let mut recall = vec![0.0; r + 1];
    for q in 0..queries.len() {
        let rel = relevance_row(q, query_labels, db_labels);
        let mut hist_all = vec![0usize; r + 1];
        let mut hist_rel = vec![0usize; r + 1];
        for (j, &hit) in rel.iter().enumerate() {
            let d = hamming(db.row(j), queries.row(q)) as usize;
            hist_all[d] += 1;
            hist_rel[d] += hit as usize;
        }
        let total_rel: usize = hist_rel.iter().sum();
        let (mut got, mut got_rel) = (0usize, 0usize);
        for rho in 0..=r {
            got += hist_all[rho];
            got_rel += hist_rel[rho];
            precision[rho] += if got == 0 {
                1.0
            } else {
                got_rel as f64 / got as f64
            };
            recall[rho] += if total_rel == 0 {
                1.0
            } else {
                got_rel as f64 / total_rel as f64
            };
        }
    }
    let nq = queries.len().max(1) as f64;
    Ok((0..=r)
        .map(|rho| (recall[rho] / nq, (precision[rho] / nq).min(1.0)))
        .collect())
}

/// [`pr_by_radius`] with points sharing a recall merged to their highest
/// precision.
pub fn pr_curve(
    queries: &PackedCodes,
    db: &PackedCodes,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
) -> Result<CurveSeries> {
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (x, y) in pr_by_radius(queries, db, query_labels, db_labels)? {
        match points.last_mut() {
            Some(last) if last.0 == x => last.1 = last.1.max(y),
            _ => points.push((x, y)),
        }
    }
    CurveSeries::new(CurveKind::PrecisionRecall, points)
}

/// Mean fraction of relevant items among the first `N` ranks, per `N`.
pub fn topn_precision(
    queries: &PackedCodes,
    db: &PackedCodes,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
    ns: &[usize],
) -> Result<CurveSeries> {
    check_inputs(queries, db, query_labels, db_labels)?;
    if ns.iter().any(|&n| n == 0 || n > db.len()) {
        return Err(Error::Config(format!(
            "top-N grid must lie in 1..={}",
            db.len()
        )));
    }
    if ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "top-N grid must be strictly increasing".into(),
        ));
    }
    let rankings = ranked_relevance(queries, db, query_labels, db_labels)?;
    topn_from_rankings(&rankings, ns)
}

pub fn topn_from_rankings(rankings: &[Vec<bool>], ns: &[usize]) -> Result<CurveSeries> {
    let nq = rankings.len().max(1) as f64;
    let points = ns
        .iter()
        .map(|&n| {
            let sum: f64 = rankings
                .iter()
                .map(|ranked| ranked[..n].iter().filter(|&&r| r).count() as f64 / n as f64)
                .sum();
            (n as f64, sum / nq)
        })
        .collect();
    CurveSeries::new(CurveKind::TopN, points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapRow {
    pub task: String,
    pub bits: usize,
    pub map: f64,
}

pub fn map_table_csv(rows: &[MapRow]) -> String {
    let mut s = String::from("task,bits,map\n");
    for row in rows {
        writeln!(s, "{},{},{:.6}", row.task, row.bits, row.map).unwrap();
    }
    s
}

pub fn emit_csv(text: &str, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
