//! CMC and mAP under the single-query protocol with Market-1501 junk filtering.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::exec;
use crate::retrieval::{distance_matrix, rank, Descriptor};

/// Validity of each gallery item for `query`. An item is junk when it shows
/// the query's identity under the query's camera, or carries a distractor id
/// (negative person id).
pub fn junk_mask(query: &Descriptor, gallery: &[Descriptor]) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| {
            let same_view = g.person_id == query.person_id && g.camera_id == query.camera_id;
            !(same_view || g.person_id < 0)
        })
        .collect()
}

/// Mean over relevant positions of precision at that position.
/// `None` when nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// 0-based position of the first relevant item.
pub fn first_hit(ranked_relevance: &[bool]) -> Option<usize> {
    ranked_relevance.iter().position(|&r| r)
}

/// `cmc[k]` is the fraction of queries (with at least one relevant item)
/// whose first hit is at rank `<= k + 1`.
pub fn cmc_curve(ranked_relevance: &[Vec<bool>], k: usize) -> Vec<f64> {
    let firsts: Vec<usize> = ranked_relevance.iter().filter_map(|r| first_hit(r)).collect();
    cmc_from_first_hits(&firsts, k)
}

fn cmc_from_first_hits(firsts: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &f in firsts {
        if f < k {
            counts[f] += 1;
        }
    }
    let total = firsts.len().max(1) as f64;
    let mut acc = 0usize;
    counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / total
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    /// `None` for queries without any valid relevant gallery item.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_valid_queries: usize,
    /// Whether any two valid gallery items tied in distance for some query.
    pub had_ties: bool,
}

impl EvalReport {
    pub fn rank_k(&self, k: usize) -> Option<f64> {
        self.cmc.get(k.checked_sub(1)?).copied()
    }

    /// `map=...`, `cmc_K=...` for K in {1, 5, 10} within the curve, then counts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "map={:.6}", self.map).unwrap();
        for k in [1, 5, 10] {
            if let Some(v) = self.rank_k(k) {
                writeln!(s, "cmc_{k}={v:.6}").unwrap();
            }
        }
        writeln!(s, "valid_queries={}", self.num_valid_queries).unwrap();
        writeln!(s, "distance_ties={}", u8::from(self.had_ties)).unwrap();
        s
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,rate\n");
        for (i, v) in self.cmc.iter().enumerate() {
            writeln!(s, "{},{v:.6}", i + 1).unwrap();
        }
        s
    }
}

struct QueryOutcome {
    ap: Option<f64>,
    first: Option<usize>,
    ties: bool,
}

/// Ranks the gallery for every query and scores the result.
pub fn evaluate(queries: &[Descriptor], gallery: &[Descriptor], k: usize) -> Result<EvalReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Data("evaluation needs non-empty query and gallery sets".into()));
    }
    if k == 0 {
        return Err(Error::invalid("top-k must be at least 1"));
    }
    let dist = distance_matrix(queries, gallery)?;
    let g = gallery.len();
    let outcomes = exec::map_indexed(queries.len(), |qi| -> Result<QueryOutcome> {
        let q = &queries[qi];
        let row = &dist.data()[qi * g..(qi + 1) * g];
        let mask = junk_mask(q, gallery);
        if !mask.iter().any(|&v| v) {
            return Ok(QueryOutcome {
                ap: None,
                first: None,
                ties: false,
            });
        }
        let order = rank(row, &mask)?;
        let relevance: Vec<bool> = order
            .iter()
            .map(|&i| q.person_id >= 0 && gallery[i].person_id == q.person_id)
            .collect();
        let ties = order.windows(2).any(|w| row[w[0]] == row[w[1]]);
        Ok(QueryOutcome {
            ap: average_precision(&relevance),
            first: first_hit(&relevance),
            ties,
        })
    });
    let outcomes: Vec<QueryOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let aps: Vec<f64> = outcomes.iter().filter_map(|o| o.ap).collect();
    if aps.is_empty() {
        return Err(Error::Data(
            "no query has a valid cross-camera match in the gallery".into(),
        ));
    }
    let firsts: Vec<usize> = outcomes.iter().filter_map(|o| o.first).collect();
    Ok(EvalReport {
        cmc: cmc_from_first_hits(&firsts, k),
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_query_ap: outcomes.iter().map(|o| o.ap).collect(),
        num_valid_queries: aps.len(),
        had_ties: outcomes.iter().any(|o| o.ties),
    })
}
