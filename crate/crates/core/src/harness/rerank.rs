//! Re-ranking runs, perturbing their input order and measuring rank changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::formats::{group_run, RunEntry};
use super::train::ModelBundle;
use crate::error::{Error, Result};
use crate::metrics::QrelSet;
use crate::novelty::RankingInstance;

/// Scores are compared at the precision written to run files.
fn quantize(score: f64) -> f64 {
    (score * 1e6).round() / 1e6
}

/// Descending score, then ascending passage id.
pub fn sort_by_score(entries: &mut [(String, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

fn ranked(query_id: &str, mut scored: Vec<(String, f64)>, tag: &str) -> Vec<RunEntry> {
    sort_by_score(&mut scored);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (passage_id, score))| RunEntry {
            query_id: query_id.to_string(),
            passage_id,
            rank: i + 1,
            score,
            tag: tag.to_string(),
        })
        .collect()
}

/// Re-ranks the top `top_k` passages of every query with one forward pass
/// each. Output scores are rounded to 6 decimals before sorting so the run
/// is independent of the candidates' input order.
pub fn rerank(
    bundle: &ModelBundle,
    run: &[RunEntry],
    corpus: &BTreeMap<String, String>,
    queries: &BTreeMap<String, String>,
    top_k: usize,
    tag: &str,
) -> Result<Vec<RunEntry>> {
    if top_k == 0 {
        return Err(Error::Usage("top_k must be positive".into()));
    }
    let grouped = group_run(run);
    let missing: Vec<&str> = grouped
        .values()
        .flat_map(|rows| rows.iter().take(top_k))
        .filter(|e| !corpus.contains_key(&e.passage_id))
        .map(|e| e.passage_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("passages missing from corpus: {}", missing.join(", "))));
    }
    let mut out = Vec::with_capacity(run.len());
    for (qid, rows) in grouped {
        let query = queries
            .get(&qid)
            .ok_or_else(|| Error::Data(format!("query {qid} has no text")))?;
        let top = &rows[..rows.len().min(top_k)];
        let instance = RankingInstance {
            query_id: qid.clone(),
            query: query.clone(),
            passages: top
                .iter()
                .map(|e| (e.passage_id.clone(), corpus[&e.passage_id].clone()))
                .collect(),
            labels: Vec::new(),
            positive_index: None,
            cluster_ids: Vec::new(),
            duplicated_index: None,
        };
        let scores = bundle.score(&instance)?;
        let scored = top
            .iter()
            .zip(scores)
            .map(|(e, s)| (e.passage_id.clone(), quantize(s)))
            .collect();
        out.extend(ranked(&qid, scored, tag));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    Random,
    Ideal,
    ReverseIdeal,
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Ideal => "ideal",
            Self::ReverseIdeal => "reverse_ideal",
        })
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "ideal" => Ok(Self::Ideal),
            "reverse_ideal" | "reverse-ideal" => Ok(Self::ReverseIdeal),
            other => Err(Error::Usage(format!("unknown perturbation {other:?}"))),
        }
    }
}

/// Reorders each query's passages. Unjudged passages count as relevance 0.
/// Scores are rewritten as `n − rank + 1` and the tag gains the mode name.
pub fn perturb(run: &[RunEntry], mode: PerturbMode, qrels: &QrelSet, seed: u64) -> Vec<RunEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(run.len());
    for (qid, mut rows) in group_run(run) {
        match mode {
            PerturbMode::Random => rows.shuffle(&mut rng),
            PerturbMode::Ideal | PerturbMode::ReverseIdeal => {
                rows.sort_by(|a, b| {
                    qrels
                        .relevance(&qid, &b.passage_id)
                        .cmp(&qrels.relevance(&qid, &a.passage_id))
                        .then(a.rank.cmp(&b.rank))
                });
                if mode == PerturbMode::ReverseIdeal {
                    rows.reverse();
                }
            }
        }
        let n = rows.len();
        for (i, e) in rows.into_iter().enumerate() {
            out.push(RunEntry {
                rank: i + 1,
                score: (n - i) as f64,
                tag: format!("{}-{mode}", e.tag),
                ..e
            });
        }
    }
    out
}

/// `matrix[i][j]`: fraction of queries whose passage at input rank `i + 1`
/// is at output rank `j + 1`. Both runs are cut to `depth` first and must
/// then hold the same passages per query.
pub fn rank_change_matrix(before: &[RunEntry], after: &[RunEntry], depth: usize) -> Result<Vec<Vec<f64>>> {
    let b = group_run(before);
    let a = group_run(after);
    if b.keys().ne(a.keys()) {
        return Err(Error::Data("runs cover different queries".into()));
    }
    let mut counts = vec![vec![0usize; depth]; depth];
    for (qid, rows_b) in &b {
        let rows_b = &rows_b[..rows_b.len().min(depth)];
        let rows_a = &a[qid][..a[qid].len().min(depth)];
        let pos_a: BTreeMap<&str, usize> = rows_a
            .iter()
            .enumerate()
            .map(|(j, e)| (e.passage_id.as_str(), j))
            .collect();
        let set_b: BTreeSet<&str> = rows_b.iter().map(|e| e.passage_id.as_str()).collect();
        if set_b.len() != pos_a.len() || set_b.iter().any(|p| !pos_a.contains_key(p)) {
            return Err(Error::Data(format!("query {qid}: passage sets differ")));
        }
        for (i, e) in rows_b.iter().enumerate() {
            counts[i][pos_a[e.passage_id.as_str()]] += 1;
        }
    }
    let nq = b.len().max(1) as f64;
    Ok(counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / nq).collect())
        .collect())
}

/// CSV with a header row and column of 1-based rank indices.
pub fn matrix_csv(matrix: &[Vec<f64>]) -> String {
    let mut s = String::from("rank");
    for j in 0..matrix.len() {
        let _ = write!(s, ",{}", j + 1);
    }
    s.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        let _ = write!(s, "{}", i + 1);
        for v in row {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}
