//! TREC run and qrels files, corpus and query files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Error, Result};
use crate::metrics::QrelSet;

/// One row of a TREC run: `query_id Q0 passage_id rank score tag`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub passage_id: String,
    /// 1-based.
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Parses a whitespace-separated six-column run file.
pub fn parse_run(text: &str) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_err(
                n + 1,
                format!("run lines have 6 columns, found {}", cols.len()),
            ));
        }
        let rank = cols[3]
            .parse()
            .map_err(|_| parse_err(n + 1, format!("bad rank {:?}", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| parse_err(n + 1, format!("bad score {:?}", cols[4])))?;
        out.push(RunEntry {
            query_id: cols[0].to_string(),
            passage_id: cols[2].to_string(),
            rank,
            score,
            tag: cols[5].to_string(),
        });
    }
    Ok(out)
}

/// Canonical form: sorted by query id then rank, score with 6 decimals.
pub fn write_run(entries: &[RunEntry]) -> String {
    let mut sorted: Vec<&RunEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id).then(a.rank.cmp(&b.rank)));
    let mut s = String::new();
    for e in sorted {
        let _ = writeln!(
            s,
            "{} Q0 {} {} {:.6} {}",
            e.query_id, e.passage_id, e.rank, e.score, e.tag
        );
    }
    s
}

/// Groups a run by query, each group ordered by rank.
pub fn group_run(entries: &[RunEntry]) -> BTreeMap<String, Vec<RunEntry>> {
    let mut map: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
    for e in entries {
        map.entry(e.query_id.clone()).or_default().push(e.clone());
    }
    for v in map.values_mut() {
        v.sort_by_key(|e| e.rank);
    }
    map
}

/// Query id → passage ids in rank order.
pub fn rankings(entries: &[RunEntry]) -> BTreeMap<String, Vec<String>> {
    group_run(entries)
        .into_iter()
        .map(|(q, v)| (q, v.into_iter().map(|e| e.passage_id).collect()))
        .collect()
}

/// Checks that ranks run 1..=n per query and scores never increase with rank.
pub fn validate_run(entries: &[RunEntry]) -> Result<()> {
    for (q, rows) in group_run(entries) {
        for (i, e) in rows.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::Data(format!("query {q}: ranks are not contiguous from 1")));
            }
            if i > 0 && e.score > rows[i - 1].score {
                return Err(Error::Data(format!(
                    "query {q}: score increases at rank {}",
                    e.rank
                )));
            }
        }
    }
    Ok(())
}

/// Parses `query_id 0 passage_id relevance` lines.
pub fn parse_qrels(text: &str) -> Result<QrelSet> {
    let mut q = QrelSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(parse_err(n + 1, "qrels lines have 4 columns"));
        }
        let rel: i64 = cols[3]
            .parse()
            .map_err(|_| parse_err(n + 1, format!("bad relevance {:?}", cols[3])))?;
        q.insert(cols[0], cols[2], rel.max(0) as u32);
    }
    Ok(q)
}

pub fn write_qrels(qrels: &QrelSet) -> String {
    let mut s = String::new();
    for (q, p, r) in qrels.iter() {
        let _ = writeln!(s, "{q} 0 {p} {r}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// One JSON object `{"id": ..., "text": ...}` per line.
pub fn parse_corpus(text: &str) -> Result<Vec<Document>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| parse_err(n + 1, e.to_string())))
        .collect()
}

pub fn write_corpus(docs: &[Document]) -> Result<String> {
    let mut s = String::new();
    for d in docs {
        s.push_str(&serde_json::to_string(d)?);
        s.push('\n');
    }
    Ok(s)
}

/// `id<TAB>text` lines.
pub fn parse_queries(text: &str) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(n + 1, "expected id<TAB>text"))?;
        out.push(Document {
            id: id.to_string(),
            text: t.to_string(),
        });
    }
    Ok(out)
}

pub fn write_queries(queries: &[Document]) -> String {
    let mut s = String::new();
    for q in queries {
        let _ = writeln!(s, "{}\t{}", q.id, q.text);
    }
    s
}

/// Id → text lookup.
pub fn text_map(docs: &[Document]) -> BTreeMap<String, String> {
    docs.iter().map(|d| (d.id.clone(), d.text.clone())).collect()
}
