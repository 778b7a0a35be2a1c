//! Near-duplicate grouping by word Jaccard similarity and duplicate injection.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Error, Result};
use crate::tokenize::words;

fn word_set(text: &str) -> HashSet<String> {
    words(text).collect()
}

fn jaccard_sets(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Jaccard similarity of the lowercased word sets; two empty texts score 1.
pub fn jaccard(a: &str, b: &str) -> f64 {
    jaccard_sets(&word_set(a), &word_set(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Complete,
    Single,
    Average,
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Self::Complete),
            "single" => Ok(Self::Single),
            "average" => Ok(Self::Average),
            other => Err(Error::Config(format!("unknown linkage {other:?}"))),
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Complete => "complete",
            Self::Single => "single",
            Self::Average => "average",
        })
    }
}

/// Cluster id per passage, aligned with the input order. Cluster ids are
/// numbered by first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub passage_ids: Vec<String>,
    pub cluster_ids: Vec<usize>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.cluster_ids.iter().max().map_or(0, |m| m + 1)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters()];
        for &c in &self.cluster_ids {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn cluster_of(&self, passage_id: &str) -> Option<usize> {
        self.passage_ids
            .iter()
            .position(|p| p == passage_id)
            .map(|i| self.cluster_ids[i])
    }

    /// Groups of passage ids, each sorted, ordered by smallest member id.
    pub fn canonical_groups(&self) -> Vec<Vec<String>> {
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (p, &c) in self.passage_ids.iter().zip(&self.cluster_ids) {
            groups.entry(c).or_default().push(p.clone());
        }
        let mut out: Vec<Vec<String>> = groups
            .into_values()
            .map(|mut g| {
                g.sort();
                g
            })
            .collect();
        out.sort();
        out
    }
}

/// Agglomerative clustering on word-Jaccard similarity. Two clusters merge
/// while their linkage similarity is strictly above `threshold`; the closest
/// pair merges first, ties going to the smallest `(i, j)` cluster index pair.
pub fn cluster_near_duplicates<S: AsRef<str>>(
    passages: &[(S, S)],
    threshold: f64,
    linkage: Linkage,
) -> Result<ClusterAssignment> {
    if passages.is_empty() {
        return Err(Error::Usage("nothing to cluster".into()));
    }
    let n = passages.len();
    let sets: Vec<HashSet<String>> = passages.iter().map(|(_, t)| word_set(t.as_ref())).collect();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = jaccard_sets(&sets[i], &sets[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    // Each cluster is a sorted member list; clusters stay ordered by first member.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let link = |a: &[usize], b: &[usize]| -> f64 {
        let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j)));
        match linkage {
            Linkage::Complete => pairs.map(|(i, j)| sim[i][j]).fold(f64::INFINITY, f64::min),
            Linkage::Single => pairs.map(|(i, j)| sim[i][j]).fold(f64::NEG_INFINITY, f64::max),
            Linkage::Average => {
                let total: f64 = pairs.map(|(i, j)| sim[i][j]).sum();
                total / (a.len() * b.len()) as f64
            }
        }
    };
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let s = link(&clusters[a], &clusters[b]);
                if s > threshold && best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
        clusters.sort_by_key(|c| c[0]);
    }
    let mut cluster_ids = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            cluster_ids[m] = c;
        }
    }
    Ok(ClusterAssignment {
        passage_ids: passages.iter().map(|(id, _)| id.as_ref().to_string()).collect(),
        cluster_ids,
    })
}

/// One query with its candidate passages and training annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingInstance {
    pub query_id: String,
    pub query: String,
    /// `(passage id, text)` pairs.
    pub passages: Vec<(String, String)>,
    /// Relevance-like teacher labels (higher is better).
    pub labels: Vec<f64>,
    pub positive_index: Option<usize>,
    pub cluster_ids: Vec<usize>,
    /// Set on augmented instances: index of the passage whose copy was appended.
    #[serde(default)]
    pub duplicated_index: Option<usize>,
}

impl RankingInstance {
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// Suffix added to the id of an injected copy.
pub const COPY_SUFFIX: &str = "#copy";

/// Appends a byte-identical copy of a uniformly sampled passage.
pub fn inject_duplicate(instance: &RankingInstance, seed: u64) -> Result<RankingInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inject_duplicate_with(instance, &mut rng)
}

pub fn inject_duplicate_with<R: Rng + ?Sized>(
    instance: &RankingInstance,
    rng: &mut R,
) -> Result<RankingInstance> {
    let k = instance.len();
    if k == 0 {
        return Err(Error::Usage("cannot duplicate from an empty instance".into()));
    }
    let idx = rng.gen_range(0..k);
    let mut out = instance.clone();
    let (id, text) = instance.passages[idx].clone();
    out.passages.push((format!("{id}{COPY_SUFFIX}"), text));
    if let Some(&l) = instance.labels.get(idx) {
        out.labels.push(l);
    }
    if let Some(&c) = instance.cluster_ids.get(idx) {
        out.cluster_ids.push(c);
    }
    out.duplicated_index = Some(idx);
    Ok(out)
}

/// One row of a cluster file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClusterEntry {
    pub query_id: String,
    pub passage_id: String,
    pub cluster_id: usize,
}

/// `query_id<TAB>passage_id<TAB>cluster_id` per line.
pub fn write_clusters(entries: &[ClusterEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.query_id, e.passage_id, e.cluster_id));
    }
    s
}

pub fn parse_clusters(text: &str) -> Result<Vec<ClusterEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(n + 1, "expected query_id<TAB>passage_id<TAB>cluster_id"));
        }
        let cluster_id = cols[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(n + 1, format!("bad cluster id {:?}", cols[2])))?;
        out.push(ClusterEntry {
            query_id: cols[0].to_string(),
            passage_id: cols[1].to_string(),
            cluster_id,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(texts: &[&str]) -> Vec<(String, String)> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t.to_string()))
            .collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard("a b c", "c b a"), 1.0);
        assert_eq!(jaccard("a b", "c d"), 0.0);
        assert_eq!(jaccard("a b c", "b c d"), 0.5);
        assert_eq!(jaccard("", ""), 1.0);
        assert_eq!(jaccard("A, b!", "a B"), 1.0);
    }

    #[test]
    fn distinct_texts_stay_singletons() {
        let c = cluster_near_duplicates(&ps(&["a b", "c d", "e f"]), 0.5, Linkage::Complete)
            .unwrap();
        assert_eq!(c.cluster_ids, vec![0, 1, 2]);
    }

    #[test]
    fn identical_pair_merges() {
        let c = cluster_near_duplicates(&ps(&["a b c", "a b c", "x y z"]), 0.5, Linkage::Complete)
            .unwrap();
        assert_eq!(c.cluster_ids, vec![0, 0, 1]);
        assert_eq!(c.sizes(), vec![2, 1]);
    }

    #[test]
    fn boundary_half_does_not_merge() {
        let c = cluster_near_duplicates(&ps(&["a b c", "b c d"]), 0.5, Linkage::Complete).unwrap();
        assert_eq!(c.num_clusters(), 2);
    }

    fn range_words(lo: usize, hi: usize) -> String {
        (lo..=hi).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn complete_linkage_chain() {
        let a = range_words(1, 9);
        let b = range_words(1, 15);
        let c = range_words(4, 20);
        assert_eq!(jaccard(&a, &b), 0.6);
        assert_eq!(jaccard(&b, &c), 0.6);
        assert_eq!(jaccard(&a, &c), 0.3);
        let texts = [a.as_str(), b.as_str(), c.as_str()];
        let out = cluster_near_duplicates(&ps(&texts), 0.5, Linkage::Complete).unwrap();
        assert_eq!(out.cluster_ids, vec![0, 0, 1]);
        let single = cluster_near_duplicates(&ps(&texts), 0.5, Linkage::Single).unwrap();
        assert_eq!(single.cluster_ids, vec![0, 0, 0]);
    }

    #[test]
    fn inject_single_passage() {
        let inst = RankingInstance {
            query_id: "q".into(),
            query: "x".into(),
            passages: vec![("d".into(), "hello world".into())],
            labels: vec![1.0],
            positive_index: Some(0),
            cluster_ids: vec![0],
            duplicated_index: None,
        };
        let out = inject_duplicate(&inst, 1).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.passages[0].1, out.passages[1].1);
        assert_eq!(out.duplicated_index, Some(0));
        assert_eq!(inject_duplicate(&inst, 1).unwrap(), out);
    }

    #[test]
    fn cluster_file_round_trip() {
        let rows = vec![
            ClusterEntry {
                query_id: "q1".into(),
                passage_id: "d1".into(),
                cluster_id: 0,
            },
            ClusterEntry {
                query_id: "q1".into(),
                passage_id: "d2".into(),
                cluster_id: 0,
            },
        ];
        let text = write_clusters(&rows);
        assert_eq!(text, "q1\td1\t0\nq1\td2\t0\n");
        assert_eq!(parse_clusters(&text).unwrap(), rows);
        assert!(parse_clusters("q1\td1\n").is_err());
    }
}
