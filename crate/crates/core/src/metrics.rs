//! nDCG@k and α-nDCG@k.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Graded judgments of one query: passage id → relevance.
pub type Judgments = BTreeMap<String, u32>;
/// Subtopic of each passage of one query.
pub type Subtopics = BTreeMap<String, usize>;

/// Relevance judgments for many queries. Unjudged pairs read as 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelSet {
    map: BTreeMap<String, Judgments>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, passage_id: &str, relevance: u32) {
        self.map
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), relevance);
    }

    pub fn relevance(&self, query_id: &str, passage_id: &str) -> u32 {
        self.map
            .get(query_id)
            .and_then(|j| j.get(passage_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn judgments(&self, query_id: &str) -> Option<&Judgments> {
        self.map.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.map
            .iter()
            .flat_map(|(q, j)| j.iter().map(move |(p, r)| (q.as_str(), p.as_str(), *r)))
    }

    pub fn len(&self) -> usize {
        self.map.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Subtopic (near-duplicate cluster) of each `(query, passage)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubtopicMap {
    map: BTreeMap<String, Subtopics>,
}

impl SubtopicMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, passage_id: &str, subtopic: usize) {
        self.map
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), subtopic);
    }

    pub fn subtopics(&self, query_id: &str) -> Option<&Subtopics> {
        self.map.get(query_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// `2^rel − 1`
    #[default]
    Exponential,
    /// `rel`
    Linear,
}

impl Gain {
    pub fn apply(self, rel: u32) -> f64 {
        match self {
            Self::Exponential => 2f64.powi(rel as i32) - 1.0,
            Self::Linear => rel as f64,
        }
    }
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(Self::Exponential),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown gain {other:?}"))),
        }
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn dcg<S: AsRef<str>>(ranking: &[S], judgments: &Judgments, k: usize, gain: Gain) -> f64 {
    ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, p)| {
            let rel = judgments.get(p.as_ref()).copied().unwrap_or(0);
            gain.apply(rel) * discount(i + 1)
        })
        .sum()
}

/// nDCG@k against the ideal ordering of all judged passages. Returns 0 when
/// no judged passage has positive gain.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], judgments: &Judgments, k: usize, gain: Gain) -> f64 {
    let mut ideal: Vec<(&String, u32)> = judgments.iter().map(|(p, r)| (p, *r)).collect();
    ideal.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let ideal: Vec<&String> = ideal.into_iter().map(|(p, _)| p).collect();
    let idcg = dcg(&ideal, judgments, k, gain);
    if idcg <= 0.0 {
        return 0.0;
    }
    dcg(ranking, judgments, k, gain) / idcg
}

#[derive(Hash, PartialEq, Eq, Clone)]
enum TopicKey<'a> {
    Cluster(usize),
    Alone(&'a str),
}

fn topic_of<'a>(p: &'a str, subtopics: &Subtopics) -> TopicKey<'a> {
    subtopics
        .get(p)
        .map_or(TopicKey::Alone(p), |&c| TopicKey::Cluster(c))
}

fn is_relevant(p: &str, judgments: &Judgments) -> bool {
    judgments.get(p).copied().unwrap_or(0) >= 1
}

/// α-DCG@k: a relevant passage whose subtopic was already covered `c` times
/// above it gains `(1 − α)^c`. Relevance is binarized at `rel ≥ 1`; a
/// passage without a subtopic forms its own.
pub fn alpha_dcg_at_k<S: AsRef<str>>(
    ranking: &[S],
    judgments: &Judgments,
    subtopics: &Subtopics,
    k: usize,
    alpha: f64,
) -> f64 {
    let mut seen: HashMap<TopicKey<'_>, i32> = HashMap::new();
    let mut total = 0.0;
    for (i, p) in ranking.iter().take(k).enumerate() {
        let p = p.as_ref();
        if !is_relevant(p, judgments) {
            continue;
        }
        let c = seen.entry(topic_of(p, subtopics)).or_insert(0);
        total += (1.0 - alpha).powi(*c) * discount(i + 1);
        *c += 1;
    }
    total
}

/// Greedy ideal ordering for α-nDCG: repeatedly take the relevant passage
/// with the largest marginal gain, ties to the smallest passage id.
pub fn greedy_ideal(judgments: &Judgments, subtopics: &Subtopics, alpha: f64, k: usize) -> Vec<String> {
    let mut remaining: Vec<&str> = judgments
        .iter()
        .filter(|(_, &r)| r >= 1)
        .map(|(p, _)| p.as_str())
        .collect();
    let mut seen: HashMap<TopicKey<'_>, i32> = HashMap::new();
    let mut out = Vec::new();
    while out.len() < k && !remaining.is_empty() {
        let mut best = 0;
        let mut best_gain = f64::NEG_INFINITY;
        for (i, p) in remaining.iter().enumerate() {
            let c = seen.get(&topic_of(p, subtopics)).copied().unwrap_or(0);
            let g = (1.0 - alpha).powi(c);
            if g > best_gain {
                best_gain = g;
                best = i;
            }
        }
        let p = remaining.remove(best);
        *seen.entry(topic_of(p, subtopics)).or_insert(0) += 1;
        out.push(p.to_string());
    }
    out
}

pub fn alpha_ndcg_at_k<S: AsRef<str>>(
    ranking: &[S],
    judgments: &Judgments,
    subtopics: &Subtopics,
    k: usize,
    alpha: f64,
) -> f64 {
    let ideal = greedy_ideal(judgments, subtopics, alpha, k);
    let idcg = alpha_dcg_at_k(&ideal, judgments, subtopics, k, alpha);
    if idcg <= 0.0 {
        return 0.0;
    }
    alpha_dcg_at_k(ranking, judgments, subtopics, k, alpha) / idcg
}

/// Which metric to compute over a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Ndcg { k: usize, gain: Gain },
    AlphaNdcg { k: usize, alpha: f64 },
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Self::Ndcg { k, .. } => format!("ndcg@{k}"),
            Self::AlphaNdcg { k, .. } => format!("alpha-ndcg@{k}"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Ndcg { k: 0, .. } | Self::AlphaNdcg { k: 0, .. } => {
                Err(Error::Usage("cutoff k must be at least 1".into()))
            }
            Self::AlphaNdcg { alpha, .. } if !(0.0..1.0).contains(&alpha) => {
                Err(Error::Usage(format!("alpha must lie in [0, 1), got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-query values (sorted by query id) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub per_query: Vec<(String, f64)>,
    pub mean: f64,
}

impl MetricReport {
    /// `query_id<TAB>metric<TAB>value` lines followed by an `all` row.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (q, v) in &self.per_query {
            let _ = writeln!(s, "{q}\t{}\t{v:.6}", self.metric);
        }
        let _ = writeln!(s, "all\t{}\t{:.6}", self.metric, self.mean);
        s
    }
}

/// Evaluates rankings (query id → ordered passage ids). Queries without
/// judgments score 0.
pub fn evaluate(
    rankings: &BTreeMap<String, Vec<String>>,
    qrels: &QrelSet,
    subtopics: &SubtopicMap,
    metric: Metric,
) -> Result<MetricReport> {
    metric.validate()?;
    let empty_j = Judgments::new();
    let empty_s = Subtopics::new();
    let per_query: Vec<(String, f64)> = rankings
        .iter()
        .map(|(q, ranking)| {
            let j = qrels.judgments(q).unwrap_or(&empty_j);
            let v = match metric {
                Metric::Ndcg { k, gain } => ndcg_at_k(ranking, j, k, gain),
                Metric::AlphaNdcg { k, alpha } => {
                    let s = subtopics.subtopics(q).unwrap_or(&empty_s);
                    alpha_ndcg_at_k(ranking, j, s, k, alpha)
                }
            };
            (q.clone(), v)
        })
        .collect();
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };
    Ok(MetricReport {
        metric: metric.name(),
        per_query,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judg(pairs: &[(&str, u32)]) -> Judgments {
        pairs.iter().map(|(p, r)| (p.to_string(), *r)).collect()
    }

    fn subs(pairs: &[(&str, usize)]) -> Subtopics {
        pairs.iter().map(|(p, s)| (p.to_string(), *s)).collect()
    }

    #[test]
    fn ndcg_trivial_cases() {
        let j = judg(&[("a", 1)]);
        assert_eq!(ndcg_at_k(&["a"], &j, 10, Gain::Exponential), 1.0);
        let j = judg(&[("a", 0), ("b", 0)]);
        assert_eq!(ndcg_at_k(&["a", "b"], &j, 10, Gain::Exponential), 0.0);
    }

    #[test]
    fn ndcg_hand_example() {
        let j = judg(&[("a", 0), ("b", 2), ("c", 1)]);
        let v = ndcg_at_k(&["a", "b", "c"], &j, 3, Gain::Exponential);
        let dcg = 3.0 / 3f64.log2() + 1.0 / 2.0;
        let idcg = 3.0 + 1.0 / 3f64.log2();
        assert!((dcg - 2.3928).abs() < 1e-4 && (idcg - 3.6309).abs() < 1e-4);
        assert!((v - dcg / idcg).abs() < 1e-15);
        assert!((v - 0.6590).abs() < 1e-4);
    }

    #[test]
    fn alpha_abc_example() {
        let j = judg(&[("A", 1), ("B", 1), ("C", 1)]);
        let s = subs(&[("A", 0), ("B", 0), ("C", 1)]);
        let acb = alpha_ndcg_at_k(&["A", "C", "B"], &j, &s, 3, 0.99);
        let abc = alpha_ndcg_at_k(&["A", "B", "C"], &j, &s, 3, 0.99);
        assert!((acb - 1.0).abs() < 1e-12);
        assert!(acb > abc);
        let ideal = greedy_ideal(&j, &s, 0.99, 3);
        assert_eq!(ideal, vec!["A", "C", "B"]);
    }

    #[test]
    fn alpha_reduces_to_binary_ndcg() {
        let j = judg(&[("a", 1), ("b", 0), ("c", 1), ("d", 1)]);
        let s = subs(&[("a", 0), ("b", 1), ("c", 2), ("d", 3)]);
        let r = ["b", "c", "a", "d"];
        let a = alpha_ndcg_at_k(&r, &j, &s, 3, 0.99);
        let n = ndcg_at_k(&r, &j, 3, Gain::Linear);
        assert!((a - n).abs() < 1e-12);
        // duplicates lose nothing at alpha = 0
        let s1 = subs(&[("a", 0), ("b", 0), ("c", 0), ("d", 0)]);
        assert!((alpha_ndcg_at_k(&r, &j, &s1, 3, 0.0) - n).abs() < 1e-12);
    }

    #[test]
    fn report_format() {
        let mut qrels = QrelSet::new();
        qrels.insert("q1", "a", 1);
        let mut rankings = BTreeMap::new();
        rankings.insert("q1".to_string(), vec!["a".to_string()]);
        rankings.insert("q2".to_string(), vec!["a".to_string()]);
        let rep = evaluate(
            &rankings,
            &qrels,
            &SubtopicMap::new(),
            Metric::Ndcg {
                k: 10,
                gain: Gain::Exponential,
            },
        )
        .unwrap();
        assert_eq!(
            rep.to_text(),
            "q1\tndcg@10\t1.000000\nq2\tndcg@10\t0.000000\nall\tndcg@10\t0.500000\n"
        );
        assert!(evaluate(&rankings, &qrels, &SubtopicMap::new(), Metric::AlphaNdcg { k: 10, alpha: 1.0 }).is_err());
    }
}
