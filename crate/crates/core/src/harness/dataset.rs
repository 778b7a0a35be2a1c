//! A retrieval collection on disk and the training instances built from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::formats::{
    group_run, parse_corpus, parse_qrels, parse_queries, parse_run, text_map, write_corpus,
    write_qrels, write_queries, write_run, Document, RunEntry,
};
use crate::error::{Error, Result};
use crate::metrics::{QrelSet, SubtopicMap};
use crate::novelty::{parse_clusters, write_clusters, ClusterEntry, RankingInstance};
use crate::tokenize::Vocab;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const CLUSTERS_FILE: &str = "clusters.tsv";
pub const RUN_FILE: &str = "run.txt";
pub const TEACHER_FILE: &str = "teacher.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub queries: Vec<Document>,
    pub corpus: Vec<Document>,
    pub qrels: QrelSet,
    pub clusters: Vec<ClusterEntry>,
    /// First-stage candidate ranking.
    pub run: Vec<RunEntry>,
    /// Teacher ranking used for stage-2 labels; may be empty.
    pub teacher: Vec<RunEntry>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CORPUS_FILE), write_corpus(&self.corpus)?)?;
        fs::write(dir.join(QUERIES_FILE), write_queries(&self.queries))?;
        fs::write(dir.join(QRELS_FILE), write_qrels(&self.qrels))?;
        fs::write(dir.join(CLUSTERS_FILE), write_clusters(&self.clusters))?;
        fs::write(dir.join(RUN_FILE), write_run(&self.run))?;
        fs::write(dir.join(TEACHER_FILE), write_run(&self.teacher))?;
        Ok(())
    }

    /// Loads a dataset directory; the cluster and teacher files are optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| fs::read_to_string(dir.join(name));
        let optional = |name: &str| -> Result<String> {
            let p = dir.join(name);
            if p.exists() {
                Ok(fs::read_to_string(p)?)
            } else {
                Ok(String::new())
            }
        };
        Ok(Self {
            corpus: parse_corpus(&read(CORPUS_FILE)?)?,
            queries: parse_queries(&read(QUERIES_FILE)?)?,
            qrels: parse_qrels(&read(QRELS_FILE)?)?,
            clusters: parse_clusters(&optional(CLUSTERS_FILE)?)?,
            run: parse_run(&read(RUN_FILE)?)?,
            teacher: parse_run(&optional(TEACHER_FILE)?)?,
        })
    }

    pub fn query_ids(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.id.clone()).collect()
    }

    /// Restricts every component to the given queries.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Self {
        let keep_q = |q: &str| ids.contains(q);
        let runs: BTreeSet<&str> = self
            .run
            .iter()
            .chain(&self.teacher)
            .filter(|e| keep_q(&e.query_id))
            .map(|e| e.passage_id.as_str())
            .collect();
        let mut qrels = QrelSet::new();
        for (q, p, r) in self.qrels.iter().filter(|(q, _, _)| keep_q(q)) {
            qrels.insert(q, p, r);
        }
        Self {
            queries: self.queries.iter().filter(|q| keep_q(&q.id)).cloned().collect(),
            corpus: self
                .corpus
                .iter()
                .filter(|d| runs.contains(d.id.as_str()))
                .cloned()
                .collect(),
            qrels,
            clusters: self.clusters.iter().filter(|c| keep_q(&c.query_id)).cloned().collect(),
            run: self.run.iter().filter(|e| keep_q(&e.query_id)).cloned().collect(),
            teacher: self.teacher.iter().filter(|e| keep_q(&e.query_id)).cloned().collect(),
        }
    }

    /// The first `n` queries in file order and the rest.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let ids = self.query_ids();
        let n = n.min(ids.len());
        let head: BTreeSet<String> = ids[..n].iter().cloned().collect();
        let tail: BTreeSet<String> = ids[n..].iter().cloned().collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Vocabulary over every query and passage text.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::build(
            self.queries.iter().chain(&self.corpus).map(|d| d.text.as_str()),
            1,
        )
    }

    pub fn subtopics(&self) -> SubtopicMap {
        let mut m = SubtopicMap::new();
        for c in &self.clusters {
            m.insert(&c.query_id, &c.passage_id, c.cluster_id);
        }
        m
    }

    fn cluster_lookup(&self) -> BTreeMap<(&str, &str), usize> {
        self.clusters
            .iter()
            .map(|c| ((c.query_id.as_str(), c.passage_id.as_str()), c.cluster_id))
            .collect()
    }

    /// Candidate instances from the top `depth` of the first-stage run, in run
    /// order. Labels are relevance grades unless `teacher` is set, in which
    /// case a passage at teacher rank `r` of `n` gets label `n − r + 1`
    /// (unranked passages get 0). Passages without a cluster get a fresh one.
    pub fn instances(&self, depth: usize, teacher: bool) -> Result<Vec<RankingInstance>> {
        let texts = text_map(&self.corpus);
        let queries = text_map(&self.queries);
        let clusters = self.cluster_lookup();
        let teacher_labels: BTreeMap<(String, String), f64> = group_run(&self.teacher)
            .into_iter()
            .flat_map(|(q, rows)| {
                let n = rows.len();
                rows.into_iter()
                    .map(move |e| ((q.clone(), e.passage_id), (n + 1 - e.rank) as f64))
            })
            .collect();
        if teacher && self.teacher.is_empty() {
            return Err(Error::Data("dataset has no teacher ranking".into()));
        }

        let mut out = Vec::new();
        for (qid, rows) in group_run(&self.run) {
            let query = queries
                .get(&qid)
                .ok_or_else(|| Error::Data(format!("query {qid} has no text")))?;
            let rows = &rows[..rows.len().min(depth)];
            let missing: Vec<&str> = rows
                .iter()
                .filter(|e| !texts.contains_key(&e.passage_id))
                .map(|e| e.passage_id.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Data(format!("passages without text: {}", missing.join(", "))));
            }
            let mut next = clusters
                .iter()
                .filter(|((q, _), _)| *q == qid)
                .map(|(_, &c)| c + 1)
                .max()
                .unwrap_or(0);
            let mut inst = RankingInstance {
                query_id: qid.clone(),
                query: query.clone(),
                passages: Vec::with_capacity(rows.len()),
                labels: Vec::with_capacity(rows.len()),
                positive_index: None,
                cluster_ids: Vec::with_capacity(rows.len()),
                duplicated_index: None,
            };
            for e in rows {
                let pid = e.passage_id.clone();
                let label = if teacher {
                    teacher_labels.get(&(qid.clone(), pid.clone())).copied().unwrap_or(0.0)
                } else {
                    self.qrels.relevance(&qid, &pid) as f64
                };
                let cluster = clusters.get(&(qid.as_str(), pid.as_str())).copied().unwrap_or_else(|| {
                    next += 1;
                    next - 1
                });
                inst.passages.push((pid.clone(), texts[&pid].clone()));
                inst.labels.push(label);
                inst.cluster_ids.push(cluster);
            }
            out.push(inst);
        }
        Ok(out)
    }

    /// Stage-1 pools: every candidate of each query whose top-graded passage
    /// is relevant, with that passage (first in run order) as the positive.
    pub fn stage1_pools(&self) -> Result<Vec<RankingInstance>> {
        let mut pools = self.instances(usize::MAX, false)?;
        pools.retain_mut(|inst| {
            let best = inst.labels.iter().copied().fold(0.0, f64::max);
            inst.positive_index = inst.labels.iter().position(|&l| l == best && l > 0.0);
            inst.positive_index.is_some()
        });
        Ok(pools)
    }
}
