//! Synthetic retrieval data with planted relevance and near-duplicates.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::formats::{Document, RunEntry};
use crate::error::{Error, Result};
use crate::metrics::QrelSet;
use crate::novelty::{jaccard, ClusterEntry};
use crate::tokenize::words;

/// Relevance grade of the planted passage and its variants.
pub const RELEVANT_GRADE: u32 = 2;
/// Relevance grade of hard negatives (partial query overlap).
pub const PARTIAL_GRADE: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_queries: usize,
    pub passages_per_query: usize,
    pub vocab_size: usize,
    /// Words per passage.
    pub passage_length: usize,
    /// Words per query.
    pub query_length: usize,
    pub hard_negatives: usize,
    /// Near-duplicate variants added to a duplicated relevant passage.
    pub variants: usize,
    pub duplicate_rate: f64,
    /// Probability of swapping each adjacent pair in the teacher ordering.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_queries: 250,
            passages_per_query: 30,
            vocab_size: 600,
            passage_length: 12,
            query_length: 3,
            hard_negatives: 4,
            variants: 2,
            duplicate_rate: 0.5,
            noise_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_queries == 0
            || self.passages_per_query == 0
            || self.vocab_size == 0
            || self.passage_length == 0
            || self.query_length == 0
        {
            return bad("sizes must be positive".into());
        }
        for (name, r) in [("duplicate_rate", self.duplicate_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.query_length >= self.passage_length {
            return bad("query_length must be below passage_length".into());
        }
        if self.hard_negatives > 0 && self.query_length < 2 {
            return bad("hard negatives need query_length >= 2".into());
        }
        if self.passages_per_query < 1 + self.hard_negatives + self.variants {
            return bad(format!(
                "passages_per_query {} cannot hold 1 relevant, {} hard negatives and {} variants",
                self.passages_per_query, self.hard_negatives, self.variants
            ));
        }
        if self.vocab_size < 4 * self.passage_length + self.query_length {
            return bad(format!(
                "vocab_size {} too small for distinct passages of length {}; need at least {}",
                self.vocab_size,
                self.passage_length,
                4 * self.passage_length + self.query_length
            ));
        }
        Ok(())
    }

    /// Words substituted per variant; keeps every variant pair above 0.5 Jaccard.
    fn substitutions(&self) -> usize {
        (self.passage_length / 10).max(1)
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// A pronounceable, unique token for word index `i`.
pub fn pseudo_word(mut i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut s = String::new();
    for _ in 0..3 {
        let syl = i % base;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
        i /= base;
    }
    s
}

struct Draft {
    words: Vec<usize>,
    grade: u32,
    cluster: usize,
}

fn sample_excluding<R: Rng>(
    rng: &mut R,
    vocab: usize,
    n: usize,
    exclude: &BTreeSet<usize>,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut seen = exclude.clone();
    while out.len() < n {
        let w = rng.gen_range(0..vocab);
        if seen.insert(w) {
            out.push(w);
        }
    }
    out
}

fn render(words: &[usize]) -> String {
    words.iter().map(|&w| pseudo_word(w)).collect::<Vec<_>>().join(" ")
}

fn distinct_overlap(query: &str, passage: &str) -> usize {
    let q: BTreeSet<String> = words(query).collect();
    let p: BTreeSet<String> = words(passage).collect();
    q.intersection(&p).count()
}

/// Number of distinct query words in the passage.
pub fn word_overlap(query: &str, passage: &str) -> f64 {
    distinct_overlap(query, passage) as f64
}

const MAX_TRIES: usize = 200;

fn draft_query<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Result<(Vec<usize>, Vec<Draft>)> {
    let v = cfg.vocab_size;
    let pl = cfg.passage_length;
    let ql = cfg.query_length;
    let query: Vec<usize> = index::sample(rng, v, ql).into_vec();
    let qset: BTreeSet<usize> = query.iter().copied().collect();

    let mut relevant = query.clone();
    relevant.extend(sample_excluding(rng, v, pl - ql, &qset));
    relevant.shuffle(rng);
    let mut drafts = vec![Draft {
        words: relevant.clone(),
        grade: RELEVANT_GRADE,
        cluster: 0,
    }];

    if cfg.variants > 0 && rng.gen_bool(cfg.duplicate_rate) {
        let rel_text = render(&relevant);
        let body: Vec<usize> = (0..pl).filter(|&i| !qset.contains(&relevant[i])).collect();
        let rel_set: BTreeSet<usize> = relevant.iter().copied().collect();
        let mut made = 0;
        let mut tries = 0;
        while made < cfg.variants {
            tries += 1;
            if tries > MAX_TRIES {
                return Err(Error::Config("could not build near-duplicate variants".into()));
            }
            let mut variant = relevant.clone();
            let slots: Vec<usize> = body
                .choose_multiple(rng, cfg.substitutions())
                .copied()
                .collect();
            let fresh = sample_excluding(rng, v, slots.len(), &rel_set);
            for (s, w) in slots.into_iter().zip(fresh) {
                variant[s] = w;
            }
            let text = render(&variant);
            let close = jaccard(&text, &rel_text) > 0.5
                && drafts
                    .iter()
                    .filter(|d| d.cluster == 0)
                    .all(|d| jaccard(&text, &render(&d.words)) > 0.5 && d.words != variant);
            if close {
                drafts.push(Draft {
                    words: variant,
                    grade: RELEVANT_GRADE,
                    cluster: 0,
                });
                made += 1;
            }
        }
    }

    let mut next_cluster = 1;
    while drafts.len() < cfg.passages_per_query {
        let hard = drafts.len() - drafts.iter().filter(|d| d.cluster == 0).count() < cfg.hard_negatives;
        let mut tries = 0;
        loop {
            tries += 1;
            if tries > MAX_TRIES {
                return Err(Error::Config(
                    "vocab too small to keep negatives distinct; raise vocab_size".into(),
                ));
            }
            let mut w: Vec<usize> = if hard {
                let o = rng.gen_range(1..ql);
                query.choose_multiple(rng, o).copied().collect()
            } else {
                Vec::new()
            };
            w.extend(sample_excluding(rng, v, pl - w.len(), &qset));
            w.shuffle(rng);
            let text = render(&w);
            if drafts.iter().all(|d| jaccard(&text, &render(&d.words)) <= 0.5) {
                drafts.push(Draft {
                    words: w,
                    grade: if hard { PARTIAL_GRADE } else { 0 },
                    cluster: next_cluster,
                });
                next_cluster += 1;
                break;
            }
        }
    }
    Ok((query, drafts))
}

/// Orders candidates by grade, then query overlap, then a random key, and
/// swaps each adjacent pair with probability `noise_rate`.
pub fn teacher_order<R: Rng>(grades: &[u32], overlaps: &[f64], noise_rate: f64, rng: &mut R) -> Vec<usize> {
    let keys: Vec<u64> = grades.iter().map(|_| rng.gen()).collect();
    let mut order: Vec<usize> = (0..grades.len()).collect();
    order.sort_by(|&a, &b| {
        grades[b]
            .cmp(&grades[a])
            .then(overlaps[b].total_cmp(&overlaps[a]))
            .then(keys[a].cmp(&keys[b]))
    });
    for p in 0..order.len().saturating_sub(1) {
        if rng.gen_bool(noise_rate) {
            order.swap(p, p + 1);
        }
    }
    order
}

/// Generates corpus, queries, qrels, ground-truth clusters, an overlap-ordered
/// first-stage run and a noisy teacher ranking.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.num_queries.to_string().len().max(3);
    let pwidth = cfg.passages_per_query.to_string().len().max(2);
    let mut data = Dataset {
        queries: Vec::new(),
        corpus: Vec::new(),
        qrels: QrelSet::new(),
        clusters: Vec::new(),
        run: Vec::new(),
        teacher: Vec::new(),
    };

    for qi in 0..cfg.num_queries {
        let qid = format!("q{qi:0width$}");
        let (mut query, mut drafts) = draft_query(cfg, &mut rng)?;
        query.shuffle(&mut rng);
        drafts.shuffle(&mut rng);
        let query_text = render(&query);

        let ids: Vec<String> = (0..drafts.len())
            .map(|j| format!("{qid}-p{j:0pwidth$}"))
            .collect();
        let texts: Vec<String> = drafts.iter().map(|d| render(&d.words)).collect();

        // renumber clusters by first member in id order
        let mut remap = std::collections::BTreeMap::new();
        for d in &drafts {
            let n = remap.len();
            remap.entry(d.cluster).or_insert(n);
        }

        let overlaps: Vec<f64> = texts.iter().map(|t| word_overlap(&query_text, t)).collect();
        for (j, d) in drafts.iter().enumerate() {
            data.corpus.push(Document {
                id: ids[j].clone(),
                text: texts[j].clone(),
            });
            data.qrels.insert(&qid, &ids[j], d.grade);
            data.clusters.push(ClusterEntry {
                query_id: qid.clone(),
                passage_id: ids[j].clone(),
                cluster_id: remap[&d.cluster],
            });
        }

        let mut first: Vec<usize> = (0..drafts.len()).collect();
        first.sort_by(|&a, &b| overlaps[b].total_cmp(&overlaps[a]).then(ids[a].cmp(&ids[b])));
        for (r, &j) in first.iter().enumerate() {
            data.run.push(RunEntry {
                query_id: qid.clone(),
                passage_id: ids[j].clone(),
                rank: r + 1,
                score: overlaps[j],
                tag: "overlap".into(),
            });
        }

        let grades: Vec<u32> = drafts.iter().map(|d| d.grade).collect();
        let order = teacher_order(&grades, &overlaps, cfg.noise_rate, &mut rng);
        let n = order.len();
        for (r, &j) in order.iter().enumerate() {
            data.teacher.push(RunEntry {
                query_id: qid.clone(),
                passage_id: ids[j].clone(),
                rank: r + 1,
                score: (n - r) as f64,
                tag: "teacher".into(),
            });
        }

        data.queries.push(Document {
            id: qid,
            text: query_text,
        });
    }
    Ok(data)
}
