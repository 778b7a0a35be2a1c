//! Independent reference implementations used to check the library.

use std::collections::{BTreeMap, HashMap};

/// `ln(1 + e^x)` as written; fine for the score ranges used in tests.
fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Double loop over ordered pairs with `labels[i] < labels[j]`.
pub fn rank_net(scores: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] < labels[j] {
                total += softplus(scores[i] - scores[j]);
            }
        }
    }
    total
}

pub fn na_rank_net(scores: &[f64], labels: &[f64], clusters: &[usize]) -> f64 {
    let k = scores.len();
    let mut adjusted = labels.to_vec();
    for i in 0..k {
        for j in 0..k {
            if clusters[i] == clusters[j] && scores[i] < scores[j] {
                adjusted[i] = 0.0;
            }
        }
    }
    rank_net(scores, &adjusted)
}

/// `−ln(e^{s_p} / Σ e^{s_i})` through an explicit softmax.
pub fn info_nce(scores: &[f64], positive: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    -(exps[positive] / z).ln()
}

/// α-DCG@k computed from scratch; `subtopic` of `None` means a singleton.
pub fn alpha_dcg(ranking: &[usize], rel: &[u32], subtopic: &[Option<usize>], k: usize, alpha: f64) -> f64 {
    let mut counts: HashMap<(bool, usize), i32> = HashMap::new();
    let mut total = 0.0;
    for (pos, &p) in ranking.iter().take(k).enumerate() {
        if rel[p] == 0 {
            continue;
        }
        let key = match subtopic[p] {
            Some(s) => (true, s),
            None => (false, p),
        };
        let c = counts.entry(key).or_insert(0);
        total += (1.0 - alpha).powi(*c) / ((pos + 2) as f64).log2();
        *c += 1;
    }
    total
}

fn permutations(items: &mut Vec<usize>, start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permutations(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// Maximum α-DCG@k over every ordering of all passages.
pub fn exhaustive_ideal_alpha_dcg(rel: &[u32], subtopic: &[Option<usize>], k: usize, alpha: f64) -> f64 {
    let mut items: Vec<usize> = (0..rel.len()).collect();
    let mut best = 0.0f64;
    permutations(&mut items, 0, &mut |p| {
        best = best.max(alpha_dcg(p, rel, subtopic, k, alpha));
    });
    best
}

/// nDCG@k from explicit relevance lists.
pub fn ndcg(ranked_rels: &[u32], all_rels: &[u32], k: usize, exponential: bool) -> f64 {
    let gain = |r: u32| if exponential { 2f64.powi(r as i32) - 1.0 } else { r as f64 };
    let dcg = |rels: &[u32]| -> f64 {
        rels.iter()
            .take(k)
            .enumerate()
            .map(|(i, &r)| gain(r) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = all_rels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(ranked_rels) / idcg
    }
}

/// Per-query passage order of a run, for comparisons.
pub fn order_by_query(entries: &[set_encoder::harness::RunEntry]) -> BTreeMap<String, Vec<String>> {
    set_encoder::harness::rankings(entries)
}
