//! Training objectives: InfoNCE, RankNet, duplicate-aware InfoNCE and
//! novelty-aware RankNet.
//!
//! Labels are relevance-like: a higher label means the passage should rank
//! higher. The pairwise losses sum over ordered pairs `(i, j)` with
//! `label_i < label_j`, penalizing `s_i > s_j` with `ln(1 + e^(s_i − s_j))`.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` inside BCE.
pub const PROB_FLOOR: f64 = 1e-12;

fn len_of(g: &Graph, v: Var) -> usize {
    g.value(v).numel()
}

/// `−ln softmax(scores)[positive]`.
pub fn info_nce(g: &mut Graph, scores: Var, positive: usize) -> Result<Var> {
    let k = len_of(g, scores);
    if positive >= k {
        return Err(Error::Usage(format!("positive index {positive} out of {k}")));
    }
    let lse = g.log_sum_exp(scores)?;
    let pos = g.select(scores, positive)?;
    g.sub(lse, pos)
}

/// Ordered pairs `(i, j)` with `labels[i] < labels[j]`, row-major.
pub fn preference_pairs(labels: &[f64]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] < labels[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

pub fn rank_net(g: &mut Graph, scores: Var, labels: &[f64]) -> Result<Var> {
    let k = len_of(g, scores);
    if labels.len() != k {
        return Err(Error::Shape(format!("{} labels for {k} scores", labels.len())));
    }
    g.pairwise_logistic(scores, preference_pairs(labels))
}

/// Zeroes the label of every passage that has a same-cluster passage with a
/// strictly higher score.
pub fn adjusted_labels(scores: &[f64], labels: &[f64], clusters: &[usize]) -> Result<Vec<f64>> {
    let k = scores.len();
    if labels.len() != k || clusters.len() != k {
        return Err(Error::Shape(format!(
            "{k} scores, {} labels, {} cluster ids",
            labels.len(),
            clusters.len()
        )));
    }
    Ok((0..k)
        .map(|i| {
            let outranked = (0..k).any(|j| clusters[i] == clusters[j] && scores[i] < scores[j]);
            if outranked {
                0.0
            } else {
                labels[i]
            }
        })
        .collect())
}

/// RankNet over labels adjusted with the current scores. The adjustment is
/// treated as data: no gradient flows through it.
pub fn na_rank_net(g: &mut Graph, scores: Var, labels: &[f64], clusters: &[usize]) -> Result<Var> {
    let adjusted = adjusted_labels(g.value(scores).data(), labels, clusters)?;
    rank_net(g, scores, &adjusted)
}

/// `−Σ [t ln p + (1 − t) ln(1 − p)]` over all entries of `probs`.
pub fn binary_cross_entropy(g: &mut Graph, probs: Var, targets: &[f64]) -> Result<Var> {
    let n = len_of(g, probs);
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} probabilities", targets.len())));
    }
    let shape = g.shape(probs).to_vec();
    let t = g.constant(Tensor::new(shape.clone(), targets.to_vec())?);
    let one_minus_t = g.constant(Tensor::new(shape, targets.iter().map(|x| 1.0 - x).collect())?);
    let log_p = g.log_clamped(probs, PROB_FLOOR);
    let neg = g.scale(probs, -1.0);
    let one_minus_p = g.add_scalar(neg, 1.0);
    let log_q = g.log_clamped(one_minus_p, PROB_FLOOR);
    let a = g.mul(t, log_p)?;
    let b = g.mul(one_minus_t, log_q)?;
    let ll = g.add(a, b)?;
    let s = g.sum(ll);
    Ok(g.scale(s, -1.0))
}

/// Value and parts of a duplicate-aware InfoNCE evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DaInfoNce {
    pub total: Var,
    pub info_nce: Var,
    pub bce: Var,
}

fn leading(g: &mut Graph, v: Var, n: usize) -> Result<Var> {
    let len = len_of(g, v);
    let col = g.reshape(v, vec![len, 1])?;
    let head = g.slice_rows(col, 0, n)?;
    g.reshape(head, vec![n])
}

/// InfoNCE plus duplicate-detection BCE over `k + 1` passages whose last
/// entry is the appended copy of `duplicated_index`.
///
/// By default the copy is excluded from both terms. With `include_copy`
/// the InfoNCE denominator covers all `k + 1` scores and the copy enters the
/// BCE term with target 1.
pub fn da_info_nce(
    g: &mut Graph,
    scores: Var,
    dup_probs: Var,
    positive: usize,
    duplicated_index: usize,
    include_copy: bool,
) -> Result<DaInfoNce> {
    let total_len = len_of(g, scores);
    if total_len < 2 || len_of(g, dup_probs) != total_len {
        return Err(Error::Shape(format!(
            "need k+1 >= 2 scores and matching probabilities, got {total_len} and {}",
            len_of(g, dup_probs)
        )));
    }
    let k = total_len - 1;
    if duplicated_index >= k {
        return Err(Error::Usage(format!(
            "duplicated index {duplicated_index} outside the original {k} passages"
        )));
    }
    if positive >= k {
        return Err(Error::Usage(format!("positive index {positive} out of {k}")));
    }
    let n = if include_copy { k + 1 } else { k };
    let (s, p) = if include_copy {
        (scores, dup_probs)
    } else {
        (leading(g, scores, k)?, leading(g, dup_probs, k)?)
    };
    let mut targets = vec![0.0; n];
    targets[duplicated_index] = 1.0;
    if include_copy {
        targets[k] = 1.0;
    }
    let nce = info_nce(g, s, positive)?;
    let bce = binary_cross_entropy(g, p, &targets)?;
    let total = g.add(nce, bce)?;
    Ok(DaInfoNce {
        total,
        info_nce: nce,
        bce,
    })
}

/// Plain-value wrappers around the graph losses.
pub mod value {
    use super::*;

    fn scores(g: &mut Graph, s: &[f64]) -> Var {
        g.constant(Tensor::vector(s.to_vec()))
    }

    pub fn info_nce(s: &[f64], positive: usize) -> Result<f64> {
        let mut g = Graph::new();
        let v = scores(&mut g, s);
        let l = super::info_nce(&mut g, v, positive)?;
        Ok(g.value(l).item())
    }

    pub fn rank_net(s: &[f64], labels: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let v = scores(&mut g, s);
        let l = super::rank_net(&mut g, v, labels)?;
        Ok(g.value(l).item())
    }

    pub fn na_rank_net(s: &[f64], labels: &[f64], clusters: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let v = scores(&mut g, s);
        let l = super::na_rank_net(&mut g, v, labels, clusters)?;
        Ok(g.value(l).item())
    }

    /// `(total, info_nce, bce)`
    pub fn da_info_nce(
        s: &[f64],
        probs: &[f64],
        positive: usize,
        duplicated_index: usize,
        include_copy: bool,
    ) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let sv = scores(&mut g, s);
        let pv = scores(&mut g, probs);
        let l = super::da_info_nce(&mut g, sv, pv, positive, duplicated_index, include_copy)?;
        Ok((
            g.value(l.total).item(),
            g.value(l.info_nce).item(),
            g.value(l.bce).item(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::value::{da_info_nce, info_nce, na_rank_net, rank_net};
    use super::{adjusted_labels, PROB_FLOOR};
    use crate::error::Error;

    #[test]
    fn info_nce_examples() {
        assert!((info_nce(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(info_nce(&[3.7], 0).unwrap(), 0.0);
        let expect = (1.0 + 3.0 * (-1f64).exp()).ln();
        assert!((info_nce(&[1.0, 0.0, 0.0, 0.0], 0).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.7437).abs() < 1e-4);
        assert!(info_nce(&[1.0], 1).is_err());
    }

    #[test]
    fn rank_net_examples() {
        assert_eq!(rank_net(&[0.3, -1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((rank_net(&[0.5, 0.5], &[0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(rank_net(&[0.5], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn adjusted_label_examples() {
        assert_eq!(
            adjusted_labels(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0], &[0, 1, 2]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            adjusted_labels(&[0.9, 0.3], &[3.0, 3.0], &[7, 7]).unwrap(),
            vec![3.0, 0.0]
        );
        assert_eq!(
            adjusted_labels(&[0.5, 0.5], &[2.0, 1.0], &[1, 1]).unwrap(),
            vec![2.0, 1.0]
        );
    }

    #[test]
    fn na_rank_net_reduces_to_rank_net_without_duplicates() {
        let s = [0.4, -0.2, 1.3, 0.0];
        let l = [3.0, 1.0, 2.0, 0.0];
        assert_eq!(
            na_rank_net(&s, &l, &[0, 1, 2, 3]).unwrap(),
            rank_net(&s, &l).unwrap()
        );
    }

    #[test]
    fn da_bce_limits() {
        // perfect detector
        let (_, _, bce) =
            da_info_nce(&[0.0; 5], &[0.0, 1.0, 0.0, 0.0, 0.7], 0, 1, false).unwrap();
        assert!(bce <= 4.0 * PROB_FLOOR);
        // uniform detector, k = 4
        let (_, _, bce) = da_info_nce(&[0.0; 5], &[0.5; 5], 0, 2, false).unwrap();
        assert!((bce - 4.0 * 2f64.ln()).abs() < 1e-14);
        let (_, _, bce) = da_info_nce(&[0.0; 5], &[0.5; 5], 0, 2, true).unwrap();
        assert!((bce - 5.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn da_rejects_bad_indices() {
        assert!(matches!(
            da_info_nce(&[0.0; 3], &[0.5; 3], 0, 2, false),
            Err(Error::Usage(_))
        ));
        assert!(da_info_nce(&[0.0; 3], &[0.5; 2], 0, 0, false).is_err());
    }

    #[test]
    fn rank_net_shift_invariant() {
        let s = [0.4, -0.2, 1.3];
        let l = [2.0, 1.0, 0.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 0.25).collect();
        let a = rank_net(&s, &l).unwrap();
        let b = rank_net(&shifted, &l).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
