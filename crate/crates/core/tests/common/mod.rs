#![allow(dead_code)]

pub mod oracles;

use set_encoder::encoder::{forward, BoundParams, EncodeOptions, ModelConfig, ModelParams};
use set_encoder::losses::{da_info_nce, info_nce, na_rank_net, rank_net};
use set_encoder::numerics::Graph;
use set_encoder::tokenize::{EncodedBatch, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    InfoNce,
    RankNet,
    DaInfoNce,
    NaRankNet,
}

pub const ALL_LOSSES: [LossKind; 4] = [
    LossKind::InfoNce,
    LossKind::RankNet,
    LossKind::DaInfoNce,
    LossKind::NaRankNet,
];

pub fn small_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        ffn_dim: 32,
        vocab_size: vocab.len(),
        max_positions: 32,
        ..ModelConfig::desk(0)
    }
}

/// Loss of the whole model on `batch`; also returns analytic gradients when
/// `grads` is set.
pub fn model_loss(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &EncodedBatch,
    kind: LossKind,
    labels: &[f64],
    clusters: &[usize],
    grads: bool,
) -> (f64, Option<Vec<Vec<f64>>>) {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let out = forward(&mut g, &bound, batch, config, &EncodeOptions::default()).unwrap();
    let k = batch.len();
    let loss = match kind {
        LossKind::InfoNce => info_nce(&mut g, out.relevance, 0).unwrap(),
        LossKind::RankNet => rank_net(&mut g, out.relevance, labels).unwrap(),
        LossKind::NaRankNet => na_rank_net(&mut g, out.relevance, labels, clusters).unwrap(),
        LossKind::DaInfoNce => {
            da_info_nce(&mut g, out.relevance, out.duplicate_probs, 0, k - 2, false)
                .unwrap()
                .total
        }
    };
    let value = g.value(loss).item();
    if !grads {
        return (value, None);
    }
    g.backward(loss).unwrap();
    let gs = bound
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| g.grad(*v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    (value, Some(gs))
}

/// Largest violation of `|a − n| <= max(abs_tol, rel_tol·max(|a|, |n|))`
/// over every parameter entry, as `(excess, name, index, analytic, numeric)`.
pub fn gradient_check(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &EncodedBatch,
    kind: LossKind,
    labels: &[f64],
    clusters: &[usize],
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> (usize, Vec<(String, usize, f64, f64)>) {
    let (_, analytic) = model_loss(params, config, batch, kind, labels, clusters, true);
    let analytic = analytic.unwrap();
    let names = params.names();
    let mut p = params.clone();
    let mut checked = 0;
    let mut failures = Vec::new();
    for t in 0..names.len() {
        let n = p.tensors()[t].numel();
        for i in 0..n {
            let orig = p.tensors()[t].data()[i];
            p.tensors_mut()[t].data_mut()[i] = orig + step;
            let (up, _) = model_loss(&p, config, batch, kind, labels, clusters, false);
            p.tensors_mut()[t].data_mut()[i] = orig - step;
            let (down, _) = model_loss(&p, config, batch, kind, labels, clusters, false);
            p.tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t][i];
            let tol = abs_tol.max(rel_tol * a.abs().max(numeric.abs()));
            checked += 1;
            if (a - numeric).abs() > tol {
                failures.push((names[t].clone(), i, a, numeric));
            }
        }
    }
    (checked, failures)
}
