use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use set_encoder::encoder::{
    attention_cost, encode, encode_with, AppendedOrder, EncodeOptions, InteractionMode,
    ModelConfig, ModelParams,
};
use set_encoder::tokenize::{encode_batch, EncodedBatch, Vocab};

const WORDS: [&str; 12] = [
    "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu",
];

fn vocab() -> Vocab {
    Vocab::build([WORDS.join(" ")], 1).unwrap()
}

fn config(mode: InteractionMode, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        model_dim: 8 * heads,
        ffn_dim: 16,
        vocab_size: vocab().len(),
        max_positions: 32,
        interaction_mode: mode,
        ..ModelConfig::desk(0)
    }
}

fn batch(passages: &[Vec<usize>]) -> EncodedBatch {
    let texts: Vec<(String, String)> = passages
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("p{i}"), p.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ")))
        .collect();
    encode_batch("alpha beta", &texts, &vocab()).unwrap()
}

fn passages() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..WORDS.len(), 0..6), 1..7)
}

fn mode() -> impl Strategy<Value = InteractionMode> {
    prop::sample::select(vec![InteractionMode::IntToken, InteractionMode::ClsToken, InteractionMode::None])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_follow_their_passages(ps in passages(), m in mode(), seed in any::<u64>(), layers in 1usize..3) {
        let cfg = config(m, layers, 2);
        let params = ModelParams::init(&cfg, seed).unwrap();
        let b = batch(&ps);
        let base = encode(&params, &b, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..ps.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = encode(&params, &b.permuted(&perm), &cfg).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((permuted.relevance[i] - base.relevance[p]).abs() < 1e-9);
            prop_assert!((permuted.duplicate_probs[i] - base.duplicate_probs[p]).abs() < 1e-9);
        }
    }

    #[test]
    fn appended_order_does_not_matter(ps in passages(), m in mode(), seed in any::<u64>()) {
        let cfg = config(m, 2, 2);
        let params = ModelParams::init(&cfg, seed).unwrap();
        let b = batch(&ps);
        let base = encode(&params, &b, &cfg).unwrap();
        let shuffled = encode_with(
            &params,
            &b,
            &cfg,
            &EncodeOptions { appended_order: AppendedOrder::Shuffled(seed ^ 1) },
        )
        .unwrap();
        for (x, y) in base.embeddings.iter().zip(&shuffled.embeddings) {
            for (a, c) in x.data().iter().zip(y.data()) {
                prop_assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn without_interaction_each_passage_scores_alone(ps in passages(), seed in any::<u64>()) {
        let cfg = config(InteractionMode::None, 2, 2);
        let params = ModelParams::init(&cfg, seed).unwrap();
        let together = encode(&params, &batch(&ps), &cfg).unwrap();
        for (i, p) in ps.iter().enumerate() {
            let alone = encode(&params, &batch(std::slice::from_ref(p)), &cfg).unwrap();
            prop_assert!((alone.relevance[0] - together.relevance[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn counted_attention_matches_formula(ps in passages(), m in mode()) {
        let cfg = config(m, 2, 2);
        let params = ModelParams::init(&cfg, 0).unwrap();
        let b = batch(&ps);
        let out = encode(&params, &b, &cfg).unwrap();
        let expect = attention_cost(&cfg, b.len(), b.seq_len()).unwrap().set_encoder_entries;
        prop_assert_eq!(out.stats.score_entries_per_layer, vec![expect; 2]);
    }
}

#[test]
fn identical_passages_share_scores() {
    let cfg = config(InteractionMode::IntToken, 2, 2);
    let params = ModelParams::init(&cfg, 5).unwrap();
    let out = encode(&params, &batch(&[vec![1, 2, 3], vec![4, 5], vec![1, 2, 3]]), &cfg).unwrap();
    assert!((out.relevance[0] - out.relevance[2]).abs() < 1e-12);
    assert_ne!(out.relevance[0], out.relevance[1]);
}

#[test]
fn interaction_only_at_one_layer_still_equivariant() {
    let cfg = ModelConfig {
        interaction_layer: Some(1),
        ..config(InteractionMode::IntToken, 2, 2)
    };
    let params = ModelParams::init(&cfg, 9).unwrap();
    let b = batch(&[vec![0, 1], vec![2, 3, 4], vec![5]]);
    let base = encode(&params, &b, &cfg).unwrap();
    let perm = [2, 0, 1];
    let p = encode(&params, &b.permuted(&perm), &cfg).unwrap();
    for (i, &j) in perm.iter().enumerate() {
        assert!((p.relevance[i] - base.relevance[j]).abs() < 1e-9);
    }
}
