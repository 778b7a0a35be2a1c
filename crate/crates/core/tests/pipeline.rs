use std::collections::BTreeMap;

use set_encoder::encoder::ModelConfig;
use set_encoder::harness::formats::text_map;
use set_encoder::harness::{
    generate_synthetic, perturb, rank_change_matrix, rerank, train_stage1, train_stage2, write_run,
    Dataset, ModelBundle, PerturbMode, RunEntry, Stage1Config, Stage2Config, Stage2Loss,
    SyntheticConfig,
};
use set_encoder::novelty::jaccard;

fn data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        num_queries: 12,
        passages_per_query: 12,
        vocab_size: 200,
        passage_length: 8,
        duplicate_rate: 1.0,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn bundle(d: &Dataset, seed: u64) -> ModelBundle {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        ffn_dim: 32,
        max_positions: 32,
        ..ModelConfig::desk(0)
    };
    ModelBundle::init(cfg, d.vocab().unwrap(), seed).unwrap()
}

fn texts(d: &Dataset) -> (BTreeMap<String, String>, BTreeMap<String, String>) {
    (text_map(&d.corpus), text_map(&d.queries))
}

#[test]
fn rerank_top_one_keeps_input_order() {
    let d = data(1);
    let b = bundle(&d, 1);
    let (corpus, queries) = texts(&d);
    let out = rerank(&b, &d.run, &corpus, &queries, 1, "x").unwrap();
    let firsts: Vec<&str> = d
        .run
        .iter()
        .filter(|e| e.rank == 1)
        .map(|e| e.passage_id.as_str())
        .collect();
    assert_eq!(out.len(), firsts.len());
    for e in &out {
        assert_eq!(e.rank, 1);
        assert!(firsts.contains(&e.passage_id.as_str()));
    }
}

#[test]
fn rerank_ignores_input_order() {
    let d = data(2);
    let b = bundle(&d, 2);
    let (corpus, queries) = texts(&d);
    let base = write_run(&rerank(&b, &d.run, &corpus, &queries, 100, "x").unwrap());
    for mode in [PerturbMode::Random, PerturbMode::Ideal, PerturbMode::ReverseIdeal] {
        let shuffled = perturb(&d.run, mode, &d.qrels, 7);
        let out = write_run(&rerank(&b, &shuffled, &corpus, &queries, 100, "x").unwrap());
        assert_eq!(out, base, "{mode}");
    }
}

#[test]
fn synthetic_variants_are_near_duplicates() {
    let mut pairs = 0;
    let mut seed = 0;
    while pairs < 1000 {
        let d = generate_synthetic(&SyntheticConfig {
            num_queries: 100,
            duplicate_rate: 1.0,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let corpus = text_map(&d.corpus);
        let mut groups: BTreeMap<(String, usize), Vec<&str>> = BTreeMap::new();
        for c in &d.clusters {
            groups
                .entry((c.query_id.clone(), c.cluster_id))
                .or_default()
                .push(&corpus[&c.passage_id]);
        }
        for members in groups.values() {
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    assert!(jaccard(members[i], members[j]) > 0.5);
                    pairs += 1;
                }
            }
        }
        seed += 1;
    }
}

#[test]
fn rank_change_rows_are_distributions() {
    let d = data(3);
    let b = bundle(&d, 3);
    let (corpus, queries) = texts(&d);
    let after = rerank(&b, &d.run, &corpus, &queries, 10, "x").unwrap();
    let m = rank_change_matrix(&d.run, &after, 10).unwrap();
    for row in &m {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn train_and_rerank(seed: u64) -> Vec<RunEntry> {
    let d = data(4);
    let (train, _) = d.split(10);
    let mut b = bundle(&d, seed);
    train_stage1(
        &mut b,
        &train.stage1_pools().unwrap(),
        &[],
        &Stage1Config { steps: 5, batch_size: 2, negatives: 3, seed, ..Default::default() },
    )
    .unwrap();
    train_stage2(
        &mut b,
        &train.instances(8, true).unwrap(),
        &Stage2Config { loss: Stage2Loss::NaRankNet, epochs: 1, depth: 8, seed, ..Default::default() },
    )
    .unwrap();
    let (corpus, queries) = texts(&d);
    rerank(&b, &d.run, &corpus, &queries, 8, "x").unwrap()
}

#[test]
fn pipeline_is_deterministic() {
    assert_eq!(write_run(&train_and_rerank(5)), write_run(&train_and_rerank(5)));
}

#[test]
fn saved_bundle_scores_identically() {
    let d = data(6);
    let b = bundle(&d, 6);
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    let loaded = ModelBundle::load(dir.path()).unwrap();
    let inst = &d.instances(10, false).unwrap()[0];
    assert_eq!(b.score(inst).unwrap(), loaded.score(inst).unwrap());
}
