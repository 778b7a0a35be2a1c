//! Two-stage fine-tuning: contrastive pre-training on sampled candidate sets,
//! then listwise distillation from teacher rankings.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward, BoundParams, EncodeOptions, ForwardOutput, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{da_info_nce, info_nce, na_rank_net, rank_net};
use crate::novelty::{inject_duplicate_with, RankingInstance};
use crate::numerics::{AdamWConfig, Graph, OptimizerState, Var};
use crate::tokenize::{encode_batch, EncodedBatch, Vocab};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.ckpt";
pub const VOCAB_FILE: &str = "vocab.tsv";

/// Model configuration, weights and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
}

impl ModelBundle {
    /// Fresh weights; `config.vocab_size` is overwritten with the vocabulary size.
    pub fn init(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let params = ModelParams::init(&config, seed)?;
        Ok(Self {
            config,
            params,
            vocab,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        fs::write(dir.join(VOCAB_FILE), self.vocab.to_text())?;
        self.params
            .save(BufWriter::new(File::create(dir.join(PARAMS_FILE))?))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        config.validate()?;
        let vocab = Vocab::from_text(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let params = ModelParams::load(BufReader::new(File::open(dir.join(PARAMS_FILE))?), &config)?;
        Ok(Self {
            config,
            params,
            vocab,
        })
    }

    pub fn encode(&self, instance: &RankingInstance) -> Result<EncodedBatch> {
        encode_batch(&instance.query, &instance.passages, &self.vocab)
    }

    fn run<T>(
        &self,
        instance: &RankingInstance,
        f: impl FnOnce(&mut Graph, &ForwardOutput) -> Result<T>,
    ) -> Result<T> {
        let batch = self.encode(instance)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params);
        let out = forward(&mut g, &bound, &batch, &self.config, &EncodeOptions::default())?;
        f(&mut g, &out)
    }

    /// Relevance scores for the passages of `instance`, in order.
    pub fn score(&self, instance: &RankingInstance) -> Result<Vec<f64>> {
        self.run(instance, |g, out| Ok(g.value(out.relevance).data().to_vec()))
    }

    /// Adds the gradient of `loss_of(...) * weight` to the parameters and
    /// returns the unweighted loss.
    fn accumulate(
        &mut self,
        instance: &RankingInstance,
        weight: f64,
        loss_of: impl FnOnce(&mut Graph, &ForwardOutput) -> Result<Var>,
    ) -> Result<f64> {
        let batch = self.encode(instance)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params);
        let out = forward(&mut g, &bound, &batch, &self.config, &EncodeOptions::default())?;
        let loss = loss_of(&mut g, &out)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss is {value} on query {}",
                instance.query_id
            )));
        }
        let scaled = g.scale(loss, weight);
        g.backward(scaled)?;
        self.params.accumulate_grads(&g, &bound)?;
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Loss {
    InfoNce,
    DaInfoNce,
}

impl fmt::Display for Stage1Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InfoNce => "info_nce",
            Self::DaInfoNce => "da_info_nce",
        })
    }
}

impl FromStr for Stage1Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "info_nce" => Ok(Self::InfoNce),
            "da_info_nce" => Ok(Self::DaInfoNce),
            other => Err(Error::Config(format!("unknown stage-1 loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Loss {
    RankNet,
    NaRankNet,
}

impl fmt::Display for Stage2Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RankNet => "rank_net",
            Self::NaRankNet => "na_rank_net",
        })
    }
}

impl FromStr for Stage2Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank_net" => Ok(Self::RankNet),
            "na_rank_net" => Ok(Self::NaRankNet),
            other => Err(Error::Config(format!("unknown stage-2 loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub loss: Stage1Loss,
    /// Step cap.
    pub steps: usize,
    /// Instances per optimizer step.
    pub batch_size: usize,
    /// Negatives sampled per instance.
    pub negatives: usize,
    /// Counts the injected copy in both loss terms.
    pub include_copy: bool,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Held-out duplicate BCE below which training may stop early.
    pub bce_threshold: f64,
    /// Steps the held-out BCE must stay below the threshold before stopping.
    pub patience: usize,
    /// Steps between held-out evaluations.
    pub eval_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            loss: Stage1Loss::InfoNce,
            steps: 500,
            batch_size: 8,
            negatives: 7,
            include_copy: false,
            optimizer: AdamWConfig::default(),
            seed: 0,
            bce_threshold: 0.05,
            patience: 100,
            eval_every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub loss: Stage2Loss,
    pub epochs: usize,
    /// Candidates per query taken from the first-stage run.
    pub depth: usize,
    /// Queries per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            loss: Stage2Loss::RankNet,
            epochs: 3,
            depth: 20,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per optimizer step.
    pub losses: Vec<f64>,
    /// `(step, mean held-out duplicate BCE)` pairs.
    pub heldout_bce: Vec<(usize, f64)>,
    pub steps: usize,
    /// First evaluated step with held-out BCE below the threshold.
    pub first_below_threshold: Option<usize>,
    pub stopped_early: bool,
}

/// Draws the positive of `pool` and `negatives` passages outside its cluster,
/// in random order.
pub fn sample_stage1<R: Rng + ?Sized>(
    pool: &RankingInstance,
    negatives: usize,
    rng: &mut R,
) -> Result<RankingInstance> {
    let pos = pool
        .positive_index
        .ok_or_else(|| Error::Usage(format!("query {} has no positive", pool.query_id)))?;
    let cluster = pool.cluster_ids.get(pos).copied();
    let candidates: Vec<usize> = (0..pool.len())
        .filter(|&i| i != pos && (cluster.is_none() || pool.cluster_ids.get(i).copied() != cluster))
        .collect();
    if candidates.len() < negatives {
        return Err(Error::Data(format!(
            "query {} has {} negatives, {negatives} requested",
            pool.query_id,
            candidates.len()
        )));
    }
    let mut chosen: Vec<usize> = candidates.choose_multiple(rng, negatives).copied().collect();
    chosen.push(pos);
    chosen.shuffle(rng);
    let pick = |v: &Vec<f64>| -> Vec<f64> { chosen.iter().filter_map(|&i| v.get(i).copied()).collect() };
    Ok(RankingInstance {
        query_id: pool.query_id.clone(),
        query: pool.query.clone(),
        passages: chosen.iter().map(|&i| pool.passages[i].clone()).collect(),
        labels: pick(&pool.labels),
        positive_index: chosen.iter().position(|&i| i == pos),
        cluster_ids: chosen.iter().map(|&i| pool.cluster_ids.get(i).copied().unwrap_or(i)).collect(),
        duplicated_index: None,
    })
}

/// Fixed duplicate-injected instances for monitoring duplicate detection.
pub fn duplicate_probe_set(
    pools: &[RankingInstance],
    negatives: usize,
    seed: u64,
) -> Result<Vec<RankingInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pools
        .iter()
        .map(|p| inject_duplicate_with(&sample_stage1(p, negatives, &mut rng)?, &mut rng))
        .collect()
}

/// Mean over instances of the duplicate BCE (summed over the original
/// passages, copy excluded).
pub fn mean_duplicate_bce(bundle: &ModelBundle, probes: &[RankingInstance]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Usage("no held-out instances".into()));
    }
    let mut total = 0.0;
    for inst in probes {
        let (pos, dup) = match (inst.positive_index, inst.duplicated_index) {
            (Some(p), Some(d)) => (p, d),
            _ => return Err(Error::Usage("probe instances need positive and duplicate".into())),
        };
        total += bundle.run(inst, |g, out| {
            let l = da_info_nce(g, out.relevance, out.duplicate_probs, pos, dup, false)?;
            Ok(g.value(l.bce).item())
        })?;
    }
    Ok(total / probes.len() as f64)
}

/// Stage 1: InfoNCE or duplicate-aware InfoNCE over sampled candidate sets.
///
/// For the duplicate-aware loss the held-out probes (built from `heldout`)
/// are evaluated every `eval_every` steps; training stops once the BCE has
/// stayed below `bce_threshold` for `patience` steps.
pub fn train_stage1(
    bundle: &mut ModelBundle,
    train: &[RankingInstance],
    heldout: &[RankingInstance],
    cfg: &Stage1Config,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Usage("stage 1 needs training queries".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let duplicate_aware = cfg.loss == Stage1Loss::DaInfoNce;
    let probes = if duplicate_aware && !heldout.is_empty() {
        duplicate_probe_set(heldout, cfg.negatives, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?
    } else {
        Vec::new()
    };
    let mut opt = OptimizerState::new(cfg.optimizer, bundle.params.tensors());
    let mut log = TrainLog::default();
    let mut below_since: Option<usize> = None;
    let weight = 1.0 / cfg.batch_size as f64;

    for step in 1..=cfg.steps {
        bundle.params.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let pool = &train[rng.gen_range(0..train.len())];
            let mut inst = sample_stage1(pool, cfg.negatives, &mut rng)?;
            if duplicate_aware {
                inst = inject_duplicate_with(&inst, &mut rng)?;
            }
            let pos = inst.positive_index.unwrap_or(0);
            let dup = inst.duplicated_index;
            let include_copy = cfg.include_copy;
            total += bundle.accumulate(&inst, weight, |g, out| match dup {
                Some(d) => Ok(da_info_nce(g, out.relevance, out.duplicate_probs, pos, d, include_copy)?.total),
                None => info_nce(g, out.relevance, pos),
            })?;
        }
        opt.step(&mut bundle.params.tensors_mut())?;
        log.losses.push(total * weight);
        log.steps = step;

        if !probes.is_empty() && (step % cfg.eval_every.max(1) == 0 || step == cfg.steps) {
            let bce = mean_duplicate_bce(bundle, &probes)?;
            log.heldout_bce.push((step, bce));
            if bce < cfg.bce_threshold {
                log.first_below_threshold.get_or_insert(step);
                let since = *below_since.get_or_insert(step);
                if step - since >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            } else {
                below_since = None;
            }
        }
    }
    bundle.params.zero_grad();
    Ok(log)
}

fn listwise_loss(g: &mut Graph, scores: Var, inst: &RankingInstance, loss: Stage2Loss) -> Result<Var> {
    match loss {
        Stage2Loss::RankNet => rank_net(g, scores, &inst.labels),
        Stage2Loss::NaRankNet => na_rank_net(g, scores, &inst.labels, &inst.cluster_ids),
    }
}

/// Mean listwise loss of the model over `instances`.
pub fn mean_listwise_loss(bundle: &ModelBundle, instances: &[RankingInstance], loss: Stage2Loss) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Usage("no instances".into()));
    }
    let mut total = 0.0;
    for inst in instances {
        total += bundle.run(inst, |g, out| {
            let l = listwise_loss(g, out.relevance, inst, loss)?;
            Ok(g.value(l).item())
        })?;
    }
    Ok(total / instances.len() as f64)
}

/// Stage 2: RankNet or novelty-aware RankNet over whole candidate lists.
pub fn train_stage2(bundle: &mut ModelBundle, train: &[RankingInstance], cfg: &Stage2Config) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Usage("stage 2 needs training queries".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let instances: Vec<RankingInstance> = train
        .iter()
        .map(|inst| truncate(inst, cfg.depth))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, bundle.params.tensors());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..instances.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            bundle.params.zero_grad();
            let weight = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            for &i in chunk {
                let inst = &instances[i];
                total += bundle.accumulate(inst, weight, |g, out| listwise_loss(g, out.relevance, inst, cfg.loss))?;
            }
            opt.step(&mut bundle.params.tensors_mut())?;
            log.losses.push(total * weight);
            log.steps += 1;
        }
    }
    bundle.params.zero_grad();
    Ok(log)
}

fn truncate(inst: &RankingInstance, depth: usize) -> RankingInstance {
    let n = inst.len().min(depth);
    let mut out = inst.clone();
    out.passages.truncate(n);
    out.labels.truncate(n);
    out.cluster_ids.truncate(n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{generate_synthetic, SyntheticConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_positions: 32,
            ..ModelConfig::desk(0)
        }
    }

    fn setup() -> (ModelBundle, Vec<RankingInstance>) {
        let data = generate_synthetic(&SyntheticConfig {
            num_queries: 4,
            passages_per_query: 12,
            vocab_size: 200,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let bundle = ModelBundle::init(tiny_config(), data.vocab().unwrap(), 3).unwrap();
        (bundle, data.stage1_pools().unwrap())
    }

    #[test]
    fn zero_steps_keep_init() {
        let (mut b, pools) = setup();
        let before = b.params.clone();
        let log = train_stage1(&mut b, &pools, &pools, &Stage1Config { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(log.steps, 0);
        assert_eq!(b.params, before);
        train_stage2(&mut b, &pools, &Stage2Config { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(b.params, before);
    }

    #[test]
    fn sampled_instance_excludes_cluster_mates() {
        let (_, pools) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in &pools {
            let s = sample_stage1(p, 7, &mut rng).unwrap();
            assert_eq!(s.len(), 8);
            let pos = s.positive_index.unwrap();
            let c = s.cluster_ids[pos];
            assert_eq!(s.cluster_ids.iter().filter(|&&x| x == c).count(), 1);
            assert_eq!(s.labels[pos], 2.0);
        }
        assert!(sample_stage1(&pools[0], 50, &mut rng).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let (b, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(ModelBundle::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn loss_names_parse() {
        assert_eq!("da_info_nce".parse::<Stage1Loss>().unwrap(), Stage1Loss::DaInfoNce);
        assert_eq!(Stage2Loss::NaRankNet.to_string(), "na_rank_net");
        assert!("ranknet".parse::<Stage2Loss>().is_err());
    }
}
