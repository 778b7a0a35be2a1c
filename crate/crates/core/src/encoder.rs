//! Transformer encoder over a set of per-passage sequences with
//! inter-passage attention.
//!
//! Each of the `k` sequences runs through a standard post-norm encoder,
//! except that in every attention layer the keys and values of sequence `i`
//! are extended with the interaction-token rows (`[INT]` by default) of all
//! other sequences. Positions restart at zero in every sequence and the
//! appended rows carry no extra offset, so the model cannot observe the order
//! of the passages: permuting the input permutes the outputs.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::{attention, Graph, Tensor, Var};
use crate::tokenize::{EncodedBatch, CLS_POSITION, INT_POSITION};

/// Which token, if any, is shared across sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    IntToken,
    ClsToken,
    None,
}

impl InteractionMode {
    /// Sequence position whose key/value rows are shared.
    pub fn shared_position(self) -> Option<usize> {
        match self {
            Self::IntToken => Some(INT_POSITION),
            Self::ClsToken => Some(CLS_POSITION),
            Self::None => None,
        }
    }
}

impl fmt::Display for InteractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::IntToken => "int_token",
            Self::ClsToken => "cls_token",
            Self::None => "none",
        })
    }
}

impl FromStr for InteractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "int_token" | "int" => Ok(Self::IntToken),
            "cls_token" | "cls" => Ok(Self::ClsToken),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown interaction mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub interaction_mode: InteractionMode,
    /// Restricts inter-passage attention to one layer; `None` means all layers.
    #[serde(default)]
    pub interaction_layer: Option<usize>,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 64, FFN 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            vocab_size,
            max_positions: 512,
            dropout_rate: 0.0,
            interaction_mode: InteractionMode::IntToken,
            interaction_layer: None,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return bad("layers, heads, model_dim and ffn_dim must be positive");
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be divisible by heads");
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive");
        }
        if self.dropout_rate != 0.0 {
            return bad("dropout is not supported; set dropout_rate to 0");
        }
        if let Some(l) = self.interaction_layer {
            if l >= self.layers {
                return bad("interaction_layer out of range");
            }
        }
        Ok(())
    }

    fn interacts_at(&self, layer: usize) -> Option<usize> {
        match self.interaction_layer {
            Some(l) if l != layer => None,
            _ => self.interaction_mode.shared_position(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "w1", "b1", "w2",
    "b2", "ln2_gamma", "ln2_beta",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// All trainable weights of the encoder and its two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_ln_gamma: Tensor,
    pub embed_ln_beta: Tensor,
    pub layers: Vec<LayerParams>,
    pub relevance_w: Tensor,
    pub relevance_b: Tensor,
    pub duplicate_w: Tensor,
    pub duplicate_b: Tensor,
}

fn weight(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(vec![rows, cols], 1.0 / (rows as f64).sqrt(), rng).with_grad()
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(vec![n]).with_grad()
}

fn ones(n: usize) -> Tensor {
    Tensor::filled(vec![n], 1.0).with_grad()
}

impl ModelParams {
    /// Weights ~ uniform(±1/√fan_in); biases 0; LayerNorm scale 1, offset 0.
    /// Embedding tables use fan_in = model_dim.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let f = config.ffn_dim;
        let emb_bound = 1.0 / (d as f64).sqrt();
        let token_embedding =
            Tensor::uniform(vec![config.vocab_size, d], emb_bound, &mut rng).with_grad();
        let position_embedding =
            Tensor::uniform(vec![config.max_positions, d], emb_bound, &mut rng).with_grad();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: weight(d, d, &mut rng),
                bq: zeros(d),
                wk: weight(d, d, &mut rng),
                bk: zeros(d),
                wv: weight(d, d, &mut rng),
                bv: zeros(d),
                wo: weight(d, d, &mut rng),
                bo: zeros(d),
                ln1_gamma: ones(d),
                ln1_beta: zeros(d),
                w1: weight(d, f, &mut rng),
                b1: zeros(f),
                w2: weight(f, d, &mut rng),
                b2: zeros(d),
                ln2_gamma: ones(d),
                ln2_beta: zeros(d),
            })
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            embed_ln_gamma: ones(d),
            embed_ln_beta: zeros(d),
            layers,
            relevance_w: weight(d, 1, &mut rng),
            relevance_b: zeros(1),
            duplicate_w: weight(d, 1, &mut rng),
            duplicate_b: zeros(1),
        })
    }

    /// Every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.embed_ln_gamma,
            &self.embed_ln_beta,
        ];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.extend([
            &self.relevance_w,
            &self.relevance_b,
            &self.duplicate_w,
            &self.duplicate_b,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_ln_gamma,
            &mut self.embed_ln_beta,
        ];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.extend([
            &mut self.relevance_w,
            &mut self.relevance_b,
            &mut self.duplicate_w,
            &mut self.duplicate_b,
        ]);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = [
            "token_embedding",
            "position_embedding",
            "embed_ln_gamma",
            "embed_ln_beta",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..self.layers.len() {
            v.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
        }
        v.extend(
            ["relevance_w", "relevance_b", "duplicate_w", "duplicate_b"]
                .iter()
                .map(|s| s.to_string()),
        );
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let records: Vec<(String, &Tensor)> = self.names().into_iter().zip(self.tensors()).collect();
        write_checkpoint(w, &records)
    }

    /// Loads a checkpoint, checking record names and shapes against `config`.
    pub fn load<R: Read>(r: R, config: &ModelConfig) -> Result<Self> {
        let records = read_checkpoint(r)?;
        let mut params = Self::init(config, 0)?;
        let names = params.names();
        if records.len() != names.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                names.len()
            )));
        }
        for ((slot, name), (rec_name, t)) in params.tensors_mut().into_iter().zip(&names).zip(records)
        {
            if &rec_name != name {
                return Err(Error::Data(format!("expected tensor {name}, found {rec_name}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "tensor {name}: shape {:?} does not match config {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.with_grad();
        }
        Ok(params)
    }

    /// Adds the leaf gradients recorded in `g` for `bound` into each tensor.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (t, v) in self.tensors_mut().into_iter().zip(&bound.vars) {
            match g.grad(*v) {
                Some(grad) => t.accumulate_grad(grad)?,
                // Parameters the loss does not reach get a zero gradient.
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }
}

/// Graph leaves for a [`ModelParams`], in checkpoint order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    layers: usize,
}

struct BoundLayer<'a>(&'a [Var]);

impl BoundLayer<'_> {
    fn get(&self, field: usize) -> Var {
        self.0[field]
    }
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ModelParams) -> Self {
        let vars = params.tensors().into_iter().map(|t| g.leaf(t)).collect();
        Self {
            vars,
            layers: params.layers.len(),
        }
    }

    fn layer(&self, i: usize) -> BoundLayer<'_> {
        let start = 4 + i * LAYER_FIELDS.len();
        BoundLayer(&self.vars[start..start + LAYER_FIELDS.len()])
    }

    fn head(&self, i: usize) -> Var {
        self.vars[4 + self.layers * LAYER_FIELDS.len() + i]
    }
}

/// Order in which the foreign interaction rows are appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AppendedOrder {
    /// Storage order of the sequences, skipping the sequence itself.
    #[default]
    Storage,
    /// An independent random order per layer, head and sequence.
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions {
    pub appended_order: AppendedOrder,
}

/// Attention score-matrix entries counted during a forward pass, for a
/// single head, summed over sequences, per layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionStats {
    pub score_entries_per_layer: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final hidden states, `[k * L, model_dim]`, sequence-major.
    pub hidden: Var,
    /// Final `[CLS]` embeddings, `[k, model_dim]`.
    pub cls: Var,
    /// Relevance scores, `[k]`.
    pub relevance: Var,
    /// Duplicate-head logits, `[k]`.
    pub duplicate_logits: Var,
    /// Duplicate probabilities, `[k]`.
    pub duplicate_probs: Var,
    pub stats: AttentionStats,
}

/// Appends to each sequence's keys/values the rows at `shared_position` of
/// every other sequence. `order[i]`, when given, lists the foreign sequence
/// indices in the order they are appended for sequence `i`.
pub fn augment_keys_values(
    g: &mut Graph,
    keys: &[Var],
    values: &[Var],
    shared_position: usize,
    order: Option<&[Vec<usize>]>,
) -> Result<Vec<(Var, Var)>> {
    if keys.len() != values.len() || keys.is_empty() {
        return Err(Error::Shape(format!(
            "{} key and {} value matrices",
            keys.len(),
            values.len()
        )));
    }
    let shape = g.shape(keys[0]).to_vec();
    for &m in keys.iter().chain(values) {
        if g.shape(m) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "per-sequence shapes differ: {:?} vs {shape:?}",
                g.shape(m)
            )));
        }
    }
    let rows = g.value(keys[0]).dims2()?.0;
    if shared_position >= rows {
        return Err(Error::Shape(format!(
            "shared position {shared_position} outside {rows} rows"
        )));
    }
    let k = keys.len();
    let mut shared_k = Vec::with_capacity(k);
    let mut shared_v = Vec::with_capacity(k);
    for j in 0..k {
        shared_k.push(g.slice_rows(keys[j], shared_position, 1)?);
        shared_v.push(g.slice_rows(values[j], shared_position, 1)?);
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let foreign: Vec<usize> = match order {
            Some(o) => o[i].clone(),
            None => (0..k).filter(|&j| j != i).collect(),
        };
        if foreign.len() != k - 1 || foreign.contains(&i) {
            return Err(Error::Usage(format!("bad append order for sequence {i}")));
        }
        if foreign.is_empty() {
            out.push((keys[i], values[i]));
            continue;
        }
        let mut kp = vec![keys[i]];
        kp.extend(foreign.iter().map(|&j| shared_k[j]));
        let mut vp = vec![values[i]];
        vp.extend(foreign.iter().map(|&j| shared_v[j]));
        out.push((g.concat_rows(&kp)?, g.concat_rows(&vp)?));
    }
    Ok(out)
}

/// [`augment_keys_values`] on plain tensors.
pub fn augment_keys_values_tensors(
    keys: &[Tensor],
    values: &[Tensor],
    shared_position: usize,
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut g = Graph::new();
    let kv: Vec<Var> = keys.iter().map(|t| g.leaf(t)).collect();
    let vv: Vec<Var> = values.iter().map(|t| g.leaf(t)).collect();
    let aug = augment_keys_values(&mut g, &kv, &vv, shared_position, None)?;
    Ok(aug
        .into_iter()
        .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
        .collect())
}

fn check_batch(batch: &EncodedBatch, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let len = batch.seq_len();
    if len > config.max_positions {
        return Err(Error::Config(format!(
            "sequence length {len} exceeds max_positions {}",
            config.max_positions
        )));
    }
    if len <= INT_POSITION {
        return Err(Error::Usage("sequences are shorter than the special prefix".into()));
    }
    for s in &batch.sequences {
        if s.len() != len || s.mask.len() != len || s.position_ids.len() != len {
            return Err(Error::Shape("ragged batch".into()));
        }
        if let Some(&t) = s.token_ids.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Config(format!(
                "token id {t} outside vocab of {}",
                config.vocab_size
            )));
        }
    }
    Ok(())
}

/// Records the full forward pass of `batch` in `g`.
pub fn forward(
    g: &mut Graph,
    bound: &BoundParams,
    batch: &EncodedBatch,
    config: &ModelConfig,
    options: &EncodeOptions,
) -> Result<ForwardOutput> {
    check_batch(batch, config)?;
    let k = batch.len();
    let len = batch.seq_len();
    let d = config.model_dim;
    let dh = config.head_dim();

    let ids: Vec<usize> = batch.sequences.iter().flat_map(|s| s.token_ids.clone()).collect();
    let pos: Vec<usize> = batch.sequences.iter().flat_map(|s| s.position_ids.clone()).collect();
    let tok = g.gather_rows(bound.vars[0], &ids)?;
    let pe = g.gather_rows(bound.vars[1], &pos)?;
    let emb = g.add(tok, pe)?;
    let mut x = g.layer_norm(emb, bound.vars[2], bound.vars[3], config.layer_norm_eps)?;

    let mut shuffler = match options.appended_order {
        AppendedOrder::Storage => None,
        AppendedOrder::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut stats = AttentionStats::default();

    for layer in 0..config.layers {
        let p = bound.layer(layer);
        let shared = config.interacts_at(layer);
        let proj = |g: &mut Graph, w: usize, b: usize| -> Result<Var> {
            let m = g.matmul(x, p.get(w))?;
            g.add_row(m, p.get(b))
        };
        let q = proj(g, 0, 1)?;
        let kk = proj(g, 2, 3)?;
        let v = proj(g, 4, 5)?;

        let cols = len + if shared.is_some() { k - 1 } else { 0 };
        let masks: Vec<Vec<bool>> = batch
            .sequences
            .iter()
            .map(|s| {
                let mut mask = Vec::with_capacity(len * cols);
                for _ in 0..len {
                    mask.extend_from_slice(&s.mask);
                    mask.extend(std::iter::repeat_n(true, cols - len));
                }
                mask
            })
            .collect();
        let mut entries = 0u64;
        let mut head_outputs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(kk, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let mut qs = Vec::with_capacity(k);
            let mut ks = Vec::with_capacity(k);
            let mut vs = Vec::with_capacity(k);
            for i in 0..k {
                qs.push(g.slice_rows(qh, i * len, len)?);
                ks.push(g.slice_rows(kh, i * len, len)?);
                vs.push(g.slice_rows(vh, i * len, len)?);
            }
            let kv: Vec<(Var, Var)> = match shared {
                Some(position) => {
                    let order = shuffler.as_mut().map(|rng| {
                        (0..k)
                            .map(|i| {
                                let mut o: Vec<usize> = (0..k).filter(|&j| j != i).collect();
                                o.shuffle(rng);
                                o
                            })
                            .collect::<Vec<_>>()
                    });
                    augment_keys_values(g, &ks, &vs, position, order.as_deref())?
                }
                None => ks.into_iter().zip(vs).collect(),
            };
            let mut outs = Vec::with_capacity(k);
            for (i, (ka, va)) in kv.into_iter().enumerate() {
                let kv_rows = g.value(ka).dims2()?.0;
                if kv_rows != cols {
                    return Err(Error::Shape(format!("{kv_rows} key rows, expected {cols}")));
                }
                if h == 0 {
                    entries += (len * kv_rows) as u64;
                }
                outs.push(attention(g, qs[i], ka, va, &masks[i], dh)?);
            }
            head_outputs.push(g.concat_rows(&outs)?);
        }
        stats.score_entries_per_layer.push(entries);

        let attn = g.concat_cols(&head_outputs)?;
        let attn = g.matmul(attn, p.get(6))?;
        let attn = g.add_row(attn, p.get(7))?;
        let res = g.add(x, attn)?;
        let h1 = g.layer_norm(res, p.get(8), p.get(9), config.layer_norm_eps)?;
        let f = g.matmul(h1, p.get(10))?;
        let f = g.add_row(f, p.get(11))?;
        let f = g.gelu(f);
        let f = g.matmul(f, p.get(12))?;
        let f = g.add_row(f, p.get(13))?;
        let res = g.add(h1, f)?;
        x = g.layer_norm(res, p.get(14), p.get(15), config.layer_norm_eps)?;
    }
    debug_assert_eq!(g.value(x).shape(), &[k * len, d]);

    let cls_rows: Vec<usize> = (0..k).map(|i| i * len + CLS_POSITION).collect();
    let cls = g.gather_rows(x, &cls_rows)?;
    let head = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
        let s = g.matmul(cls, w)?;
        let s = g.add_row(s, b)?;
        g.reshape(s, vec![k])
    };
    let relevance = head(g, bound.head(0), bound.head(1))?;
    let duplicate_logits = head(g, bound.head(2), bound.head(3))?;
    let duplicate_probs = g.sigmoid(duplicate_logits);
    Ok(ForwardOutput {
        hidden: x,
        cls,
        relevance,
        duplicate_logits,
        duplicate_probs,
        stats,
    })
}

/// Final per-sequence embeddings (`[L, model_dim]` each) and attention stats.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub embeddings: Vec<Tensor>,
    pub relevance: Vec<f64>,
    pub duplicate_probs: Vec<f64>,
    pub stats: AttentionStats,
}

pub fn encode_with(
    params: &ModelParams,
    batch: &EncodedBatch,
    config: &ModelConfig,
    options: &EncodeOptions,
) -> Result<Encoded> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let out = forward(&mut g, &bound, batch, config, options)?;
    let len = batch.seq_len();
    let d = config.model_dim;
    let hidden = g.value(out.hidden).data();
    let embeddings = (0..batch.len())
        .map(|i| Tensor::new(vec![len, d], hidden[i * len * d..(i + 1) * len * d].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        embeddings,
        relevance: g.value(out.relevance).data().to_vec(),
        duplicate_probs: g.value(out.duplicate_probs).data().to_vec(),
        stats: out.stats,
    })
}

pub fn encode(params: &ModelParams, batch: &EncodedBatch, config: &ModelConfig) -> Result<Encoded> {
    encode_with(params, batch, config, &EncodeOptions::default())
}

/// One relevance score per passage.
pub fn score_relevance(
    params: &ModelParams,
    batch: &EncodedBatch,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    Ok(encode(params, batch, config)?.relevance)
}

/// One duplicate probability per passage, in (0, 1).
pub fn score_duplicates(
    params: &ModelParams,
    batch: &EncodedBatch,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    Ok(encode(params, batch, config)?.duplicate_probs)
}

/// Per-layer, per-head attention score-matrix entry counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    /// `k·L·(L+k−1)` with inter-passage attention, `k·L²` without.
    pub set_encoder_entries: u64,
    /// `(k·L)²` for one concatenated sequence.
    pub concat_entries: u64,
}

impl AttentionCost {
    pub fn ratio(&self) -> f64 {
        self.concat_entries as f64 / self.set_encoder_entries as f64
    }
}

pub fn attention_cost(config: &ModelConfig, k: usize, len: usize) -> Result<AttentionCost> {
    if k == 0 || len == 0 {
        return Err(Error::Usage("k and L must be at least 1".into()));
    }
    let (k, len) = (k as u64, len as u64);
    let appended = if config.interaction_mode.shared_position().is_some() {
        k - 1
    } else {
        0
    };
    Ok(AttentionCost {
        set_encoder_entries: k * len * (len + appended),
        concat_entries: (k * len) * (k * len),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{encode_batch, Vocab};

    fn tiny(mode: InteractionMode, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            vocab_size: vocab,
            max_positions: 32,
            interaction_mode: mode,
            ..ModelConfig::desk(vocab)
        }
    }

    fn setup(passages: &[(&str, &str)]) -> (Vocab, EncodedBatch) {
        let vocab = Vocab::build(["a b c d e f g h query words"], 1).unwrap();
        let batch = encode_batch("query words", passages, &vocab).unwrap();
        (vocab, batch)
    }

    #[test]
    fn augment_single_sequence_is_identity() {
        let k = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = augment_keys_values_tensors(&[k.clone()], &[k.clone()], 1).unwrap();
        assert_eq!(out[0].0, k);
    }

    #[test]
    fn augment_appends_k_minus_one_rows() {
        let mk = |s: f64| Tensor::matrix(4, 2, (0..8).map(|x| x as f64 + s).collect()).unwrap();
        let ks = [mk(0.0), mk(100.0), mk(200.0)];
        let out = augment_keys_values_tensors(&ks, &ks, 1).unwrap();
        for (i, (ka, va)) in out.iter().enumerate() {
            assert_eq!(ka.shape(), &[6, 2]);
            assert_eq!(ka, va);
            assert_eq!(&ka.data()[..8], ks[i].data());
        }
        // sequence 0 sees row 1 of sequences 1 and 2
        assert_eq!(&out[0].0.data()[8..], &[102.0, 103.0, 202.0, 203.0]);
    }

    #[test]
    fn augment_rejects_mismatched_shapes() {
        let a = Tensor::zeros(vec![3, 2]);
        let b = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            augment_keys_values_tensors(&[a.clone(), b], &[a.clone(), a.clone()], 1),
            Err(Error::Shape(_))
        ));
        assert!(augment_keys_values_tensors(&[a.clone()], &[a], 5).is_err());
    }

    #[test]
    fn none_mode_matches_independent_passes() {
        let (v, batch) = setup(&[("1", "a b c"), ("2", "d e")]);
        let cfg = tiny(InteractionMode::None, v.len());
        let params = ModelParams::init(&cfg, 3).unwrap();
        let joint = score_relevance(&params, &batch, &cfg).unwrap();
        // A sequence alone, with the same padding, must score identically.
        for i in 0..2 {
            let alone = batch.permuted(&[i]);
            let s = score_relevance(&params, &alone, &cfg).unwrap();
            assert_eq!(s[0].to_bits(), joint[i].to_bits());
        }
    }

    #[test]
    fn identical_passages_identical_outputs() {
        let (v, batch) = setup(&[("1", "a b c"), ("2", "a b c")]);
        let cfg = tiny(InteractionMode::IntToken, v.len());
        let params = ModelParams::init(&cfg, 5).unwrap();
        let enc = encode(&params, &batch, &cfg).unwrap();
        assert_eq!(enc.embeddings[0], enc.embeddings[1]);
        assert_eq!(enc.relevance[0], enc.relevance[1]);
        assert_eq!(enc.duplicate_probs[0], enc.duplicate_probs[1]);
        assert!(enc.duplicate_probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn interaction_changes_scores() {
        let (v, batch) = setup(&[("1", "a b c"), ("2", "d e f g")]);
        let cfg = tiny(InteractionMode::IntToken, v.len());
        let params = ModelParams::init(&cfg, 5).unwrap();
        let joint = score_relevance(&params, &batch, &cfg).unwrap();
        let alone = score_relevance(&params, &batch.permuted(&[0]), &cfg).unwrap();
        assert!((joint[0] - alone[0]).abs() > 1e-9);
    }

    #[test]
    fn overlong_sequence_is_config_error() {
        let (v, batch) = setup(&[("1", "a b c d e f g h a b c d e f g h a b c d e f g h a b c d e f g h")]);
        let cfg = tiny(InteractionMode::IntToken, v.len());
        let params = ModelParams::init(&cfg, 1).unwrap();
        assert!(matches!(
            score_relevance(&params, &batch, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cost_formulas() {
        let cfg = ModelConfig::desk(10);
        let c = attention_cost(&cfg, 1, 7).unwrap();
        assert_eq!((c.set_encoder_entries, c.concat_entries), (49, 49));
        let c = attention_cost(&cfg, 100, 289).unwrap();
        assert_eq!(c.set_encoder_entries, 100 * 289 * 388);
        assert_eq!(c.concat_entries, 28_900 * 28_900);
        assert!(attention_cost(&cfg, 0, 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny(InteractionMode::IntToken, 12);
        let params = ModelParams::init(&cfg, 9).unwrap();
        let mut buf = Vec::new();
        params.save(&mut buf).unwrap();
        let back = ModelParams::load(buf.as_slice(), &cfg).unwrap();
        assert_eq!(back, params);
        let other = ModelConfig {
            model_dim: 4,
            ..cfg.clone()
        };
        assert!(ModelParams::load(buf.as_slice(), &other).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [InteractionMode::IntToken, InteractionMode::ClsToken, InteractionMode::None] {
            assert_eq!(m.to_string().parse::<InteractionMode>().unwrap(), m);
        }
        assert!("bogus".parse::<InteractionMode>().is_err());
    }
}
