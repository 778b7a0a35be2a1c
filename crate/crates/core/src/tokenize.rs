//! Word-level vocabulary and the per-passage input layout
//! `[CLS] [INT] query [SEP] passage [SEP]`, with positions restarting at zero
//! for every passage.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{parse_err, Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const INT: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[INT]", "[SEP]", "[UNK]"];

/// Position of the `[INT]` token in every sequence.
pub const INT_POSITION: usize = 1;
/// Position of the `[CLS]` token in every sequence.
pub const CLS_POSITION: usize = 0;

pub const MAX_QUERY_TOKENS: usize = 32;
pub const MAX_PASSAGE_TOKENS: usize = 256;

/// Lowercased words split on every non-alphanumeric character.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Maps every word seen at least `min_count` times; ids are assigned in
    /// lexicographic token order after the reserved ids.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for w in words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Usage("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(
            counts
                .into_iter()
                .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
                .map(|(w, _)| w),
        );
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect()
    }

    /// Line-oriented `token<TAB>id`, one line per id in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.id_to_token.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err(n + 1, "expected token<TAB>id"))?;
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(n + 1, format!("bad id {id:?}")))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        for (expect, (id, tok)) in entries.iter().enumerate() {
            if *id != expect {
                return Err(Error::Data(format!("vocab ids must be dense, missing {expect}")));
            }
            if expect < RESERVED.len() && tok != RESERVED[expect] {
                return Err(Error::Data(format!(
                    "reserved id {expect} must map to {}, found {tok}",
                    RESERVED[expect]
                )));
            }
        }
        if entries.len() < RESERVED.len() {
            return Err(Error::Data("vocab is missing reserved tokens".into()));
        }
        let id_to_token: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        let token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Data("duplicate token in vocab".into()));
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }
}

/// Token ids, positions and real-token mask of one `(query, passage)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of real (non-padding) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            self.position_ids.push(self.token_ids.len());
            self.token_ids.push(PAD);
            self.mask.push(false);
        }
    }
}

pub fn encode_pair(query: &str, passage: &str, vocab: &Vocab) -> InputSequence {
    let mut q = vocab.encode_words(query);
    q.truncate(MAX_QUERY_TOKENS);
    let mut d = vocab.encode_words(passage);
    d.truncate(MAX_PASSAGE_TOKENS);
    let mut token_ids = Vec::with_capacity(q.len() + d.len() + 4);
    token_ids.push(CLS);
    token_ids.push(INT);
    token_ids.extend(q);
    token_ids.push(SEP);
    token_ids.extend(d);
    token_ids.push(SEP);
    let n = token_ids.len();
    InputSequence {
        token_ids,
        position_ids: (0..n).collect(),
        mask: vec![true; n],
    }
}

/// The `k` input sequences of one query, padded to a common length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    pub sequences: Vec<InputSequence>,
    pub int_position: usize,
    pub passage_ids: Vec<String>,
}

impl EncodedBatch {
    /// Number of sequences `k`.
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Padded sequence length `L`.
    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, InputSequence::len)
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            sequences: perm.iter().map(|&p| self.sequences[p].clone()).collect(),
            int_position: self.int_position,
            passage_ids: perm.iter().map(|&p| self.passage_ids[p].clone()).collect(),
        }
    }
}

pub fn encode_batch<S: AsRef<str>>(
    query: &str,
    passages: &[(S, S)],
    vocab: &Vocab,
) -> Result<EncodedBatch> {
    if passages.is_empty() {
        return Err(Error::Usage("a batch needs at least one passage".into()));
    }
    let mut sequences: Vec<InputSequence> = passages
        .iter()
        .map(|(_, text)| encode_pair(query, text.as_ref(), vocab))
        .collect();
    let max_len = sequences.iter().map(InputSequence::len).max().unwrap_or(0);
    for s in &mut sequences {
        s.pad_to(max_len);
    }
    Ok(EncodedBatch {
        sequences,
        int_position: INT_POSITION,
        passage_ids: passages.iter().map(|(id, _)| id.as_ref().to_string()).collect(),
    })
}
