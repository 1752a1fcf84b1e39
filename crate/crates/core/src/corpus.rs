//! Line-oriented datasets, a whitespace vocabulary, and seeded batching.
//!
//! Each record is one line, either `label<TAB>text` or bare `text`.
//! Labels are small non-negative integers forming a contiguous 0-based set.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::transformer::PAD;

pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub text: String,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub split: Split,
}

/// Lowercased whitespace tokens.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Corpus {
    /// Parses the line format. `origin` only labels error messages.
    pub fn parse(text: &str, split: Split, origin: &str) -> Result<Self> {
        let data_err = |line: usize, msg: String| Error::Data {
            path: origin.into(),
            msg: format!("line {line}: {msg}"),
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, body) = match line.split_once('\t') {
                Some((l, body)) => match l.trim().parse::<usize>() {
                    Ok(l) => (Some(l), body),
                    Err(_) => return Err(data_err(i + 1, format!("label `{l}` is not a non-negative integer"))),
                },
                None => (None, line),
            };
            if normalize(body).is_empty() {
                return Err(data_err(i + 1, "empty text".into()));
            }
            records.push(Record {
                text: body.trim().to_string(),
                label,
            });
        }
        let corpus = Self { records, split };
        corpus.check_labels().map_err(|msg| Error::Data {
            path: origin.into(),
            msg,
        })?;
        Ok(corpus)
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, split, &path.display().to_string())
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], split: Split) -> Self {
        Self {
            records: texts
                .iter()
                .map(|t| Record {
                    text: t.as_ref().to_string(),
                    label: None,
                })
                .collect(),
            split,
        }
    }

    fn check_labels(&self) -> std::result::Result<(), String> {
        let labeled = self.records.iter().filter(|r| r.label.is_some()).count();
        if labeled == 0 {
            return Ok(());
        }
        if labeled != self.records.len() {
            return Err("mixes labeled and unlabeled records".into());
        }
        let set: BTreeSet<usize> = self.records.iter().filter_map(|r| r.label).collect();
        if set.iter().copied().ne(0..set.len()) {
            return Err(format!("labels {set:?} are not a contiguous 0-based set"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.records.first().is_some_and(|r| r.label.is_some())
    }

    pub fn num_labels(&self) -> usize {
        self.records.iter().filter_map(|r| r.label).max().map_or(0, |m| m + 1)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.text.as_str())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn encode_all(&self, vocab: &Vocab, max_seq_len: usize) -> Vec<Vec<usize>> {
        self.texts().map(|t| vocab.encode(t, max_seq_len)).collect()
    }
}

/// Token ↔ id map with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `max_size` most frequent tokens (ties lexicographic).
    pub fn build(corpus: &Corpus, max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in corpus.texts() {
            for w in normalize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w))
    }

    /// Vocabulary whose non-reserved ids follow `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut ids = HashMap::new();
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens: all, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// `[BOS] words [EOS]`, with words dropped so the total fits `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let words = normalize(text);
        let keep = words.len().min(max_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(BOS);
        ids.extend(words[..keep].iter().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    /// Surface text, skipping PAD/BOS and stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out: Vec<&str> = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS => continue,
                EOS => break,
                _ => out.push(self.token(id)),
            }
        }
        out.join(" ")
    }
}

/// Right-pads every sentence to the batch maximum.
pub fn pad_batch(batch: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let width = batch.iter().map(Vec::len).max().unwrap_or(0);
    batch
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.resize(width, PAD);
            s
        })
        .collect()
}

/// Sentence order of `epoch`: a seeded permutation, independent per epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Padded batches of one epoch; the last batch may be short.
pub fn batches(sentences: &[Vec<usize>], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<Vec<usize>>> {
    let order = epoch_order(sentences.len(), seed, epoch);
    order
        .chunks(batch_size.max(1))
        .map(|idx| pad_batch(&idx.iter().map(|&i| sentences[i].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Batch used at global step `step`, so any step is addressable without
/// replaying earlier ones.
pub fn batch_at_step(sentences: &[Vec<usize>], batch_size: usize, seed: u64, step: u64) -> Vec<Vec<usize>> {
    let bs = batch_size.max(1);
    let per_epoch = sentences.len().div_ceil(bs) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let order = epoch_order(sentences.len(), seed, epoch);
    let end = ((k + 1) * bs).min(order.len());
    pad_batch(
        &order[k * bs..end]
            .iter()
            .map(|&i| sentences[i].clone())
            .collect::<Vec<_>>(),
    )
}
