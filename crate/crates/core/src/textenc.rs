//! Tokenization, skip-gram word embeddings and fixed-length sequence encoding.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::container::{Container, NamedTensor, EMBEDDING_MAGIC};
use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::ingest::select_top_tweets;

pub const EMBEDDING_DIM: usize = 128;
pub const OOV_TOKEN: &str = "<oov>";
/// Joins the top tweets of an article. `<` is punctuation to the tokenizer,
/// so this token can never come out of [`tokenize`].
pub const TWEET_SEPARATOR: &str = "<sep>";
pub const TOP_TWEETS: usize = 5;

fn is_word_grapheme(g: &str) -> bool {
    g.chars().next().is_some_and(|c| c.is_alphanumeric() || c == '_')
}

/// Lowercases and splits on whitespace and punctuation. Hashtags, mentions
/// and URLs stay whole; every other non-word grapheme (punctuation, symbols,
/// emoji sequences) becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.") {
            let url = lower.trim_end_matches(|c: char| ",.!?;:)".contains(c));
            let trailing = &lower[url.len()..];
            out.push(url.to_string());
            out.extend(trailing.chars().map(String::from));
            continue;
        }
        let graphemes: Vec<&str> = lower.graphemes(true).collect();
        let mut word = String::new();
        let mut i = 0;
        while i < graphemes.len() {
            let g = graphemes[i];
            let next_is_word = graphemes.get(i + 1).is_some_and(|n| is_word_grapheme(n));
            if is_word_grapheme(g) {
                word.push_str(g);
            } else if (g == "#" || g == "@") && word.is_empty() && next_is_word {
                word.push_str(g);
            } else if g == "'" && !word.is_empty() && next_is_word && word.chars().last().is_some_and(char::is_alphanumeric) {
                word.push_str(g);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(g.to_string());
            }
            i += 1;
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn title_tokens(article: &Article) -> Vec<String> {
    article.title.as_deref().map(tokenize).unwrap_or_default()
}

/// Tokens of the top tweets joined by [`TWEET_SEPARATOR`].
pub fn tweet_tokens(article: &Article) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, text) in select_top_tweets(article, TOP_TWEETS)?.iter().enumerate() {
        if i > 0 {
            out.push(TWEET_SEPARATOR.to_string());
        }
        out.extend(tokenize(text));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceTag {
    Title,
    Tweet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub min_count: usize,
    pub epochs: usize,
    pub negative: usize,
    pub learning_rate: f32,
    pub min_learning_rate: f32,
    /// Frequent-word downsampling threshold; 0 disables it.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Self {
            dim: EMBEDDING_DIM,
            window: 5,
            min_count: 2,
            epochs: 10,
            negative: 5,
            learning_rate: 0.025,
            min_learning_rate: 1e-4,
            subsample: 1e-3,
            seed: 0,
        }
    }
}

/// Token → vector map. Index 0 is the out-of-vocabulary token with a zero
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    dim: usize,
    pub space: SpaceTag,
}

impl EmbeddingTable {
    pub fn from_parts(vocab: Vec<String>, vectors: Vec<f32>, dim: usize, space: SpaceTag) -> Result<Self> {
        if vocab.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(Error::Format("embedding vocab must start with the OOV token".into()));
        }
        if vectors.len() != vocab.len() * dim {
            return Err(Error::Format(format!(
                "{} vectors of dim {dim} need {} floats, got {}",
                vocab.len(),
                vocab.len() * dim,
                vectors.len()
            )));
        }
        if vectors[..dim].iter().any(|v| *v != 0.0) {
            return Err(Error::Format("OOV vector must be zero".into()));
        }
        let index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { vocab, index, vectors, dim, space })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows, OOV included.
    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.len() <= 1
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i != 0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Vector for `token`; the zero vector when out of vocabulary.
    pub fn vector(&self, token: &str) -> &[f32] {
        self.row(self.index_of(token).unwrap_or(0))
    }

    pub fn cosine(&self, a: &str, b: &str) -> f32 {
        let (x, y) = (self.vector(a), self.vector(b));
        let dot: f32 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx: f32 = x.iter().map(|v| v * v).sum::<f32>().sqrt();
        let ny: f32 = y.iter().map(|v| v * v).sum::<f32>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx * ny)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Container {
            meta: serde_json::json!({ "vocab": self.vocab, "dim": self.dim, "space_tag": self.space }),
            tensors: vec![NamedTensor::new("vectors", vec![self.vocab.len(), self.dim], self.vectors.clone())?],
        }
        .save(EMBEDDING_MAGIC, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(EMBEDDING_MAGIC, path)?;
        let vocab: Vec<String> = serde_json::from_value(c.meta["vocab"].clone())?;
        let dim: usize = serde_json::from_value(c.meta["dim"].clone())?;
        let space: SpaceTag = serde_json::from_value(c.meta["space_tag"].clone())?;
        let vectors = c.tensor("vectors")?.data.clone();
        Self::from_parts(vocab, vectors, dim, space)
    }
}

/// Skip-gram with negative sampling, single-threaded so that a fixed seed
/// reproduces the vectors bit for bit.
pub fn train_word_embeddings(
    corpus: &[Vec<String>],
    config: &Word2VecConfig,
    space: SpaceTag,
) -> Result<EmbeddingTable> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("word embedding corpus is empty"));
    }
    if config.dim == 0 || config.window == 0 {
        return Err(Error::invalid("dim and window must be positive"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for t in s {
            if t != TWEET_SEPARATOR {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= config.min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let dim = config.dim;
    let mut vocab = vec![OOV_TOKEN.to_string()];
    vocab.extend(kept.iter().map(|(t, _)| t.to_string()));
    let n_words = kept.len();
    let mut input = vec![0f32; (n_words + 1) * dim];
    if n_words == 0 {
        return EmbeddingTable::from_parts(vocab, input, dim, space);
    }

    let index: HashMap<&str, usize> = kept.iter().enumerate().map(|(i, (t, _))| (*t, i)).collect();
    let freq: Vec<usize> = kept.iter().map(|(_, c)| *c).collect();
    let total: usize = freq.iter().sum();

    // Unigram^0.75 noise distribution as a cumulative table.
    let mut cdf = Vec::with_capacity(n_words);
    let mut acc = 0.0f64;
    for &c in &freq {
        acc += (c as f64).powf(0.75);
        cdf.push(acc);
    }
    let keep_prob: Vec<f64> = freq
        .iter()
        .map(|&c| {
            if config.subsample <= 0.0 {
                1.0
            } else {
                let f = c as f64 / (config.subsample * total as f64);
                ((f.sqrt() + 1.0) / f).min(1.0)
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut syn0 = vec![0f32; n_words * dim];
    for v in syn0.iter_mut() {
        *v = (rng.random::<f32>() - 0.5) / dim as f32;
    }
    let mut syn1 = vec![0f32; n_words * dim];
    let mut grad = vec![0f32; dim];

    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.iter().filter_map(|t| index.get(t.as_str()).copied()).collect())
        .collect();
    let planned = (total * config.epochs).max(1) as f32;
    let mut processed = 0usize;
    let mut buf = Vec::new();

    for _ in 0..config.epochs {
        for sent in &sentences {
            buf.clear();
            for &w in sent {
                if keep_prob[w] >= 1.0 || rng.random::<f64>() < keep_prob[w] {
                    buf.push(w);
                }
            }
            processed += sent.len();
            let lr = (config.learning_rate * (1.0 - processed as f32 / planned)).max(config.min_learning_rate);
            for (pos, &center) in buf.iter().enumerate() {
                let shrink = rng.random_range(0..config.window);
                let span = config.window - shrink;
                let lo = pos.saturating_sub(span);
                let hi = (pos + span + 1).min(buf.len());
                for (cpos, &context) in buf.iter().enumerate().take(hi).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let l1 = context * dim;
                    for d in 0..=config.negative {
                        let (target, label) = if d == 0 {
                            (center, 1.0f32)
                        } else {
                            let r = rng.random::<f64>() * acc;
                            let t = cdf.partition_point(|&c| c <= r).min(n_words - 1);
                            if t == center {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let l2 = target * dim;
                        let dot: f32 = (0..dim).map(|k| syn0[l1 + k] * syn1[l2 + k]).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for k in 0..dim {
                            grad[k] += g * syn1[l2 + k];
                            syn1[l2 + k] += g * syn0[l1 + k];
                        }
                    }
                    for k in 0..dim {
                        syn0[l1 + k] += grad[k];
                    }
                }
            }
        }
    }
    input[dim..].copy_from_slice(&syn0);
    EmbeddingTable::from_parts(vocab, input, dim, space)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[max_len × dim]` row-major matrix; rows at or past `length` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub data: Vec<f32>,
    pub length: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl EncodedSequence {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Embedding lookup in token order, truncated to `max_len` tokens and padded
/// with zero rows.
pub fn encode_sequence(tokens: &[String], table: &EmbeddingTable, max_len: usize) -> EncodedSequence {
    let max_len = max_len.max(1);
    let dim = table.dim();
    let length = tokens.len().min(max_len);
    let mut data = vec![0f32; max_len * dim];
    for (i, t) in tokens.iter().take(length).enumerate() {
        data[i * dim..(i + 1) * dim].copy_from_slice(table.vector(t));
    }
    EncodedSequence { data, length, max_len, dim }
}

/// Padding length for a field: the 99th percentile (nearest rank) of the
/// training lengths, or the maximum when `pad_to_longest` is set.
pub fn sequence_cap(lengths: &[usize], pad_to_longest: bool) -> usize {
    if lengths.is_empty() {
        return 1;
    }
    let mut v = lengths.to_vec();
    v.sort_unstable();
    let cap = if pad_to_longest {
        *v.last().unwrap()
    } else {
        let rank = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    };
    cap.max(1)
}

/// Mean of the in-vocabulary token vectors; zero when none is known.
pub fn average_embedding(tokens: &[String], table: &EmbeddingTable) -> Vec<f32> {
    let mut acc = vec![0f32; table.dim()];
    let mut n = 0;
    for t in tokens {
        if let Some(i) = table.index_of(t) {
            for (a, v) in acc.iter_mut().zip(table.row(i)) {
                *a += v;
            }
            n += 1;
        }
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f32);
    }
    acc
}
