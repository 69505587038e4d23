//! Corpus ingestion, vocabulary, embedding tables, the validation holdout and
//! padded batches.
//!
//! Corpora use a two-column format: one `token<TAB>label` per line, with a
//! blank line between sentences. Labels are bare `B`, `I` or `O`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::eval::decode_bio;
use crate::layers::DoubleEmbedding;
use crate::seed;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Label value stored in padded batch cells; never read by the loss.
pub const IGNORE_LABEL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    B,
    I,
    O,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::B, Label::I, Label::O];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Label> {
        Label::ALL.get(id).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::B => "B",
            Label::I => "I",
            Label::O => "O",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "B" => Ok(Label::B),
            "I" => Ok(Label::I),
            "O" => Ok(Label::O),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<Label>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<Label>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != labels.len() {
            return Err(Error::Config(format!(
                "sentence needs matching non-empty tokens/labels, got {} and {}",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(TaggedSentence { tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusStats {
    pub sentences: usize,
    pub aspects: usize,
    pub tokens: usize,
}

impl CorpusStats {
    pub fn of(sentences: &[TaggedSentence]) -> Self {
        CorpusStats {
            sentences: sentences.len(),
            aspects: sentences.iter().map(|s| decode_bio(&s.labels).len()).sum(),
            tokens: sentences.iter().map(TaggedSentence::len).sum(),
        }
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sentences / {} aspects / {} tokens",
            self.sentences, self.aspects, self.tokens
        )
    }
}

/// Parses two-column text. `origin` only labels error messages.
pub fn parse_corpus(text: &str, origin: &Path) -> Result<Vec<TaggedSentence>> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, labels: &mut Vec<Label>| {
        if !tokens.is_empty() {
            sentences.push(TaggedSentence {
                tokens: std::mem::take(tokens),
                labels: std::mem::take(labels),
            });
        }
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            flush(&mut tokens, &mut labels);
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 || cols[0].is_empty() {
            return Err(parse_err(format!(
                "expected `token<TAB>label`, found {} column(s): {line:?}",
                cols.len()
            )));
        }
        let label = cols[1].trim().parse::<Label>().map_err(parse_err)?;
        tokens.push(cols[0].to_string());
        labels.push(label);
    }
    flush(&mut tokens, &mut labels);
    Ok(sentences)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Vec<TaggedSentence>, CorpusStats)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sentences = parse_corpus(&text, path)?;
    let stats = CorpusStats::of(&sentences);
    log::info!("loaded {}: {stats}", path.display());
    Ok((sentences, stats))
}

/// Inverse of [`parse_corpus`].
pub fn write_corpus(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, lab) in s.tokens.iter().zip(&s.labels) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&lab.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn whitespace_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Word vectors read from a text embedding file.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingMap {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
    /// Lines dropped for having the wrong number of values.
    pub skipped: usize,
}

impl EmbeddingMap {
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn parse_embeddings(text: &str, expected_dim: usize) -> EmbeddingMap {
    let mut map = EmbeddingMap {
        dim: expected_dim,
        ..Default::default()
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        match values {
            Ok(v) if v.len() == expected_dim && v.iter().all(|x| x.is_finite()) => {
                map.vectors.insert(word.to_string(), v);
            }
            _ => map.skipped += 1,
        }
    }
    map
}

/// Reads `word v1 ... vd` lines; lines of the wrong arity are skipped and
/// counted.
pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: usize) -> Result<EmbeddingMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map = parse_embeddings(&text, expected_dim);
    if map.is_empty() {
        log::warn!("no usable {expected_dim}-dim vectors in {}", path.display());
    }
    if map.skipped > 0 {
        log::warn!("skipped {} malformed lines in {}", map.skipped, path.display());
    }
    Ok(map)
}

/// Token to id map. Id 0 is padding, id 1 the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_tokens(Vec::new())
    }
}

impl Vocab {
    /// Ids follow first appearance in the sentences.
    pub fn build(sentences: &[TaggedSentence]) -> Self {
        let mut vocab = Vocab::default();
        for s in sentences {
            for t in &s.tokens {
                vocab.insert(t);
            }
        }
        vocab
    }

    /// Vocabulary whose non-reserved entries are `tokens`, in order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut vocab = Vocab {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        for t in &tokens {
            vocab.insert(t);
        }
        vocab
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Fraction of the non-reserved vocabulary found in each embedding map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub general: f64,
    pub domain: f64,
}

/// Fills the frozen tables row by row. Tokens absent from a map get a zero
/// row. With `lowercase_fallback`, a general-map miss retries the lowercased
/// token.
pub fn build_tables(
    vocab: &Vocab,
    general: &EmbeddingMap,
    domain: &EmbeddingMap,
    lowercase_fallback: bool,
) -> Result<(DoubleEmbedding, Coverage)> {
    let n = vocab.len();
    let (gd, dd) = (general.dim, domain.dim);
    let mut g = vec![0.0; n * gd];
    let mut d = vec![0.0; n * dd];
    let (mut hits_g, mut hits_d) = (0usize, 0usize);
    for (i, tok) in vocab.entries().iter().enumerate() {
        let id = i + 2;
        let gv = general.get(tok).or_else(|| {
            lowercase_fallback
                .then(|| general.get(&tok.to_lowercase()))
                .flatten()
        });
        if let Some(v) = gv {
            g[id * gd..(id + 1) * gd].copy_from_slice(v);
            hits_g += 1;
        }
        if let Some(v) = domain.get(tok) {
            d[id * dd..(id + 1) * dd].copy_from_slice(v);
            hits_d += 1;
        }
    }
    let total = vocab.entries().len().max(1) as f64;
    let coverage = Coverage {
        general: hits_g as f64 / total,
        domain: hits_d as f64 / total,
    };
    let emb = DoubleEmbedding::new(Tensor::new(vec![n, gd], g)?, Tensor::new(vec![n, dd], d)?)?;
    Ok((emb, coverage))
}

/// Seeded holdout of exactly `n_val` sentences. Both halves keep the input
/// order.
pub fn split_validation(
    train: Vec<TaggedSentence>,
    n_val: usize,
    seed: u64,
) -> Result<(Vec<TaggedSentence>, Vec<TaggedSentence>)> {
    if n_val == 0 {
        return Ok((train, Vec::new()));
    }
    if n_val >= train.len() {
        return Err(Error::Config(format!(
            "validation holdout of {n_val} needs more than {} training sentences",
            train.len()
        )));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, &[0x5917])));
    let mut is_val = vec![false; train.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut rest, mut val) = (Vec::new(), Vec::new());
    for (s, v) in train.into_iter().zip(is_val) {
        if v {
            val.push(s);
        } else {
            rest.push(s);
        }
    }
    Ok((rest, val))
}

/// Padded id/label/mask matrices for a group of sentences, `[B × L_max]`
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub max_len: usize,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<u8>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_encoded(rows: &[(Vec<usize>, Vec<usize>)]) -> Self {
        let batch_size = rows.len();
        let max_len = rows.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
        let mut b = Batch {
            batch_size,
            max_len,
            ids: vec![PAD_ID; batch_size * max_len],
            labels: vec![IGNORE_LABEL; batch_size * max_len],
            mask: vec![0; batch_size * max_len],
            lengths: Vec::with_capacity(batch_size),
        };
        for (r, (ids, labels)) in rows.iter().enumerate() {
            let off = r * max_len;
            b.ids[off..off + ids.len()].copy_from_slice(ids);
            b.labels[off..off + labels.len()].copy_from_slice(labels);
            b.mask[off..off + ids.len()].fill(1);
            b.lengths.push(ids.len());
        }
        b
    }

    pub fn encode(sentences: &[&TaggedSentence], vocab: &Vocab) -> Self {
        let rows: Vec<_> = sentences
            .iter()
            .map(|s| {
                (
                    vocab.encode(&s.tokens),
                    s.labels.iter().map(|l| l.id()).collect(),
                )
            })
            .collect();
        Batch::from_encoded(&rows)
    }

    /// Real (unpadded) ids and labels of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[usize]) {
        let off = r * self.max_len;
        let n = self.lengths[r];
        (&self.ids[off..off + n], &self.labels[off..off + n])
    }

    pub fn mask_row(&self, r: usize) -> &[u8] {
        &self.mask[r * self.max_len..(r + 1) * self.max_len]
    }

    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Splits sentences into padded batches. `shuffle_seed = None` keeps the
/// input order.
pub fn make_batches(
    sentences: &[TaggedSentence],
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<&TaggedSentence> = sentences.iter().collect();
    if let Some(s) = shuffle_seed {
        order.shuffle(&mut seed::rng(s));
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::encode(chunk, vocab))
        .collect()
}

/// Input paths of one experiment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataPaths {
    pub train: PathBuf,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub emb_general: PathBuf,
    pub emb_domain: PathBuf,
}
