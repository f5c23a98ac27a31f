//! Word-level tokenization with a fixed reserved-id layout.
//!
//! Text is lowercased and split on whitespace; every punctuation character
//! becomes its own token. Sequences are `[CLS] tokens... [PAD]...`, truncated
//! from the end so the head of long documents survives.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const CLS_TOKEN: &str = "<cls>";
const RESERVED: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN];

pub const DEFAULT_MAX_SEQ_LEN: usize = 128;

/// Splits normalized text into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from token strings placed after the reserved ids.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for tok in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if vocab.index.contains_key(&tok) {
                return Err(Error::Data(format!("duplicate vocabulary token `{tok}`")));
            }
            vocab.index.insert(tok.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// All tokens in id order, reserved ones included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved tokens for the given ids, skipping PAD/UNK/CLS.
    pub fn detokenize(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().filter(|&&id| id > CLS_ID).filter_map(|&id| self.token(id)).collect()
    }

    /// One token per line; the first three lines are the reserved tokens.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for tok in &self.tokens {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::Data(format!("reading vocabulary: {e}")))?;
            lines.push(line);
        }
        if lines.len() < RESERVED.len() || lines[..3] != RESERVED {
            return Err(Error::Data(format!("vocabulary file must start with {PAD_TOKEN}, {UNK_TOKEN}, {CLS_TOKEN}")));
        }
        Self::from_tokens(lines.into_iter().skip(RESERVED.len()))
    }
}

/// Counts tokens over `corpus` and keeps those seen at least `min_freq`
/// times, most frequent first (ties broken lexicographically), capped so the
/// vocabulary holds at most `max_size` entries including the reserved ones.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if min_freq == 0 {
        return Err(Error::invalid("min_freq must be at least 1"));
    }
    if max_size < RESERVED.len() {
        return Err(Error::invalid(format!("max_size must be at least {}", RESERVED.len())));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(tok, n)| *n >= min_freq && !RESERVED.contains(&tok.as_str())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// A fixed-length id sequence with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<u8>,
}

impl TokenSequence {
    /// Validates the layout: `ids[0] == CLS`, mask is 1s then 0s, PAD under 0s.
    pub fn new(ids: Vec<u32>, mask: Vec<u8>) -> Result<Self> {
        if ids.is_empty() || ids.len() != mask.len() {
            return Err(Error::Shape("ids and mask must be non-empty and equal length".into()));
        }
        if ids[0] != CLS_ID || mask[0] != 1 {
            return Err(Error::invalid("sequence must start with an unmasked CLS"));
        }
        let real = mask.iter().take_while(|&&m| m == 1).count();
        if mask[real..].iter().any(|&m| m != 0) || ids[real..].iter().any(|&i| i != PAD_ID) {
            return Err(Error::invalid("mask must be a prefix of 1s over real tokens"));
        }
        Ok(TokenSequence { ids, mask })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unmasked positions, CLS included.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> Result<TokenSequence> {
    if max_seq_len < 2 {
        return Err(Error::invalid("max_seq_len must be at least 2"));
    }
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(CLS_ID);
    ids.extend(tokenize(text).iter().take(max_seq_len - 1).map(|t| vocab.id(t)));
    let real = ids.len();
    ids.resize(max_seq_len, PAD_ID);
    let mut mask = vec![1u8; real];
    mask.resize(max_seq_len, 0);
    Ok(TokenSequence { ids, mask })
}

/// A B×L batch of token ids and masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    ids: Array2<u32>,
    mask: Array2<u8>,
}

impl Batch {
    pub fn ids(&self) -> &Array2<u32> {
        &self.ids
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.ncols()
    }

    /// Row `i` as a token sequence.
    pub fn row(&self, i: usize) -> TokenSequence {
        TokenSequence { ids: self.ids.row(i).to_vec(), mask: self.mask.row(i).to_vec() }
    }

    /// Positions and ids of the unmasked tokens of row `i`.
    pub(crate) fn real_tokens(&self, i: usize) -> Vec<(usize, u32)> {
        self.ids
            .row(i)
            .iter()
            .zip(self.mask.row(i))
            .enumerate()
            .filter(|(_, (_, &m))| m == 1)
            .map(|(pos, (&id, _))| (pos, id))
            .collect()
    }
}

pub fn pad_batch(seqs: &[TokenSequence]) -> Result<Batch> {
    let first = seqs.first().ok_or(Error::EmptyBatch)?;
    let len = first.len();
    if let Some(bad) = seqs.iter().find(|s| s.len() != len) {
        return Err(Error::Shape(format!("mixed sequence lengths in batch: {len} vs {}", bad.len())));
    }
    let mut ids = Array2::zeros((seqs.len(), len));
    let mut mask = Array2::zeros((seqs.len(), len));
    for (i, s) in seqs.iter().enumerate() {
        ids.row_mut(i).iter_mut().zip(&s.ids).for_each(|(d, &v)| *d = v);
        mask.row_mut(i).iter_mut().zip(&s.mask).for_each(|(d, &v)| *d = v);
    }
    Ok(Batch { ids, mask })
}

/// Encodes and pads a list of texts in one go.
pub fn encode_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary, max_seq_len: usize) -> Result<Batch> {
    let seqs = texts.iter().map(|t| encode(t.as_ref(), vocab, max_seq_len)).collect::<Result<Vec<_>>>()?;
    pad_batch(&seqs)
}
