//! Deterministic synthetic corpus generation, token-file ingestion, and
//! padding-free sequence packing.
//!
//! The synthetic corpus is a seeded first-order Markov chain over the
//! content ids 1..V (id 0 is reserved as the end-of-sequence marker), with
//! document lengths drawn geometric with mean 96. Documents are split into
//! train and eval streams at the document level, so the splits never share a
//! document.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

pub const EOS_ID: usize = 0;
const MEAN_DOC_LEN: f64 = 96.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus file {path} is empty")]
    EmptyFile { path: String },
    #[error("corpus file {path} line {line}: {detail}")]
    BadToken { path: String, line: usize, detail: String },
    #[error("token {token} exceeds vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    #[default]
    MarkovSynthetic,
    TokenFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    /// Token file to ingest; required for (and only valid with) the
    /// token_file kind.
    pub path: Option<PathBuf>,
    pub vocab_size: usize,
    pub seed: u64,
    /// Higher temperature flattens the transition rows toward uniform.
    pub transition_temperature: f64,
    /// Fraction of documents held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            kind: CorpusKind::MarkovSynthetic,
            path: None,
            vocab_size: 256,
            seed: 0,
            transition_temperature: 0.4,
            eval_fraction: 0.05,
        }
    }
}

impl CorpusSpec {
    pub fn token_file(path: PathBuf) -> Self {
        Self { kind: CorpusKind::TokenFile, path: Some(path), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.vocab_size < 4 {
            return Err(CorpusError::InvalidSpec(format!(
                "vocab_size {} too small; need eos plus content ids",
                self.vocab_size
            )));
        }
        if !(self.transition_temperature > 0.0) {
            return Err(CorpusError::InvalidSpec("transition_temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(CorpusError::InvalidSpec("eval_fraction must lie in [0, 1)".into()));
        }
        match (self.kind, &self.path) {
            (CorpusKind::TokenFile, None) => {
                Err(CorpusError::InvalidSpec("token_file corpus needs a path".into()))
            }
            (CorpusKind::MarkovSynthetic, Some(_)) => {
                Err(CorpusError::InvalidSpec("path is only valid for the token_file kind".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Which side of the document-level split a stream draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Infinite synthetic document stream (or finite file-backed stream).
pub struct DocumentStream {
    inner: StreamInner,
    split: Split,
    eval_fraction: f64,
    split_rng: ChaCha8Rng,
}

enum StreamInner {
    Markov(MarkovChain),
    File { docs: std::vec::IntoIter<Vec<usize>> },
}

struct MarkovChain {
    /// Per-state cumulative transition distribution over content ids.
    cdf: Vec<f64>,
    states: usize,
    rng: ChaCha8Rng,
}

impl MarkovChain {
    fn new(vocab: usize, temperature: f64, seed: u64) -> Self {
        let states = vocab - 1;
        // Row logits are standard normal; the temperature divides them before
        // the softmax, so large temperature approaches uniform rows.
        let mut logit_rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut cdf = vec![0.0f64; states * states];
        for s in 0..states {
            let row = &mut cdf[s * states..(s + 1) * states];
            let mut mx = f64::NEG_INFINITY;
            for v in row.iter_mut() {
                *v = normal.sample(&mut logit_rng) / temperature;
                mx = mx.max(*v);
            }
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v / z;
                *v = acc;
            }
        }
        Self { cdf, states, rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)) }
    }

    fn sample_doc(&mut self) -> Vec<usize> {
        // Geometric length with mean MEAN_DOC_LEN via inverse cdf.
        let u: f64 = self.rng.random();
        let p = 1.0 / MEAN_DOC_LEN;
        let len = ((1.0 - u).ln() / (1.0 - p).ln()).ceil().max(1.0) as usize;
        let mut doc = Vec::with_capacity(len);
        let mut state = self.rng.random_range(0..self.states);
        doc.push(state + 1);
        for _ in 1..len {
            let u: f64 = self.rng.random();
            let row = &self.cdf[state * self.states..(state + 1) * self.states];
            state = row.partition_point(|&c| c < u).min(self.states - 1);
            doc.push(state + 1);
        }
        doc
    }
}

impl DocumentStream {
    /// Opens the stream for one side of the split. The document sequence and
    /// the split assignment both derive from the corpus seed, so the same
    /// spec always produces identical streams and the two splits are
    /// disjoint at the document level.
    pub fn open(spec: &CorpusSpec, split: Split) -> Result<Self, CorpusError> {
        spec.validate()?;
        let inner = match spec.kind {
            CorpusKind::MarkovSynthetic => {
                StreamInner::Markov(MarkovChain::new(spec.vocab_size, spec.transition_temperature, spec.seed))
            }
            CorpusKind::TokenFile => {
                let path = spec.path.as_ref().expect("validated above");
                let docs = read_token_file(path, spec.vocab_size)?;
                let docs = shuffle_documents(docs, spec.seed);
                StreamInner::File { docs: docs.into_iter() }
            }
        };
        Ok(Self {
            inner,
            split,
            eval_fraction: spec.eval_fraction,
            split_rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2)),
        })
    }

    /// Next document for this split, or `None` when a finite stream is
    /// exhausted.
    pub fn next_doc(&mut self) -> Option<Vec<usize>> {
        loop {
            let doc = match &mut self.inner {
                StreamInner::Markov(chain) => Some(chain.sample_doc()),
                StreamInner::File { docs } => docs.next(),
            }?;
            let is_eval = self.split_rng.random::<f64>() < self.eval_fraction;
            let wanted = matches!(self.split, Split::Eval) == is_eval;
            if wanted {
                return Some(doc);
            }
        }
    }
}

/// Newline-delimited unsigned integers, documents split on the eos id.
fn read_token_file(path: &PathBuf, vocab: usize) -> Result<Vec<Vec<usize>>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut docs = Vec::new();
    let mut current = Vec::new();
    let mut saw_any = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        saw_any = true;
        let token: usize = line.parse().map_err(|e| CorpusError::BadToken {
            path: path.display().to_string(),
            line: lineno + 1,
            detail: format!("{e}"),
        })?;
        if token >= vocab {
            return Err(CorpusError::TokenOutOfRange { token, vocab });
        }
        if token == EOS_ID {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(token);
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    if !saw_any {
        return Err(CorpusError::EmptyFile { path: path.display().to_string() });
    }
    Ok(docs)
}

/// Deterministic Fisher-Yates shuffle of the document order.
pub fn shuffle_documents(mut docs: Vec<Vec<usize>>, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    for i in (1..docs.len()).rev() {
        let j = rng.random_range(0..=i);
        docs.swap(i, j);
    }
    docs
}

/// One packed training block: `tokens[r]` and `targets[r]` are consecutive
/// windows of the packed stream, shifted by one. No padding anywhere; every
/// slot is corpus content or the eos separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub context: usize,
}

/// Packs a document stream into [b, t] blocks: documents are concatenated
/// with an eos token after each, the stream is chunked into rows of t, and a
/// trailing partial block is dropped.
pub struct Packer {
    stream: DocumentStream,
    buffer: Vec<usize>,
    cursor: usize,
    batch: usize,
    context: usize,
}

impl Packer {
    pub fn new(stream: DocumentStream, batch: usize, context: usize) -> Self {
        Self { stream, buffer: vec![EOS_ID], cursor: 0, batch, context }
    }

    /// Next packed block, or `None` when a finite stream cannot fill one.
    pub fn next_batch(&mut self) -> Option<PackedBatch> {
        let need = self.batch * self.context + 1;
        while self.buffer.len() - self.cursor < need {
            match self.stream.next_doc() {
                Some(doc) => {
                    self.buffer.extend(doc);
                    self.buffer.push(EOS_ID);
                }
                None => return None,
            }
            // Keep the buffer from growing without bound.
            if self.cursor > 4 * need {
                self.buffer.drain(..self.cursor);
                self.cursor = 0;
            }
        }
        let start = self.cursor;
        let tokens = self.buffer[start..start + self.batch * self.context].to_vec();
        let targets = self.buffer[start + 1..start + self.batch * self.context + 1].to_vec();
        self.cursor += self.batch * self.context;
        Some(PackedBatch { tokens, targets, batch: self.batch, context: self.context })
    }
}

/// Splits a packed token stream back into documents on the eos id; the
/// oracle side of the pack round-trip.
pub fn unpack_documents(tokens: &[usize]) -> Vec<Vec<usize>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for &t in tokens {
        if t == EOS_ID {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(t);
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}
