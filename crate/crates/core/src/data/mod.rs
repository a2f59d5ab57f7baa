//! Corpus ingestion, domain-weighted sampling, byte-level tokenization, and
//! hidden-state pair capture.

mod pairs;

pub use pairs::{load_pairs, load_pairs_checked, save_pairs};

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::model::{forward, model_fingerprint, Capture, ModelError, TransformerModel};
use crate::tensor::Tensor;
use crate::util::maybe_par_map;

/// Token id conventions for the byte-level tokenizer.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const BYTE_OFFSET: u32 = 3;
/// 256 byte values plus pad/bos/eos.
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("domain {domain} not present in corpus")]
    DomainMissing { domain: String },
    #[error("domain {domain} underfull: need {requested}, have {available} (short by {})", requested - available)]
    DomainUnderfull {
        domain: String,
        requested: usize,
        available: usize,
    },
    #[error("invalid domain mix: {0}")]
    InvalidMix(String),
    #[error("invalid block ({start}, {n}) for {n_layers} layers")]
    InvalidBlock {
        start: usize,
        n: usize,
        n_layers: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("malformed pair file: {0}")]
    Malformed(String),
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("model fingerprint mismatch: dataset has {in_file}, model is {actual}")]
    FingerprintMismatch { in_file: String, actual: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub domain: String,
    #[serde(with = "text_bytes")]
    pub text: Vec<u8>,
}

mod text_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

/// A tagged document collection.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub id: String,
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn new(id: impl Into<String>, documents: Vec<Document>) -> Self {
        Corpus {
            id: id.into(),
            documents,
        }
    }

    /// Reads JSON-lines `{"domain": ..., "text": ...}`; the corpus id is the
    /// file stem.
    pub fn load_jsonl(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut documents = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if doc.domain.is_empty() {
                return Err(DataError::Parse {
                    line: i + 1,
                    reason: "empty domain tag".into(),
                });
            }
            documents.push(doc);
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".to_string());
        Ok(Corpus { id, documents })
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), DataError> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for doc in &self.documents {
            serde_json::to_writer(&mut out, doc).map_err(|e| DataError::Malformed(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-domain sampling proportions; they must sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainMix {
    pub weights: BTreeMap<String, f64>,
}

impl DomainMix {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self, DataError> {
        if weights.values().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(DataError::InvalidMix(
                "proportions must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidMix(format!(
                "proportions sum to {sum}, expected 1"
            )));
        }
        Ok(DomainMix { weights })
    }

    /// The default seven-domain pretraining mix used by the toy corpus.
    pub fn default_corpus_mix() -> Self {
        let weights = [
            ("cc", 0.361),
            ("github", 0.008),
            ("book", 0.091),
            ("stackexchange", 0.010),
            ("wiki", 0.031),
            ("arxiv", 0.007),
            ("c4", 0.492),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        DomainMix::new(weights).expect("default mix sums to 1")
    }
}

/// Per-domain document counts under largest-remainder apportionment:
/// floor every quota `n * w_i`, then hand the leftover documents to the
/// largest fractional remainders (ties broken by domain name).
pub fn largest_remainder_counts(mix: &DomainMix, n_docs: usize) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut remainders: Vec<(String, f64)> = Vec::new();
    let mut assigned = 0usize;
    for (domain, &w) in &mix.weights {
        let quota = n_docs as f64 * w;
        let base = quota.floor() as usize;
        counts.insert(domain.clone(), base);
        remainders.push((domain.clone(), quota - base as f64));
        assigned += base;
    }
    let mut leftover = n_docs - assigned;
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    for (domain, _) in remainders {
        if leftover == 0 {
            break;
        }
        *counts.get_mut(&domain).expect("domain inserted above") += 1;
        leftover -= 1;
    }
    counts
}

/// Draws `n_docs` documents according to `mix`, uniformly without
/// replacement within each domain. Counts come from largest-remainder
/// rounding; domains are processed in name order and picks are sorted by
/// original position, so the result depends only on (corpus, mix, n, seed).
pub fn sample_mix(
    corpus: &Corpus,
    mix: &DomainMix,
    n_docs: usize,
    seed: u64,
) -> Result<Corpus, DataError> {
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, doc) in corpus.documents.iter().enumerate() {
        by_domain.entry(doc.domain.as_str()).or_default().push(i);
    }
    for domain in mix.weights.keys() {
        if !by_domain.contains_key(domain.as_str()) {
            return Err(DataError::DomainMissing {
                domain: domain.clone(),
            });
        }
    }
    let counts = largest_remainder_counts(mix, n_docs);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(n_docs);
    for (domain, &count) in &counts {
        let pool = &by_domain[domain.as_str()];
        if count > pool.len() {
            return Err(DataError::DomainUnderfull {
                domain: domain.clone(),
                requested: count,
                available: pool.len(),
            });
        }
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), count)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        picks.sort_unstable();
        selected.extend(picks);
    }
    let documents = selected
        .into_iter()
        .map(|i| corpus.documents[i].clone())
        .collect();
    Ok(Corpus {
        id: format!("{}|mix[n={n_docs},seed={seed}]", corpus.id),
        documents,
    })
}

/// Byte-level tokenization: BOS followed by `byte + 3`, truncated to
/// `max_len` ids. Reversible up to the truncation.
pub fn tokenize(text: &[u8], max_len: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity((text.len() + 1).min(max_len));
    ids.push(BOS_ID);
    for &b in text {
        if ids.len() >= max_len {
            break;
        }
        ids.push(b as u32 + BYTE_OFFSET);
    }
    ids.truncate(max_len.max(1));
    ids
}

/// Inverse of [`tokenize`]; control ids (pad/bos/eos) are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id >= BYTE_OFFSET && id < BYTE_VOCAB as u32)
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

/// Recorded training pairs for one pruned block: for each document, the
/// hidden states entering the block and the states leaving it.
#[derive(Debug, Clone)]
pub struct HiddenPairDataset {
    pub d_model: usize,
    pub block: (usize, usize),
    pub pairs: Vec<(Tensor, Tensor)>,
    pub source_corpus: String,
    pub model_fingerprint: String,
}

/// Runs the model over up to `limit` documents, recording the taps at the
/// block's entry and exit boundaries. Documents are processed (possibly in
/// parallel) and stored in corpus order.
pub fn capture_pairs(
    model: &TransformerModel,
    corpus: &Corpus,
    block: (usize, usize),
    limit: usize,
    threads: usize,
) -> Result<HiddenPairDataset, DataError> {
    let (start, n) = block;
    if n == 0 || start + n > model.n_layers() {
        return Err(DataError::InvalidBlock {
            start,
            n,
            n_layers: model.n_layers(),
        });
    }
    if limit == 0 {
        log::warn!("capture_pairs called with limit=0; returning an empty dataset");
    }
    let fingerprint = model_fingerprint(model)?;
    let docs: Vec<&Document> = corpus.documents.iter().take(limit).collect();
    let capture = Capture::boundaries([start, start + n]);
    let results = maybe_par_map(&docs, threads, |doc| -> Result<(Tensor, Tensor), DataError> {
        let ids = tokenize(&doc.text, model.config.max_seq_len);
        let (_, trace) = forward(model, &ids, &capture)?;
        let input = trace.tap(start).expect("requested boundary").clone();
        let target = trace.tap(start + n).expect("requested boundary").clone();
        Ok((input, target))
    });
    let mut pairs = Vec::with_capacity(docs.len());
    for r in results {
        pairs.push(r?);
    }
    Ok(HiddenPairDataset {
        d_model: model.config.d_model,
        block,
        pairs,
        source_corpus: corpus.id.clone(),
        model_fingerprint: fingerprint,
    })
}

#[cfg(test)]
mod tests;
