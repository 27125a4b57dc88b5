//! Byte-level text ingestion: tokenizer, deterministic splits, fixed-length
//! chunking for training, and length-qualified sampling for evaluation.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Token id type. Bytes map to 0..=255, then the two reserved ids.
pub type Token = u16;

pub const BOS: Token = 256;
pub const EOS: Token = 257;
/// 256 byte values + BOS + EOS.
pub const VOCAB_SIZE: usize = 258;

const CACHE_MAGIC: &[u8; 4] = b"TKCH";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no input documents")]
    Empty,
    #[error("split ratios must be non-negative and sum to a positive value")]
    BadRatios,
    #[error("need {needed} documents of length >= {min_len} in split {split:?}, found {found}")]
    InsufficientDocs {
        needed: usize,
        found: usize,
        min_len: usize,
        split: Split,
    },
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed token cache {path}: {reason}")]
    BadCache { path: String, reason: String },
}

/// Encode raw bytes, one token per byte.
pub fn tokenize(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| b as Token).collect()
}

/// Decode tokens back to bytes; reserved ids (BOS/EOS) are dropped.
pub fn detokenize(tokens: &[Token]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Document {
    pub tokens: Vec<Token>,
    pub split: Split,
    pub source: Option<PathBuf>,
}

/// An ingested set of documents with deterministic split assignments.
#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
}

impl Corpus {
    /// Read one document per file, then shuffle deterministically and assign
    /// splits by the given (train, val, test) ratios.
    pub fn ingest(
        paths: &[PathBuf],
        split_ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<Self, CorpusError> {
        let mut docs = Vec::with_capacity(paths.len());
        for path in paths {
            let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
            docs.push((Some(path.clone()), tokenize(&bytes)));
        }
        Self::from_token_docs(docs, split_ratios, seed)
    }

    /// Build from in-memory token documents (used by the cache loader and by
    /// synthetic corpora).
    pub fn from_documents(
        docs: Vec<Vec<Token>>,
        split_ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<Self, CorpusError> {
        Self::from_token_docs(docs.into_iter().map(|d| (None, d)).collect(), split_ratios, seed)
    }

    fn from_token_docs(
        docs: Vec<(Option<PathBuf>, Vec<Token>)>,
        split_ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<Self, CorpusError> {
        if docs.is_empty() {
            return Err(CorpusError::Empty);
        }
        let (tr, va, te) = split_ratios;
        let total = tr + va + te;
        if !(tr >= 0.0 && va >= 0.0 && te >= 0.0) || !(total > 0.0) {
            return Err(CorpusError::BadRatios);
        }

        let n = docs.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        // Counts by largest-remainder so they always sum to n.
        let n_train = ((tr / total) * n as f64).floor() as usize;
        let n_val = ((va / total) * n as f64).floor() as usize;
        let mut counts = [n_train, n_val, n - n_train - n_val];
        if te == 0.0 && counts[2] > 0 {
            // Leftover from flooring goes to the first nonzero ratio.
            let spill = counts[2];
            counts[2] = 0;
            if va > 0.0 {
                counts[1] += spill;
            } else {
                counts[0] += spill;
            }
        }

        let mut splits = vec![Split::Train; n];
        let mut cursor = 0usize;
        for (split, &count) in [Split::Train, Split::Val, Split::Test].iter().zip(counts.iter()) {
            for &doc_idx in order.iter().skip(cursor).take(count) {
                splits[doc_idx] = *split;
            }
            cursor += count;
        }

        let documents = docs
            .into_iter()
            .zip(splits)
            .map(|((source, tokens), split)| Document {
                tokens,
                split,
                source,
            })
            .collect();
        Ok(Self { documents })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn docs_in_split(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    /// Fixed-length training chunks: consecutive windows of seq_len - 2 raw
    /// tokens, each bookended with BOS and EOS. Tails shorter than a full
    /// window are dropped.
    pub fn chunks(&self, split: Split, seq_len: usize) -> Vec<Vec<Token>> {
        assert!(seq_len >= 2, "chunk length must fit BOS and EOS");
        let body = seq_len - 2;
        let mut out = Vec::new();
        if body == 0 {
            return out;
        }
        for doc in self.docs_in_split(split) {
            for window in doc.tokens.chunks_exact(body) {
                let mut chunk = Vec::with_capacity(seq_len);
                chunk.push(BOS);
                chunk.extend_from_slice(window);
                chunk.push(EOS);
                out.push(chunk);
            }
        }
        out
    }

    /// Uniform sample of k documents with at least min_len tokens,
    /// deterministic in the seed.
    pub fn sample_eval_docs(
        &self,
        split: Split,
        k: usize,
        min_len: usize,
        seed: u64,
    ) -> Result<Vec<&[Token]>, CorpusError> {
        let mut qualifying: Vec<&Document> = self
            .docs_in_split(split)
            .filter(|d| d.tokens.len() >= min_len)
            .collect();
        if qualifying.len() < k {
            return Err(CorpusError::InsufficientDocs {
                needed: k,
                found: qualifying.len(),
                min_len,
                split,
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        qualifying.shuffle(&mut rng);
        Ok(qualifying
            .into_iter()
            .take(k)
            .map(|d| d.tokens.as_slice())
            .collect())
    }

    /// Write the tokenized cache: magic, version, then per document a u64
    /// token count followed by raw little-endian u16 ids.
    pub fn write_token_cache(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for doc in &self.documents {
            buf.extend_from_slice(&(doc.tokens.len() as u64).to_le_bytes());
            for &t in &doc.tokens {
                buf.extend_from_slice(&t.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(&buf).map_err(io_err)?;
        Ok(())
    }

    /// Load documents from a token cache and re-derive splits.
    pub fn read_token_cache(
        path: &Path,
        split_ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<Self, CorpusError> {
        let docs = read_cached_docs(path)?;
        Self::from_documents(docs, split_ratios, seed)
    }
}

/// Raw document streams from a token cache file.
pub fn read_cached_docs(path: &Path) -> Result<Vec<Vec<Token>>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let bad = |reason: &str| CorpusError::BadCache {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < 8 || &bytes[0..4] != CACHE_MAGIC {
        return Err(bad("missing TKCH magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut docs = Vec::new();
    let mut pos = 8usize;
    while pos < bytes.len() {
        if pos + 8 > bytes.len() {
            return Err(bad("truncated document header"));
        }
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let end = pos + len * 2;
        if end > bytes.len() {
            return Err(bad("truncated document body"));
        }
        let tokens = bytes[pos..end]
            .chunks_exact(2)
            .map(|pair| u16::from_le_bytes([pair[0], pair[1]]))
            .collect();
        docs.push(tokens);
        pos = end;
    }
    Ok(docs)
}

/// Deterministic pseudo-English sample text, used for the bundled desk-scale
/// corpus. Word-trigram-free Markov-style sampling over a small vocabulary
/// keeps the byte distribution learnable in a few hundred steps.
pub mod synthetic {
    use super::*;
    use rand::Rng;

    const WORDS: &[&str] = &[
        "the", "a", "of", "and", "to", "in", "that", "was", "his", "her", "with", "for", "as",
        "had", "but", "not", "they", "she", "he", "this", "from", "one", "were", "all", "there",
        "when", "who", "what", "said", "would", "will", "more", "some", "could", "time", "them",
        "into", "only", "little", "then", "over", "water", "stone", "river", "light", "night",
        "morning", "house", "garden", "window", "letter", "voice", "road", "city", "winter",
        "summer", "story", "children", "mother", "father", "friend", "hands", "eyes", "world",
        "again", "never", "always", "slowly", "quietly", "answered", "remembered", "walked",
        "turned", "looked", "waited", "returned", "carried", "followed", "between", "under",
        "against", "toward", "before", "after", "because", "through", "without", "almost",
    ];

    /// Sample `n_docs` documents of roughly `doc_bytes` bytes each.
    pub fn sample_documents(n_docs: usize, doc_bytes: usize, seed: u64) -> Vec<Vec<u8>> {
        (0..n_docs)
            .map(|i| sample_document(doc_bytes, seed.wrapping_add(i as u64)))
            .collect()
    }

    fn sample_document(target_bytes: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut out: Vec<u8> = Vec::with_capacity(target_bytes + 64);
        let mut sentences_in_paragraph = 0usize;
        let mut paragraph_target = rng.gen_range(3..=7);
        while out.len() < target_bytes {
            let n_words = rng.gen_range(4..=11);
            let mut sentence = String::new();
            for w in 0..n_words {
                // Zipf-ish skew toward early (common) words.
                let r: f64 = rng.gen::<f64>();
                let idx = ((r * r) * WORDS.len() as f64) as usize;
                let word = WORDS[idx.min(WORDS.len() - 1)];
                if w == 0 {
                    let mut chars = word.chars();
                    let first = chars.next().unwrap().to_ascii_uppercase();
                    sentence.push(first);
                    sentence.push_str(chars.as_str());
                } else {
                    sentence.push(' ');
                    sentence.push_str(word);
                }
            }
            sentence.push('.');
            sentence.push(' ');
            out.extend_from_slice(sentence.as_bytes());
            sentences_in_paragraph += 1;
            if sentences_in_paragraph >= paragraph_target {
                out.pop();
                out.extend_from_slice(b"\n\n");
                sentences_in_paragraph = 0;
                paragraph_target = rng.gen_range(3..=7);
            }
        }
        out.truncate(target_bytes);
        out
    }

    /// Write a sample corpus to `dir` as numbered .txt files; returns their
    /// paths. Existing identically named files are overwritten.
    pub fn write_sample_corpus(
        dir: &Path,
        n_docs: usize,
        doc_bytes: usize,
        seed: u64,
    ) -> Result<Vec<PathBuf>, CorpusError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let docs = sample_documents(n_docs, doc_bytes, seed);
        let mut paths = Vec::with_capacity(n_docs);
        for (i, doc) in docs.iter().enumerate() {
            let path = dir.join(format!("doc_{i:03}.txt"));
            std::fs::write(&path, doc).map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus_from(docs: Vec<Vec<Token>>, ratios: (f64, f64, f64), seed: u64) -> Corpus {
        Corpus::from_documents(docs, ratios, seed).unwrap()
    }

    #[test]
    fn byte_tokenizer_counts() {
        let toks = tokenize(b"0123456789");
        assert_eq!(toks.len(), 10);
        assert_eq!(toks[0], b'0' as Token);
    }

    #[test]
    fn all_train_when_ratio_is_one() {
        let c = corpus_from(vec![vec![1, 2, 3]; 7], (1.0, 0.0, 0.0), 5);
        assert_eq!(c.docs_in_split(Split::Train).count(), 7);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let docs: Vec<Vec<Token>> = (0..20).map(|i| vec![i as Token; 4]).collect();
        let a = corpus_from(docs.clone(), (0.6, 0.2, 0.2), 42);
        let b = corpus_from(docs, (0.6, 0.2, 0.2), 42);
        let tags_a: Vec<Split> = a.documents().iter().map(|d| d.split).collect();
        let tags_b: Vec<Split> = b.documents().iter().map(|d| d.split).collect();
        assert_eq!(tags_a, tags_b);
        let total: usize = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| a.docs_in_split(s).count())
            .sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn chunks_are_framed_and_tail_dropped() {
        let doc: Vec<Token> = (0..25).map(|i| i as Token).collect();
        let c = corpus_from(vec![doc], (1.0, 0.0, 0.0), 0);
        let chunks = c.chunks(Split::Train, 12);
        // body = 10 per chunk, 25 tokens -> 2 chunks, 5-token tail dropped.
        assert_eq!(chunks.len(), 2);
        for chunk in &chunks {
            assert_eq!(chunk.len(), 12);
            assert_eq!(chunk[0], BOS);
            assert_eq!(*chunk.last().unwrap(), EOS);
        }
        assert_eq!(&chunks[1][1..11], &(10..20).map(|i| i as Token).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn short_document_yields_no_chunks() {
        let c = corpus_from(vec![vec![7; 9]], (1.0, 0.0, 0.0), 0);
        assert!(c.chunks(Split::Train, 12).is_empty());
    }

    #[test]
    fn chunk_token_accounting() {
        let docs: Vec<Vec<Token>> = vec![vec![1; 100], vec![2; 57], vec![3; 9]];
        let doc_total: usize = docs.iter().map(|d| d.len()).sum();
        let c = corpus_from(docs, (1.0, 0.0, 0.0), 0);
        let chunks = c.chunks(Split::Train, 12);
        let chunk_total: usize = chunks.iter().map(|c| c.len()).sum();
        assert!(chunk_total <= doc_total + 2 * chunks.len());
    }

    #[test]
    fn sample_eval_docs_contract() {
        let docs: Vec<Vec<Token>> = (0..10)
            .map(|i| vec![0 as Token; 10 + 10 * i])
            .collect();
        let c = corpus_from(docs, (1.0, 0.0, 0.0), 0);
        assert!(c.sample_eval_docs(Split::Train, 0, 50, 1).unwrap().is_empty());
        let picked = c.sample_eval_docs(Split::Train, 3, 50, 1).unwrap();
        assert_eq!(picked.len(), 3);
        assert!(picked.iter().all(|d| d.len() >= 50));
        let again = c.sample_eval_docs(Split::Train, 3, 50, 1).unwrap();
        assert_eq!(
            picked.iter().map(|d| d.len()).collect::<Vec<_>>(),
            again.iter().map(|d| d.len()).collect::<Vec<_>>()
        );
        let err = c.sample_eval_docs(Split::Train, 9, 50, 1).unwrap_err();
        match err {
            CorpusError::InsufficientDocs { needed, found, .. } => {
                assert_eq!(needed, 9);
                assert_eq!(found, 6);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn token_cache_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.tkch");
        let docs: Vec<Vec<Token>> = vec![vec![0, 255, BOS, EOS], vec![], vec![42; 300]];
        let c = corpus_from(docs, (1.0, 0.0, 0.0), 3);
        c.write_token_cache(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let reloaded = Corpus::read_token_cache(&path, (1.0, 0.0, 0.0), 3).unwrap();
        let path2 = dir.path().join("cache2.tkch");
        reloaded.write_token_cache(&path2).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
        assert!(first.starts_with(b"TKCH"));
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = synthetic::sample_documents(3, 2000, 9);
        let b = synthetic::sample_documents(3, 2000, 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|d| d.len() == 2000));
        assert!(a[0].iter().all(|&b| b.is_ascii()));
        assert_ne!(a[0], a[1]);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_identity(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
        }
    }
}
