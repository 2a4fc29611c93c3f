//! Digests as fixed-length token sequences.
//!
//! Id 0 is padding and id 1 the classification token prepended to every
//! sequence. ssdeep characters map to their base64 index plus 2, with block
//! size and colons dropped. TLSH digests are read as a window of two hex
//! digits sliding by one over the 70 hex digits after the `T1` prefix, each
//! window mapping to its byte value plus 2.

use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusEntry;
use crate::digest::{self, Algo, Digest};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::ssdeep::{self, SsdeepDigest};
use crate::tlsh::{TlshDigest, DIGEST_HEX_LEN};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SSDEEP_SEQ_LEN: usize = 148;
pub const TLSH_SEQ_LEN: usize = DIGEST_HEX_LEN;
pub const SSDEEP_VOCAB: usize = 66;
pub const TLSH_VOCAB: usize = 258;

pub fn seq_len(algo: Algo) -> usize {
    match algo {
        Algo::Ssdeep => SSDEEP_SEQ_LEN,
        Algo::Tlsh => TLSH_SEQ_LEN,
    }
}

pub fn vocab_size(algo: Algo) -> usize {
    match algo {
        Algo::Ssdeep => SSDEEP_VOCAB,
        Algo::Tlsh => TLSH_VOCAB,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub algo: Algo,
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.tokens.len()
    }

    pub fn with_label(mut self, label: Option<u8>) -> Self {
        self.label = label;
        self
    }

    fn padded(algo: Algo, mut tokens: Vec<u32>) -> Self {
        let used = tokens.len();
        let len = seq_len(algo);
        tokens.resize(len, PAD);
        let mask = (0..len).map(|i| u8::from(i < used)).collect();
        TokenSequence {
            algo,
            tokens,
            mask,
            label: None,
        }
    }
}

pub fn tokenize_ssdeep(d: &SsdeepDigest) -> TokenSequence {
    let mut tokens = Vec::with_capacity(SSDEEP_SEQ_LEN);
    tokens.push(CLS);
    for c in d.sig1().bytes().chain(d.sig2().bytes()) {
        let idx = ssdeep::base64_index(c).expect("digest holds base64 only");
        tokens.push(u32::from(idx) + 2);
    }
    TokenSequence::padded(Algo::Ssdeep, tokens)
}

pub fn tokenize_tlsh(d: &TlshDigest) -> TokenSequence {
    let hex = d.hex();
    let digits: Vec<u32> = hex
        .bytes()
        .map(|c| (c as char).to_digit(16).expect("hex digest"))
        .collect();
    let mut tokens = Vec::with_capacity(TLSH_SEQ_LEN);
    tokens.push(CLS);
    tokens.extend(digits.windows(2).map(|w| w[0] * 16 + w[1] + 2));
    TokenSequence::padded(Algo::Tlsh, tokens)
}

pub fn tokenize(d: &Digest) -> TokenSequence {
    match d {
        Digest::Ssdeep(d) => tokenize_ssdeep(d),
        Digest::Tlsh(d) => tokenize_tlsh(d),
    }
}

/// Row-major token and mask matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub algo: Option<Algo>,
    pub rows: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    /// Present when every sequence carries a label.
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    pub fn row_tokens(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// The rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut mask = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            tokens.extend_from_slice(self.row_tokens(i));
            mask.extend_from_slice(self.row_mask(i));
        }
        Batch {
            algo: self.algo,
            rows: indices.len(),
            seq_len: self.seq_len,
            tokens,
            mask,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

pub fn batchify(seqs: &[TokenSequence], require_labels: bool) -> Result<Batch> {
    let Some(first) = seqs.first() else {
        return Ok(Batch {
            algo: None,
            rows: 0,
            seq_len: 0,
            tokens: Vec::new(),
            mask: Vec::new(),
            labels: if require_labels {
                Some(Vec::new())
            } else {
                None
            },
        });
    };
    let algo = first.algo;
    let len = first.len();
    let mut tokens = Vec::with_capacity(seqs.len() * len);
    let mut mask = Vec::with_capacity(seqs.len() * len);
    let mut labels = Some(Vec::with_capacity(seqs.len()));
    for (i, s) in seqs.iter().enumerate() {
        if s.algo != algo {
            return Err(Error::MixedAlgorithms);
        }
        if s.len() != len || s.mask.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "sequence {i} has length {}, expected {len}",
                s.len()
            )));
        }
        tokens.extend_from_slice(&s.tokens);
        mask.extend_from_slice(&s.mask);
        match (s.label, labels.as_mut()) {
            (Some(l), Some(v)) => v.push(l),
            (None, _) if require_labels => return Err(Error::MissingLabels(i)),
            _ => labels = None,
        }
    }
    Ok(Batch {
        algo: Some(algo),
        rows: seqs.len(),
        seq_len: len,
        tokens,
        mask,
        labels,
    })
}

/// One line of a featurized dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    #[serde(flatten)]
    pub seq: TokenSequence,
}

/// Hashes and tokenizes every payload, labelled from its entry. Payloads
/// the algorithm cannot hash are left out; their ids come back second.
pub fn featurize_corpus(
    entries: &[CorpusEntry],
    payloads: &[Vec<u8>],
    algo: Algo,
) -> Result<(Vec<FeatureRecord>, Vec<String>)> {
    if entries.len() != payloads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} entries for {} payloads",
            entries.len(),
            payloads.len()
        )));
    }
    let hashed: Vec<Option<TokenSequence>> = payloads
        .par_iter()
        .map(|p| digest::hash(algo, p).ok().map(|d| tokenize(&d)))
        .collect();
    let mut records = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for (e, seq) in entries.iter().zip(hashed) {
        match seq {
            Some(seq) => records.push(FeatureRecord {
                id: e.id.clone(),
                seq: seq.with_label(Some(e.label.as_bit())),
            }),
            None => skipped.push(e.id.clone()),
        }
    }
    Ok((records, skipped))
}

pub fn write_jsonl(records: &[FeatureRecord], path: &Path) -> Result<()> {
    fsutil::write_atomic_with(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_jsonl(path: &Path) -> Result<Vec<FeatureRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: FeatureRecord = serde_json::from_str(&line)
            .map_err(|e| Error::SchemaMismatch(format!("line {}: {e}", n + 1)))?;
        if r.seq.len() != seq_len(r.seq.algo) || r.seq.mask.len() != r.seq.len() {
            return Err(Error::ShapeMismatch(format!(
                "line {}: wrong sequence length",
                n + 1
            )));
        }
        let vocab = vocab_size(r.seq.algo) as u32;
        if r.seq.tokens.iter().any(|&t| t >= vocab) {
            return Err(Error::SchemaMismatch(format!(
                "line {}: token outside vocabulary",
                n + 1
            )));
        }
        out.push(r);
    }
    Ok(out)
}
