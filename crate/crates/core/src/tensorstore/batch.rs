//! Unlabeled token samples and their on-disk form.
//!
//! File layout: one line of JSON header terminated by `\n`, then
//! `num_sequences · seq_len` little-endian `u32` token ids, then the same
//! number of `u8` attention flags (1 = real token, 0 = padding). Sequences
//! shorter than `seq_len` are padded with id 0 and flag 0 when written.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub real: Vec<bool>,
}

impl Sequence {
    /// A sequence with no padding.
    pub fn dense(ids: Vec<u32>) -> Self {
        let real = vec![true; ids.len()];
        Self { ids, real }
    }

    pub fn real_len(&self) -> usize {
        self.real.iter().filter(|r| **r).count()
    }

    /// Appends `n` padding positions.
    pub fn padded(mut self, n: usize) -> Self {
        self.ids.extend(std::iter::repeat_n(0, n));
        self.real.extend(std::iter::repeat_n(false, n));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenBatch {
    pub sequences: Vec<Sequence>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchHeader {
    format_version: u32,
    num_sequences: usize,
    seq_len: usize,
    ids: String,
    flags: String,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Sequence>) -> Self {
        Self { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total number of real (non-padding) positions.
    pub fn real_tokens(&self) -> usize {
        self.sequences.iter().map(Sequence::real_len).sum()
    }

    /// Longest sequence, padding included.
    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(|s| s.ids.len()).max().unwrap_or(0)
    }

    /// The first `n` sequences (all of them if fewer).
    pub fn first(&self, n: usize) -> Self {
        Self {
            sequences: self.sequences.iter().take(n).cloned().collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.ids.len() != s.real.len() {
                return Err(Error::Validation(format!(
                    "sequence {i}: {} ids but {} attention flags",
                    s.ids.len(),
                    s.real.len()
                )));
            }
            if s.ids.len() > config.max_seq_len {
                return Err(Error::Validation(format!(
                    "sequence {i} has length {} > max_seq_len {}",
                    s.ids.len(),
                    config.max_seq_len
                )));
            }
            if s.real_len() == 0 {
                return Err(Error::Validation(format!("sequence {i} has no real tokens")));
            }
            if let Some(&id) = s.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    sequence: i,
                    id,
                    vocab_size: config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Random batch: lengths uniform in `[ceil(seq_len/2), seq_len]`, padded
    /// at the end to `seq_len`.
    pub fn random(seed: u64, vocab_size: usize, num_sequences: usize, seq_len: usize) -> Self {
        assert!(vocab_size > 0 && seq_len > 0);
        let mut rng = SplitMix64::new(seed);
        let min_len = seq_len.div_ceil(2);
        let sequences = (0..num_sequences)
            .map(|_| {
                let len = min_len + rng.below((seq_len - min_len + 1) as u64) as usize;
                let ids = (0..len).map(|_| rng.below(vocab_size as u64) as u32).collect();
                Sequence::dense(ids).padded(seq_len - len)
            })
            .collect();
        Self { sequences }
    }

    pub fn encode(&self) -> Vec<u8> {
        let seq_len = self.max_len();
        let header = BatchHeader {
            format_version: 1,
            num_sequences: self.sequences.len(),
            seq_len,
            ids: "u32le".into(),
            flags: "u8".into(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for s in &self.sequences {
            for j in 0..seq_len {
                let id = s.ids.get(j).copied().unwrap_or(0);
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        for s in &self.sequences {
            for j in 0..seq_len {
                out.push(u8::from(s.real.get(j).copied().unwrap_or(false)));
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Manifest("token batch header is not newline-terminated".into()))?;
        let header: BatchHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Manifest(e.to_string()))?;
        if header.format_version != 1 || header.ids != "u32le" || header.flags != "u8" {
            return Err(Error::Manifest(format!(
                "unsupported token batch encoding (version {}, ids {}, flags {})",
                header.format_version, header.ids, header.flags
            )));
        }
        let cells = header.num_sequences * header.seq_len;
        let body = &bytes[nl + 1..];
        if body.len() != cells * 5 {
            return Err(Error::shape(
                "token_batch",
                format!("expected {} payload bytes, found {}", cells * 5, body.len()),
            ));
        }
        let (ids, flags) = body.split_at(cells * 4);
        let sequences = (0..header.num_sequences)
            .map(|i| {
                let range = i * header.seq_len..(i + 1) * header.seq_len;
                let ids = ids[range.start * 4..range.end * 4]
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let real = flags[range].iter().map(|&f| f != 0).collect();
                Sequence { ids, real }
            })
            .collect();
        Ok(Self { sequences })
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

pub fn write_token_batch(batch: &TokenBatch, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, batch.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_token_batch(path: &Path) -> Result<TokenBatch> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TokenBatch::decode(&bytes)
}
