//! Fixed-length sequences of 8-bit codes and their `HRNN` file format.
//!
//! Layout (little-endian): magic `HRNN`, version `u32 = 1`, encoding tag
//! `u8` (0 = µ-law, 1 = linear), sample rate `u32`, sequence length `u64`,
//! sequence count `u64`, shuffle seed `u64`, then `count · seq_len` code
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codec::Encoding;
use super::wav::read_wav;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HRNN";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 8 + 8 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedDataset {
    pub encoding: Encoding,
    pub sample_rate: u32,
    pub seq_len: usize,
    pub seed: u64,
    codes: Vec<u8>,
}

impl QuantizedDataset {
    pub fn new(
        encoding: Encoding,
        sample_rate: u32,
        seq_len: usize,
        seed: u64,
        sequences: Vec<Vec<u8>>,
    ) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Dataset("seq_len must be positive".into()));
        }
        let mut codes = Vec::with_capacity(sequences.len() * seq_len);
        for (i, s) in sequences.iter().enumerate() {
            if s.len() != seq_len {
                return Err(Error::Dataset(format!(
                    "sequence {i} has {} codes, expected {seq_len}",
                    s.len()
                )));
            }
            codes.extend_from_slice(s);
        }
        Ok(QuantizedDataset {
            encoding,
            sample_rate,
            seq_len,
            seed,
            codes,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u8] {
        &self.codes[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u8]> {
        self.codes.chunks(self.seq_len)
    }

    pub fn total_tokens(&self) -> usize {
        self.codes.len()
    }

    /// Keep only the first `n` sequences.
    pub fn truncate(&mut self, n: usize) {
        self.codes.truncate(n * self.seq_len);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.codes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.encoding.tag());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.seq_len as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Dataset("not an HRNN dataset (bad magic)".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {version}"
            )));
        }
        let encoding = Encoding::from_tag(bytes[8])?;
        let sample_rate = u32_at(9);
        let seq_len = u64_at(13) as usize;
        let count = u64_at(21) as usize;
        let seed = u64_at(29);
        let payload = &bytes[HEADER_LEN..];
        let expected = seq_len
            .checked_mul(count)
            .ok_or_else(|| Error::Dataset("header overflow".into()))?;
        if seq_len == 0 || payload.len() != expected {
            return Err(Error::Dataset(format!(
                "payload has {} bytes, header promises {count} × {seq_len}",
                payload.len()
            )));
        }
        Ok(QuantizedDataset {
            encoding,
            sample_rate,
            seq_len,
            seed,
            codes: payload.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Split `codes` into windows of `seq_len` with stride `hop`; the trailing
/// remainder is dropped.
pub fn windows(codes: &[u8], seq_len: usize, hop: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + seq_len <= codes.len() {
        out.push(codes[start..start + seq_len].to_vec());
        start += hop;
    }
    out
}

/// Shuffle in place with a seeded generator.
pub fn shuffle_sequences(seqs: &mut [Vec<u8>], seed: u64) {
    seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Encode every WAV in `dir` (sorted by filename), cut it into windows and
/// shuffle them with `seed`. Files shorter than `seq_len` are skipped with a
/// warning.
pub fn build_dataset(
    dir: impl AsRef<Path>,
    encoding: Encoding,
    seq_len: usize,
    hop: Option<usize>,
    seed: u64,
) -> Result<QuantizedDataset> {
    let dir = dir.as_ref();
    let hop = hop.unwrap_or(seq_len);
    if seq_len == 0 || hop == 0 {
        return Err(Error::Dataset("seq_len and hop must be positive".into()));
    }
    let files = wav_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no WAV files in {}", dir.display())));
    }
    let mut sample_rate = None;
    let mut seqs = Vec::new();
    for path in &files {
        let audio = read_wav(&fs::read(path)?)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        match sample_rate {
            None => sample_rate = Some(audio.sample_rate),
            Some(sr) if sr != audio.sample_rate => {
                return Err(Error::Dataset(format!(
                    "{} has sample rate {} but earlier files have {sr}",
                    path.display(),
                    audio.sample_rate
                )));
            }
            Some(_) => {}
        }
        if audio.samples.len() < seq_len {
            log::warn!(
                "skipping {}: {} samples is shorter than seq_len {seq_len}",
                path.display(),
                audio.samples.len()
            );
            continue;
        }
        let codes: Vec<u8> = audio
            .samples
            .iter()
            .map(|&x| encoding.encode(f64::from(x)))
            .collect();
        seqs.extend(windows(&codes, seq_len, hop));
    }
    if seqs.is_empty() {
        return Err(Error::Dataset(
            "no sequences: every file was shorter than seq_len".into(),
        ));
    }
    shuffle_sequences(&mut seqs, seed);
    QuantizedDataset::new(encoding, sample_rate.unwrap_or(16000), seq_len, seed, seqs)
}
