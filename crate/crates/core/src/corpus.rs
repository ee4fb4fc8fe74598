//! Token streams, the 27-symbol character vocabulary, the `TOKS` binary
//! format, random-crop batch sampling and a synthetic easy/hard grammar.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use atsc_tensor::Rng;

use crate::error::{Error, Result};

pub const CHAR27_VOCAB: usize = 27;
pub const TOKS_MAGIC: &[u8; 4] = b"TOKS";
pub const TOKS_VERSION: u32 = 1;
const TOKS_HEADER: usize = 20;

/// Maps letters case-insensitively to 1..=26 and every other byte to 0
/// (space).
pub fn encode_char27(text: &[u8]) -> Vec<u32> {
    text.iter()
        .map(|&b| match b.to_ascii_lowercase() {
            c @ b'a'..=b'z' => (c - b'a' + 1) as u32,
            _ => 0,
        })
        .collect()
}

/// Inverse of [`encode_char27`] on its image. Ids outside 0..27 render as `?`.
pub fn decode_char27(ids: &[u32]) -> String {
    ids.iter()
        .map(|&i| match i {
            0 => ' ',
            1..=26 => (b'a' + i as u8 - 1) as char,
            _ => '?',
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    vocab_size: usize,
    source: String,
}

impl TokenStream {
    /// Fails if any id is `>= vocab_size`.
    pub fn new(ids: Vec<u32>, vocab_size: usize, source: impl Into<String>) -> Result<Self> {
        if let Some((i, &id)) = ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= vocab_size)
        {
            return Err(Error::contract(format!(
                "token {id} at position {i} is outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self {
            ids,
            vocab_size,
            source: source.into(),
        })
    }

    pub fn from_text(text: &[u8], source: impl Into<String>) -> Self {
        Self {
            ids: encode_char27(text),
            vocab_size: CHAR27_VOCAB,
            source: source.into(),
        }
    }

    /// Reads a text file and encodes it with the character vocabulary.
    pub fn read_text(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&bytes, path.display().to_string()))
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sub-stream `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            ids: self.ids[start..end].to_vec(),
            vocab_size: self.vocab_size,
            source: format!("{}[{start}..{end}]", self.source),
        }
    }

    /// First `train_len` tokens and the following `val_len`. Streams shorter
    /// than `train_len + val_len` are split 90/10 instead.
    pub fn split(&self, train_len: usize, val_len: usize) -> (Self, Self) {
        let n = self.len();
        if n >= train_len + val_len {
            (
                self.slice(0, train_len),
                self.slice(train_len, train_len + val_len),
            )
        } else {
            let cut = n - n / 10;
            (self.slice(0, cut), self.slice(cut, n))
        }
    }

    pub fn to_toks_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TOKS_HEADER + 4 * self.ids.len());
        out.extend_from_slice(TOKS_MAGIC);
        out.extend_from_slice(&TOKS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    /// Parses the `TOKS` format; `path` is only used in error messages.
    pub fn from_toks_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < TOKS_HEADER {
            return Err(fail(
                bytes.len(),
                format!("header needs {TOKS_HEADER} bytes"),
            ));
        }
        if &bytes[..4] != TOKS_MAGIC {
            return Err(fail(0, "bad magic, expected TOKS".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != TOKS_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let vocab = u32_at(8) as usize;
        if vocab == 0 {
            return Err(fail(8, "vocab_size is 0".into()));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let body = bytes.len() - TOKS_HEADER;
        if body as u64 != count.saturating_mul(4) {
            return Err(fail(
                12,
                format!(
                    "count {count} needs {} body bytes, found {body}",
                    count.saturating_mul(4)
                ),
            ));
        }
        let mut ids = Vec::with_capacity(count as usize);
        for (i, chunk) in bytes[TOKS_HEADER..].chunks_exact(4).enumerate() {
            let id = u32::from_le_bytes(chunk.try_into().unwrap());
            if id as usize >= vocab {
                return Err(fail(
                    TOKS_HEADER + 4 * i,
                    format!("token {id} >= vocab_size {vocab}"),
                ));
            }
            ids.push(id);
        }
        Ok(Self {
            ids,
            vocab_size: vocab,
            source: path.display().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_toks_bytes(&bytes, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toks_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// `batch` rows of `seq_len` inputs and their next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub offsets: Vec<usize>,
}

/// Draws crops of `seq_len + 1` tokens at uniform offsets.
#[derive(Clone, Debug)]
pub struct CropSampler {
    stream: Arc<TokenStream>,
    seq_len: usize,
    rng: Rng,
}

impl CropSampler {
    pub fn new(stream: Arc<TokenStream>, seq_len: usize, rng: Rng) -> Result<Self> {
        if seq_len == 0 || stream.len() < seq_len + 1 {
            return Err(Error::contract(format!(
                "stream of {} tokens is too short for crops of {} + 1",
                stream.len(),
                seq_len
            )));
        }
        Ok(Self {
            stream,
            seq_len,
            rng,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn stream(&self) -> &Arc<TokenStream> {
        &self.stream
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Number of distinct crop offsets.
    pub fn offset_count(&self) -> usize {
        self.stream.len() - self.seq_len
    }

    pub fn next_offset(&mut self) -> usize {
        self.rng.below(self.offset_count())
    }

    pub fn sample_batch(&mut self, batch: usize) -> Batch {
        let offsets: Vec<usize> = (0..batch).map(|_| self.next_offset()).collect();
        crops_at(&self.stream, self.seq_len, offsets)
    }
}

/// Builds a batch from explicit crop offsets.
pub fn crops_at(stream: &TokenStream, seq_len: usize, offsets: Vec<usize>) -> Batch {
    let mut inputs = Vec::with_capacity(offsets.len() * seq_len);
    let mut targets = Vec::with_capacity(offsets.len() * seq_len);
    for &o in &offsets {
        inputs.extend_from_slice(&stream.ids()[o..o + seq_len]);
        targets.extend_from_slice(&stream.ids()[o + 1..o + seq_len + 1]);
    }
    Batch {
        inputs,
        targets,
        batch: offsets.len(),
        seq_len,
        offsets,
    }
}

/// Random token process mixing locally and non-locally predictable
/// positions.
///
/// Each position past the warm-up is independently easy with probability
/// `p_easy`. An easy token is `rule[prev]` for a fixed permutation `rule`.
/// A hard token is `(ids[i - lags.0] + ids[i - lags.1]) mod V`, which the
/// previous token alone does not determine.
#[derive(Clone, Debug)]
pub struct SyntheticGrammar {
    pub vocab_size: usize,
    pub p_easy: f64,
    pub rule: Vec<u32>,
    pub lags: (usize, usize),
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub stream: TokenStream,
    /// `easy[i]` marks positions whose token follows the bigram rule.
    pub easy: Vec<bool>,
}

impl SyntheticGrammar {
    pub fn new(vocab_size: usize, p_easy: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_easy) {
            return Err(Error::contract(format!("p_easy {p_easy} outside [0, 1]")));
        }
        if vocab_size < 2 {
            return Err(Error::contract(
                "synthetic vocabulary needs at least 2 tokens",
            ));
        }
        let mut rng = Rng::with_stream(seed, 1);
        let mut rule: Vec<u32> = (0..vocab_size as u32).collect();
        rng.shuffle(&mut rule);
        Ok(Self {
            vocab_size,
            p_easy,
            rule,
            lags: (3, 7),
            seed,
        })
    }

    pub fn generate(&self, length: usize) -> SyntheticCorpus {
        let mut rng = Rng::with_stream(self.seed, 2);
        let v = self.vocab_size as u32;
        let (l1, l2) = self.lags;
        let mut ids = Vec::with_capacity(length);
        let mut easy = Vec::with_capacity(length);
        for i in 0..length {
            if i < l2 {
                ids.push(rng.below(self.vocab_size) as u32);
                easy.push(false);
            } else if rng.uniform_f64() < self.p_easy {
                ids.push(self.rule[ids[i - 1] as usize]);
                easy.push(true);
            } else {
                ids.push((ids[i - l1] + ids[i - l2]) % v);
                easy.push(false);
            }
        }
        SyntheticCorpus {
            stream: TokenStream {
                ids,
                vocab_size: self.vocab_size,
                source: format!("synthetic(p_easy={}, seed={})", self.p_easy, self.seed),
            },
            easy,
        }
    }
}

/// Mean NLL of a bigram model fit by maximum likelihood on the positions
/// selected by `select` and scored on those same positions. Returns `None`
/// when nothing is selected.
pub fn bigram_oracle_nll(ids: &[u32], vocab_size: usize, select: &[bool]) -> Option<f64> {
    let mut counts = vec![0u64; vocab_size * vocab_size];
    let mut totals = vec![0u64; vocab_size];
    let positions: Vec<usize> = (1..ids.len()).filter(|&i| select[i]).collect();
    if positions.is_empty() {
        return None;
    }
    for &i in &positions {
        let (p, n) = (ids[i - 1] as usize, ids[i] as usize);
        counts[p * vocab_size + n] += 1;
        totals[p] += 1;
    }
    let nll: f64 = positions
        .iter()
        .map(|&i| {
            let (p, n) = (ids[i - 1] as usize, ids[i] as usize);
            -(counts[p * vocab_size + n] as f64 / totals[p] as f64).ln()
        })
        .sum();
    Some(nll / positions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_fixed_map() {
        assert_eq!(encode_char27(b"abc"), vec![1, 2, 3]);
        assert_eq!(encode_char27(b"A9z"), vec![1, 0, 26]);
        assert_eq!(decode_char27(&encode_char27(b"Hi, there!")), "hi  there ");
    }

    #[test]
    fn header_only_parses() {
        let s = TokenStream::new(vec![0, 1023], 1024, "t").unwrap();
        let back = TokenStream::from_toks_bytes(&s.to_toks_bytes(), Path::new("t")).unwrap();
        assert_eq!(back.ids(), &[0, 1023]);
    }

    #[test]
    fn split_falls_back_to_ninety_ten() {
        let s = TokenStream::new((0..100).map(|i| i % 5).collect(), 5, "s").unwrap();
        let (a, b) = s.split(5_000_000, 500_000);
        assert_eq!((a.len(), b.len()), (90, 10));
        let (a, b) = s.split(60, 20);
        assert_eq!((a.len(), b.len()), (60, 20));
        assert_eq!(b.ids()[0], s.ids()[60]);
    }
}
