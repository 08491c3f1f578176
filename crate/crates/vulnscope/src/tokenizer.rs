//! Byte-pair tokenization of function text into fixed-length windows.
//!
//! The base alphabet is all 256 byte values, so any input is encodable
//! without an UNK fallback — unseen bytes just stay single-byte tokens.
//! Merges are learned within *runs* produced by a C-flavored pre-tokenizer
//! (identifier/number words, whitespace stretches, single newlines, single
//! punctuation bytes), so no token ever straddles an identifier boundary.
//!
//! Encoding produces a [`TokenSequence`] of exactly `max_len` ids:
//! `BOS`, up to `max_len − 2` content tokens, `EOS`, then `PAD` fill.
//! Each content token remembers the 1-based source line of its first byte,
//! which later anchors attribution scores to lines.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{CodeFunction, Corpus};
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// First id of the 256 byte-level tokens; byte `b` has id `FIRST_BYTE_ID + b`.
const FIRST_BYTE_ID: u32 = 4;
/// First id assigned to a learned merge.
const FIRST_MERGE_ID: u32 = 260;

/// Smallest legal vocabulary: 4 specials + 256 byte symbols.
pub const MIN_VOCAB_SIZE: usize = FIRST_MERGE_ID as usize;

/// Format version written as the first line of a saved vocabulary.
pub const VOCAB_MAGIC: &str = "vulnscope-bpe/1";

/// Default token window length.
pub const DEFAULT_MAX_LEN: usize = 512;

/// An ordered byte-pair merge table plus the derived id↔bytes tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    token_bytes: Vec<Vec<u8>>,
    merge_rank: HashMap<(u32, u32), u32>,
}

impl Vocab {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Vocab> {
        let mut token_bytes: Vec<Vec<u8>> = Vec::with_capacity(MIN_VOCAB_SIZE + merges.len());
        for _ in 0..FIRST_BYTE_ID {
            token_bytes.push(Vec::new());
        }
        for b in 0..=255u8 {
            token_bytes.push(vec![b]);
        }
        let mut merge_rank = HashMap::new();
        for (k, &(left, right)) in merges.iter().enumerate() {
            let id = FIRST_MERGE_ID + k as u32;
            for side in [left, right] {
                if side < FIRST_BYTE_ID || side >= id {
                    return Err(Error::format(format!(
                        "merge {k} references id {side} outside the ids defined before it"
                    )));
                }
            }
            if merge_rank.insert((left, right), id).is_some() {
                return Err(Error::format(format!("duplicate merge rule {left} {right}")));
            }
            let mut bytes = token_bytes[left as usize].clone();
            bytes.extend_from_slice(&token_bytes[right as usize]);
            token_bytes.push(bytes);
        }
        Ok(Vocab {
            merges,
            token_bytes,
            merge_rank,
        })
    }

    /// Total number of ids: specials + bytes + merges.
    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// The bytes a token id stands for. Specials own no bytes.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if id < FIRST_BYTE_ID {
            return None;
        }
        self.token_bytes.get(id as usize).map(|v| v.as_slice())
    }

    /// Human-readable surface for a token id.
    pub fn token_display(&self, id: u32) -> String {
        match id {
            PAD_ID => "<PAD>".to_string(),
            BOS_ID => "<BOS>".to_string(),
            EOS_ID => "<EOS>".to_string(),
            UNK_ID => "<UNK>".to_string(),
            _ => String::from_utf8_lossy(&self.token_bytes[id as usize]).into_owned(),
        }
    }

    /// FNV-1a hash of the serialized vocabulary, used to pair checkpoints
    /// with the vocabulary they were trained against.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &(l, r) in &self.merges {
            for b in l.to_le_bytes().into_iter().chain(r.to_le_bytes()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x1_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    /// Merges one run of byte ids according to the learned rules: repeatedly
    /// apply the lowest-ranked applicable rule until none applies.
    fn merge_run(&self, ids: &mut Vec<u32>) {
        loop {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..ids.len().saturating_sub(1) {
                if let Some(&rank) = self.merge_rank.get(&(ids[i], ids[i + 1])) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((new_id, _)) = best else { break };
            let pair = self.merges[(new_id - FIRST_MERGE_ID) as usize];
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }
}

/// A fixed-length token window over one function.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// Exactly `max_len` ids: BOS, content, EOS, then PAD fill.
    pub token_ids: Vec<u32>,
    /// Parallel display surfaces (`<BOS>`, `<PAD>`, … for specials).
    pub tokens: Vec<String>,
    /// Parallel 1-based source line of each token's first byte; 0 for
    /// BOS/EOS/PAD.
    pub line_of_token: Vec<u32>,
    /// Parallel byte `(offset, len)` of each token in the source text;
    /// `(0, 0)` for BOS/EOS/PAD.
    pub spans: Vec<(usize, usize)>,
    /// Number of non-PAD positions, BOS and EOS included.
    pub n_real: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Indices of content tokens (everything real except BOS and EOS).
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..self.n_real - 1
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        pos >= self.n_real
    }
}

#[derive(Clone, Copy, PartialEq)]
enum RunKind {
    Word,
    Space,
    Newline,
    Other,
}

fn byte_kind(b: u8) -> RunKind {
    match b {
        b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'_' => RunKind::Word,
        b'\n' => RunKind::Newline,
        b' ' | b'\t' | b'\r' => RunKind::Space,
        _ => RunKind::Other,
    }
}

/// Splits bytes into (offset, run) pieces. Words and whitespace group into
/// runs; newlines and everything else stay single bytes.
fn pretokenize(bytes: &[u8]) -> Vec<(usize, &[u8])> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let kind = byte_kind(bytes[i]);
        let start = i;
        i += 1;
        if matches!(kind, RunKind::Word | RunKind::Space) {
            while i < bytes.len() && byte_kind(bytes[i]) == kind {
                i += 1;
            }
        }
        runs.push((start, &bytes[start..i]));
    }
    runs
}

/// Learns a byte-pair vocabulary from the corpus. `vocab_size` bounds the
/// total id count (specials + 256 bytes + merges); learning also stops when
/// no pair occurs at least twice. Deterministic: ties on pair frequency
/// break toward the smallest (left, right) id pair.
pub fn train_bpe(corpus: &Corpus, vocab_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
    }
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} is below the minimum {MIN_VOCAB_SIZE} (4 specials + 256 bytes)"
        )));
    }

    // Word frequencies over all runs; BTreeMap so iteration order (and thus
    // any floating tie behavior) is independent of corpus order.
    let mut words: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for f in corpus.iter() {
        for (_, run) in pretokenize(f.source_text.as_bytes()) {
            *words.entry(run.to_vec()).or_default() += 1;
        }
    }
    let mut seqs: Vec<(Vec<u32>, u64)> = words
        .into_iter()
        .map(|(bytes, count)| {
            let ids = bytes.iter().map(|&b| FIRST_BYTE_ID + b as u32).collect();
            (ids, count)
        })
        .collect();

    let mut merges: Vec<(u32, u32)> = Vec::new();
    while MIN_VOCAB_SIZE + merges.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (ids, freq) in &seqs {
            for pair in ids.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += freq;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .min_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let Some((pair, _)) = best else { break };

        let new_id = (MIN_VOCAB_SIZE + merges.len()) as u32;
        merges.push(pair);
        for (ids, _) in &mut seqs {
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }
    Vocab::from_merges(merges)
}

/// Encodes a function into a window of exactly `max_len` token ids:
/// BOS, the first `max_len − 2` content tokens, EOS, then PAD.
pub fn encode(vocab: &Vocab, function: &CodeFunction, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::invalid("max_len must be at least 3"));
    }
    let bytes = function.source_text.as_bytes();

    let mut token_ids = Vec::with_capacity(max_len);
    let mut tokens = Vec::with_capacity(max_len);
    let mut line_of_token = Vec::with_capacity(max_len);
    let mut spans = Vec::with_capacity(max_len);

    token_ids.push(BOS_ID);
    tokens.push("<BOS>".to_string());
    line_of_token.push(0);
    spans.push((0, 0));

    let budget = max_len - 2;
    let mut line = 1u32;
    'runs: for (offset, run) in pretokenize(bytes) {
        let mut ids: Vec<u32> = run.iter().map(|&b| FIRST_BYTE_ID + b as u32).collect();
        if ids.len() > 1 {
            vocab.merge_run(&mut ids);
        }
        let mut pos = offset;
        for id in ids {
            if token_ids.len() > budget {
                break 'runs;
            }
            let len = vocab.token_bytes(id).map_or(0, |b| b.len());
            token_ids.push(id);
            tokens.push(vocab.token_display(id));
            line_of_token.push(line);
            spans.push((pos, len));
            pos += len;
        }
        line += run.iter().filter(|&&b| b == b'\n').count() as u32;
    }

    token_ids.push(EOS_ID);
    tokens.push("<EOS>".to_string());
    line_of_token.push(0);
    spans.push((0, 0));
    let n_real = token_ids.len();

    while token_ids.len() < max_len {
        token_ids.push(PAD_ID);
        tokens.push("<PAD>".to_string());
        line_of_token.push(0);
        spans.push((0, 0));
    }

    Ok(TokenSequence {
        token_ids,
        tokens,
        line_of_token,
        spans,
        n_real,
    })
}

/// Recovers the byte content covered by the window's content tokens. Equal
/// to the function's source bytes whenever nothing was truncated.
pub fn decode(vocab: &Vocab, seq: &TokenSequence) -> Vec<u8> {
    let mut out = Vec::new();
    for &id in &seq.token_ids[..seq.n_real] {
        if let Some(bytes) = vocab.token_bytes(id) {
            out.extend_from_slice(bytes);
        }
    }
    out
}

/// Writes the vocabulary: magic line, special-id block, then ordered merges.
pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(VOCAB_MAGIC);
    out.push('\n');
    out.push_str(&format!("pad {PAD_ID}\nbos {BOS_ID}\neos {EOS_ID}\nunk {UNK_ID}\n"));
    out.push_str(&format!("merges {}\n", vocab.merges.len()));
    for &(l, r) in &vocab.merges {
        out.push_str(&format!("{l} {r}\n"));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a vocabulary previously written by [`save_vocab`]. The result
/// encodes identically to the vocabulary that was saved.
pub fn load_pretrained_vocab(path: &Path) -> Result<Vocab> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e)),
            None => Err(Error::format("vocab file truncated".to_string())),
        }
    };

    let header = next()?;
    if header != VOCAB_MAGIC {
        return Err(Error::format(format!(
            "expected header {VOCAB_MAGIC:?}, got {header:?}"
        )));
    }
    for (name, want) in [("pad", PAD_ID), ("bos", BOS_ID), ("eos", EOS_ID), ("unk", UNK_ID)] {
        let line = next()?;
        let expected = format!("{name} {want}");
        if line != expected {
            return Err(Error::format(format!(
                "missing or wrong special line: expected {expected:?}, got {line:?}"
            )));
        }
    }
    let merges_line = next()?;
    let count: usize = merges_line
        .strip_prefix("merges ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(format!("bad merges line {merges_line:?}")))?;
    let mut merges = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next()?;
        let mut parts = line.split(' ');
        let (l, r) = match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) => (l, r),
            _ => return Err(Error::format(format!("bad merge line {line:?}"))),
        };
        let l: u32 = l
            .parse()
            .map_err(|_| Error::format(format!("bad merge id {l:?}")))?;
        let r: u32 = r
            .parse()
            .map_err(|_| Error::format(format!("bad merge id {r:?}")))?;
        merges.push((l, r));
    }
    Vocab::from_merges(merges)
}
