//! Byte-level BPE with a reserved CTC blank.
//!
//! Pieces are byte strings over a fixed 256-symbol base alphabet, so any
//! UTF-8 input is encodable and decode(encode(x)) == x exactly. The blank
//! used by CTC is not a learned piece: its id is always `pieces.len()`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const BYTE_BASE: usize = 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {0} is smaller than the byte base alphabet (256)")]
    VocabTooSmall(usize),
    #[error("unknown token id {0} (vocab size {1})")]
    UnknownId(usize, usize),
    #[error("id {0} is the reserved blank and cannot be decoded")]
    BlankInDecode(usize),
    #[error("vocabulary file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Serialized form: pieces and merges as strings where each char's code
/// point is one byte value (latin-1 style), which keeps arbitrary byte
/// sequences representable in JSON.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
}

fn bytes_to_repr(b: &[u8]) -> String {
    b.iter().map(|&x| x as char).collect()
}

fn repr_to_bytes(s: &str) -> Vec<u8> {
    s.chars().map(|c| c as u32 as u8).collect()
}

/// An ordered BPE vocabulary. Ids 0..256 are the single bytes, ids
/// 256..pieces.len() are merged pieces in merge order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pieces: Vec<Vec<u8>>,
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    /// Merge rank keyed by the (left piece id, right piece id) pair.
    ranks: BTreeMap<(usize, usize), usize>,
    /// Piece bytes -> id, for encode.
    lookup: BTreeMap<Vec<u8>, usize>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    /// The reserved CTC blank: one past the last piece id.
    pub fn blank_id(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: usize) -> Option<&[u8]> {
        self.pieces.get(id).map(|p| p.as_slice())
    }

    fn from_merges(merges: Vec<(Vec<u8>, Vec<u8>)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..BYTE_BASE).map(|b| vec![b as u8]).collect();
        let mut lookup: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
        for (i, p) in pieces.iter().enumerate() {
            lookup.insert(p.clone(), i);
        }
        let mut ranks = BTreeMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let li = lookup[l];
            let ri = lookup[r];
            let mut joined = l.clone();
            joined.extend_from_slice(r);
            let id = pieces.len();
            pieces.push(joined.clone());
            lookup.insert(joined, id);
            ranks.insert((li, ri), rank);
        }
        Vocabulary { pieces, merges, ranks, lookup }
    }

    /// Greedy highest-frequency pair merging until `vocab_size` pieces
    /// exist. Ties break on the lexicographically smallest (left, right)
    /// byte pair, so training is deterministic.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self, TokenizerError> {
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }
        if vocab_size < BYTE_BASE {
            return Err(TokenizerError::VocabTooSmall(vocab_size));
        }
        // Working representation: one leading-space word per sequence, so a
        // merge can never span two words and every word keeps its own first
        // token (word timestamps hang off that token downstream).
        let mut seqs: Vec<Vec<usize>> = Vec::new();
        for s in corpus {
            for w in s.as_ref().split_whitespace() {
                let mut unit = Vec::with_capacity(w.len() + 1);
                unit.push(b' ' as usize);
                unit.extend(w.as_bytes().iter().map(|&b| b as usize));
                seqs.push(unit);
            }
        }
        if seqs.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut pieces: Vec<Vec<u8>> = (0..BYTE_BASE).map(|b| vec![b as u8]).collect();
        let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();

        while pieces.len() < vocab_size {
            let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            // Pick max count; tie-break on smallest (left bytes, right bytes).
            let best = counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (&pieces[pa.0], &pieces[pa.1]);
                        let kb = (&pieces[pb.0], &pieces[pb.1]);
                        kb.cmp(&ka) // reversed: smaller pair wins the max
                    })
                })
                .map(|(p, _)| *p);
            let Some((li, ri)) = best else { break };
            let new_id = pieces.len();
            let mut joined = pieces[li].clone();
            joined.extend_from_slice(&pieces[ri]);
            merges.push((pieces[li].clone(), pieces[ri].clone()));
            pieces.push(joined);
            for seq in &mut seqs {
                let mut out = Vec::with_capacity(seq.len());
                let mut i = 0;
                while i < seq.len() {
                    if i + 1 < seq.len() && seq[i] == li && seq[i + 1] == ri {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(seq[i]);
                        i += 1;
                    }
                }
                *seq = out;
            }
        }
        Ok(Self::from_merges(merges))
    }

    /// Encode by repeatedly applying the lowest-rank merge present.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text.as_bytes().iter().map(|&b| b as usize).collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for (pos, w) in ids.windows(2).enumerate() {
                if let Some(&rank) = self.ranks.get(&(w[0], w[1])) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, pos));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let li = self.lookup[l];
            let ri = self.lookup[r];
            let mut joined = l.clone();
            joined.extend_from_slice(r);
            let new_id = self.lookup[&joined];
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == li && ids[i + 1] == ri {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == self.blank_id() {
                return Err(TokenizerError::BlankInDecode(id));
            }
            let piece = self
                .pieces
                .get(id)
                .ok_or(TokenizerError::UnknownId(id, self.pieces.len()))?;
            bytes.extend_from_slice(piece);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = VocabFile {
            pieces: self.pieces.iter().map(|p| bytes_to_repr(p)).collect(),
            merges: self
                .merges
                .iter()
                .map(|(l, r)| (bytes_to_repr(l), bytes_to_repr(r)))
                .collect(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&text)?;
        let merges = file
            .merges
            .iter()
            .map(|(l, r)| (repr_to_bytes(l), repr_to_bytes(r)))
            .collect();
        Ok(Self::from_merges(merges))
    }
}
