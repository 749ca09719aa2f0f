//! Incremental binary vocabulary and inverted index.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{hamming, BinaryDescriptor, DESC_BYTES, DESC_DIM};
use crate::mapping::KeyframeId;

pub type WordId = u32;

const SCAN_CHUNK: usize = 8192;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisualWord {
    pub id: WordId,
    /// The descriptor that created the word; never updated.
    pub centroid: BinaryDescriptor,
    pub hit_count: u64,
}

/// Words with exact nearest-centroid lookup. A table keyed by the first 16
/// bits gives an early exit on exact prefix hits; otherwise all words are
/// scanned.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vocabulary {
    pub tau: u32,
    words: Vec<VisualWord>,
    buckets: HashMap<u16, Vec<WordId>>,
    /// Centroids as machine words, for the linear scan.
    packed: Vec<[u64; 4]>,
}

impl Vocabulary {
    pub fn new(tau: u32) -> Self {
        Self {
            tau,
            words: Vec::new(),
            buckets: HashMap::new(),
            packed: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[VisualWord] {
        &self.words
    }

    /// Closest word and its distance, ties to the lower id.
    pub fn nearest(&self, d: &BinaryDescriptor) -> Option<(WordId, u32)> {
        if let Some(ids) = self.buckets.get(&d.prefix16()) {
            if let Some(&id) = ids.iter().find(|&&id| self.words[id as usize].centroid == *d) {
                return Some((id, 0));
            }
        }
        let q = d.words();
        let dist = |c: &[u64; 4]| (q[0] ^ c[0]).count_ones() + (q[1] ^ c[1]).count_ones() + (q[2] ^ c[2]).count_ones() + (q[3] ^ c[3]).count_ones();
        // (distance, id) minimum; chunks keep the order so ties go to the lower id
        self.packed
            .par_chunks(SCAN_CHUNK)
            .enumerate()
            .filter_map(|(ci, chunk)| {
                let mut best: Option<(u32, usize)> = None;
                for (i, c) in chunk.iter().enumerate() {
                    let h = dist(c);
                    if best.is_none_or(|(bh, _)| h < bh) {
                        best = Some((h, ci * SCAN_CHUNK + i));
                        if h == 0 {
                            break;
                        }
                    }
                }
                best
            })
            .min()
            .map(|(h, i)| (i as WordId, h))
    }

    /// Nearest word within `tau`, otherwise a new word seeded by `d`.
    pub fn assign_or_create(&mut self, d: &BinaryDescriptor) -> WordId {
        if let Some((id, h)) = self.nearest(d) {
            if h <= self.tau {
                self.words[id as usize].hit_count += 1;
                return id;
            }
        }
        let id = self.words.len() as WordId;
        self.words.push(VisualWord {
            id,
            centroid: *d,
            hit_count: 1,
        });
        self.buckets.entry(d.prefix16()).or_default().push(id);
        self.packed.push(d.words());
        id
    }
}

/// One keypoint of one keyframe filed under a word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Posting {
    pub keyframe: KeyframeId,
    pub keypoint: u32,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct InvertedIndex {
    pub postings: Vec<Vec<Posting>>,
    /// Word and descriptor of every keypoint of every indexed keyframe.
    pub keyframes: BTreeMap<KeyframeId, Vec<(WordId, BinaryDescriptor)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCandidate {
    pub keyframe: KeyframeId,
    pub score: f64,
    /// (query keypoint, candidate keypoint, Hamming distance).
    pub matches: Vec<(usize, usize, u32)>,
}

/// `mean(1 − h / 256)` over the matches; zero for no matches.
pub fn similarity_score(distances: impl IntoIterator<Item = u32>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for h in distances {
        sum += 1.0 - h as f64 / DESC_DIM as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl InvertedIndex {
    pub fn contains(&self, kf: KeyframeId) -> bool {
        self.keyframes.contains_key(&kf)
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    /// Files every keypoint of `kf` under its word.
    pub fn insert(&mut self, kf: KeyframeId, words: &[WordId], descriptors: &[BinaryDescriptor]) {
        debug_assert_eq!(words.len(), descriptors.len());
        if self.keyframes.contains_key(&kf) {
            self.remove(kf);
        }
        for (i, &w) in words.iter().enumerate() {
            if self.postings.len() <= w as usize {
                self.postings.resize(w as usize + 1, Vec::new());
            }
            self.postings[w as usize].push(Posting {
                keyframe: kf,
                keypoint: i as u32,
            });
        }
        self.keyframes.insert(kf, words.iter().copied().zip(descriptors.iter().copied()).collect());
    }

    pub fn remove(&mut self, kf: KeyframeId) {
        if let Some(entries) = self.keyframes.remove(&kf) {
            for (w, _) in entries {
                self.postings[w as usize].retain(|p| p.keyframe != kf);
            }
        }
    }

    /// Candidates sharing words with the query, excluding the `exclude_recent`
    /// most recent indexed keyframes. Tentative matches are mutual nearest
    /// neighbours among same-word pairs. Only candidates with at least
    /// `min_matches` matches are kept; sorted by descending score, then id.
    pub fn query(&self, words: &[WordId], descriptors: &[BinaryDescriptor], exclude_recent: usize, min_matches: usize) -> Vec<LoopCandidate> {
        let eligible = self.keyframes.len().saturating_sub(exclude_recent);
        let Some(&last_ok) = self.keyframes.keys().nth(eligible.wrapping_sub(1)).filter(|_| eligible > 0) else {
            return Vec::new();
        };
        // query keypoints per word
        let mut by_word: HashMap<WordId, Vec<usize>> = HashMap::new();
        for (qi, &w) in words.iter().enumerate() {
            by_word.entry(w).or_default().push(qi);
        }
        let mut best_q: Vec<Option<(u32, usize)>> = vec![None; words.len()];
        let mut touched: Vec<usize> = Vec::new();
        let mut out = Vec::new();
        for (&kf, entries) in self.keyframes.range(..=last_ok) {
            // mutual best among same-word pairs: (distance, other index) minima
            let mut best_c: Vec<Option<(u32, usize)>> = vec![None; entries.len()];
            for (ci, (w, cd)) in entries.iter().enumerate() {
                let Some(qs) = by_word.get(w) else { continue };
                for &qi in qs {
                    let h = hamming(&descriptors[qi], cd);
                    if best_q[qi].is_none_or(|b| (h, ci) < b) {
                        if best_q[qi].is_none() {
                            touched.push(qi);
                        }
                        best_q[qi] = Some((h, ci));
                    }
                    if best_c[ci].is_none_or(|b| (h, qi) < b) {
                        best_c[ci] = Some((h, qi));
                    }
                }
            }
            touched.sort_unstable();
            let matches: Vec<(usize, usize, u32)> = touched
                .iter()
                .filter_map(|&q| {
                    let (h, c) = best_q[q]?;
                    (best_c[c].map(|b| b.1) == Some(q)).then_some((q, c, h))
                })
                .collect();
            for &q in &touched {
                best_q[q] = None;
            }
            touched.clear();
            if matches.len() >= min_matches.max(1) {
                out.push(LoopCandidate {
                    keyframe: kf,
                    score: similarity_score(matches.iter().map(|m| m.2)),
                    matches,
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.keyframe.cmp(&b.keyframe)));
        out
    }
}

const MAGIC: &[u8; 4] = b"IBOW";
const VERSION: u32 = 1;

/// Layout: magic, version, τ, word count, per word the centroid and hit
/// count, then per word a posting list, then the per-keyframe descriptor
/// table used for match confirmation.
pub fn write_index<W: Write>(mut out: W, vocab: &Vocabulary, index: &InvertedIndex) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&vocab.tau.to_le_bytes())?;
    out.write_all(&(vocab.len() as u32).to_le_bytes())?;
    for w in &vocab.words {
        out.write_all(&w.centroid.0)?;
        out.write_all(&w.hit_count.to_le_bytes())?;
    }
    for i in 0..vocab.len() {
        let list = index.postings.get(i).map(Vec::as_slice).unwrap_or(&[]);
        out.write_all(&(list.len() as u32).to_le_bytes())?;
        for p in list {
            out.write_all(&p.keyframe.to_le_bytes())?;
            out.write_all(&p.keypoint.to_le_bytes())?;
        }
    }
    out.write_all(&(index.keyframes.len() as u32).to_le_bytes())?;
    for (kf, entries) in &index.keyframes {
        out.write_all(&kf.to_le_bytes())?;
        out.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (w, d) in entries {
            out.write_all(&w.to_le_bytes())?;
            out.write_all(&d.0)?;
        }
    }
    out.flush()
}

fn take<const N: usize, R: Read>(r: &mut R, section: &'static str, record: usize) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::parse(section, record, "unexpected end of file"))?;
    Ok(b)
}

pub fn read_index<R: Read>(mut r: R) -> Result<(Vocabulary, InvertedIndex)> {
    let h = "IBOW header";
    if &take::<4, _>(&mut r, h, 0)? != MAGIC {
        return Err(Error::parse(h, 0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut r, h, 0)?);
    if version != VERSION {
        return Err(Error::parse(h, 0, format!("unsupported version {version}")));
    }
    let mut vocab = Vocabulary::new(u32::from_le_bytes(take(&mut r, h, 0)?));
    let n = u32::from_le_bytes(take(&mut r, h, 0)?) as usize;
    for i in 0..n {
        let c = BinaryDescriptor(take::<DESC_BYTES, _>(&mut r, "IBOW word", i)?);
        let hits = u64::from_le_bytes(take(&mut r, "IBOW word", i)?);
        vocab.words.push(VisualWord {
            id: i as WordId,
            centroid: c,
            hit_count: hits,
        });
        vocab.buckets.entry(c.prefix16()).or_default().push(i as WordId);
        vocab.packed.push(c.words());
    }
    let mut index = InvertedIndex {
        postings: vec![Vec::new(); n],
        keyframes: BTreeMap::new(),
    };
    for i in 0..n {
        let m = u32::from_le_bytes(take(&mut r, "IBOW postings", i)?) as usize;
        for _ in 0..m {
            let keyframe = u64::from_le_bytes(take(&mut r, "IBOW postings", i)?);
            let keypoint = u32::from_le_bytes(take(&mut r, "IBOW postings", i)?);
            index.postings[i].push(Posting { keyframe, keypoint });
        }
    }
    let k = u32::from_le_bytes(take(&mut r, "IBOW keyframes", 0)?) as usize;
    for rec in 0..k {
        let kf = u64::from_le_bytes(take(&mut r, "IBOW keyframes", rec)?);
        let m = u32::from_le_bytes(take(&mut r, "IBOW keyframes", rec)?) as usize;
        let mut entries = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let w = u32::from_le_bytes(take(&mut r, "IBOW keyframes", rec)?);
            if w as usize >= n {
                return Err(Error::parse("IBOW keyframes", rec, format!("word {w} out of range")));
            }
            entries.push((w, BinaryDescriptor(take::<DESC_BYTES, _>(&mut r, "IBOW keyframes", rec)?)));
        }
        if index.keyframes.insert(kf, entries).is_some() {
            return Err(Error::parse("IBOW keyframes", rec, format!("keyframe {kf} listed twice")));
        }
    }
    for (w, list) in index.postings.iter().enumerate() {
        for p in list {
            let ok = index
                .keyframes
                .get(&p.keyframe)
                .and_then(|e| e.get(p.keypoint as usize))
                .is_some_and(|(pw, _)| *pw as usize == w);
            if !ok {
                return Err(Error::parse("IBOW postings", w, format!("posting ({}, {}) has no keyframe entry", p.keyframe, p.keypoint)));
            }
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::parse("IBOW trailer", 0, e.to_string()))? != 0 {
        return Err(Error::parse("IBOW trailer", 0, "data after the keyframe table"));
    }
    Ok((vocab, index))
}

pub fn save_index(path: &Path, vocab: &Vocabulary, index: &InvertedIndex) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_index(BufWriter::new(f), vocab, index).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<(Vocabulary, InvertedIndex)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_index(BufReader::new(f))
}
