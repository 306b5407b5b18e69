//! Exact inverted-index construction, search, persistence, and a
//! brute-force oracle.
//!
//! Postings store weights as f32 (quantized once at build time); score
//! accumulation is always 64-bit, so a saved-and-reloaded index scores every
//! query bit-identically to the index it was saved from.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::binio::{format_err, read_err, CountingReader};
use crate::sparsevec::{dot, SparseVector};
use crate::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"VDRI";
const INDEX_VERSION: u32 = 1;

/// Per-dimension posting lists over a document table. Immutable after build.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    vocab_size: usize,
    doc_table: Vec<String>,
    /// `postings[dim]` holds `(internal doc id, weight)` sorted by doc id.
    postings: Vec<Vec<(u32, f32)>>,
    nonzero_count: u64,
}

/// Ranked `(external doc id, score)` pairs, score descending, ties by lower
/// internal id.
pub type SearchResult = Vec<(String, f64)>;

/// Exact work counters for one search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchCounters {
    /// Posting lists visited (one per query dimension with a nonempty list).
    pub postings_scanned: u64,
    /// Posting entries accumulated (one multiply-add each).
    pub accumulator_updates: u64,
}

impl InvertedIndex {
    /// Build from `(external id, embedding)` pairs. Document order fixes the
    /// internal ids; weights are quantized to f32 here (entries that round
    /// to zero are dropped).
    pub fn build(vocab_size: usize, docs: &[(String, SparseVector)]) -> Result<Self> {
        let mut doc_table = Vec::with_capacity(docs.len());
        let mut seen = std::collections::HashSet::with_capacity(docs.len());
        let mut postings = vec![Vec::new(); vocab_size];
        let mut nonzero_count = 0u64;
        for (internal, (id, vec)) in docs.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateDocId { id: id.clone() });
            }
            doc_table.push(id.clone());
            for &(dim, w) in vec.entries() {
                if dim as usize >= vocab_size {
                    return Err(Error::invalid(format!(
                        "document {id:?} has dimension {dim} outside vocabulary of size {vocab_size}"
                    )));
                }
                let w32 = w as f32;
                if w32 == 0.0 {
                    continue;
                }
                postings[dim as usize].push((internal as u32, w32));
                nonzero_count += 1;
            }
        }
        Ok(Self {
            vocab_size,
            doc_table,
            postings,
            nonzero_count,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_docs(&self) -> usize {
        self.doc_table.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_table
    }

    pub fn nonzero_count(&self) -> u64 {
        self.nonzero_count
    }

    /// Reconstruct a document's stored vector by scanning all posting lists.
    pub fn doc_vector(&self, external_id: &str) -> Option<SparseVector> {
        let internal = self.doc_table.iter().position(|d| d == external_id)? as u32;
        let entries: Vec<(u32, f64)> = self
            .postings
            .iter()
            .enumerate()
            .filter_map(|(dim, list)| {
                list.binary_search_by_key(&internal, |e| e.0)
                    .ok()
                    .map(|pos| (dim as u32, f64::from(list[pos].1)))
            })
            .collect();
        Some(SparseVector::from_sorted_entries(entries).expect("postings are canonical"))
    }
}

/// Score by posting-list accumulation: for each query entry `(m, w)` and
/// posting `(doc, u)` in `postings[m]`, add `w * u` to the document's
/// accumulator. Returns the `top_n` documents by (score desc, internal id
/// asc); documents with score zero pad the tail in internal-id order.
pub fn search_with_counters(
    ix: &InvertedIndex,
    query: &SparseVector,
    top_n: usize,
) -> (SearchResult, SearchCounters) {
    let mut acc = vec![0.0f64; ix.num_docs()];
    let mut touched = vec![false; ix.num_docs()];
    let mut counters = SearchCounters::default();
    for &(dim, w) in query.entries() {
        if dim as usize >= ix.vocab_size {
            continue;
        }
        let list = &ix.postings[dim as usize];
        if list.is_empty() {
            continue;
        }
        counters.postings_scanned += 1;
        counters.accumulator_updates += list.len() as u64;
        for &(doc, u) in list {
            acc[doc as usize] += w * f64::from(u);
            touched[doc as usize] = true;
        }
    }

    let mut scored: Vec<(u32, f64)> = acc
        .iter()
        .enumerate()
        .filter(|&(doc, &s)| touched[doc] && s != 0.0)
        .map(|(doc, &s)| (doc as u32, s))
        .collect();
    scored.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(top_n);
    if scored.len() < top_n {
        // Pad with zero-score documents in internal-id order.
        let mut have: Vec<bool> = vec![false; ix.num_docs()];
        for &(doc, _) in &scored {
            have[doc as usize] = true;
        }
        for doc in 0..ix.num_docs() {
            if scored.len() == top_n {
                break;
            }
            if !have[doc] && (!touched[doc] || acc[doc] == 0.0) {
                scored.push((doc as u32, 0.0));
            }
        }
    }
    let result = scored
        .into_iter()
        .map(|(doc, s)| (ix.doc_table[doc as usize].clone(), s))
        .collect();
    (result, counters)
}

pub fn search(ix: &InvertedIndex, query: &SparseVector, top_n: usize) -> SearchResult {
    search_with_counters(ix, query, top_n).0
}

/// Search many queries one after another on the calling thread.
pub fn search_batch_seq(
    ix: &InvertedIndex,
    queries: &[SparseVector],
    top_n: usize,
) -> Vec<SearchResult> {
    queries.iter().map(|q| search(ix, q, top_n)).collect()
}

/// As [`search_batch_seq`], data-parallel over queries when the `parallel`
/// feature is enabled. The index is immutable and each query independent,
/// so results are byte-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn search_batch(
    ix: &InvertedIndex,
    queries: &[SparseVector],
    top_n: usize,
) -> Vec<SearchResult> {
    use rayon::prelude::*;
    queries.par_iter().map(|q| search(ix, q, top_n)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn search_batch(
    ix: &InvertedIndex,
    queries: &[SparseVector],
    top_n: usize,
) -> Vec<SearchResult> {
    search_batch_seq(ix, queries, top_n)
}

/// Oracle route: dot every document against the query directly, then apply
/// the same ordering rules as [`search`].
pub fn brute_force_search(
    docs: &[(String, SparseVector)],
    query: &SparseVector,
    top_n: usize,
) -> SearchResult {
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, (_, vec))| (i, dot(query, vec)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    scored
        .into_iter()
        .take(top_n)
        .map(|(i, s)| (docs[i].0.clone(), s))
        .collect()
}

/// Summary of per-dimension posting-list lengths (nonempty dimensions only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostingLengths {
    pub min: usize,
    pub median: usize,
    pub max: usize,
}

/// Exact index statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexStats {
    pub num_docs: usize,
    pub nonzero_count: u64,
    pub nonempty_dims: usize,
    pub posting_lengths: Option<PostingLengths>,
}

pub fn stats(ix: &InvertedIndex) -> IndexStats {
    let mut lengths: Vec<usize> = ix
        .postings
        .iter()
        .map(Vec::len)
        .filter(|&l| l > 0)
        .collect();
    lengths.sort_unstable();
    IndexStats {
        num_docs: ix.num_docs(),
        nonzero_count: ix.nonzero_count,
        nonempty_dims: lengths.len(),
        posting_lengths: (!lengths.is_empty()).then(|| PostingLengths {
            min: lengths[0],
            median: lengths[lengths.len() / 2],
            max: lengths[lengths.len() - 1],
        }),
    }
}

/// Serialize: magic `VDRI`, version, vocab size, doc count, nonempty-dim
/// count, then per nonempty dimension its id, posting count, and
/// `(doc u64, weight f32)` pairs, then the doc table as length-prefixed
/// UTF-8. All integers little-endian.
pub fn save(ix: &InvertedIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(INDEX_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(INDEX_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(ix.vocab_size as u32)
        .map_err(io)?;
    w.write_u64::<LittleEndian>(ix.num_docs() as u64)
        .map_err(io)?;
    let nonempty = ix.postings.iter().filter(|l| !l.is_empty()).count() as u64;
    w.write_u64::<LittleEndian>(nonempty).map_err(io)?;
    for (dim, list) in ix.postings.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        w.write_u32::<LittleEndian>(dim as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(list.len() as u64).map_err(io)?;
        for &(doc, weight) in list {
            w.write_u64::<LittleEndian>(u64::from(doc)).map_err(io)?;
            w.write_f32::<LittleEndian>(weight).map_err(io)?;
        }
    }
    w.write_u64::<LittleEndian>(ix.num_docs() as u64)
        .map_err(io)?;
    for doc in &ix.doc_table {
        let bytes = doc.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)
            .map_err(io)?;
        w.write_all(bytes).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<InvertedIndex> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| read_err(path, 0, e))?;
    if &magic != INDEX_MAGIC {
        return Err(format_err(path, 0, "bad magic"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, 4, e))?;
    if version != INDEX_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let vocab_size = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, 8, e))? as usize;
    let num_docs = r
        .read_u64::<LittleEndian>()
        .map_err(|e| read_err(path, 12, e))? as usize;
    let nonempty = r
        .read_u64::<LittleEndian>()
        .map_err(|e| read_err(path, 20, e))?;
    if nonempty > vocab_size as u64 {
        return Err(format_err(
            path,
            20,
            format!("{nonempty} nonempty dimensions exceeds vocabulary size {vocab_size}"),
        ));
    }

    let mut postings = vec![Vec::new(); vocab_size];
    let mut nonzero_count = 0u64;
    let mut prev_dim: Option<u32> = None;
    for _ in 0..nonempty {
        let at = r.offset();
        let dim = r
            .read_u32::<LittleEndian>()
            .map_err(|e| read_err(path, at, e))?;
        if dim as usize >= vocab_size {
            return Err(format_err(
                path,
                at,
                format!("dimension {dim} out of range"),
            ));
        }
        if prev_dim.is_some_and(|p| p >= dim) {
            return Err(format_err(path, at, "dimensions not strictly increasing"));
        }
        prev_dim = Some(dim);
        let at = r.offset();
        let count = r
            .read_u64::<LittleEndian>()
            .map_err(|e| read_err(path, at, e))?;
        if count > num_docs as u64 {
            return Err(format_err(
                path,
                at,
                format!("posting count {count} exceeds document count {num_docs}"),
            ));
        }
        let mut list = Vec::with_capacity(count as usize);
        let mut prev_doc: Option<u64> = None;
        for _ in 0..count {
            let at = r.offset();
            let doc = r
                .read_u64::<LittleEndian>()
                .map_err(|e| read_err(path, at, e))?;
            let weight = r
                .read_f32::<LittleEndian>()
                .map_err(|e| read_err(path, at, e))?;
            if doc >= num_docs as u64 {
                return Err(format_err(path, at, format!("doc id {doc} out of range")));
            }
            if prev_doc.is_some_and(|p| p >= doc) {
                return Err(format_err(
                    path,
                    at,
                    "posting doc ids not strictly increasing",
                ));
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(format_err(
                    path,
                    at,
                    format!("invalid posting weight {weight}"),
                ));
            }
            prev_doc = Some(doc);
            list.push((doc as u32, weight));
            nonzero_count += 1;
        }
        postings[dim as usize] = list;
    }

    let at = r.offset();
    let table_len = r
        .read_u64::<LittleEndian>()
        .map_err(|e| read_err(path, at, e))?;
    if table_len != num_docs as u64 {
        return Err(format_err(
            path,
            at,
            format!("doc table length {table_len} does not match header {num_docs}"),
        ));
    }
    let mut doc_table = Vec::with_capacity(num_docs);
    for _ in 0..num_docs {
        let at = r.offset();
        let len = r
            .read_u32::<LittleEndian>()
            .map_err(|e| read_err(path, at, e))? as usize;
        if len > 1 << 20 {
            return Err(format_err(
                path,
                at,
                format!("doc id length {len} is implausible"),
            ));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|e| read_err(path, at, e))?;
        let id = String::from_utf8(buf)
            .map_err(|_| format_err(path, at, "doc id is not valid UTF-8"))?;
        doc_table.push(id);
    }

    let end = r.offset();
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(format_err(path, end, "trailing bytes")),
        Err(e) => return Err(read_err(path, end, e)),
    }

    Ok(InvertedIndex {
        vocab_size,
        doc_table,
        postings,
        nonzero_count,
    })
}

/// Plain-text embedding dump for debugging: one line per document, the
/// external id followed by tab-separated `dim:weight` pairs.
pub fn write_embedding_dump<W: Write>(
    docs: &[(String, SparseVector)],
    out: &mut W,
) -> std::io::Result<()> {
    for (id, vec) in docs {
        write!(out, "{id}")?;
        for &(dim, w) in vec.entries() {
            write!(out, "\t{dim}:{w}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
