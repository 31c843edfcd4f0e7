//! Just-in-time streaming vertex-value sources. A source yields
//! strictly-increasing-key `(vertex, value)` entries one at a time;
//! combinators compose sources lazily so current values and active lists
//! are computed on demand without random storage writes.

use std::sync::Arc;

use crate::bloom::BloomFilter;
use crate::error::{Error, Result};
use crate::storage::{Store, StripedFile};
use crate::value::{from_slice, ValueBytes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VertexEntry {
    pub key: u64,
    pub value: ValueBytes,
}

/// Streaming protocol: `has_next(idx)` fast-forwards past keys < idx and
/// reports whether anything remains; `get_next` is valid only after a true
/// `has_next`; `rewind` restores the stream (recursively for compounds).
pub trait VertexSource {
    fn has_next(&mut self, idx: Option<u64>) -> Result<bool>;
    fn get_next(&mut self) -> Result<VertexEntry>;
    fn rewind(&mut self) -> Result<()>;
}

pub type BoxSource = Box<dyn VertexSource + Send>;

/// Drains a source into a vector; test and materialization helper.
pub fn drain(src: &mut dyn VertexSource) -> Result<Vec<VertexEntry>> {
    let mut out = Vec::new();
    while src.has_next(None)? {
        out.push(src.get_next()?);
    }
    Ok(out)
}

/// In-memory source over a pre-sorted entry list.
pub struct MemorySource {
    entries: Arc<Vec<VertexEntry>>,
    pos: usize,
}

impl MemorySource {
    pub fn new(entries: Vec<VertexEntry>) -> MemorySource {
        debug_assert!(entries.windows(2).all(|w| w[0].key < w[1].key));
        MemorySource {
            entries: Arc::new(entries),
            pos: 0,
        }
    }

    pub fn from_pairs(pairs: &[(u64, ValueBytes)]) -> MemorySource {
        MemorySource::new(
            pairs
                .iter()
                .map(|&(key, value)| VertexEntry { key, value })
                .collect(),
        )
    }
}

impl VertexSource for MemorySource {
    fn has_next(&mut self, idx: Option<u64>) -> Result<bool> {
        if let Some(idx) = idx {
            while self.pos < self.entries.len() && self.entries[self.pos].key < idx {
                self.pos += 1;
            }
        }
        Ok(self.pos < self.entries.len())
    }

    fn get_next(&mut self) -> Result<VertexEntry> {
        let e = *self
            .entries
            .get(self.pos)
            .ok_or_else(|| Error::Contract("get_next on exhausted source".into()))?;
        self.pos += 1;
        Ok(e)
    }

    fn rewind(&mut self) -> Result<()> {
        self.pos = 0;
        Ok(())
    }
}

/// Source over a storage file of sorted `(key u64, value)` records, read
/// through a bounded look-ahead buffer. `data_offset` skips a leading
/// header (e.g. a run header).
pub struct SparseFileSource {
    file: StripedFile,
    value_width: usize,
    data_offset: u64,
    read_ahead: usize,
    buf: Vec<u8>,
    buf_pos: usize,
    file_pos: u64,
    pending: Option<VertexEntry>,
    last_key: Option<u64>,
    last_idx: Option<u64>,
}

impl SparseFileSource {
    pub fn new(file: StripedFile, value_width: usize, data_offset: u64) -> Result<SparseFileSource> {
        SparseFileSource::with_read_ahead(file, value_width, data_offset, 1 << 20)
    }

    pub fn with_read_ahead(
        file: StripedFile,
        value_width: usize,
        data_offset: u64,
        read_ahead: usize,
    ) -> Result<SparseFileSource> {
        let rec = 8 + value_width as u64;
        if (file.len() - data_offset) % rec != 0 {
            return Err(Error::Format(format!(
                "{}: length not a multiple of record width",
                file.name()
            )));
        }
        Ok(SparseFileSource {
            file,
            value_width,
            data_offset,
            read_ahead: read_ahead.max(64),
            buf: Vec::new(),
            buf_pos: 0,
            file_pos: data_offset,
            pending: None,
            last_key: None,
            last_idx: None,
        })
    }

    fn record_width(&self) -> usize {
        8 + self.value_width
    }

    fn fetch(&mut self) -> Result<Option<VertexEntry>> {
        if self.pending.is_some() {
            return Ok(self.pending);
        }
        let rec = self.record_width();
        if self.buf.len() - self.buf_pos < rec {
            let tail = self.buf[self.buf_pos..].to_vec();
            let remaining = self.file.len() - self.file_pos;
            if remaining == 0 {
                if !tail.is_empty() {
                    return Err(Error::Format(format!("{}: truncated record", self.file.name())));
                }
                return Ok(None);
            }
            let take = (self.read_ahead as u64).min(remaining);
            let fresh = self.file.read_at(self.file_pos, take)?;
            self.file_pos += take;
            self.buf = tail;
            self.buf.extend_from_slice(&fresh);
            self.buf_pos = 0;
            if self.buf.len() < rec {
                return Err(Error::Format(format!("{}: truncated record", self.file.name())));
            }
        }
        let at = self.buf_pos;
        let key = u64::from_le_bytes(self.buf[at..at + 8].try_into().unwrap());
        let value = from_slice(&self.buf[at + 8..at + rec]);
        self.buf_pos += rec;
        if let Some(prev) = self.last_key {
            if key <= prev {
                return Err(Error::Corrupt {
                    run: self.file.name().to_string(),
                    msg: format!("keys not strictly increasing ({prev} then {key})"),
                });
            }
        }
        self.last_key = Some(key);
        self.pending = Some(VertexEntry { key, value });
        Ok(self.pending)
    }
}

fn check_idx_monotone(last_idx: &mut Option<u64>, idx: Option<u64>) -> Result<()> {
    if let Some(idx) = idx {
        if let Some(prev) = *last_idx {
            if idx < prev {
                return Err(Error::Contract(format!(
                    "has_next idx decreased ({prev} then {idx})"
                )));
            }
        }
        *last_idx = Some(idx);
    }
    Ok(())
}

impl VertexSource for SparseFileSource {
    fn has_next(&mut self, idx: Option<u64>) -> Result<bool> {
        check_idx_monotone(&mut self.last_idx, idx)?;
        loop {
            match self.fetch()? {
                None => return Ok(false),
                Some(e) => match idx {
                    Some(idx) if e.key < idx => {
                        self.pending = None;
                    }
                    _ => return Ok(true),
                },
            }
        }
    }

    fn get_next(&mut self) -> Result<VertexEntry> {
        match self.fetch()? {
            Some(e) => {
                self.pending = None;
                Ok(e)
            }
            None => Err(Error::Contract("get_next on exhausted source".into())),
        }
    }

    fn rewind(&mut self) -> Result<()> {
        self.buf.clear();
        self.buf_pos = 0;
        self.file_pos = self.data_offset;
        self.pending = None;
        self.last_key = None;
        self.last_idx = None;
        Ok(())
    }
}

pub const DENSE_PREAMBLE_BYTES: u64 = 16;
pub const DENSE_FLAG_BLOOM: u32 = 1;

/// Writes a dense vertex file: 16-byte preamble (value_width u32, default
/// pattern up to 8 bytes, flags u32) then `num_vertices` fixed-width values.
/// `values` yields (key, value) for non-default keys in ascending order;
/// gaps are filled with the default. A bloom sidecar over the non-default
/// keys is written when `with_bloom` is set.
pub fn write_dense_file(
    store: &Store,
    name: &str,
    num_vertices: u64,
    value_width: usize,
    default: ValueBytes,
    values: &mut dyn VertexSource,
    with_bloom: bool,
) -> Result<()> {
    assert!(value_width <= 8 || !with_bloom || value_width <= 16);
    let file = store.create(name)?;
    let mut preamble = [0u8; DENSE_PREAMBLE_BYTES as usize];
    preamble[0..4].copy_from_slice(&(value_width as u32).to_le_bytes());
    preamble[4..12].copy_from_slice(&default[..8]);
    let flags = if with_bloom { DENSE_FLAG_BLOOM } else { 0 };
    preamble[12..16].copy_from_slice(&flags.to_le_bytes());
    file.append(&preamble)?;

    let mut bloom = with_bloom.then(|| BloomFilter::with_capacity(num_vertices.max(1)));
    let mut buf: Vec<u8> = Vec::with_capacity(1 << 16);
    let mut next = 0u64;
    while values.has_next(None)? {
        let e = values.get_next()?;
        if e.key >= num_vertices {
            return Err(Error::Bounds(format!(
                "dense write: key {} >= num_vertices {num_vertices}",
                e.key
            )));
        }
        while next < e.key {
            buf.extend_from_slice(&default[..value_width]);
            next += 1;
            if buf.len() >= 1 << 16 {
                file.append(&buf)?;
                buf.clear();
            }
        }
        buf.extend_from_slice(&e.value[..value_width]);
        next += 1;
        if let Some(b) = bloom.as_mut() {
            b.insert(e.key);
        }
        if buf.len() >= 1 << 16 {
            file.append(&buf)?;
            buf.clear();
        }
    }
    while next < num_vertices {
        buf.extend_from_slice(&default[..value_width]);
        next += 1;
        if buf.len() >= 1 << 16 {
            file.append(&buf)?;
            buf.clear();
        }
    }
    file.append(&buf)?;
    file.flush()?;
    if let Some(b) = bloom {
        b.write_sidecar(store, &format!("{name}.bloom"))?;
    }
    Ok(())
}

/// Source over a dense vertex file. Yields every vertex id in order; with a
/// target idx it jumps straight to position idx. When a bloom sidecar is
/// present, `probe` can skip default-valued vertices without touching the
/// data pages.
pub struct DenseFileSource {
    file: StripedFile,
    num_vertices: u64,
    value_width: usize,
    pub default: ValueBytes,
    bloom: Option<BloomFilter>,
    read_ahead: usize,
    buf: Vec<u8>,
    buf_start: u64, // vertex id of buf[0]
    next: u64,
    last_idx: Option<u64>,
}

impl DenseFileSource {
    pub fn open(store: &Store, name: &str) -> Result<DenseFileSource> {
        DenseFileSource::open_with_read_ahead(store, name, 1 << 20)
    }

    pub fn open_with_read_ahead(
        store: &Store,
        name: &str,
        read_ahead: usize,
    ) -> Result<DenseFileSource> {
        let file = store.open_file(name)?;
        let preamble = file.read_at(0, DENSE_PREAMBLE_BYTES)?;
        let value_width = u32::from_le_bytes(preamble[0..4].try_into().unwrap()) as usize;
        if value_width == 0 || value_width > 16 {
            return Err(Error::Format(format!("{name}: bad value width {value_width}")));
        }
        let mut default = [0u8; 16];
        default[..8].copy_from_slice(&preamble[4..12]);
        let flags = u32::from_le_bytes(preamble[12..16].try_into().unwrap());
        let data_len = file.len() - DENSE_PREAMBLE_BYTES;
        if data_len % value_width as u64 != 0 {
            return Err(Error::Format(format!("{name}: length mismatch")));
        }
        let bloom = if flags & DENSE_FLAG_BLOOM != 0 {
            let sidecar = store.open_file(&format!("{name}.bloom"))?;
            Some(BloomFilter::read_sidecar(&sidecar)?)
        } else {
            None
        };
        Ok(DenseFileSource {
            file,
            num_vertices: data_len / value_width as u64,
            value_width,
            default,
            bloom,
            read_ahead: read_ahead.max(64),
            buf: Vec::new(),
            buf_start: 0,
            next: 0,
            last_idx: None,
        })
    }

    pub fn num_vertices(&self) -> u64 {
        self.num_vertices
    }

    pub fn value_width(&self) -> usize {
        self.value_width
    }

    /// Bloom-gated membership: false means the vertex definitely holds the
    /// default value. Without a sidecar, always true.
    pub fn probe(&self, key: u64) -> bool {
        self.bloom.as_ref().map_or(true, |b| b.may_contain(key))
    }

    pub fn value_at(&mut self, key: u64) -> Result<ValueBytes> {
        if key >= self.num_vertices {
            return Err(Error::Bounds(format!(
                "vertex {key} >= num_vertices {}",
                self.num_vertices
            )));
        }
        let vw = self.value_width as u64;
        let in_buf = key >= self.buf_start && (key - self.buf_start) * vw < self.buf.len() as u64;
        if !in_buf {
            let start = key;
            let take_recs = ((self.read_ahead as u64) / vw).max(1).min(self.num_vertices - start);
            self.buf = self
                .file
                .read_at(DENSE_PREAMBLE_BYTES + start * vw, take_recs * vw)?;
            self.buf_start = start;
        }
        let at = ((key - self.buf_start) * vw) as usize;
        Ok(from_slice(&self.buf[at..at + self.value_width]))
    }
}

impl VertexSource for DenseFileSource {
    fn has_next(&mut self, idx: Option<u64>) -> Result<bool> {
        check_idx_monotone(&mut self.last_idx, idx)?;
        if let Some(idx) = idx {
            // Dense layout: position idx is addressable directly.
            self.next = self.next.max(idx);
        }
        Ok(self.next < self.num_vertices)
    }

    fn get_next(&mut self) -> Result<VertexEntry> {
        if self.next >= self.num_vertices {
            return Err(Error::Contract("get_next on exhausted source".into()));
        }
        let key = self.next;
        let value = self.value_at(key)?;
        self.next += 1;
        Ok(VertexEntry { key, value })
    }

    fn rewind(&mut self) -> Result<()> {
        self.next = 0;
        self.buf.clear();
        self.buf_start = 0;
        self.last_idx = None;
        Ok(())
    }
}

/// Maps each value through `f`, keys unchanged.
pub struct ArithSource<F: FnMut(&ValueBytes) -> ValueBytes> {
    input: BoxSource,
    f: F,
}

impl<F: FnMut(&ValueBytes) -> ValueBytes> ArithSource<F> {
    pub fn new(input: BoxSource, f: F) -> Self {
        ArithSource { input, f }
    }
}

impl<F: FnMut(&ValueBytes) -> ValueBytes + Send> VertexSource for ArithSource<F> {
    fn has_next(&mut self, idx: Option<u64>) -> Result<bool> {
        self.input.has_next(idx)
    }

    fn get_next(&mut self) -> Result<VertexEntry> {
        let e = self.input.get_next()?;
        Ok(VertexEntry {
            key: e.key,
            value: (self.f)(&e.value),
        })
    }

    fn rewind(&mut self) -> Result<()> {
        self.input.rewind()
    }
}

pub enum LogicalOp {
    /// All keys of a ∪ b; a's value wins on a match.
    Union,
    /// Entries of a whose keys are absent from b.
    Difference,
    /// (k, min(va, vb)) for keys in both, under the given ordering.
    Minimum(Box<dyn Fn(&ValueBytes, &ValueBytes) -> std::cmp::Ordering + Send>),
    /// g(va, vb) on a match; non-matching entries pass through unchanged.
    Custom(Box<dyn Fn(&ValueBytes, &ValueBytes) -> ValueBytes + Send>),
    /// Entries of a judged "not converged" against b's matching value.
    Converge(Box<dyn Fn(&ValueBytes, &ValueBytes) -> bool + Send>),
}

/// Merge-style single pass over two key-sorted sources.
pub struct LogicalSource {
    op: LogicalOp,
    a: BoxSource,
    b: BoxSource,
    a_pend: Option<VertexEntry>,
    b_pend: Option<VertexEntry>,
    out_pend: Option<VertexEntry>,
}

impl LogicalSource {
    pub fn new(op: LogicalOp, a: BoxSource, b: BoxSource) -> LogicalSource {
        LogicalSource {
            op,
            a,
            b,
            a_pend: None,
            b_pend: None,
            out_pend: None,
        }
    }

    fn pull(
        src: &mut BoxSource,
        pend: &mut Option<VertexEntry>,
        idx: Option<u64>,
    ) -> Result<Option<VertexEntry>> {
        if let Some(e) = *pend {
            if idx.map_or(true, |i| e.key >= i) {
                return Ok(Some(e));
            }
            *pend = None;
        }
        if src.has_next(idx)? {
            *pend = Some(src.get_next()?);
        }
        Ok(*pend)
    }

    fn step(&mut self, idx: Option<u64>) -> Result<Option<VertexEntry>> {
        if let Some(e) = self.out_pend {
            if idx.map_or(true, |i| e.key >= i) {
                return Ok(Some(e));
            }
            self.out_pend = None;
        }
        loop {
            // For Converge/Minimum/Difference, b entries below a's cursor are
            // irrelevant; still pull both sides at the caller's idx so the
            // pass stays merge-shaped.
            let a = Self::pull(&mut self.a, &mut self.a_pend, idx)?;
            let b = Self::pull(&mut self.b, &mut self.b_pend, idx)?;
            let produced = match (&self.op, a, b) {
                (LogicalOp::Union, Some(ae), Some(be)) => {
                    if ae.key < be.key {
                        self.a_pend = None;
                        Some(ae)
                    } else if be.key < ae.key {
                        self.b_pend = None;
                        Some(be)
                    } else {
                        self.a_pend = None;
                        self.b_pend = None;
                        Some(ae)
                    }
                }
                (LogicalOp::Union, Some(ae), None) => {
                    self.a_pend = None;
                    Some(ae)
                }
                (LogicalOp::Union, None, Some(be)) => {
                    self.b_pend = None;
                    Some(be)
                }
                (LogicalOp::Difference, Some(ae), Some(be)) => {
                    if ae.key < be.key {
                        self.a_pend = None;
                        Some(ae)
                    } else if be.key < ae.key {
                        self.b_pend = None;
                        continue;
                    } else {
                        self.a_pend = None;
                        self.b_pend = None;
                        continue;
                    }
                }
                (LogicalOp::Difference, Some(ae), None) => {
                    self.a_pend = None;
                    Some(ae)
                }
                (LogicalOp::Difference, None, _) => None,
                (LogicalOp::Minimum(cmp), Some(ae), Some(be)) => {
                    if ae.key < be.key {
                        self.a_pend = None;
                        continue;
                    } else if be.key < ae.key {
                        self.b_pend = None;
                        continue;
                    } else {
                        self.a_pend = None;
                        self.b_pend = None;
                        let v = if cmp(&ae.value, &be.value) == std::cmp::Ordering::Greater {
                            be.value
                        } else {
                            ae.value
                        };
                        Some(VertexEntry { key: ae.key, value: v })
                    }
                }
                (LogicalOp::Minimum(_), _, _) => None,
                (LogicalOp::Custom(g), Some(ae), Some(be)) => {
                    if ae.key < be.key {
                        self.a_pend = None;
                        Some(ae)
                    } else if be.key < ae.key {
                        self.b_pend = None;
                        Some(be)
                    } else {
                        self.a_pend = None;
                        self.b_pend = None;
                        Some(VertexEntry {
                            key: ae.key,
                            value: g(&ae.value, &be.value),
                        })
                    }
                }
                (LogicalOp::Custom(_), Some(ae), None) => {
                    self.a_pend = None;
                    Some(ae)
                }
                (LogicalOp::Custom(_), None, Some(be)) => {
                    self.b_pend = None;
                    Some(be)
                }
                (LogicalOp::Converge(not_conv), Some(ae), Some(be)) => {
                    if ae.key < be.key {
                        self.a_pend = None;
                        Some(ae)
                    } else if be.key < ae.key {
                        self.b_pend = None;
                        continue;
                    } else {
                        self.a_pend = None;
                        self.b_pend = None;
                        if not_conv(&ae.value, &be.value) {
                            Some(ae)
                        } else {
                            continue;
                        }
                    }
                }
                (LogicalOp::Converge(_), Some(ae), None) => {
                    self.a_pend = None;
                    Some(ae)
                }
                (LogicalOp::Converge(_), None, _) => None,
                (_, None, None) => None,
            };
            match produced {
                Some(e) if idx.map_or(false, |i| e.key < i) => continue,
                other => {
                    self.out_pend = other;
                    return Ok(other);
                }
            }
        }
    }
}

impl VertexSource for LogicalSource {
    fn has_next(&mut self, idx: Option<u64>) -> Result<bool> {
        Ok(self.step(idx)?.is_some())
    }

    fn get_next(&mut self) -> Result<VertexEntry> {
        match self.step(None)? {
            Some(e) => {
                self.out_pend = None;
                Ok(e)
            }
            None => Err(Error::Contract("get_next on exhausted source".into())),
        }
    }

    fn rewind(&mut self) -> Result<()> {
        self.a.rewind()?;
        self.b.rewind()?;
        self.a_pend = None;
        self.b_pend = None;
        self.out_pend = None;
        Ok(())
    }
}

/// Round-robin split: entry i (counted in chunks of N) goes to output
/// (i / N) mod ways. Outputs are independent single-pass streams; each
/// skips over the chunks belonging to its siblings.
pub struct SplitSource<F: FnMut() -> Result<BoxSource>> {
    make_input: F,
    ways: usize,
    chunk: u64,
}

impl<F: FnMut() -> Result<BoxSource>> SplitSource<F> {
    /// `make_input` constructs a fresh instance of the underlying source;
    /// each output drives its own instance so outputs can run on separate
    /// threads without shared locks.
    pub fn new(make_input: F, ways: usize, chunk: u64) -> SplitSource<F> {
        assert!(ways >= 1 && chunk >= 1);
        SplitSource {
            make_input,
            ways,
            chunk,
        }
    }

    pub fn outputs(&mut self) -> Result<Vec<BoxSource>> {
        let mut outs: Vec<BoxSource> = Vec::with_capacity(self.ways);
        for w in 0..self.ways {
            outs.push(Box::new(SplitOutput {
                input: (self.make_input)()?,
                ways: self.ways as u64,
                chunk: self.chunk,
                lane: w as u64,
                pos: 0,
                pend: None,
            }));
        }
        Ok(outs)
    }
}

struct SplitOutput {
    input: BoxSource,
    ways: u64,
    chunk: u64,
    lane: u64,
    pos: u64, // absolute entry index in the underlying stream
    pend: Option<VertexEntry>,
}

impl SplitOutput {
    fn mine(&self, pos: u64) -> bool {
        (pos / self.chunk) % self.ways == self.lane
    }

    fn advance(&mut self) -> Result<Option<VertexEntry>> {
        if self.pend.is_some() {
            return Ok(self.pend);
        }
        loop {
            if !self.input.has_next(None)? {
                return Ok(None);
            }
            let e = self.input.get_next()?;
            let pos = self.pos;
            self.pos += 1;
            if self.mine(pos) {
                self.pend = Some(e);
                return Ok(self.pend);
            }
        }
    }
}

impl VertexSource for SplitOutput {
    fn has_next(&mut self, idx: Option<u64>) -> Result<bool> {
        loop {
            match self.advance()? {
                None => return Ok(false),
                Some(e) => match idx {
                    Some(i) if e.key < i => self.pend = None,
                    _ => return Ok(true),
                },
            }
        }
    }

    fn get_next(&mut self) -> Result<VertexEntry> {
        match self.advance()? {
            Some(e) => {
                self.pend = None;
                Ok(e)
            }
            None => Err(Error::Contract("get_next on exhausted source".into())),
        }
    }

    fn rewind(&mut self) -> Result<()> {
        self.input.rewind()?;
        self.pos = 0;
        self.pend = None;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::StoreConfig;
    use crate::value::{get_f64, get_u64, val_f64, val_u64};
    use rand::prelude::*;

    fn test_store() -> (tempfile::TempDir, Store) {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = StoreConfig::new(vec![tmp.path().join("d0"), tmp.path().join("d1")]);
        cfg.chunk_size = 1 << 16;
        (tmp, Store::open(cfg).unwrap())
    }

    fn mem(pairs: &[(u64, u64)]) -> BoxSource {
        Box::new(MemorySource::from_pairs(
            &pairs.iter().map(|&(k, v)| (k, val_u64(v))).collect::<Vec<_>>(),
        ))
    }

    fn drain_u64(src: &mut dyn VertexSource) -> Vec<(u64, u64)> {
        drain(src)
            .unwrap()
            .into_iter()
            .map(|e| (e.key, get_u64(&e.value)))
            .collect()
    }

    fn write_sparse(store: &Store, name: &str, pairs: &[(u64, u64)]) -> StripedFile {
        let f = store.create(name).unwrap();
        for &(k, v) in pairs {
            f.append(&k.to_le_bytes()).unwrap();
            f.append(&v.to_le_bytes()).unwrap();
        }
        f
    }

    #[test]
    fn sparse_protocol_fast_forward() {
        let (_tmp, store) = test_store();
        let f = write_sparse(&store, "s", &[(2, 10), (5, 20)]);
        let mut src = SparseFileSource::with_read_ahead(f, 8, 0, 64).unwrap();
        assert!(src.has_next(Some(3)).unwrap());
        let e = src.get_next().unwrap();
        assert_eq!((e.key, get_u64(&e.value)), (5, 20));
        assert!(!src.has_next(Some(6)).unwrap());
        assert!(src.get_next().is_err());
        assert!(src.has_next(Some(1)).is_err()); // decreasing idx

        src.rewind().unwrap();
        assert_eq!(drain_u64(&mut src), vec![(2, 10), (5, 20)]);
        src.rewind().unwrap();
        assert_eq!(drain_u64(&mut src), vec![(2, 10), (5, 20)]);
    }

    #[test]
    fn sparse_detects_unsorted() {
        let (_tmp, store) = test_store();
        let f = write_sparse(&store, "bad", &[(5, 1), (3, 1)]);
        let mut src = SparseFileSource::new(f, 8, 0).unwrap();
        assert!(src.has_next(None).unwrap());
        src.get_next().unwrap();
        assert!(matches!(src.has_next(None), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn arith_identity_scale_and_composition() {
        let mut id = ArithSource::new(mem(&[(1, 7), (4, 9)]), |v| *v);
        assert_eq!(drain_u64(&mut id), vec![(1, 7), (4, 9)]);

        let base = MemorySource::from_pairs(&[(1, val_f64(1.0))]);
        let mut damp = ArithSource::new(Box::new(base), |v| val_f64(get_f64(v) * 0.85));
        let out = drain(&mut damp).unwrap();
        assert_eq!(out[0].key, 1);
        assert!((get_f64(&out[0].value) - 0.85).abs() < 1e-12);

        // arith(f) ∘ arith(g) ≡ arith(f ∘ g)
        let mut rng = StdRng::seed_from_u64(2);
        let mut keys: Vec<u64> = (0..200).map(|_| rng.gen_range(0..10_000)).collect();
        keys.sort_unstable();
        keys.dedup();
        let pairs: Vec<(u64, u64)> =
            keys.iter().map(|&k| (k, rng.gen_range(0..1000))).collect();
        let f = |v: &ValueBytes| val_u64(get_u64(v).wrapping_mul(3));
        let g = |v: &ValueBytes| val_u64(get_u64(v).wrapping_add(11));
        let mut chained = ArithSource::new(Box::new(ArithSource::new(mem(&pairs), g)), f);
        let mut fused = ArithSource::new(mem(&pairs), move |v| f(&g(v)));
        assert_eq!(drain_u64(&mut chained), drain_u64(&mut fused));
    }

    #[test]
    fn logical_op_examples() {
        let mut u = LogicalSource::new(LogicalOp::Union, mem(&[(1, 100), (3, 101)]), mem(&[(3, 200), (4, 201)]));
        assert_eq!(drain_u64(&mut u), vec![(1, 100), (3, 101), (4, 201)]);
        u.rewind().unwrap();
        assert_eq!(drain_u64(&mut u), vec![(1, 100), (3, 101), (4, 201)]);

        let mut d = LogicalSource::new(LogicalOp::Difference, mem(&[(1, 1), (3, 3)]), mem(&[(3, 9)]));
        assert_eq!(drain_u64(&mut d), vec![(1, 1)]);

        let cmp = |a: &ValueBytes, b: &ValueBytes| get_u64(a).cmp(&get_u64(b));
        let mut m = LogicalSource::new(
            LogicalOp::Minimum(Box::new(cmp)),
            mem(&[(1, 5), (2, 9)]),
            mem(&[(2, 4), (3, 1)]),
        );
        assert_eq!(drain_u64(&mut m), vec![(2, 4)]);

        let add = |a: &ValueBytes, b: &ValueBytes| val_u64(get_u64(a) + get_u64(b));
        let mut c = LogicalSource::new(
            LogicalOp::Custom(Box::new(add)),
            mem(&[(1, 5), (2, 9)]),
            mem(&[(2, 4), (3, 1)]),
        );
        assert_eq!(drain_u64(&mut c), vec![(1, 5), (2, 13), (3, 1)]);

        let differs = |a: &ValueBytes, b: &ValueBytes| get_u64(a) != get_u64(b);
        let mut cv = LogicalSource::new(
            LogicalOp::Converge(Box::new(differs)),
            mem(&[(1, 5), (2, 9), (4, 7)]),
            mem(&[(1, 5), (2, 3)]),
        );
        assert_eq!(drain_u64(&mut cv), vec![(2, 9), (4, 7)]);
    }

    #[test]
    fn minimum_on_disjoint_keys_is_empty() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let mut pool: Vec<u64> = (0..100u64).collect();
            pool.shuffle(&mut rng);
            let mut a: Vec<u64> = pool[..30].to_vec();
            let mut b: Vec<u64> = pool[30..60].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            let ap: Vec<(u64, u64)> = a.iter().map(|&k| (k, k)).collect();
            let bp: Vec<(u64, u64)> = b.iter().map(|&k| (k, k)).collect();
            let cmp = |x: &ValueBytes, y: &ValueBytes| get_u64(x).cmp(&get_u64(y));
            let mut m = LogicalSource::new(LogicalOp::Minimum(Box::new(cmp)), mem(&ap), mem(&bp));
            assert_eq!(drain_u64(&mut m), vec![]);
        }
    }

    #[test]
    fn logical_ops_match_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..30 {
            let mk = |rng: &mut StdRng| {
                let mut keys: Vec<u64> = (0..rng.gen_range(0..40)).map(|_| rng.gen_range(0..60)).collect();
                keys.sort_unstable();
                keys.dedup();
                keys.into_iter()
                    .map(|k| (k, rng.gen_range(0..1000)))
                    .collect::<Vec<(u64, u64)>>()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let bmap: std::collections::BTreeMap<u64, u64> = b.iter().copied().collect();
            let amap: std::collections::BTreeMap<u64, u64> = a.iter().copied().collect();

            let mut union_oracle = amap.clone();
            for (&k, &v) in &bmap {
                union_oracle.entry(k).or_insert(v);
            }
            let mut u = LogicalSource::new(LogicalOp::Union, mem(&a), mem(&b));
            assert_eq!(drain_u64(&mut u), union_oracle.into_iter().collect::<Vec<_>>());

            let diff_oracle: Vec<(u64, u64)> = a
                .iter()
                .copied()
                .filter(|(k, _)| !bmap.contains_key(k))
                .collect();
            let mut d = LogicalSource::new(LogicalOp::Difference, mem(&a), mem(&b));
            assert_eq!(drain_u64(&mut d), diff_oracle);

            let min_oracle: Vec<(u64, u64)> = amap
                .iter()
                .filter_map(|(&k, &v)| bmap.get(&k).map(|&w| (k, v.min(w))))
                .collect();
            let cmp = |x: &ValueBytes, y: &ValueBytes| get_u64(x).cmp(&get_u64(y));
            let mut m = LogicalSource::new(LogicalOp::Minimum(Box::new(cmp)), mem(&a), mem(&b));
            assert_eq!(drain_u64(&mut m), min_oracle);

            // Key monotonicity for every combinator output.
            for out in [
                drain_u64(&mut LogicalSource::new(LogicalOp::Union, mem(&a), mem(&b))),
                diff_oracle,
            ] {
                assert!(out.windows(2).all(|w| w[0].0 < w[1].0));
            }
        }
    }

    #[test]
    fn union_first_wins_chain_is_associative() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..10 {
            let mk = |rng: &mut StdRng, tag: u64| {
                let mut keys: Vec<u64> = (0..20).map(|_| rng.gen_range(0..30)).collect();
                keys.sort_unstable();
                keys.dedup();
                keys.into_iter().map(|k| (k, k * 10 + tag)).collect::<Vec<_>>()
            };
            let (a, b, c) = (mk(&mut rng, 1), mk(&mut rng, 2), mk(&mut rng, 3));
            let mut left = LogicalSource::new(
                LogicalOp::Union,
                Box::new(LogicalSource::new(LogicalOp::Union, mem(&a), mem(&b))),
                mem(&c),
            );
            let mut right = LogicalSource::new(
                LogicalOp::Union,
                mem(&a),
                Box::new(LogicalSource::new(LogicalOp::Union, mem(&b), mem(&c))),
            );
            assert_eq!(drain_u64(&mut left), drain_u64(&mut right));
        }
    }

    #[test]
    fn split_round_robin_chunks() {
        let entries: Vec<(u64, u64)> = (0..6).map(|i| (i, i * 100)).collect();
        let mut split = SplitSource::new(|| Ok(mem(&entries)), 2, 2);
        let mut outs = split.outputs().unwrap();
        assert_eq!(
            drain_u64(outs[0].as_mut()),
            vec![(0, 0), (1, 100), (4, 400), (5, 500)]
        );
        assert_eq!(drain_u64(outs[1].as_mut()), vec![(2, 200), (3, 300)]);

        // ways = 1 is the identity.
        let mut one = SplitSource::new(|| Ok(mem(&entries)), 1, 3);
        let mut outs = one.outputs().unwrap();
        assert_eq!(drain_u64(outs[0].as_mut()), entries);
    }

    #[test]
    fn split_outputs_partition_the_input() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..15 {
            let mut keys: Vec<u64> = (0..rng.gen_range(0..100)).map(|_| rng.gen_range(0..500)).collect();
            keys.sort_unstable();
            keys.dedup();
            let entries: Vec<(u64, u64)> = keys.into_iter().map(|k| (k, k)).collect();
            let ways = rng.gen_range(1..5);
            let chunk = rng.gen_range(1..7);
            let mut split = SplitSource::new(|| Ok(mem(&entries)), ways, chunk);
            let mut all: Vec<(u64, u64)> = Vec::new();
            for out in split.outputs().unwrap().iter_mut() {
                let part = drain_u64(out.as_mut());
                assert!(part.windows(2).all(|w| w[0].0 < w[1].0));
                all.extend(part);
            }
            all.sort_unstable();
            assert_eq!(all, entries);
        }
    }

    #[test]
    fn compound_construction_is_lazy() {
        let (_tmp, store) = test_store();
        let f1 = write_sparse(&store, "a", &[(1, 1), (2, 2)]);
        let f2 = write_sparse(&store, "b", &[(2, 9)]);
        let before = store.stats().reads;
        let a = SparseFileSource::new(f1, 8, 0).unwrap();
        let b = SparseFileSource::new(f2, 8, 0).unwrap();
        let mut u = LogicalSource::new(
            LogicalOp::Union,
            Box::new(ArithSource::new(Box::new(a), |v| *v)),
            Box::new(b),
        );
        assert_eq!(store.stats().reads, before, "construction must not read");
        assert_eq!(drain_u64(&mut u), vec![(1, 1), (2, 2)]);
        assert!(store.stats().reads > before);
    }

    #[test]
    fn dense_file_write_read_probe() {
        let (_tmp, store) = test_store();
        let mut vals = MemorySource::from_pairs(&[(1, val_u64(10)), (4, val_u64(40))]);
        write_dense_file(&store, "dense", 6, 8, val_u64(u64::MAX), &mut vals, true).unwrap();

        let mut src = DenseFileSource::open(&store, "dense").unwrap();
        assert_eq!(src.num_vertices(), 6);
        let all = drain_u64(&mut src);
        assert_eq!(
            all,
            vec![
                (0, u64::MAX),
                (1, 10),
                (2, u64::MAX),
                (3, u64::MAX),
                (4, 40),
                (5, u64::MAX)
            ]
        );
        // No false negatives on the non-default keys.
        assert!(src.probe(1) && src.probe(4));

        // has_next(idx) jumps directly.
        src.rewind().unwrap();
        assert!(src.has_next(Some(4)).unwrap());
        let e = src.get_next().unwrap();
        assert_eq!((e.key, get_u64(&e.value)), (4, 40));
        assert!(!src.has_next(Some(6)).unwrap());

        assert_eq!(get_u64(&src.value_at(1).unwrap()), 10);
        assert!(src.value_at(6).is_err());
    }

    #[test]
    fn monotonicity_preserved_by_all_combinators() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..20 {
            let mk = |rng: &mut StdRng| {
                let mut keys: Vec<u64> = (0..30).map(|_| rng.gen_range(0..80)).collect();
                keys.sort_unstable();
                keys.dedup();
                keys.into_iter().map(|k| (k, k)).collect::<Vec<_>>()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let add = |x: &ValueBytes, y: &ValueBytes| val_u64(get_u64(x) + get_u64(y));
            let always = |_: &ValueBytes, _: &ValueBytes| true;
            let sources: Vec<Box<dyn VertexSource + Send>> = vec![
                Box::new(LogicalSource::new(LogicalOp::Union, mem(&a), mem(&b))),
                Box::new(LogicalSource::new(LogicalOp::Difference, mem(&a), mem(&b))),
                Box::new(LogicalSource::new(LogicalOp::Custom(Box::new(add)), mem(&a), mem(&b))),
                Box::new(LogicalSource::new(LogicalOp::Converge(Box::new(always)), mem(&a), mem(&b))),
                Box::new(ArithSource::new(mem(&a), |v| *v)),
            ];
            for mut s in sources {
                let out = drain_u64(s.as_mut());
                assert!(out.windows(2).all(|w| w[0].0 < w[1].0));
            }
        }
    }
}
