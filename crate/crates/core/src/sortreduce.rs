//! The sort-reduce kernel.
//!
//! Phase 1 turns raw buffers of update pairs into sorted runs whose duplicate
//! keys have already been folded by the reducer. Phase 2 repeatedly k-way
//! merge-reduces runs until a single run remains. The k-way merger is a
//! balanced tree of 2-to-1 mergers, each on its own thread, passing batches
//! over bounded channels; reduction is applied once at the root of the tree.
//!
//! Fold order is deterministic: within a buffer, input order; across runs,
//! ascending buffer sequence number. Merges only combine runs covering
//! contiguous sequence ranges, so the fold order holds for any associative
//! reducer regardless of worker scheduling.
//!
//! Run file layout: a 32-byte header (magic, value width, pair count, min key,
//! max key) followed by contiguous little-endian records of key (u64) plus a
//! fixed-width value.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use crossbeam_channel::{bounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::storage::{Store, StripedFile};
use crate::value::ValueBytes;

pub const PAIR_MEM_BYTES: usize = std::mem::size_of::<UpdatePair>();
pub const RUN_HEADER_BYTES: u64 = 32;
const RUN_MAGIC: [u8; 4] = *b"SRN1";
const BATCH_PAIRS: usize = 8192;

/// One logged partial update: destination vertex and a partial value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdatePair {
    pub key: u64,
    pub value: ValueBytes,
}

impl UpdatePair {
    pub fn new(key: u64, value: ValueBytes) -> Self {
        UpdatePair { key, value }
    }

    fn value_prefix(&self) -> u64 {
        u64::from_le_bytes(self.value[..8].try_into().unwrap())
    }
}

/// Associative binary operation combining two partial updates for one key.
pub trait Reducer: Send + Sync {
    fn reduce(&self, acc: &mut ValueBytes, incoming: &ValueBytes);
}

impl<F: Fn(&mut ValueBytes, &ValueBytes) + Send + Sync> Reducer for F {
    fn reduce(&self, acc: &mut ValueBytes, incoming: &ValueBytes) {
        self(acc, incoming)
    }
}

/// Whether merging folds duplicate keys or preserves them.
///
/// `KeepDuplicates` orders equal keys by the first eight value bytes (used by
/// graph ingestion, where the value prefix is the destination vertex), then by
/// run order.
#[derive(Clone)]
pub enum MergeMode {
    Reduce(Arc<dyn Reducer>),
    KeepDuplicates,
}

impl MergeMode {
    fn is_reduce(&self) -> bool {
        matches!(self, MergeMode::Reduce(_))
    }
}

#[derive(Debug, Clone)]
pub struct SortReduceConfig {
    /// Phase-1 buffer size in bytes.
    pub buffer_bytes: usize,
    /// In-memory pre-sort unit.
    pub sub_chunk_bytes: usize,
    /// Maximum runs merged per external merge step.
    pub fan_in: usize,
    /// Bytes prefetched per input run during merges.
    pub merge_read_ahead: usize,
    pub worker_threads: usize,
}

impl Default for SortReduceConfig {
    fn default() -> Self {
        SortReduceConfig {
            buffer_bytes: 512 << 20,
            sub_chunk_bytes: 32 << 20,
            fan_in: 16,
            merge_read_ahead: 4 << 20,
            worker_threads: 4,
        }
    }
}

impl SortReduceConfig {
    /// Small-buffer profile so tests exercise multi-level merging.
    pub fn desk_scale(buffer_bytes: usize) -> Self {
        SortReduceConfig {
            buffer_bytes,
            sub_chunk_bytes: (buffer_bytes / 2).max(PAIR_MEM_BYTES),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_bytes < 2 * self.sub_chunk_bytes {
            return Err(Error::Config(format!(
                "buffer_bytes {} must be >= 2 * sub_chunk_bytes {}",
                self.buffer_bytes, self.sub_chunk_bytes
            )));
        }
        if self.fan_in < 2 {
            return Err(Error::Config("fan_in must be >= 2".into()));
        }
        if self.worker_threads == 0 || self.sub_chunk_bytes < PAIR_MEM_BYTES {
            return Err(Error::Config("degenerate sort-reduce config".into()));
        }
        Ok(())
    }

    pub fn buffer_capacity_pairs(&self) -> usize {
        (self.buffer_bytes / PAIR_MEM_BYTES).max(1)
    }
}

/// A storage-resident sorted run. `seq_start..=seq_end` is the contiguous
/// range of phase-1 buffer sequence numbers this run covers.
#[derive(Debug, Clone)]
pub struct SortedRun {
    pub name: String,
    pub value_width: usize,
    pub count: u64,
    pub min_key: u64,
    pub max_key: u64,
    pub seq_start: u64,
    pub seq_end: u64,
    pub level: u32,
    pub has_header: bool,
}

impl SortedRun {
    pub fn record_width(&self) -> u64 {
        8 + self.value_width as u64
    }

    pub fn data_offset(&self) -> u64 {
        if self.has_header {
            RUN_HEADER_BYTES
        } else {
            0
        }
    }

    /// Wraps an existing headerless sorted pair file (e.g. an update log) so
    /// it can participate in merges.
    pub fn from_sparse_file(
        store: &Store,
        name: &str,
        value_width: usize,
        seq: u64,
    ) -> Result<SortedRun> {
        let f = store.open_file(name)?;
        let record = 8 + value_width as u64;
        if f.len() % record != 0 {
            return Err(Error::Format(format!(
                "{name}: length {} not a multiple of record width {record}",
                f.len()
            )));
        }
        Ok(SortedRun {
            name: name.to_string(),
            value_width,
            count: f.len() / record,
            min_key: 0,
            max_key: u64::MAX,
            seq_start: seq,
            seq_end: seq,
            level: 0,
            has_header: false,
        })
    }
}

struct RunWriter {
    file: StripedFile,
    buf: Vec<u8>,
    count: u64,
    min_key: u64,
    max_key: u64,
    value_width: usize,
}

const WRITE_BUF_BYTES: usize = 1 << 20;

impl RunWriter {
    fn create(store: &Store, name: &str) -> Result<(StripedFile, u64)> {
        let file = store.create(name)?;
        let hdr = file.append_reserve(RUN_HEADER_BYTES)?;
        Ok((file, hdr))
    }

    fn new(store: &Store, name: &str, value_width: usize) -> Result<RunWriter> {
        let (file, _hdr) = Self::create(store, name)?;
        Ok(RunWriter {
            file,
            buf: Vec::with_capacity(WRITE_BUF_BYTES + 24),
            count: 0,
            min_key: u64::MAX,
            max_key: 0,
            value_width,
        })
    }

    fn push(&mut self, pair: &UpdatePair) -> Result<()> {
        self.buf.extend_from_slice(&pair.key.to_le_bytes());
        self.buf.extend_from_slice(&pair.value[..self.value_width]);
        self.min_key = self.min_key.min(pair.key);
        self.max_key = self.max_key.max(pair.key);
        self.count += 1;
        if self.buf.len() >= WRITE_BUF_BYTES {
            self.file.append(&self.buf)?;
            self.buf.clear();
        }
        Ok(())
    }

    /// Returns (count, min, max, total bytes written).
    fn finish(mut self) -> Result<(u64, u64, u64, u64)> {
        if !self.buf.is_empty() {
            self.file.append(&self.buf)?;
            self.buf.clear();
        }
        let mut header = [0u8; RUN_HEADER_BYTES as usize];
        header[0..4].copy_from_slice(&RUN_MAGIC);
        header[4..8].copy_from_slice(&(self.value_width as u32).to_le_bytes());
        header[8..16].copy_from_slice(&self.count.to_le_bytes());
        header[16..24].copy_from_slice(&self.min_key.to_le_bytes());
        header[24..32].copy_from_slice(&self.max_key.to_le_bytes());
        self.file.fill_reserved(0, &header)?;
        self.file.flush()?;
        let bytes = RUN_HEADER_BYTES + self.count * (8 + self.value_width as u64);
        Ok((self.count, self.min_key, self.max_key, bytes))
    }
}

/// Streaming reader over a sorted run, prefetching fixed-size chunks.
pub struct RunReader {
    file: StripedFile,
    run_name: String,
    value_width: usize,
    record_width: usize,
    pos: u64,
    end: u64,
    buf: Vec<u8>,
    buf_pos: usize,
    read_ahead: usize,
    last: Option<(u64, u64)>,
    strict: bool,
}

impl RunReader {
    pub fn open(store: &Store, run: &SortedRun, read_ahead: usize, strict: bool) -> Result<RunReader> {
        let file = store.open_file(&run.name)?;
        if run.has_header {
            let hdr = file.read_at(0, RUN_HEADER_BYTES)?;
            if hdr[0..4] != RUN_MAGIC {
                return Err(Error::Corrupt {
                    run: run.name.clone(),
                    msg: "bad magic".into(),
                });
            }
            let width = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
            if width != run.value_width {
                return Err(Error::Corrupt {
                    run: run.name.clone(),
                    msg: format!("value width {width} != expected {}", run.value_width),
                });
            }
        }
        Ok(RunReader {
            file,
            run_name: run.name.clone(),
            value_width: run.value_width,
            record_width: 8 + run.value_width,
            pos: run.data_offset(),
            end: run.data_offset() + run.count * run.record_width(),
            buf: Vec::new(),
            buf_pos: 0,
            read_ahead: read_ahead.max(4096),
            last: None,
            strict,
        })
    }

    pub fn next(&mut self) -> Result<Option<UpdatePair>> {
        if self.buf_pos + self.record_width > self.buf.len() {
            // Carry any partial record across the refill boundary.
            let tail: Vec<u8> = self.buf[self.buf_pos..].to_vec();
            let remaining_file = self.end - self.pos;
            if remaining_file == 0 {
                if tail.is_empty() {
                    return Ok(None);
                }
                return Err(Error::Corrupt {
                    run: self.run_name.clone(),
                    msg: "truncated record".into(),
                });
            }
            let want = (self.read_ahead as u64).min(remaining_file);
            let fresh = self.file.read_at(self.pos, want)?;
            self.pos += want;
            self.buf = tail;
            self.buf.extend_from_slice(&fresh);
            self.buf_pos = 0;
            if self.buf.len() < self.record_width {
                return Err(Error::Corrupt {
                    run: self.run_name.clone(),
                    msg: "truncated record".into(),
                });
            }
        }
        let rec = &self.buf[self.buf_pos..self.buf_pos + self.record_width];
        self.buf_pos += self.record_width;
        let key = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let value = crate::value::from_slice(&rec[8..]);
        let pair = UpdatePair { key, value };
        let ord_tag = (key, pair.value_prefix());
        if let Some(last) = self.last {
            let bad = if self.strict {
                ord_tag.0 <= last.0
            } else {
                ord_tag < last
            };
            if bad {
                return Err(Error::Corrupt {
                    run: self.run_name.clone(),
                    msg: format!("unsorted: key {} after {}", key, last.0),
                });
            }
        }
        self.last = Some(ord_tag);
        Ok(Some(pair))
    }

    pub fn value_width(&self) -> usize {
        self.value_width
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LevelStats {
    pub pairs_in: u64,
    pub pairs_out: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Default, Clone)]
pub struct MetricsReport {
    /// (level, stats); level 0 is the in-memory phase.
    pub levels: Vec<(u32, LevelStats)>,
    pub merge_jobs: u64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,pairs_in,pairs_out,bytes_written\n");
        for (level, s) in &self.levels {
            out.push_str(&format!(
                "{level},{},{},{}\n",
                s.pairs_in, s.pairs_out, s.bytes_written
            ));
        }
        out
    }

    pub fn total_bytes_written(&self) -> u64 {
        self.levels.iter().map(|(_, s)| s.bytes_written).sum()
    }
}

#[derive(Default)]
struct MetricsInner {
    levels: std::collections::BTreeMap<u32, LevelStats>,
    merge_jobs: u64,
}

/// Pool of recycled phase-1 buffers with a hard cap on concurrently
/// outstanding buffers; acquire blocks when the cap is reached.
pub struct BufferPool {
    inner: Mutex<PoolInner>,
    cv: Condvar,
    capacity_pairs: usize,
    max_buffers: usize,
}

struct PoolInner {
    free: Vec<Vec<UpdatePair>>,
    outstanding: usize,
    current_bytes: u64,
    peak_bytes: u64,
}

impl BufferPool {
    pub fn new(capacity_pairs: usize, max_buffers: usize) -> Arc<BufferPool> {
        Arc::new(BufferPool {
            inner: Mutex::new(PoolInner {
                free: Vec::new(),
                outstanding: 0,
                current_bytes: 0,
                peak_bytes: 0,
            }),
            cv: Condvar::new(),
            capacity_pairs,
            max_buffers: max_buffers.max(1),
        })
    }

    pub fn capacity_pairs(&self) -> usize {
        self.capacity_pairs
    }

    pub fn acquire(&self) -> Vec<UpdatePair> {
        let mut st = self.inner.lock().unwrap();
        loop {
            if let Some(mut v) = st.free.pop() {
                v.clear();
                st.outstanding += 1;
                return v;
            }
            if st.outstanding < self.max_buffers {
                st.outstanding += 1;
                st.current_bytes += (self.capacity_pairs * PAIR_MEM_BYTES) as u64;
                st.peak_bytes = st.peak_bytes.max(st.current_bytes);
                return Vec::with_capacity(self.capacity_pairs);
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    pub fn release(&self, buf: Vec<UpdatePair>) {
        let mut st = self.inner.lock().unwrap();
        st.outstanding -= 1;
        st.free.push(buf);
        self.cv.notify_one();
    }

    /// Peak bytes ever held across all live buffers.
    pub fn peak_bytes(&self) -> u64 {
        self.inner.lock().unwrap().peak_bytes
    }
}

type StreamItem = std::result::Result<Vec<UpdatePair>, Error>;

/// The sort-reduce kernel over one store. Temporary runs are named under
/// `prefix` and deleted eagerly after each merge.
pub struct SortReduce {
    store: Store,
    cfg: SortReduceConfig,
    mode: MergeMode,
    value_width: usize,
    prefix: String,
    next_run: AtomicU64,
    metrics: Mutex<MetricsInner>,
}

struct MergeState {
    queue: Vec<SortedRun>,
    outstanding: usize,
    producers_done: bool,
    error: Option<Error>,
}

struct SharedQueue {
    m: Mutex<MergeState>,
    cv: Condvar,
}

impl SortReduce {
    pub fn new(
        store: Store,
        cfg: SortReduceConfig,
        mode: MergeMode,
        value_width: usize,
        prefix: impl Into<String>,
    ) -> Result<SortReduce> {
        cfg.validate()?;
        Ok(SortReduce {
            store,
            cfg,
            mode,
            value_width,
            prefix: prefix.into(),
            next_run: AtomicU64::new(0),
            metrics: Mutex::new(MetricsInner::default()),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &SortReduceConfig {
        &self.cfg
    }

    fn fresh_name(&self) -> String {
        let n = self.next_run.fetch_add(1, Ordering::Relaxed);
        format!("{}.r{n}", self.prefix)
    }

    fn note_level(&self, level: u32, pairs_in: u64, pairs_out: u64, bytes: u64) {
        let mut m = self.metrics.lock().unwrap();
        let s = m.levels.entry(level).or_default();
        s.pairs_in += pairs_in;
        s.pairs_out += pairs_out;
        s.bytes_written += bytes;
    }

    pub fn reduction_metrics(&self) -> MetricsReport {
        let m = self.metrics.lock().unwrap();
        MetricsReport {
            levels: m.levels.iter().map(|(k, v)| (*k, *v)).collect(),
            merge_jobs: m.merge_jobs,
        }
    }

    fn pair_le(&self, a: &UpdatePair, b: &UpdatePair) -> bool {
        match self.mode {
            MergeMode::Reduce(_) => a.key <= b.key,
            MergeMode::KeepDuplicates => (a.key, a.value_prefix()) <= (b.key, b.value_prefix()),
        }
    }

    /// Phase 1: sorts one buffer (stable, in sub-chunks merged by a small
    /// heap), folds duplicate keys, and writes the result as a sorted run.
    /// `seq` is the buffer's position in the overall input order.
    pub fn sort_buffer(
        &self,
        seq: u64,
        mut pairs: Vec<UpdatePair>,
        pool: Option<&BufferPool>,
    ) -> Result<Option<SortedRun>> {
        if pairs.is_empty() {
            if let Some(p) = pool {
                p.release(pairs);
            }
            return Ok(None);
        }
        let pairs_in = pairs.len() as u64;
        let chunk_pairs = (self.cfg.sub_chunk_bytes / PAIR_MEM_BYTES).max(1);
        let keep_dups = !self.mode.is_reduce();
        for chunk in pairs.chunks_mut(chunk_pairs) {
            if keep_dups {
                chunk.sort_by_key(|p| (p.key, p.value_prefix()));
            } else {
                chunk.sort_by_key(|p| p.key);
            }
        }
        let name = self.fresh_name();
        let mut writer = RunWriter::new(&self.store, &name, self.value_width)?;

        // Heap of (key, tie, chunk_idx) over chunk cursors; ties resolve to
        // the earliest chunk, preserving input order for equal keys.
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        let chunks: Vec<&[UpdatePair]> = pairs.chunks(chunk_pairs).collect();
        let mut cursors = vec![0usize; chunks.len()];
        let mut heap: BinaryHeap<Reverse<(u64, u64, usize)>> = BinaryHeap::new();
        for (i, c) in chunks.iter().enumerate() {
            let p = &c[0];
            let tie = if keep_dups { p.value_prefix() } else { 0 };
            heap.push(Reverse((p.key, tie, i)));
        }
        let mut pending: Option<UpdatePair> = None;
        let mut out_count_check = 0u64;
        while let Some(Reverse((_, _, i))) = heap.pop() {
            let p = chunks[i][cursors[i]];
            cursors[i] += 1;
            if cursors[i] < chunks[i].len() {
                let np = &chunks[i][cursors[i]];
                let tie = if keep_dups { np.value_prefix() } else { 0 };
                heap.push(Reverse((np.key, tie, i)));
            }
            match (&mut pending, &self.mode) {
                (Some(cur), MergeMode::Reduce(r)) if cur.key == p.key => {
                    r.reduce(&mut cur.value, &p.value);
                }
                (Some(cur), _) => {
                    writer.push(cur)?;
                    out_count_check += 1;
                    *cur = p;
                }
                (None, _) => pending = Some(p),
            }
        }
        if let Some(cur) = pending {
            writer.push(&cur)?;
            out_count_check += 1;
        }
        if let Some(p) = pool {
            p.release(pairs);
        } else {
            drop(pairs);
        }
        let (count, min_key, max_key, bytes) = writer.finish()?;
        debug_assert_eq!(count, out_count_check);
        self.note_level(0, pairs_in, count, bytes);
        Ok(Some(SortedRun {
            name,
            value_width: self.value_width,
            count,
            min_key,
            max_key,
            seq_start: seq,
            seq_end: seq,
            level: 0,
            has_header: true,
        }))
    }

    fn spawn_stream<'scope, 'env>(
        &'env self,
        scope: &'scope thread::Scope<'scope, 'env>,
        runs: Vec<SortedRun>,
    ) -> Receiver<StreamItem> {
        if runs.len() == 1 {
            let run = runs.into_iter().next().unwrap();
            let (tx, rx) = bounded(4);
            let store = self.store.clone();
            let read_ahead = self.cfg.merge_read_ahead;
            let strict = self.mode.is_reduce();
            scope.spawn(move || {
                let send = |tx: &Sender<StreamItem>, item: StreamItem| tx.send(item).is_ok();
                let mut reader = match RunReader::open(&store, &run, read_ahead, strict) {
                    Ok(r) => r,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                };
                let mut batch = Vec::with_capacity(BATCH_PAIRS);
                loop {
                    match reader.next() {
                        Ok(Some(p)) => {
                            batch.push(p);
                            if batch.len() >= BATCH_PAIRS
                                && !send(&tx, Ok(std::mem::replace(
                                    &mut batch,
                                    Vec::with_capacity(BATCH_PAIRS),
                                )))
                            {
                                return;
                            }
                        }
                        Ok(None) => {
                            if !batch.is_empty() {
                                let _ = send(&tx, Ok(batch));
                            }
                            return;
                        }
                        Err(e) => {
                            let _ = send(&tx, Err(e));
                            return;
                        }
                    }
                }
            });
            return rx;
        }
        let mid = runs.len() / 2;
        let mut runs = runs;
        let right = runs.split_off(mid);
        let left_rx = self.spawn_stream(scope, runs);
        let right_rx = self.spawn_stream(scope, right);
        let (tx, rx) = bounded(4);
        let this = self;
        scope.spawn(move || {
            let mut left = BatchCursor::new(left_rx);
            let mut right = BatchCursor::new(right_rx);
            let mut out = Vec::with_capacity(BATCH_PAIRS);
            loop {
                let take_left = match (left.peek(), right.peek()) {
                    (Err(e), _) | (_, Err(e)) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                    (Ok(None), Ok(None)) => {
                        if !out.is_empty() {
                            let _ = tx.send(Ok(out));
                        }
                        return;
                    }
                    (Ok(Some(_)), Ok(None)) => true,
                    (Ok(None), Ok(Some(_))) => false,
                    (Ok(Some(a)), Ok(Some(b))) => this.pair_le(a, b),
                };
                let p = if take_left {
                    left.advance()
                } else {
                    right.advance()
                };
                out.push(p);
                if out.len() >= BATCH_PAIRS {
                    if tx
                        .send(Ok(std::mem::replace(&mut out, Vec::with_capacity(BATCH_PAIRS))))
                        .is_err()
                    {
                        return;
                    }
                }
            }
        });
        rx
    }

    /// Phase 2: merges 2..=fan_in runs into one, folding equal keys across
    /// runs in ascending run order. Inputs are deleted once the output is
    /// durable.
    pub fn merge_runs(&self, mut runs: Vec<SortedRun>) -> Result<SortedRun> {
        if runs.len() < 2 || runs.len() > self.cfg.fan_in {
            return Err(Error::Config(format!(
                "merge_runs wants 2..={} runs, got {}",
                self.cfg.fan_in,
                runs.len()
            )));
        }
        runs.sort_by_key(|r| r.seq_start);
        let pairs_in: u64 = runs.iter().map(|r| r.count).sum();
        let out_level = runs.iter().map(|r| r.level).max().unwrap() + 1;
        let seq_start = runs[0].seq_start;
        let seq_end = runs.iter().map(|r| r.seq_end).max().unwrap();
        let name = self.fresh_name();
        let mut writer = RunWriter::new(&self.store, &name, self.value_width)?;

        let merged: Result<(u64, u64, u64, u64)> = thread::scope(|s| {
            let rx = self.spawn_stream(s, runs.clone());
            let mut pending: Option<UpdatePair> = None;
            for item in rx.iter() {
                let batch = item?;
                for p in batch {
                    match (&mut pending, &self.mode) {
                        (Some(cur), MergeMode::Reduce(r)) if cur.key == p.key => {
                            r.reduce(&mut cur.value, &p.value);
                        }
                        (Some(cur), _) => {
                            writer.push(cur)?;
                            *cur = p;
                        }
                        (None, _) => pending = Some(p),
                    }
                }
            }
            if let Some(cur) = pending {
                writer.push(&cur)?;
            }
            writer.finish()
        });
        let (count, min_key, max_key, bytes) = match merged {
            Ok(v) => v,
            Err(e) => {
                let _ = self.store.delete(&name);
                return Err(e);
            }
        };
        for r in &runs {
            self.store.delete(&r.name)?;
        }
        self.note_level(out_level, pairs_in, count, bytes);
        self.metrics.lock().unwrap().merge_jobs += 1;
        Ok(SortedRun {
            name,
            value_width: self.value_width,
            count,
            min_key,
            max_key,
            seq_start,
            seq_end,
            level: out_level,
            has_header: true,
        })
    }

    fn merge_worker(&self, sh: &SharedQueue) {
        loop {
            let batch;
            {
                let mut st = sh.m.lock().unwrap();
                loop {
                    if st.error.is_some() {
                        return;
                    }
                    if let Some(b) = pick_mergeable(&mut st, self.cfg.fan_in) {
                        st.outstanding += 1;
                        batch = b;
                        break;
                    }
                    if st.producers_done && st.outstanding == 0 && st.queue.len() <= 1 {
                        return;
                    }
                    st = sh.cv.wait(st).unwrap();
                }
            }
            let res = self.merge_runs(batch);
            let mut st = sh.m.lock().unwrap();
            st.outstanding -= 1;
            match res {
                Ok(run) => st.queue.push(run),
                Err(e) => st.error = Some(e),
            }
            sh.cv.notify_all();
        }
    }

    fn drain_queue(&self, sh: SharedQueue) -> Result<Option<SortedRun>> {
        let mut st = sh.m.into_inner().unwrap();
        if let Some(e) = st.error.take() {
            return Err(e);
        }
        debug_assert!(st.queue.len() <= 1);
        Ok(st.queue.pop())
    }

    /// Repeatedly merge-reduces queued runs with a pool of workers until one
    /// remains. A single queued run is returned unchanged, with zero merges.
    pub fn sort_reduce_all(&self, runs: Vec<SortedRun>) -> Result<Option<SortedRun>> {
        if runs.len() <= 1 {
            return Ok(runs.into_iter().next());
        }
        let sh = SharedQueue {
            m: Mutex::new(MergeState {
                queue: runs,
                outstanding: 0,
                producers_done: true,
                error: None,
            }),
            cv: Condvar::new(),
        };
        let workers = self.cfg.worker_threads.max(1);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| self.merge_worker(&sh));
            }
        });
        self.drain_queue(sh)
    }

    /// Full pipeline: receives `(sequence, buffer)` items, sorts them with a
    /// pool of phase-1 sorters while a pool of mergers consumes finished runs
    /// concurrently, and returns the single fully reduced run.
    pub fn pipeline(
        &self,
        rx: Receiver<(u64, Vec<UpdatePair>)>,
        pool: Option<&BufferPool>,
    ) -> Result<Option<SortedRun>> {
        let n_sorters = (self.cfg.worker_threads / 2).max(1);
        let n_mergers = (self.cfg.worker_threads - n_sorters).max(1);
        let sh = SharedQueue {
            m: Mutex::new(MergeState {
                queue: Vec::new(),
                outstanding: 0,
                producers_done: false,
                error: None,
            }),
            cv: Condvar::new(),
        };
        let sorters_left = AtomicU64::new(n_sorters as u64);
        thread::scope(|s| {
            for _ in 0..n_sorters {
                let rx = rx.clone();
                let sh = &sh;
                let sorters_left = &sorters_left;
                s.spawn(move || {
                    for (seq, buf) in rx.iter() {
                        match self.sort_buffer(seq, buf, pool) {
                            Ok(Some(run)) => {
                                let mut st = sh.m.lock().unwrap();
                                st.queue.push(run);
                                sh.cv.notify_all();
                            }
                            Ok(None) => {}
                            Err(e) => {
                                sh.m.lock().unwrap().error = Some(e);
                                sh.cv.notify_all();
                                break;
                            }
                        }
                    }
                    if sorters_left.fetch_sub(1, Ordering::SeqCst) == 1 {
                        sh.m.lock().unwrap().producers_done = true;
                        sh.cv.notify_all();
                    }
                });
            }
            for _ in 0..n_mergers {
                s.spawn(|| self.merge_worker(&sh));
            }
        });
        self.drain_queue(sh)
    }

    /// Reads an entire run into memory. Intended for tests and small results.
    pub fn read_run(&self, run: &SortedRun) -> Result<Vec<UpdatePair>> {
        read_run(&self.store, run, self.cfg.merge_read_ahead)
    }
}

pub fn read_run(store: &Store, run: &SortedRun, read_ahead: usize) -> Result<Vec<UpdatePair>> {
    let mut reader = RunReader::open(store, run, read_ahead, false)?;
    let mut out = Vec::with_capacity(run.count as usize);
    while let Some(p) = reader.next()? {
        out.push(p);
    }
    Ok(out)
}

/// One sequential pass folding adjacent equal keys of an already sorted run
/// into a new run. Used to compare against interleaved reduction.
pub fn reduce_run_pass(
    store: &Store,
    run: &SortedRun,
    reducer: &dyn Reducer,
    out_name: &str,
    read_ahead: usize,
) -> Result<SortedRun> {
    let mut reader = RunReader::open(store, run, read_ahead, false)?;
    let mut writer = RunWriter::new(store, out_name, run.value_width)?;
    let mut pending: Option<UpdatePair> = None;
    while let Some(p) = reader.next()? {
        match &mut pending {
            Some(cur) if cur.key == p.key => reducer.reduce(&mut cur.value, &p.value),
            Some(cur) => {
                writer.push(cur)?;
                *cur = p;
            }
            None => pending = Some(p),
        }
    }
    if let Some(cur) = pending {
        writer.push(&cur)?;
    }
    let (count, min_key, max_key, _) = writer.finish()?;
    Ok(SortedRun {
        name: out_name.to_string(),
        value_width: run.value_width,
        count,
        min_key,
        max_key,
        seq_start: run.seq_start,
        seq_end: run.seq_end,
        level: run.level + 1,
        has_header: true,
    })
}

struct BatchCursor {
    rx: Receiver<StreamItem>,
    batch: Vec<UpdatePair>,
    idx: usize,
    failed: bool,
}

impl BatchCursor {
    fn new(rx: Receiver<StreamItem>) -> Self {
        BatchCursor {
            rx,
            batch: Vec::new(),
            idx: 0,
            failed: false,
        }
    }

    fn peek(&mut self) -> std::result::Result<Option<&UpdatePair>, Error> {
        if self.failed {
            return Ok(None);
        }
        while self.idx >= self.batch.len() {
            match self.rx.recv() {
                Ok(Ok(b)) => {
                    self.batch = b;
                    self.idx = 0;
                }
                Ok(Err(e)) => {
                    self.failed = true;
                    return Err(e);
                }
                Err(_) => return Ok(None),
            }
        }
        Ok(Some(&self.batch[self.idx]))
    }

    fn advance(&mut self) -> UpdatePair {
        let p = self.batch[self.idx];
        self.idx += 1;
        p
    }
}

/// Picks up to `fan_in` runs covering a contiguous sequence range. Contiguity
/// keeps the cross-run fold order well defined for non-commutative reducers;
/// once producers are done and nothing is outstanding, any leftover
/// non-contiguous pair is merged anyway to guarantee progress.
fn pick_mergeable(st: &mut MergeState, fan_in: usize) -> Option<Vec<SortedRun>> {
    if st.queue.len() < 2 {
        return None;
    }
    st.queue.sort_by_key(|r| r.seq_start);
    let q = &st.queue;
    for i in 0..q.len() - 1 {
        if q[i].seq_end + 1 == q[i + 1].seq_start {
            let mut end = i + 1;
            while end + 1 < q.len() && end - i + 1 < fan_in && q[end].seq_end + 1 == q[end + 1].seq_start
            {
                end += 1;
            }
            return Some(st.queue.drain(i..=end).collect());
        }
    }
    if st.producers_done && st.outstanding == 0 {
        let take = fan_in.min(st.queue.len());
        return Some(st.queue.drain(0..take).collect());
    }
    None
}

impl SortReduce {
    /// Convenience driver: chunks `pairs` into buffer-sized pieces and runs
    /// the full pipeline over them.
    pub fn sort_reduce_pairs(&self, pairs: Vec<UpdatePair>) -> Result<Option<SortedRun>> {
        let cap = self.cfg.buffer_capacity_pairs();
        let (tx, rx) = bounded::<(u64, Vec<UpdatePair>)>(2);
        thread::scope(|s| {
            s.spawn(move || {
                for (seq, chunk) in pairs.chunks(cap).enumerate() {
                    if tx.send((seq as u64, chunk.to_vec())).is_err() {
                        return;
                    }
                }
            });
            self.pipeline(rx, None)
        })
    }
}

/// Sum reducer over little-endian u64 values.
pub fn sum_u64_reducer() -> Arc<dyn Reducer> {
    Arc::new(|acc: &mut ValueBytes, incoming: &ValueBytes| {
        let s = crate::value::get_u64(acc).wrapping_add(crate::value::get_u64(incoming));
        *acc = crate::value::val_u64(s);
    })
}

/// Sum reducer over little-endian f64 values.
pub fn sum_f64_reducer() -> Arc<dyn Reducer> {
    Arc::new(|acc: &mut ValueBytes, incoming: &ValueBytes| {
        let s = crate::value::get_f64(acc) + crate::value::get_f64(incoming);
        *acc = crate::value::val_f64(s);
    })
}

/// Min reducer over little-endian u64 values.
pub fn min_u64_reducer() -> Arc<dyn Reducer> {
    Arc::new(|acc: &mut ValueBytes, incoming: &ValueBytes| {
        if crate::value::get_u64(incoming) < crate::value::get_u64(acc) {
            *acc = *incoming;
        }
    })
}

/// Keeps the first value seen for a key.
pub fn first_wins_reducer() -> Arc<dyn Reducer> {
    Arc::new(|_acc: &mut ValueBytes, _incoming: &ValueBytes| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{Store, StoreConfig};
    use crate::value::{get_u64, val_u64};
    use rand::prelude::*;
    use std::collections::BTreeMap;

    fn test_store(ndirs: usize) -> (tempfile::TempDir, Store) {
        let tmp = tempfile::tempdir().unwrap();
        let dirs = (0..ndirs).map(|i| tmp.path().join(format!("d{i}"))).collect();
        let mut cfg = StoreConfig::new(dirs);
        cfg.chunk_size = 1 << 16;
        (tmp, Store::open(cfg).unwrap())
    }

    fn small_cfg() -> SortReduceConfig {
        SortReduceConfig {
            buffer_bytes: 4096,
            sub_chunk_bytes: 1024,
            fan_in: 2,
            merge_read_ahead: 4096,
            worker_threads: 2,
        }
    }

    fn pairs_u64(items: &[(u64, u64)]) -> Vec<UpdatePair> {
        items
            .iter()
            .map(|&(k, v)| UpdatePair::new(k, val_u64(v)))
            .collect()
    }

    fn run_pairs(sr: &SortReduce, run: &SortedRun) -> Vec<(u64, u64)> {
        sr.read_run(run)
            .unwrap()
            .iter()
            .map(|p| (p.key, get_u64(&p.value)))
            .collect()
    }

    /// Independent oracle: in-memory group-by with an in-input-order fold.
    fn group_by_oracle(pairs: &[(u64, u64)], f: impl Fn(u64, u64) -> u64) -> Vec<(u64, u64)> {
        let mut m: BTreeMap<u64, u64> = BTreeMap::new();
        for &(k, v) in pairs {
            m.entry(k).and_modify(|acc| *acc = f(*acc, v)).or_insert(v);
        }
        m.into_iter().collect()
    }

    #[test]
    fn inmem_sort_reduce_examples() {
        let (_tmp, store) = test_store(2);
        let sr = SortReduce::new(
            store,
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        let expected = group_by_oracle(&[(3, 1), (1, 2), (3, 4)], |a, b| a + b);
        assert_eq!(expected, vec![(1, 2), (3, 5)]);
        let run = sr
            .sort_buffer(0, pairs_u64(&[(3, 1), (1, 2), (3, 4)]), None)
            .unwrap()
            .unwrap();
        assert_eq!(run_pairs(&sr, &run), expected);
        assert_eq!((run.min_key, run.max_key, run.count), (1, 3, 2));

        // Already-sorted distinct keys: reduction is the identity.
        let input: Vec<(u64, u64)> = (0..100).map(|i| (i, i * 7)).collect();
        let run = sr.sort_buffer(1, pairs_u64(&input), None).unwrap().unwrap();
        assert_eq!(run_pairs(&sr, &run), input);

        // All pairs share one key.
        let run = sr
            .sort_buffer(2, pairs_u64(&vec![(42, 1); 50]), None)
            .unwrap()
            .unwrap();
        assert_eq!(run_pairs(&sr, &run), vec![(42, 50)]);
    }

    #[test]
    fn inmem_fold_is_stable_in_input_order() {
        let (_tmp, store) = test_store(1);
        let sr = SortReduce::new(
            store,
            small_cfg(),
            MergeMode::Reduce(first_wins_reducer()),
            8,
            "t",
        )
        .unwrap();
        // Many pairs per key spread across sub-chunks; first input value wins.
        let mut input = Vec::new();
        for i in 0..500u64 {
            input.push((i % 7, i));
        }
        let run = sr.sort_buffer(0, pairs_u64(&input), None).unwrap().unwrap();
        let expected: Vec<(u64, u64)> = (0..7u64).map(|k| (k, k)).collect();
        assert_eq!(run_pairs(&sr, &run), expected);
    }

    #[test]
    fn merge_reduce_examples() {
        let (_tmp, store) = test_store(2);
        let sr = SortReduce::new(
            store,
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        let a = sr.sort_buffer(0, pairs_u64(&[(1, 2), (3, 5)]), None).unwrap().unwrap();
        let b = sr.sort_buffer(1, pairs_u64(&[(2, 1), (3, 7)]), None).unwrap().unwrap();
        let merged = sr.merge_runs(vec![a, b]).unwrap();
        assert_eq!(run_pairs(&sr, &merged), vec![(1, 2), (2, 1), (3, 12)]);

        // Merge with an empty run leaves the other unchanged.
        let c = sr.sort_buffer(2, pairs_u64(&[(9, 9)]), None).unwrap().unwrap();
        let empty = SortedRun {
            name: "t.empty".into(),
            value_width: 8,
            count: 0,
            min_key: u64::MAX,
            max_key: 0,
            seq_start: 3,
            seq_end: 3,
            level: 0,
            has_header: true,
        };
        let (f, _) = {
            let f = sr.store().create("t.empty").unwrap();
            let off = f.append_reserve(RUN_HEADER_BYTES).unwrap();
            let mut hdr = [0u8; 32];
            hdr[0..4].copy_from_slice(&RUN_MAGIC);
            hdr[4..8].copy_from_slice(&8u32.to_le_bytes());
            hdr[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
            f.fill_reserved(off, &hdr).unwrap();
            (f, off)
        };
        drop(f);
        let merged = sr.merge_runs(vec![c, empty]).unwrap();
        assert_eq!(run_pairs(&sr, &merged), vec![(9, 9)]);
    }

    #[test]
    fn merge_k_single_key_runs() {
        let (_tmp, store) = test_store(2);
        let mut cfg = small_cfg();
        cfg.fan_in = 8;
        let sr =
            SortReduce::new(store, cfg, MergeMode::Reduce(sum_u64_reducer()), 8, "t").unwrap();
        let k = 6u64;
        let runs: Vec<SortedRun> = (0..k)
            .map(|i| sr.sort_buffer(i, pairs_u64(&[(5, 1)]), None).unwrap().unwrap())
            .collect();
        let merged = sr.merge_runs(runs).unwrap();
        assert_eq!(run_pairs(&sr, &merged), vec![(5, k)]);
    }

    #[test]
    fn merge_deletes_inputs() {
        let (_tmp, store) = test_store(2);
        let sr = SortReduce::new(
            store.clone(),
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        let a = sr.sort_buffer(0, pairs_u64(&[(1, 1)]), None).unwrap().unwrap();
        let b = sr.sort_buffer(1, pairs_u64(&[(2, 2)]), None).unwrap().unwrap();
        let (an, bn) = (a.name.clone(), b.name.clone());
        let merged = sr.merge_runs(vec![a, b]).unwrap();
        assert!(!store.exists(&an));
        assert!(!store.exists(&bn));
        assert!(store.exists(&merged.name));
    }

    #[test]
    fn sort_reduce_all_single_run_is_identity() {
        let (_tmp, store) = test_store(1);
        let sr = SortReduce::new(
            store,
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        let run = sr.sort_buffer(0, pairs_u64(&[(1, 1), (2, 2)]), None).unwrap().unwrap();
        let name = run.name.clone();
        let out = sr.sort_reduce_all(vec![run]).unwrap().unwrap();
        assert_eq!(out.name, name);
        assert_eq!(sr.reduction_metrics().merge_jobs, 0);
    }

    #[test]
    fn five_runs_fan_in_two_is_four_merge_jobs() {
        let (_tmp, store) = test_store(2);
        let sr = SortReduce::new(
            store,
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        let runs: Vec<SortedRun> = (0..5)
            .map(|i| sr.sort_buffer(i, pairs_u64(&[(i, 1)]), None).unwrap().unwrap())
            .collect();
        let out = sr.sort_reduce_all(runs).unwrap().unwrap();
        assert_eq!(out.count, 5);
        assert_eq!(sr.reduction_metrics().merge_jobs, 4);
    }

    #[test]
    fn pipeline_matches_group_by_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..8 {
            let (_tmp, store) = test_store(1 + trial % 3);
            let mut cfg = small_cfg();
            cfg.fan_in = 2 + trial % 3;
            let sr = SortReduce::new(
                store,
                cfg,
                MergeMode::Reduce(sum_u64_reducer()),
                8,
                "t",
            )
            .unwrap();
            let n = rng.gen_range(1..4000);
            let input: Vec<(u64, u64)> = (0..n)
                .map(|_| (rng.gen_range(0..200), rng.gen_range(0..100)))
                .collect();
            let out = sr.sort_reduce_pairs(pairs_u64(&input)).unwrap().unwrap();
            assert_eq!(
                run_pairs(&sr, &out),
                group_by_oracle(&input, |a, b| a + b)
            );
            // Monotone shrink at every level.
            for (_, s) in sr.reduction_metrics().levels {
                assert!(s.pairs_out <= s.pairs_in);
            }
        }
    }

    #[test]
    fn keep_duplicates_preserves_multiplicity_and_order() {
        let (_tmp, store) = test_store(2);
        let sr = SortReduce::new(store, small_cfg(), MergeMode::KeepDuplicates, 8, "t").unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let input: Vec<(u64, u64)> = (0..2000)
            .map(|_| (rng.gen_range(0..50), rng.gen_range(0..50)))
            .collect();
        let out = sr.sort_reduce_pairs(pairs_u64(&input)).unwrap().unwrap();
        let got = run_pairs(&sr, &out);
        let mut expected = input.clone();
        expected.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn corruption_detected_and_names_run() {
        let (_tmp, store) = test_store(1);
        let sr = SortReduce::new(
            store.clone(),
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        // Headerless file with decreasing keys.
        let f = store.create("bad.run").unwrap();
        for k in [5u64, 3, 1] {
            f.append(&k.to_le_bytes()).unwrap();
            f.append(&1u64.to_le_bytes()).unwrap();
        }
        drop(f);
        let bad = SortedRun::from_sparse_file(&store, "bad.run", 8, 0).unwrap();
        let good = sr.sort_buffer(1, pairs_u64(&[(7, 7)]), None).unwrap().unwrap();
        let err = sr.merge_runs(vec![bad, good]).unwrap_err();
        match err {
            Error::Corrupt { run, .. } => assert_eq!(run, "bad.run"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn metrics_fractions() {
        // Distinct keys: every fraction is 1.0.
        let (_tmp, store) = test_store(1);
        let sr = SortReduce::new(
            store,
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        let input: Vec<(u64, u64)> = (0..1000u64).map(|i| (i, 1)).collect();
        sr.sort_reduce_pairs(pairs_u64(&input)).unwrap().unwrap();
        for (_, s) in sr.reduction_metrics().levels {
            assert_eq!(s.pairs_out, s.pairs_in);
        }

        // Single key: phase-1 fraction = buffers / total pairs.
        let (_tmp2, store2) = test_store(1);
        let sr2 = SortReduce::new(
            store2,
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "t",
        )
        .unwrap();
        let total = 1000u64;
        sr2.sort_reduce_pairs(pairs_u64(&vec![(1, 1); total as usize]))
            .unwrap()
            .unwrap();
        let m = sr2.reduction_metrics();
        let phase1 = m.levels.iter().find(|(l, _)| *l == 0).unwrap().1;
        let buffers = total.div_ceil(small_cfg().buffer_capacity_pairs() as u64);
        assert_eq!(phase1.pairs_in, total);
        assert_eq!(phase1.pairs_out, buffers);
    }

    #[test]
    fn interleaving_dominance_on_duplicate_heavy_workload() {
        let mut rng = StdRng::seed_from_u64(3);
        let input: Vec<(u64, u64)> = (0..6000)
            .map(|_| (rng.gen_range(0..64), 1))
            .collect();

        let (_tmp, store) = test_store(2);
        let sr = SortReduce::new(
            store.clone(),
            small_cfg(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            "interleaved",
        )
        .unwrap();
        let before = store.stats().append_bytes;
        let out = sr.sort_reduce_pairs(pairs_u64(&input)).unwrap().unwrap();
        let interleaved_bytes = store.stats().append_bytes - before;

        let (_tmp2, store2) = test_store(2);
        let so = SortReduce::new(store2.clone(), small_cfg(), MergeMode::KeepDuplicates, 8, "sortonly")
            .unwrap();
        let before = store2.stats().append_bytes;
        let sorted = so.sort_reduce_pairs(pairs_u64(&input)).unwrap().unwrap();
        let reduced = reduce_run_pass(
            &store2,
            &sorted,
            sum_u64_reducer().as_ref(),
            "sortonly.final",
            4096,
        )
        .unwrap();
        let sort_only_bytes = store2.stats().append_bytes - before;

        assert!(interleaved_bytes < sort_only_bytes);
        assert_eq!(run_pairs(&sr, &out), run_pairs(&so, &reduced));
    }

    #[test]
    fn buffer_pool_caps_and_tracks_peak() {
        let pool = BufferPool::new(100, 3);
        let a = pool.acquire();
        let b = pool.acquire();
        let c = pool.acquire();
        pool.release(a);
        let d = pool.acquire();
        pool.release(b);
        pool.release(c);
        pool.release(d);
        assert_eq!(pool.peak_bytes(), (3 * 100 * PAIR_MEM_BYTES) as u64);
    }

    #[test]
    fn config_validation() {
        assert!(SortReduceConfig::default().validate().is_ok());
        let mut cfg = small_cfg();
        cfg.fan_in = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.buffer_bytes = cfg.sub_chunk_bytes;
        assert!(cfg.validate().is_err());
    }
}
