//! Binary graph layout: an index file of per-vertex byte offsets into a
//! contiguous edge file, plus text ingestion, R-MAT generation, and
//! session-scoped traversal with a single-page cache per backing file.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sortreduce::{MergeMode, SortReduce, SortReduceConfig, UpdatePair};
use crate::storage::{Store, StripedFile};
use crate::value::{from_slice, ValueBytes};

pub const MAX_VERTICES: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphMeta {
    pub num_vertices: u64,
    pub num_edges: u64,
    /// Bytes per edge weight: 0 (unweighted), 4 (f32), or 8 (f64).
    pub weight_width: u32,
}

impl GraphMeta {
    pub fn validate(&self) -> Result<()> {
        if self.num_vertices == 0 || self.num_vertices > MAX_VERTICES {
            return Err(Error::Config(format!(
                "num_vertices {} out of range",
                self.num_vertices
            )));
        }
        if !matches!(self.weight_width, 0 | 4 | 8) {
            return Err(Error::Config(format!(
                "weight_width {} not in {{0,4,8}}",
                self.weight_width
            )));
        }
        Ok(())
    }

    pub fn edge_record_size(&self) -> u64 {
        8 + self.weight_width as u64
    }

    fn to_manifest(self) -> String {
        format!(
            "num_vertices={}\nnum_edges={}\nweight_width={}\n",
            self.num_vertices, self.num_edges, self.weight_width
        )
    }

    fn from_manifest(text: &str) -> Result<GraphMeta> {
        let mut meta = GraphMeta {
            num_vertices: 0,
            num_edges: 0,
            weight_width: u32::MAX,
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad meta line: {line}")))?;
            let parse = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| Error::Format(format!("bad meta value: {line}")))
            };
            match k {
                "num_vertices" => meta.num_vertices = parse(v)?,
                "num_edges" => meta.num_edges = parse(v)?,
                "weight_width" => meta.weight_width = parse(v)? as u32,
                _ => return Err(Error::Format(format!("unknown meta key: {k}"))),
            }
        }
        meta.validate()?;
        Ok(meta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRecord {
    pub dst: u64,
    /// 0.0 for unweighted graphs; f32 widened for weight_width 4.
    pub weight: f64,
}

fn decode_weight(bytes: &[u8], width: u32) -> f64 {
    match width {
        0 => 0.0,
        4 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        8 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        _ => unreachable!(),
    }
}

fn encode_weight(w: f64, width: u32, out: &mut Vec<u8>) {
    match width {
        0 => {}
        4 => out.extend_from_slice(&(w as f32).to_le_bytes()),
        8 => out.extend_from_slice(&w.to_le_bytes()),
        _ => unreachable!(),
    }
}

/// An immutable graph in a store: `<name>.idx`, `<name>.edg`, `<name>.meta`.
pub struct Graph {
    store: Store,
    name: String,
    meta: GraphMeta,
    index: StripedFile,
    edges: StripedFile,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("name", &self.name)
            .field("meta", &self.meta)
            .finish()
    }
}


fn idx_name(name: &str) -> String {
    format!("{name}.idx")
}
fn edg_name(name: &str) -> String {
    format!("{name}.edg")
}
fn meta_name(name: &str) -> String {
    format!("{name}.meta")
}

impl Graph {
    pub fn open(store: &Store, name: &str) -> Result<Graph> {
        let meta_file = store.open_file(&meta_name(name))?;
        let bytes = meta_file.read_at(0, meta_file.len())?;
        let meta = GraphMeta::from_manifest(
            std::str::from_utf8(&bytes).map_err(|_| Error::Format("meta not UTF-8".into()))?,
        )?;
        let index = store.open_file(&idx_name(name))?;
        let edges = store.open_file(&edg_name(name))?;
        if index.len() != (meta.num_vertices + 1) * 8 {
            return Err(Error::Format(format!(
                "index length {} != {} entries",
                index.len(),
                meta.num_vertices + 1
            )));
        }
        if edges.len() != meta.num_edges * meta.edge_record_size() {
            return Err(Error::Format("edge file length mismatch".into()));
        }
        Ok(Graph {
            store: store.clone(),
            name: name.to_string(),
            meta,
            index,
            edges,
        })
    }

    pub fn meta(&self) -> GraphMeta {
        self.meta
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn offset_at(&self, i: u64) -> Result<u64> {
        let bytes = self.index.read_at(i * 8, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    pub fn out_degree(&self, v: u64) -> Result<u64> {
        if v >= self.meta.num_vertices {
            return Err(Error::Bounds(format!(
                "vertex {v} >= num_vertices {}",
                self.meta.num_vertices
            )));
        }
        let lo = self.offset_at(v)?;
        let hi = self.offset_at(v + 1)?;
        Ok((hi - lo) / self.meta.edge_record_size())
    }

    /// Full adjacency in memory; intended for small graphs and test oracles.
    pub fn load_adjacency(&self) -> Result<Vec<Vec<EdgeRecord>>> {
        let mut session = TraversalSession::new(self, 1 << 20);
        let mut adj = Vec::with_capacity(self.meta.num_vertices as usize);
        for v in 0..self.meta.num_vertices {
            adj.push(session.edges_of(v)?);
        }
        Ok(adj)
    }
}

/// Reads index and edge data through one cached page per file. Ascending
/// vertex enumeration therefore fetches each page at most once.
pub struct TraversalSession<'g> {
    graph: &'g Graph,
    page_size: u64,
    idx_cache: PageCache,
    edge_cache: PageCache,
    fetches: Arc<AtomicU64>,
}

struct PageCache {
    page_idx: Option<u64>,
    page: Vec<u8>,
}

impl PageCache {
    fn new() -> PageCache {
        PageCache {
            page_idx: None,
            page: Vec::new(),
        }
    }

    fn read(
        &mut self,
        file: &StripedFile,
        page_size: u64,
        offset: u64,
        out: &mut Vec<u8>,
        len: u64,
        fetches: &AtomicU64,
    ) -> Result<()> {
        let mut pos = offset;
        let end = offset + len;
        while pos < end {
            let pi = pos / page_size;
            if self.page_idx != Some(pi) {
                let start = pi * page_size;
                let take = page_size.min(file.len() - start);
                self.page = file.read_at(start, take)?;
                self.page_idx = Some(pi);
                fetches.fetch_add(1, Ordering::Relaxed);
            }
            let in_page = (pos - pi * page_size) as usize;
            let take = ((end - pos) as usize).min(self.page.len() - in_page);
            out.extend_from_slice(&self.page[in_page..in_page + take]);
            pos += take as u64;
        }
        Ok(())
    }
}

impl<'g> TraversalSession<'g> {
    pub fn new(graph: &'g Graph, page_size: u64) -> TraversalSession<'g> {
        assert!(page_size > 0);
        TraversalSession {
            graph,
            page_size,
            idx_cache: PageCache::new(),
            edge_cache: PageCache::new(),
            fetches: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn page_fetches(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }

    pub fn edges_of(&mut self, v: u64) -> Result<Vec<EdgeRecord>> {
        let meta = self.graph.meta;
        if v >= meta.num_vertices {
            return Err(Error::Bounds(format!(
                "vertex {v} >= num_vertices {}",
                meta.num_vertices
            )));
        }
        let mut offs = Vec::with_capacity(16);
        self.idx_cache.read(
            &self.graph.index,
            self.page_size,
            v * 8,
            &mut offs,
            16,
            &self.fetches,
        )?;
        let lo = u64::from_le_bytes(offs[0..8].try_into().unwrap());
        let hi = u64::from_le_bytes(offs[8..16].try_into().unwrap());
        let mut raw = Vec::with_capacity((hi - lo) as usize);
        self.edge_cache.read(
            &self.graph.edges,
            self.page_size,
            lo,
            &mut raw,
            hi - lo,
            &self.fetches,
        )?;
        let rec = meta.edge_record_size() as usize;
        let mut out = Vec::with_capacity(raw.len() / rec);
        for chunk in raw.chunks_exact(rec) {
            out.push(EdgeRecord {
                dst: u64::from_le_bytes(chunk[..8].try_into().unwrap()),
                weight: decode_weight(&chunk[8..], meta.weight_width),
            });
        }
        Ok(out)
    }
}

fn parse_edge_line(line_no: u64, line: &str, weight_width: u32) -> Result<Option<(u64, u64, f64)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let mut fields = line.split_whitespace();
    let perr = |msg: &str| Error::Parse {
        line: line_no,
        msg: msg.to_string(),
    };
    let src: u64 = fields
        .next()
        .ok_or_else(|| perr("missing src"))?
        .parse()
        .map_err(|_| perr("bad src"))?;
    let dst: u64 = fields
        .next()
        .ok_or_else(|| perr("missing dst"))?
        .parse()
        .map_err(|_| perr("bad dst"))?;
    let weight = match (fields.next(), weight_width) {
        (None, 0) => 0.0,
        (None, _) => return Err(perr("missing weight")),
        (Some(_), 0) => {
            return Err(Error::Format(format!(
                "line {line_no}: weight given but weight_width = 0"
            )))
        }
        (Some(w), _) => w.parse().map_err(|_| perr("bad weight"))?,
    };
    if fields.next().is_some() {
        return Err(perr("trailing fields"));
    }
    if src >= MAX_VERTICES || dst >= MAX_VERTICES {
        return Err(perr("vertex id too large"));
    }
    Ok(Some((src, dst, weight)))
}

/// Builds the binary graph from a text edge list. Edges are laid out sorted
/// by (src, dst) via the external merge machinery, bounded by
/// `sort_buffer_budget` bytes of in-memory buffering.
pub fn ingest_edge_list(
    store: &Store,
    name: &str,
    input: impl BufRead,
    weight_width: u32,
    sort_buffer_budget: u64,
) -> Result<Graph> {
    if !matches!(weight_width, 0 | 4 | 8) {
        return Err(Error::Config(format!(
            "weight_width {weight_width} not in {{0,4,8}}"
        )));
    }
    let value_width = 8 + weight_width;
    let buffer_bytes = sort_buffer_budget.max(64 * 1024) as usize;
    let cfg = SortReduceConfig {
        buffer_bytes,
        sub_chunk_bytes: (buffer_bytes / 8).max(4096),
        fan_in: 16,
        merge_read_ahead: (buffer_bytes / 16).clamp(4096, 4 << 20),
        worker_threads: 4,
    };
    // value = dst LE followed by the weight bytes; the dst prefix doubles as
    // the duplicate-preserving merge tie-break, giving (src, dst) order.
    let sr = SortReduce::new(
        store.clone(),
        cfg,
        MergeMode::KeepDuplicates,
        value_width as usize,
        &format!("{name}.ingest"),
    )?;

    let cap = sr.config().buffer_capacity_pairs();
    let mut max_id = 0u64;
    let mut num_edges = 0u64;
    let (tx, rx) = crossbeam_channel::bounded::<(u64, Vec<UpdatePair>)>(2);
    let final_run = std::thread::scope(|scope| -> Result<_> {
        let consumer = scope.spawn(|| sr.pipeline(rx, None));
        let mut seq = 0u64;
        let mut buf: Vec<UpdatePair> = Vec::with_capacity(cap.min(1 << 20));
        let mut feed_err = None;
        'feed: {
            for (i, line) in input.lines().enumerate() {
                let line_no = i as u64 + 1;
                let line = match line {
                    Ok(l) => l,
                    Err(e) => {
                        feed_err = Some(Error::io(format!("{name} input"), e));
                        break 'feed;
                    }
                };
                let parsed = match parse_edge_line(line_no, &line, weight_width) {
                    Ok(p) => p,
                    Err(e) => {
                        feed_err = Some(e);
                        break 'feed;
                    }
                };
                let Some((src, dst, w)) = parsed else { continue };
                max_id = max_id.max(src).max(dst);
                num_edges += 1;
                let mut vbytes = Vec::with_capacity(16);
                vbytes.extend_from_slice(&dst.to_le_bytes());
                encode_weight(w, weight_width, &mut vbytes);
                buf.push(UpdatePair::new(src, from_slice(&vbytes)));
                if buf.len() == cap {
                    let full = std::mem::replace(&mut buf, Vec::with_capacity(cap.min(1 << 20)));
                    if tx.send((seq, full)).is_err() {
                        break 'feed;
                    }
                    seq += 1;
                }
            }
            if !buf.is_empty() && tx.send((seq, buf)).is_err() {
                feed_err = Some(Error::Contract("sort pipeline hung up".into()));
            }
            buf = Vec::new();
        }
        let _ = buf;
        drop(tx);
        let run = consumer.join().expect("sort pipeline panicked");
        match feed_err {
            Some(e) => Err(e),
            None => run,
        }
    })?;

    if num_edges == 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "no edges".into(),
        });
    }
    let meta = GraphMeta {
        num_vertices: max_id + 1,
        num_edges,
        weight_width,
    };
    meta.validate()?;

    let idx = store.create(&idx_name(name))?;
    let edg = store.create(&edg_name(name))?;
    let rec = meta.edge_record_size();
    let mut idx_buf = Vec::with_capacity(1 << 16);
    let mut edg_buf = Vec::with_capacity(1 << 16);
    let mut next_vertex = 0u64; // first vertex whose index offset is unwritten
    let mut edge_off = 0u64;
    let run = final_run.expect("edges present implies a run");
    let mut reader = crate::sortreduce::RunReader::open(store, &run, 1 << 20, false)?;
    while let Some(pair) = reader.next()? {
        while next_vertex <= pair.key {
            idx_buf.extend_from_slice(&edge_off.to_le_bytes());
            next_vertex += 1;
            if idx_buf.len() >= 1 << 16 {
                idx.append(&idx_buf)?;
                idx_buf.clear();
            }
        }
        edg_buf.extend_from_slice(&pair.value[..rec as usize]);
        edge_off += rec;
        if edg_buf.len() >= 1 << 16 {
            edg.append(&edg_buf)?;
            edg_buf.clear();
        }
    }
    while next_vertex <= meta.num_vertices {
        idx_buf.extend_from_slice(&edge_off.to_le_bytes());
        next_vertex += 1;
        if idx_buf.len() >= 1 << 16 {
            idx.append(&idx_buf)?;
            idx_buf.clear();
        }
    }
    idx.append(&idx_buf)?;
    edg.append(&edg_buf)?;
    idx.flush()?;
    edg.flush()?;
    drop(reader);
    store.delete(&run.name)?;

    let mf = store.create(&meta_name(name))?;
    mf.append(meta.to_manifest().as_bytes())?;
    mf.flush()?;
    drop((idx, edg, mf));
    Graph::open(store, name)
}

/// Writes the graph back out as a text edge list; inverse of ingestion for
/// round-trip checks.
pub fn emit_text(graph: &Graph, mut out: impl Write) -> Result<()> {
    let mut session = TraversalSession::new(graph, 1 << 20);
    let ww = graph.meta.weight_width;
    for v in 0..graph.meta.num_vertices {
        for e in session.edges_of(v)? {
            let line = match ww {
                0 => format!("{v} {}\n", e.dst),
                4 => format!("{v} {} {:?}\n", e.dst, e.weight as f32),
                _ => format!("{v} {} {:?}\n", e.dst, e.weight),
            };
            out.write_all(line.as_bytes())
                .map_err(|e| Error::io("edge list output", e))?;
        }
    }
    Ok(())
}

/// Graph 500 reference initiator probabilities.
const RMAT_A: f64 = 0.57;
const RMAT_B: f64 = 0.19;
const RMAT_C: f64 = 0.19;

/// Emits `edge_factor * 2^scale` R-MAT edges over `2^scale` vertices as a
/// text edge list. Deterministic for a fixed seed.
pub fn generate_rmat(scale: u32, edge_factor: u64, seed: u64, mut out: impl Write) -> Result<()> {
    assert!(scale >= 1 && scale <= 30, "scale out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_edges = edge_factor << scale;
    let mut buf = String::with_capacity(1 << 16);
    for _ in 0..num_edges {
        let (mut src, mut dst) = (0u64, 0u64);
        for _ in 0..scale {
            let r: f64 = rng.gen();
            let (sbit, dbit) = if r < RMAT_A {
                (0, 0)
            } else if r < RMAT_A + RMAT_B {
                (0, 1)
            } else if r < RMAT_A + RMAT_B + RMAT_C {
                (1, 0)
            } else {
                (1, 1)
            };
            src = (src << 1) | sbit;
            dst = (dst << 1) | dbit;
        }
        buf.push_str(&format!("{src} {dst}\n"));
        if buf.len() >= 1 << 16 {
            out.write_all(buf.as_bytes())
                .map_err(|e| Error::io("rmat output", e))?;
            buf.clear();
        }
    }
    out.write_all(buf.as_bytes())
        .map_err(|e| Error::io("rmat output", e))?;
    Ok(())
}

pub fn dense_value_bytes(v: &ValueBytes, width: u32) -> &[u8] {
    &v[..width as usize]
}
