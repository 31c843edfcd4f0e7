//! Append-only file store striped round-robin across an array of directories.
//!
//! Each directory stands in for one storage device. A logical file is split
//! into fixed-size chunks placed on the devices in round-robin order, one
//! segment file per device. Data can only be appended; positional reads are
//! concurrent, gated per device by a read-queue-depth limit.
//!
//! On disk a logical file `f` over devices `d0..dn` consists of
//! `d<k>/f.seg<k>` segment files plus a manifest `d0/f.manifest` holding the
//! chunk size, device count and device order (newline-separated ASCII), so a
//! store is self-describing on reopen.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::ErrorKind;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: u64 = 1 << 20;
pub const MIN_CHUNK_SIZE: u64 = 4096;

/// Maps a logical byte offset to (device index, device-local offset) under
/// round-robin chunk striping.
pub fn stripe_map(logical_offset: u64, chunk_size: u64, num_devices: u64) -> (u64, u64) {
    debug_assert!(chunk_size > 0 && num_devices >= 1);
    let chunk = logical_offset / chunk_size;
    let device = chunk % num_devices;
    let local_chunk = chunk / num_devices;
    (device, local_chunk * chunk_size + logical_offset % chunk_size)
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub device_dirs: Vec<PathBuf>,
    pub chunk_size: u64,
    /// In-flight reads permitted per device.
    pub read_queue_depth: usize,
}

impl StoreConfig {
    pub fn new(device_dirs: Vec<PathBuf>) -> Self {
        StoreConfig {
            device_dirs,
            chunk_size: DEFAULT_CHUNK_SIZE,
            read_queue_depth: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_dirs.is_empty() {
            return Err(Error::Config("store needs at least one device dir".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.device_dirs {
            if !seen.insert(d.clone()) {
                return Err(Error::Config(format!(
                    "duplicate device dir {}",
                    d.display()
                )));
            }
        }
        if self.chunk_size < MIN_CHUNK_SIZE || !self.chunk_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "chunk_size {} must be a power of two >= {}",
                self.chunk_size, MIN_CHUNK_SIZE
            )));
        }
        if self.read_queue_depth == 0 {
            return Err(Error::Config("read_queue_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Operation counters for the whole store. `non_append_writes` stays zero for
/// any well-behaved client; it is the audit signal for storage discipline.
#[derive(Debug, Default)]
pub struct StoreStats {
    pub appends: AtomicU64,
    pub append_bytes: AtomicU64,
    pub reads: AtomicU64,
    pub read_bytes: AtomicU64,
    pub non_append_writes: AtomicU64,
    /// One-shot backfills of space reserved at append time (run headers).
    pub reserved_fills: AtomicU64,
    pub deletes: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub appends: u64,
    pub append_bytes: u64,
    pub reads: u64,
    pub read_bytes: u64,
    pub non_append_writes: u64,
    pub reserved_fills: u64,
    pub deletes: u64,
}

impl StoreStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            appends: self.appends.load(Ordering::Relaxed),
            append_bytes: self.append_bytes.load(Ordering::Relaxed),
            reads: self.reads.load(Ordering::Relaxed),
            read_bytes: self.read_bytes.load(Ordering::Relaxed),
            non_append_writes: self.non_append_writes.load(Ordering::Relaxed),
            reserved_fills: self.reserved_fills.load(Ordering::Relaxed),
            deletes: self.deletes.load(Ordering::Relaxed),
        }
    }
}

/// Counting semaphore bounding in-flight reads per device.
struct ReadGate {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl ReadGate {
    fn new(depth: usize) -> Self {
        ReadGate {
            slots: Mutex::new(depth),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.cv.wait(slots).unwrap();
        }
        *slots -= 1;
    }

    fn release(&self) {
        *self.slots.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

struct Reserved {
    offset: u64,
    len: u64,
    filled: bool,
}

struct AppendState {
    logical_len: u64,
    seg_lens: Vec<u64>,
    reserved: Vec<Reserved>,
}

struct FileInner {
    name: String,
    chunk_size: u64,
    segments: Vec<File>,
    seg_paths: Vec<PathBuf>,
    append: Mutex<AppendState>,
    /// Mirrors `append.logical_len` for lock-free bounds checks on reads.
    len: AtomicU64,
}

struct StoreInner {
    cfg: StoreConfig,
    stats: StoreStats,
    gates: Vec<ReadGate>,
    open_files: Mutex<HashMap<String, Weak<FileInner>>>,
}

/// Handle to a store; cheap to clone, shareable across threads.
#[derive(Clone)]
pub struct Store(Arc<StoreInner>);

/// Handle to one logical striped file.
#[derive(Clone)]
pub struct StripedFile {
    inner: Arc<FileInner>,
    store: Arc<StoreInner>,
}

fn manifest_path(dir0: &Path, name: &str) -> PathBuf {
    dir0.join(format!("{name}.manifest"))
}

impl Store {
    pub fn open(cfg: StoreConfig) -> Result<Store> {
        cfg.validate()?;
        for d in &cfg.device_dirs {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let gates = (0..cfg.device_dirs.len())
            .map(|_| ReadGate::new(cfg.read_queue_depth))
            .collect();
        Ok(Store(Arc::new(StoreInner {
            cfg,
            stats: StoreStats::default(),
            gates,
            open_files: Mutex::new(HashMap::new()),
        })))
    }

    pub fn config(&self) -> &StoreConfig {
        &self.0.cfg
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.0.stats.snapshot()
    }

    pub fn exists(&self, name: &str) -> bool {
        manifest_path(&self.0.cfg.device_dirs[0], name).exists()
    }

    /// Creates a new empty logical file. Fails if the name already exists.
    pub fn create(&self, name: &str) -> Result<StripedFile> {
        if self.exists(name) {
            return Err(Error::InUse(format!("{name} already exists")));
        }
        let dirs = &self.0.cfg.device_dirs;
        let mut manifest = format!("{}\n{}\n", self.0.cfg.chunk_size, dirs.len());
        for d in dirs {
            manifest.push_str(&format!("{}\n", d.display()));
        }
        let mpath = manifest_path(&dirs[0], name);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        self.open_inner(name, true)
    }

    /// Opens an existing logical file, reconstructing its length from the
    /// per-device segment lengths.
    pub fn open_file(&self, name: &str) -> Result<StripedFile> {
        if !self.exists(name) {
            return Err(Error::NotFound(name.into()));
        }
        self.open_inner(name, false)
    }

    fn open_inner(&self, name: &str, fresh: bool) -> Result<StripedFile> {
        let mut registry = self.0.open_files.lock().unwrap();
        if let Some(weak) = registry.get(name) {
            if let Some(inner) = weak.upgrade() {
                return Ok(StripedFile {
                    inner,
                    store: self.0.clone(),
                });
            }
        }
        let dirs = &self.0.cfg.device_dirs;
        let chunk_size = if fresh {
            self.0.cfg.chunk_size
        } else {
            let mpath = manifest_path(&dirs[0], name);
            let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let first = text.lines().next().unwrap_or("");
            first
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("bad manifest for {name}")))?
        };
        let mut segments = Vec::with_capacity(dirs.len());
        let mut seg_paths = Vec::with_capacity(dirs.len());
        let mut seg_lens = Vec::with_capacity(dirs.len());
        for (k, d) in dirs.iter().enumerate() {
            let path = d.join(format!("{name}.seg{k}"));
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let len = f.metadata().map_err(|e| Error::io(&path, e))?.len();
            segments.push(f);
            seg_paths.push(path);
            seg_lens.push(len);
        }
        let logical_len = seg_lens.iter().sum();
        let inner = Arc::new(FileInner {
            name: name.to_string(),
            chunk_size,
            segments,
            seg_paths,
            append: Mutex::new(AppendState {
                logical_len,
                seg_lens,
                reserved: Vec::new(),
            }),
            len: AtomicU64::new(logical_len),
        });
        registry.insert(name.to_string(), Arc::downgrade(&inner));
        Ok(StripedFile {
            inner,
            store: self.0.clone(),
        })
    }

    /// Removes a logical file. Rejected while any handle is still open.
    pub fn delete(&self, name: &str) -> Result<()> {
        let mut registry = self.0.open_files.lock().unwrap();
        if let Some(weak) = registry.get(name) {
            if weak.upgrade().is_some() {
                return Err(Error::InUse(name.into()));
            }
        }
        registry.remove(name);
        drop(registry);
        if !self.exists(name) {
            return Err(Error::NotFound(name.into()));
        }
        for (k, d) in self.0.cfg.device_dirs.iter().enumerate() {
            let path = d.join(format!("{name}.seg{k}"));
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        let mpath = manifest_path(&self.0.cfg.device_dirs[0], name);
        fs::remove_file(&mpath).map_err(|e| Error::io(&mpath, e))?;
        self.0.stats.deletes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Logical file names present in the store.
    pub fn list(&self) -> Result<Vec<String>> {
        let dir0 = &self.0.cfg.device_dirs[0];
        let mut names = Vec::new();
        for entry in fs::read_dir(dir0).map_err(|e| Error::io(dir0, e))? {
            let entry = entry.map_err(|e| Error::io(dir0, e))?;
            let fname = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = fname.strip_suffix(".manifest") {
                names.push(stem.to_string());
            }
        }
        names.sort();
        Ok(names)
    }
}

impl StripedFile {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn len(&self) -> u64 {
        self.inner.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn num_devices(&self) -> u64 {
        self.inner.segments.len() as u64
    }

    fn write_pieces(&self, start: u64, data: &[u8], state: &mut AppendState) -> Result<()> {
        let chunk_size = self.inner.chunk_size;
        let ndev = self.num_devices();
        let mut off = start;
        let mut rest = data;
        while !rest.is_empty() {
            let within = off % chunk_size;
            let piece_len = ((chunk_size - within) as usize).min(rest.len());
            let (dev, local) = stripe_map(off, chunk_size, ndev);
            let dev = dev as usize;
            if local != state.seg_lens[dev] {
                // Out-of-place write; counted so audits can catch it.
                self.store
                    .stats
                    .non_append_writes
                    .fetch_add(1, Ordering::Relaxed);
            }
            let seg = &self.inner.segments[dev];
            seg.write_all_at(&rest[..piece_len], local).map_err(|e| {
                if e.raw_os_error() == Some(libc_enospc()) {
                    Error::StorageExhausted {
                        device: self.store.cfg.device_dirs[dev].clone(),
                    }
                } else {
                    Error::io(&self.inner.seg_paths[dev], e)
                }
            })?;
            state.seg_lens[dev] = state.seg_lens[dev].max(local + piece_len as u64);
            off += piece_len as u64;
            rest = &rest[piece_len..];
        }
        Ok(())
    }

    /// Appends `data`, returning the logical offset at which it begins.
    /// Appends by one producer are totally ordered; the handle serializes
    /// concurrent appenders internally.
    pub fn append(&self, data: &[u8]) -> Result<u64> {
        let mut state = self.inner.append.lock().unwrap();
        let start = state.logical_len;
        self.write_pieces(start, data, &mut state)?;
        state.logical_len += data.len() as u64;
        self.inner.len.store(state.logical_len, Ordering::Release);
        self.store.stats.appends.fetch_add(1, Ordering::Relaxed);
        self.store
            .stats
            .append_bytes
            .fetch_add(data.len() as u64, Ordering::Relaxed);
        Ok(start)
    }

    /// Reserves `len` bytes at the current end of the file for a single later
    /// `fill_reserved` call. The region counts toward the file length
    /// immediately; reading it before the fill yields zeroes.
    pub fn append_reserve(&self, len: u64) -> Result<u64> {
        let mut state = self.inner.append.lock().unwrap();
        let start = state.logical_len;
        let zeroes = vec![0u8; len as usize];
        self.write_pieces(start, &zeroes, &mut state)?;
        state.logical_len += len;
        state.reserved.push(Reserved {
            offset: start,
            len,
            filled: false,
        });
        self.inner.len.store(state.logical_len, Ordering::Release);
        self.store.stats.appends.fetch_add(1, Ordering::Relaxed);
        self.store
            .stats
            .append_bytes
            .fetch_add(len, Ordering::Relaxed);
        Ok(start)
    }

    /// One-shot backfill of a region obtained from `append_reserve`.
    pub fn fill_reserved(&self, offset: u64, data: &[u8]) -> Result<()> {
        let mut state = self.inner.append.lock().unwrap();
        let idx = state
            .reserved
            .iter()
            .position(|r| r.offset == offset && r.len == data.len() as u64 && !r.filled)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "no unfilled reservation at offset {offset} in {}",
                    self.inner.name
                ))
            })?;
        let chunk_size = self.inner.chunk_size;
        let ndev = self.num_devices();
        let mut off = offset;
        let mut rest = data;
        while !rest.is_empty() {
            let within = off % chunk_size;
            let piece_len = ((chunk_size - within) as usize).min(rest.len());
            let (dev, local) = stripe_map(off, chunk_size, ndev);
            let dev = dev as usize;
            self.inner.segments[dev]
                .write_all_at(&rest[..piece_len], local)
                .map_err(|e| Error::io(&self.inner.seg_paths[dev], e))?;
            off += piece_len as u64;
            rest = &rest[piece_len..];
        }
        state.reserved[idx].filled = true;
        state.reserved.retain(|r| !r.filled);
        self.store
            .stats
            .reserved_fills
            .fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Reads exactly `len` bytes starting at `offset`. Reads may be issued
    /// concurrently from any number of threads.
    pub fn read_at(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.read_into(offset, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&self, offset: u64, out: &mut [u8]) -> Result<()> {
        let file_len = self.len();
        let len = out.len() as u64;
        if offset + len > file_len {
            return Err(Error::Bounds(format!(
                "read [{offset}, {}) beyond length {file_len} of {}",
                offset + len,
                self.inner.name
            )));
        }
        let chunk_size = self.inner.chunk_size;
        let ndev = self.num_devices();
        let mut off = offset;
        let mut rest = out;
        while !rest.is_empty() {
            let within = off % chunk_size;
            let piece_len = ((chunk_size - within) as usize).min(rest.len());
            let (dev, local) = stripe_map(off, chunk_size, ndev);
            let dev = dev as usize;
            let gate = &self.store.gates[dev];
            gate.acquire();
            let res = self.inner.segments[dev].read_exact_at(&mut rest[..piece_len], local);
            gate.release();
            res.map_err(|e| Error::io(&self.inner.seg_paths[dev], e))?;
            off += piece_len as u64;
            let (_, tail) = std::mem::take(&mut rest).split_at_mut(piece_len);
            rest = tail;
        }
        self.store.stats.reads.fetch_add(1, Ordering::Relaxed);
        self.store
            .stats
            .read_bytes
            .fetch_add(len, Ordering::Relaxed);
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        for (seg, path) in self.inner.segments.iter().zip(&self.inner.seg_paths) {
            seg.sync_data().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn libc_enospc() -> i32 {
    28 // ENOSPC on linux
}
