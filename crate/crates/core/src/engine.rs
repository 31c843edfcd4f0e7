//! BSP superstep executor. Each superstep streams the active vertices,
//! applies the edge program over their out-edges to build the intermediate
//! update list, sort-reduces it, then finalizes the reduced run against the
//! old values in one co-sequential pass. Vertex state is never rewritten in
//! place: new values land in per-superstep sparse update logs composed
//! lazily over the dense base file.

use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::bounded;

use crate::error::{Error, Result};
use crate::graphfmt::{Graph, TraversalSession};
use crate::sortreduce::{
    MergeMode, Reducer, SortReduce, SortReduceConfig, SortedRun, UpdatePair,
};
use crate::storage::Store;
use crate::value::ValueBytes;
use crate::vsource::{
    write_dense_file, BoxSource, DenseFileSource, LogicalOp, LogicalSource, MemorySource,
    SparseFileSource,
};

/// Per-edge context handed to the edge program alongside the source value
/// and edge weight.
#[derive(Debug, Clone, Copy)]
pub struct EdgeContext {
    pub src: u64,
    pub out_degree: u64,
    pub edge_ordinal: u64,
}

pub type EdgeProgram = Arc<dyn Fn(&ValueBytes, f64, &EdgeContext) -> ValueBytes + Send + Sync>;
pub type FinalizeFn = Arc<dyn Fn(&ValueBytes, &ValueBytes) -> ValueBytes + Send + Sync>;
pub type MissingFn = Arc<dyn Fn(&ValueBytes) -> ValueBytes + Send + Sync>;
pub type IsActiveFn = Arc<dyn Fn(&ValueBytes, &ValueBytes) -> bool + Send + Sync>;
pub type DeltaFn = Arc<dyn Fn(&ValueBytes, &ValueBytes) -> f64 + Send + Sync>;
pub type ConvergenceFn = Arc<dyn Fn(&SuperstepReport) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum InitialActive {
    /// Every vertex starts active (e.g. PageRank).
    All,
    /// Only the listed vertices, with their override values (e.g. a BFS
    /// root). Keys ascending.
    Keys(Vec<u64>),
    None,
}

#[derive(Clone)]
pub struct AlgorithmDefinition {
    pub name: String,
    pub value_width: usize,
    pub edge_program: EdgeProgram,
    /// Associative; combined with the deterministic fold order this makes
    /// superstep results reproducible.
    pub reducer: Arc<dyn Reducer>,
    pub finalize: FinalizeFn,
    /// When set, the finalize pass streams every vertex and applies this to
    /// vertices that received no update, so the log covers all vertices
    /// (PageRank needs the teleport term everywhere).
    pub finalize_missing: Option<MissingFn>,
    pub is_active: IsActiveFn,
    pub default_value: ValueBytes,
    /// Sparse overrides of the default in the initial dense base, ascending.
    pub initial_overrides: Vec<(u64, ValueBytes)>,
    pub initial_active: InitialActive,
    /// Per-entry |old - new| measure feeding `convergence`.
    pub delta: Option<DeltaFn>,
    /// Extra stop condition checked after each superstep.
    pub convergence: Option<ConvergenceFn>,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub sort: SortReduceConfig,
    /// Update logs are merged into one when more than this many accumulate.
    pub consolidation_threshold: usize,
    pub superstep_cap: u64,
    pub read_ahead: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            sort: SortReduceConfig::default(),
            consolidation_threshold: 8,
            superstep_cap: 1_000_000,
            read_ahead: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuperstepReport {
    pub step: u64,
    pub active: u64,
    pub pairs: u64,
    pub runs: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub seconds: f64,
    pub max_delta: f64,
}

pub fn report_csv(reports: &[SuperstepReport]) -> String {
    let mut out = String::from("step,active,pairs,runs,bytes_read,bytes_written,seconds\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6}\n",
            r.step, r.active, r.pairs, r.runs, r.bytes_read, r.bytes_written, r.seconds
        ));
    }
    out
}

enum ActiveDesc {
    None,
    /// All vertices: the full current-values composition.
    Everything,
    /// Keys of the newest log judged active against the prior composition,
    /// realized lazily as a Converge source during the next superstep.
    ConvergeNewest,
}

/// Current values and active set after some number of supersteps. Values
/// are the union composition of the dense base and the update logs, newest
/// winning; the composition is pure — re-evaluating it re-reads the same
/// bytes and yields the same stream.
pub struct SuperstepState {
    pub step: u64,
    base: String,
    logs: Vec<String>,
    active: ActiveDesc,
    next_log_id: u64,
    value_width: usize,
    job: String,
}

impl SuperstepState {
    pub fn log_names(&self) -> &[String] {
        &self.logs
    }

    pub fn base_name(&self) -> &str {
        &self.base
    }

    pub fn has_active(&self) -> bool {
        !matches!(self.active, ActiveDesc::None)
    }
}

pub struct Engine {
    store: Store,
    cfg: EngineConfig,
}

impl Engine {
    pub fn new(store: Store, cfg: EngineConfig) -> Result<Engine> {
        cfg.sort.validate()?;
        if cfg.consolidation_threshold < 1 {
            return Err(Error::Config("consolidation_threshold must be ≥ 1".into()));
        }
        Ok(Engine { store, cfg })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Writes the initial dense base and sets up the initial active set.
    pub fn init_state(
        &self,
        job: &str,
        num_vertices: u64,
        algdef: &AlgorithmDefinition,
    ) -> Result<SuperstepState> {
        let base = format!("{job}.base");
        // Seed keys get their override via the seed log, not the base;
        // otherwise the first Converge pass would see old == new and judge
        // the seeds inactive.
        let seed_keys: &[u64] = match &algdef.initial_active {
            InitialActive::Keys(ks) => ks,
            _ => &[],
        };
        let base_overrides: Vec<(u64, ValueBytes)> = algdef
            .initial_overrides
            .iter()
            .filter(|(k, _)| !seed_keys.contains(k))
            .copied()
            .collect();
        let mut overrides = MemorySource::from_pairs(&base_overrides);
        write_dense_file(
            &self.store,
            &base,
            num_vertices,
            algdef.value_width,
            algdef.default_value,
            &mut overrides,
            false,
        )?;
        let mut state = SuperstepState {
            step: 0,
            base,
            logs: Vec::new(),
            active: ActiveDesc::None,
            next_log_id: 0,
            value_width: algdef.value_width,
            job: job.to_string(),
        };
        state.active = match &algdef.initial_active {
            InitialActive::All => ActiveDesc::Everything,
            InitialActive::None => ActiveDesc::None,
            InitialActive::Keys(keys) => {
                // Seed log holding the initial values of the seed vertices;
                // Converge over it is the first frontier.
                let name = format!("{job}.log{}", state.next_log_id);
                state.next_log_id += 1;
                let f = self.store.create(&name)?;
                let mut buf = Vec::new();
                for &k in keys {
                    if k >= num_vertices {
                        return Err(Error::Bounds(format!("seed vertex {k} out of range")));
                    }
                    let val = algdef
                        .initial_overrides
                        .iter()
                        .find(|(ok, _)| *ok == k)
                        .map(|(_, v)| *v)
                        .unwrap_or(algdef.default_value);
                    buf.extend_from_slice(&k.to_le_bytes());
                    buf.extend_from_slice(&val[..algdef.value_width]);
                }
                f.append(&buf)?;
                f.flush()?;
                state.logs.push(name);
                ActiveDesc::ConvergeNewest
            }
        };
        Ok(state)
    }

    /// Union composition of the dense base and the first `upto` logs;
    /// newer logs win on key collisions.
    pub fn values_source(&self, state: &SuperstepState, upto: usize) -> Result<BoxSource> {
        let mut src: BoxSource = Box::new(DenseFileSource::open_with_read_ahead(
            &self.store,
            &state.base,
            self.cfg.read_ahead,
        )?);
        for log in &state.logs[..upto] {
            let f = self.store.open_file(log)?;
            let sparse = SparseFileSource::with_read_ahead(
                f,
                state.value_width,
                0,
                self.cfg.read_ahead,
            )?;
            src = Box::new(LogicalSource::new(LogicalOp::Union, Box::new(sparse), src));
        }
        Ok(src)
    }

    pub fn current_values(&self, state: &SuperstepState) -> Result<BoxSource> {
        self.values_source(state, state.logs.len())
    }

    /// The active-vertex stream with current values, or None when empty.
    pub fn active_source(
        &self,
        state: &SuperstepState,
        algdef: &AlgorithmDefinition,
    ) -> Result<Option<BoxSource>> {
        match state.active {
            ActiveDesc::None => Ok(None),
            ActiveDesc::Everything => Ok(Some(self.current_values(state)?)),
            ActiveDesc::ConvergeNewest => {
                let newest = state.logs.len() - 1;
                let f = self.store.open_file(&state.logs[newest])?;
                let log = SparseFileSource::with_read_ahead(
                    f,
                    state.value_width,
                    0,
                    self.cfg.read_ahead,
                )?;
                let prior = self.values_source(state, newest)?;
                let is_active = algdef.is_active.clone();
                // Converge(a = new log, b = prior values): keep entries the
                // algorithm judges still-active given their previous value.
                let src = LogicalSource::new(
                    LogicalOp::Converge(Box::new(move |new, old| is_active(old, new))),
                    Box::new(log),
                    prior,
                );
                Ok(Some(Box::new(src)))
            }
        }
    }

    /// Phase 1: stream active vertices, apply the edge program per out-edge,
    /// and feed full pair buffers to `emit`. Returns (active, pairs).
    pub fn generate_intermediate(
        &self,
        mut active: BoxSource,
        graph: &Graph,
        algdef: &AlgorithmDefinition,
        buffer_pairs: usize,
        mut emit: impl FnMut(Vec<UpdatePair>) -> Result<()>,
    ) -> Result<(u64, u64)> {
        let nv = graph.meta().num_vertices;
        let mut session = TraversalSession::new(graph, self.cfg.read_ahead as u64);
        let mut buf: Vec<UpdatePair> = Vec::with_capacity(buffer_pairs);
        let (mut n_active, mut n_pairs) = (0u64, 0u64);
        while active.has_next(None)? {
            let e = active.get_next()?;
            if e.key >= nv {
                return Err(Error::Bounds(format!(
                    "active vertex {} >= num_vertices {nv}",
                    e.key
                )));
            }
            n_active += 1;
            let edges = session.edges_of(e.key)?;
            let ctx = EdgeContext {
                src: e.key,
                out_degree: edges.len() as u64,
                edge_ordinal: 0,
            };
            for (i, edge) in edges.iter().enumerate() {
                let ctx = EdgeContext {
                    edge_ordinal: i as u64,
                    ..ctx
                };
                let tmp = (algdef.edge_program)(&e.value, edge.weight, &ctx);
                buf.push(UpdatePair::new(edge.dst, tmp));
                n_pairs += 1;
                if buf.len() == buffer_pairs {
                    emit(std::mem::replace(
                        &mut buf,
                        Vec::with_capacity(buffer_pairs),
                    ))?;
                }
            }
        }
        if !buf.is_empty() {
            emit(buf)?;
        }
        Ok((n_active, n_pairs))
    }

    /// One full superstep: Phase-1 generation, sort-reduce, co-sequential
    /// finalize into a new update log, lazy next-active descriptor.
    pub fn run_superstep(
        &self,
        state: &mut SuperstepState,
        graph: &Graph,
        algdef: &AlgorithmDefinition,
    ) -> Result<SuperstepReport> {
        let t0 = Instant::now();
        let stats0 = self.store.stats();
        let step = state.step;
        let mut report = SuperstepReport {
            step,
            ..Default::default()
        };

        let Some(active) = self.active_source(state, algdef)? else {
            state.active = ActiveDesc::None;
            return Ok(report);
        };

        let sr = SortReduce::new(
            self.store.clone(),
            self.cfg.sort.clone(),
            MergeMode::Reduce(algdef.reducer.clone()),
            algdef.value_width,
            &format!("{}.s{step}", state.job),
        )?;
        let cap = self.cfg.sort.buffer_capacity_pairs();
        let (tx, rx) = bounded::<(u64, Vec<UpdatePair>)>(2);
        let (final_run, counts) = std::thread::scope(|s| -> Result<_> {
            let consumer = s.spawn(|| sr.pipeline(rx, None));
            let mut seq = 0u64;
            let counts = self.generate_intermediate(active, graph, algdef, cap, |buf| {
                tx.send((seq, buf))
                    .map_err(|_| Error::Contract("sort pipeline hung up".into()))?;
                seq += 1;
                Ok(())
            });
            drop(tx);
            let run = consumer.join().expect("sort pipeline panicked")?;
            Ok((run, counts?))
        })?;
        (report.active, report.pairs) = counts;
        report.runs = sr.reduction_metrics().merge_jobs + 1;

        if final_run.is_none() && algdef.finalize_missing.is_none() {
            state.active = ActiveDesc::None;
            state.step += 1;
            report.seconds = t0.elapsed().as_secs_f64();
            let stats1 = self.store.stats();
            report.bytes_read = stats1.read_bytes - stats0.read_bytes;
            report.bytes_written = stats1.append_bytes - stats0.append_bytes;
            return Ok(report);
        }

        // Finalize pass: merge the reduced run with the old values by key.
        let log_name = format!("{}.log{}", state.job, state.next_log_id);
        state.next_log_id += 1;
        let log = self.store.create(&log_name)?;
        let mut old_values = self.current_values(state)?;
        let mut reader = final_run
            .as_ref()
            .map(|r| crate::sortreduce::RunReader::open(&self.store, r, self.cfg.read_ahead, true))
            .transpose()?;
        let mut pending: Option<UpdatePair> = None;
        let mut buf: Vec<u8> = Vec::with_capacity(1 << 16);
        let mut max_delta = 0.0f64;
        let vw = algdef.value_width;
        let write_entry = |buf: &mut Vec<u8>, key: u64, val: &ValueBytes| -> Result<()> {
            buf.extend_from_slice(&key.to_le_bytes());
            buf.extend_from_slice(&val[..vw]);
            if buf.len() >= 1 << 16 {
                log.append(buf)?;
                buf.clear();
            }
            Ok(())
        };
        if let Some(missing) = &algdef.finalize_missing {
            // Stream every vertex; updates finalize, the rest get the
            // missing rule (e.g. PageRank's bare teleport term).
            while old_values.has_next(None)? {
                let olde = old_values.get_next()?;
                if pending.is_none() {
                    if let Some(r) = reader.as_mut() {
                        pending = r.next()?;
                    }
                }
                let new = match pending {
                    Some(p) if p.key == olde.key => {
                        pending = None;
                        (algdef.finalize)(&olde.value, &p.value)
                    }
                    _ => missing(&olde.value),
                };
                if let Some(d) = &algdef.delta {
                    max_delta = max_delta.max(d(&olde.value, &new));
                }
                write_entry(&mut buf, olde.key, &new)?;
            }
        } else if let Some(r) = reader.as_mut() {
            while let Some(p) = r.next()? {
                if !old_values.has_next(Some(p.key))? {
                    return Err(Error::Bounds(format!("update key {} out of range", p.key)));
                }
                let olde = old_values.get_next()?;
                debug_assert_eq!(olde.key, p.key);
                let new = (algdef.finalize)(&olde.value, &p.value);
                if let Some(d) = &algdef.delta {
                    max_delta = max_delta.max(d(&olde.value, &new));
                }
                write_entry(&mut buf, p.key, &new)?;
            }
        }
        log.append(&buf)?;
        log.flush()?;
        drop((reader, old_values, log));
        if let Some(r) = &final_run {
            self.store.delete(&r.name)?;
        }

        let empty = !self.store.open_file(&log_name).map(|f| f.len() > 0)?;
        state.logs.push(log_name);
        state.active = if empty {
            ActiveDesc::None
        } else {
            ActiveDesc::ConvergeNewest
        };
        state.step += 1;
        report.max_delta = max_delta;

        if state.logs.len() > self.cfg.consolidation_threshold {
            self.consolidate(state, algdef)?;
        }

        let stats1 = self.store.stats();
        report.bytes_read = stats1.read_bytes - stats0.read_bytes;
        report.bytes_written = stats1.append_bytes - stats0.append_bytes;
        report.seconds = t0.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Merges the update logs below the newest into one via the merge
    /// machinery with a first-wins fold; the newest log gets the lowest
    /// sequence number so "first" means "newest". The most recent log is
    /// spared: next-active reconstruction needs it distinguishable from the
    /// prior composition. The dense base is left as-is.
    fn consolidate(&self, state: &mut SuperstepState, algdef: &AlgorithmDefinition) -> Result<()> {
        let keep = state.logs.pop().expect("logs non-empty");
        let sr = SortReduce::new(
            self.store.clone(),
            self.cfg.sort.clone(),
            MergeMode::Reduce(crate::sortreduce::first_wins_reducer()),
            algdef.value_width,
            &format!("{}.cons{}", state.job, state.step),
        )?;
        let runs: Vec<SortedRun> = state
            .logs
            .iter()
            .rev()
            .enumerate()
            .map(|(seq, name)| {
                SortedRun::from_sparse_file(&self.store, name, algdef.value_width, seq as u64)
            })
            .collect::<Result<_>>()?;
        let merged = sr.sort_reduce_all(runs)?.expect("logs non-empty");
        // Rewrite the merged run as a headerless log so the composition
        // machinery stays uniform. KeepNewest preserved: merged run is the
        // first-wins fold with newest-first order.
        let name = format!("{}.log{}", state.job, state.next_log_id);
        state.next_log_id += 1;
        let f = self.store.create(&name)?;
        let mut reader =
            crate::sortreduce::RunReader::open(&self.store, &merged, self.cfg.read_ahead, true)?;
        let mut buf: Vec<u8> = Vec::with_capacity(1 << 16);
        while let Some(p) = reader.next()? {
            buf.extend_from_slice(&p.key.to_le_bytes());
            buf.extend_from_slice(&p.value[..algdef.value_width]);
            if buf.len() >= 1 << 16 {
                f.append(&buf)?;
                buf.clear();
            }
        }
        f.append(&buf)?;
        f.flush()?;
        drop((reader, f));
        self.store.delete(&merged.name)?;
        // The merge deleted the input logs; the spared newest log stays
        // outermost in the composition.
        state.logs = vec![name, keep];
        Ok(())
    }

    /// Runs supersteps until the active set empties or the algorithm's
    /// convergence test passes, then materializes the final dense values.
    pub fn run_until_done(
        &self,
        job: &str,
        graph: &Graph,
        algdef: &AlgorithmDefinition,
    ) -> Result<RunOutcome> {
        let mut state = self.init_state(job, graph.meta().num_vertices, algdef)?;
        let mut reports = Vec::new();
        while state.has_active() {
            if state.step >= self.cfg.superstep_cap {
                return Err(Error::NonConvergence(state.step));
            }
            let r = self.run_superstep(&mut state, graph, algdef)?;
            let done = algdef.convergence.as_ref().map_or(false, |c| c(&r));
            reports.push(r);
            if done {
                break;
            }
        }
        let result = format!("{job}.result");
        self.materialize(&state, graph.meta().num_vertices, algdef, &result)?;
        Ok(RunOutcome {
            result_file: result,
            reports,
            state,
        })
    }

    /// Streams the current-values composition into a single dense file.
    pub fn materialize(
        &self,
        state: &SuperstepState,
        num_vertices: u64,
        algdef: &AlgorithmDefinition,
        out_name: &str,
    ) -> Result<()> {
        let mut values = self.current_values(state)?;
        write_dense_file(
            &self.store,
            out_name,
            num_vertices,
            algdef.value_width,
            algdef.default_value,
            values.as_mut(),
            false,
        )
    }
}

pub struct RunOutcome {
    pub result_file: String,
    pub reports: Vec<SuperstepReport>,
    pub state: SuperstepState,
}

/// Literal in-memory baseline superstep over value arrays; random
/// read-modify-writes and all. Test oracle only.
pub struct OracleState {
    pub values: Vec<ValueBytes>,
    pub active: Vec<u64>,
}

pub const ORACLE_MAX_VERTICES: u64 = 100_000;

pub fn oracle_init(graph: &Graph, algdef: &AlgorithmDefinition) -> Result<OracleState> {
    let nv = graph.meta().num_vertices;
    if nv > ORACLE_MAX_VERTICES {
        return Err(Error::Config(format!(
            "oracle refuses graphs over {ORACLE_MAX_VERTICES} vertices"
        )));
    }
    let mut values = vec![algdef.default_value; nv as usize];
    for &(k, v) in &algdef.initial_overrides {
        values[k as usize] = v;
    }
    let active = match &algdef.initial_active {
        InitialActive::All => (0..nv).collect(),
        InitialActive::Keys(ks) => ks.clone(),
        InitialActive::None => Vec::new(),
    };
    Ok(OracleState { values, active })
}

/// One superstep of the baseline: scatter over out-edges with in-memory
/// fold (same order as serial generation: ascending source, edge order),
/// then finalize and the is_active test per touched vertex.
pub fn baseline_superstep_oracle(
    graph: &Graph,
    algdef: &AlgorithmDefinition,
    state: &mut OracleState,
) -> Result<Vec<(u64, ValueBytes)>> {
    let nv = graph.meta().num_vertices as usize;
    let mut acc: Vec<Option<ValueBytes>> = vec![None; nv];
    let mut session = TraversalSession::new(graph, 1 << 20);
    let mut active = state.active.clone();
    active.sort_unstable();
    for &u in &active {
        let val = state.values[u as usize];
        let edges = session.edges_of(u)?;
        for (i, e) in edges.iter().enumerate() {
            let ctx = EdgeContext {
                src: u,
                out_degree: edges.len() as u64,
                edge_ordinal: i as u64,
            };
            let tmp = (algdef.edge_program)(&val, e.weight, &ctx);
            match &mut acc[e.dst as usize] {
                Some(a) => algdef.reducer.reduce(a, &tmp),
                slot => *slot = Some(tmp),
            }
        }
    }
    let mut log = Vec::new();
    let mut next_active = Vec::new();
    for v in 0..nv {
        let new = match (&acc[v], &algdef.finalize_missing) {
            (Some(red), _) => (algdef.finalize)(&state.values[v], red),
            (None, Some(missing)) => missing(&state.values[v]),
            (None, None) => continue,
        };
        if (algdef.is_active)(&state.values[v], &new) {
            next_active.push(v as u64);
        }
        log.push((v as u64, new));
    }
    for &(k, v) in &log {
        state.values[k as usize] = v;
    }
    state.active = next_active;
    Ok(log)
}
