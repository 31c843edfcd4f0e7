//! BFS, PageRank, and betweenness-centrality-style descendant counting,
//! expressed as engine algorithm definitions plus BC's backtrace post-pass.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_channel::bounded;

use crate::engine::{
    AlgorithmDefinition, Engine, InitialActive, SuperstepReport,
};
use crate::error::{Error, Result};
use crate::graphfmt::Graph;
use crate::sortreduce::{
    first_wins_reducer, sum_f64_reducer, sum_u64_reducer, MergeMode, RunReader, SortReduce,
    UpdatePair,
};
use crate::value::{get_f64, get_u64, val_f64, val_u64, ValueBytes};
use crate::vsource::{
    write_dense_file, ArithSource, BoxSource, LogicalOp, LogicalSource, SparseFileSource,
    VertexSource,
};

/// Reserved "unvisited" marker; ingest never produces vertex ids this large.
pub const UNVISITED: u64 = u64::MAX;

/// BFS definition: edge program sends the source's id, the reducer keeps
/// the first parent in fold order, visited vertices keep their old parent,
/// and a vertex is (newly) active only if it was unvisited.
pub fn bfs_definition(root: u64) -> AlgorithmDefinition {
    AlgorithmDefinition {
        name: "bfs".into(),
        value_width: 8,
        edge_program: Arc::new(|_, _, ctx| val_u64(ctx.src)),
        reducer: first_wins_reducer(),
        finalize: Arc::new(|old, red| {
            if get_u64(old) == UNVISITED {
                *red
            } else {
                *old
            }
        }),
        finalize_missing: None,
        is_active: Arc::new(|old, _| get_u64(old) == UNVISITED),
        default_value: val_u64(UNVISITED),
        initial_overrides: vec![(root, val_u64(root))],
        initial_active: InitialActive::Keys(vec![root]),
        delta: None,
        convergence: None,
    }
}

pub struct BfsResult {
    /// Dense u64 parent per vertex; UNVISITED where unreached; root's
    /// parent is itself.
    pub parent_file: String,
    /// Dense u64 BFS depth per vertex; UNVISITED where unreached.
    pub depth_file: String,
    /// Sparse (vertex, parent) file per level; level 0 is the root.
    pub frontier_files: Vec<String>,
    pub reached: u64,
    pub max_depth: u64,
    pub reports: Vec<SuperstepReport>,
}

pub fn bfs(engine: &Engine, graph: &Graph, job: &str, root: u64) -> Result<BfsResult> {
    let nv = graph.meta().num_vertices;
    if root >= nv {
        return Err(Error::Bounds(format!("root {root} >= num_vertices {nv}")));
    }
    if nv > UNVISITED {
        return Err(Error::Config("vertex id space collides with sentinel".into()));
    }
    let def = bfs_definition(root);
    let store = engine.store();
    let mut state = engine.init_state(job, nv, &def)?;
    let mut frontier_files = Vec::new();
    let mut reached = 0u64;
    let mut reports = Vec::new();
    while state.has_active() {
        // Materialize the frontier before the superstep consumes it; the
        // same lazy composition is re-evaluated inside run_superstep.
        let name = format!("{job}.frontier{}", frontier_files.len());
        let mut active = engine
            .active_source(&state, &def)?
            .expect("has_active implies a source");
        let f = store.create(&name)?;
        let mut buf: Vec<u8> = Vec::with_capacity(1 << 16);
        let mut count = 0u64;
        while active.has_next(None)? {
            let e = active.get_next()?;
            buf.extend_from_slice(&e.key.to_le_bytes());
            buf.extend_from_slice(&e.value[..8]);
            count += 1;
            if buf.len() >= 1 << 16 {
                f.append(&buf)?;
                buf.clear();
            }
        }
        f.append(&buf)?;
        f.flush()?;
        // Release the log handles before the superstep; consolidation may
        // delete the files this source holds open.
        drop(active);
        drop(f);
        if count == 0 {
            store.delete(&name)?;
            break;
        }
        reached += count;
        frontier_files.push(name);
        reports.push(engine.run_superstep(&mut state, graph, &def)?);
    }

    // Levels are key-disjoint; union them into the dense parent and depth
    // files (zero-read construction, one streaming write each).
    let parent_file = format!("{job}.parent");
    let mut parent_src = frontier_union(store, &frontier_files, None)?;
    write_dense_file(
        store,
        &parent_file,
        nv,
        8,
        val_u64(UNVISITED),
        parent_src.as_mut(),
        true,
    )?;
    let depth_file = format!("{job}.depth");
    let mut depth_src = frontier_union(store, &frontier_files, Some(()))?;
    write_dense_file(
        store,
        &depth_file,
        nv,
        8,
        val_u64(UNVISITED),
        depth_src.as_mut(),
        false,
    )?;

    Ok(BfsResult {
        parent_file,
        depth_file,
        max_depth: frontier_files.len().saturating_sub(1) as u64,
        frontier_files,
        reached,
        reports,
    })
}

/// Union over the frontier files; `depths` maps each level's values to the
/// level number instead of the stored parent.
fn frontier_union(
    store: &crate::storage::Store,
    frontiers: &[String],
    depths: Option<()>,
) -> Result<BoxSource> {
    let mut src: Option<BoxSource> = None;
    for (level, name) in frontiers.iter().enumerate() {
        let f = store.open_file(name)?;
        let sparse = SparseFileSource::new(f, 8, 0)?;
        let leveled: BoxSource = if depths.is_some() {
            let d = level as u64;
            Box::new(ArithSource::new(Box::new(sparse), move |_| val_u64(d)))
        } else {
            Box::new(sparse)
        };
        src = Some(match src {
            None => leveled,
            Some(prev) => Box::new(LogicalSource::new(LogicalOp::Union, prev, leveled)),
        });
    }
    Ok(src.unwrap_or_else(|| Box::new(crate::vsource::MemorySource::from_pairs(&[]))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkPolicy {
    /// Out-degree-0 vertices are a precondition violation.
    Reject,
    /// Sink mass is split uniformly over all vertices each iteration.
    RedistributeUniform,
}

pub struct PageRankResult {
    /// Dense f64 rank per vertex.
    pub rank_file: String,
    pub iterations: u64,
    pub max_delta: f64,
    pub reports: Vec<SuperstepReport>,
}

/// PageRank definition. `sink_mass` holds the f64 bit pattern of the total
/// rank parked on sinks, refreshed before each superstep by the driver.
pub fn pagerank_definition(nv: u64, sink_mass: Arc<AtomicU64>) -> AlgorithmDefinition {
    let n = nv as f64;
    let sm = sink_mass.clone();
    let sm2 = sink_mass;
    AlgorithmDefinition {
        name: "pagerank".into(),
        value_width: 8,
        edge_program: Arc::new(|v, _, ctx| val_f64(get_f64(v) / ctx.out_degree as f64)),
        reducer: sum_f64_reducer(),
        finalize: Arc::new(move |_, red| {
            let s = f64::from_bits(sm.load(Ordering::Relaxed));
            val_f64(0.15 / n + 0.85 * (get_f64(red) + s / n))
        }),
        // Vertices with no in-edges still collect teleport and sink shares.
        finalize_missing: Some(Arc::new(move |_| {
            let s = f64::from_bits(sm2.load(Ordering::Relaxed));
            val_f64(0.15 / n + 0.85 * (s / n))
        })),
        is_active: Arc::new(|_, _| true),
        default_value: val_f64(1.0 / n),
        initial_overrides: vec![],
        initial_active: InitialActive::All,
        delta: Some(Arc::new(|a, b| (get_f64(a) - get_f64(b)).abs())),
        convergence: None,
    }
}

/// Sparse file of sink vertex keys (out-degree 0), or None when sink-free.
fn write_sink_file(store: &crate::storage::Store, graph: &Graph, name: &str) -> Result<Option<u64>> {
    let mut sinks = 0u64;
    let f = store.create(name)?;
    let mut buf: Vec<u8> = Vec::with_capacity(1 << 16);
    for v in 0..graph.meta().num_vertices {
        if graph.out_degree(v)? == 0 {
            sinks += 1;
            buf.extend_from_slice(&v.to_le_bytes());
            buf.extend_from_slice(&0u64.to_le_bytes());
            if buf.len() >= 1 << 16 {
                f.append(&buf)?;
                buf.clear();
            }
        }
    }
    f.append(&buf)?;
    f.flush()?;
    drop(f);
    if sinks == 0 {
        store.delete(name)?;
        Ok(None)
    } else {
        Ok(Some(sinks))
    }
}

pub fn pagerank(
    engine: &Engine,
    graph: &Graph,
    job: &str,
    eps: f64,
    max_iters: u64,
    policy: SinkPolicy,
) -> Result<PageRankResult> {
    let nv = graph.meta().num_vertices;
    let store = engine.store();
    let sink_file = format!("{job}.sinks");
    let sinks = write_sink_file(store, graph, &sink_file)?;
    if sinks.is_some() && policy == SinkPolicy::Reject {
        return Err(Error::Contract(format!(
            "graph has {} sink vertices; out-degree ≥ 1 required (policy: reject)",
            sinks.unwrap()
        )));
    }

    let sink_mass = Arc::new(AtomicU64::new(0f64.to_bits()));
    let def = pagerank_definition(nv, sink_mass.clone());
    let mut state = engine.init_state(job, nv, &def)?;
    let mut reports = Vec::new();
    let mut max_delta = f64::INFINITY;
    let mut iterations = 0u64;
    while iterations < max_iters {
        if sinks.is_some() {
            // Match-only join of current values with the sink key set.
            let values = engine.current_values(&state)?;
            let f = store.open_file(&sink_file)?;
            let sink_keys = SparseFileSource::new(f, 8, 0)?;
            let mut joined = LogicalSource::new(
                LogicalOp::Minimum(Box::new(|_, _| std::cmp::Ordering::Less)),
                values,
                Box::new(sink_keys),
            );
            let mut s = 0.0f64;
            while joined.has_next(None)? {
                s += get_f64(&joined.get_next()?.value);
            }
            sink_mass.store(s.to_bits(), Ordering::Relaxed);
        }
        let r = engine.run_superstep(&mut state, graph, &def)?;
        max_delta = r.max_delta;
        reports.push(r);
        iterations += 1;
        if max_delta <= eps {
            break;
        }
    }
    let rank_file = format!("{job}.rank");
    engine.materialize(&state, nv, &def, &rank_file)?;
    Ok(PageRankResult {
        rank_file,
        iterations,
        max_delta,
        reports,
    })
}

pub struct BcResult {
    /// Dense u64 descendant-count score per vertex (0 where unreached or
    /// leaf).
    pub score_file: String,
    pub bfs: BfsResult,
}

/// Tree-based centrality: BFS from the root, then per level (deepest
/// first) each frontier entry is reversed to ⟨parent, 1 + accumulated
/// count⟩ and sort-reduced with sum. The cascaded union of the per-level
/// counts gives every vertex its descendant count in the BFS parent tree.
pub fn bc(engine: &Engine, graph: &Graph, job: &str, root: u64) -> Result<BcResult> {
    let bfs_res = bfs(engine, graph, job, root)?;
    let store = engine.store().clone();
    let levels = bfs_res.frontier_files.len();

    // scores[s] = run of (vertex at level s, accumulated count).
    let mut level_scores: Vec<Option<crate::sortreduce::SortedRun>> = vec![None; levels];
    for s in (1..levels).rev() {
        let sr = SortReduce::new(
            store.clone(),
            engine.config().sort.clone(),
            MergeMode::Reduce(sum_u64_reducer()),
            8,
            &format!("{job}.bt{s}"),
        )?;
        let cap = engine.config().sort.buffer_capacity_pairs();
        let (tx, rx) = bounded::<(u64, Vec<UpdatePair>)>(2);
        let frontier = store.open_file(&bfs_res.frontier_files[s])?;
        let mut fr = SparseFileSource::new(frontier, 8, 0)?;
        let mut scores = level_scores[s]
            .as_ref()
            .map(|r| RunReader::open(&store, r, engine.config().read_ahead, true))
            .transpose()?;
        let run = std::thread::scope(|sc| -> Result<_> {
            let consumer = sc.spawn(|| sr.pipeline(rx, None));
            let mut seq = 0u64;
            let mut buf: Vec<UpdatePair> = Vec::with_capacity(cap.min(1 << 16));
            let mut pending: Option<UpdatePair> = None;
            let mut feed = || -> Result<()> {
                while fr.has_next(None)? {
                    let e = fr.get_next()?; // (vertex, parent)
                    if pending.is_none() {
                        if let Some(r) = scores.as_mut() {
                            pending = r.next()?;
                        }
                    }
                    let child_count = match pending {
                        Some(p) if p.key == e.key => {
                            pending = None;
                            get_u64(&p.value)
                        }
                        _ => 0,
                    };
                    let parent = get_u64(&e.value);
                    buf.push(UpdatePair::new(parent, val_u64(1 + child_count)));
                    if buf.len() == buf.capacity() {
                        let full = std::mem::replace(
                            &mut buf,
                            Vec::with_capacity(cap.min(1 << 16)),
                        );
                        tx.send((seq, full))
                            .map_err(|_| Error::Contract("sort pipeline hung up".into()))?;
                        seq += 1;
                    }
                }
                if !buf.is_empty() {
                    let full = std::mem::take(&mut buf);
                    tx.send((seq, full))
                        .map_err(|_| Error::Contract("sort pipeline hung up".into()))?;
                }
                Ok(())
            };
            let fed = feed();
            drop(tx);
            let run = consumer.join().expect("sort pipeline panicked");
            fed?;
            run
        })?;
        drop(scores);
        // Contributions land one level up; every level's run is kept for
        // the final union (it holds that level's finished scores).
        level_scores[s - 1] = run;
    }

    // Cascaded union of the per-level counts; levels are key-disjoint so
    // the custom-add matches never fire, but they keep the compose total.
    let mut src: Option<BoxSource> = None;
    for run in level_scores.iter().flatten() {
        let f = store.open_file(&run.name)?;
        let sparse: BoxSource =
            Box::new(SparseFileSource::new(f, 8, run.data_offset())?);
        src = Some(match src {
            None => sparse,
            Some(prev) => Box::new(LogicalSource::new(
                LogicalOp::Custom(Box::new(|a: &ValueBytes, b: &ValueBytes| {
                    val_u64(get_u64(a) + get_u64(b))
                })),
                prev,
                sparse,
            )),
        });
    }
    let mut src =
        src.unwrap_or_else(|| Box::new(crate::vsource::MemorySource::from_pairs(&[])));
    let score_file = format!("{job}.score");
    write_dense_file(
        &store,
        &score_file,
        graph.meta().num_vertices,
        8,
        val_u64(0),
        src.as_mut(),
        false,
    )?;
    drop(src);
    for run in level_scores.into_iter().flatten() {
        store.delete(&run.name)?;
    }
    Ok(BcResult {
        score_file,
        bfs: bfs_res,
    })
}
