//! Command-line surface: convert, generate, run, stats. Batch operation
//! only; configuration comes from defaults, then a key=value config file,
//! then flags (flags win).

use std::fs;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::algorithms::{self, SinkPolicy, UNVISITED};
use crate::engine::{report_csv, Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::graphfmt::{generate_rmat, ingest_edge_list, Graph};
use crate::sortreduce::SortReduceConfig;
use crate::storage::{Store, StoreConfig};
use crate::value::{get_f64, get_u64};
use crate::vsource::DenseFileSource;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "bigsr", version, about = "Out-of-core graph analytics via sort-reduce")]
struct Cli {
    /// key=value config file; flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store directory; repeat to stripe across a device array.
    /// Falls back to config file, then $BIGSR_STORE.
    #[arg(long = "store-dir", global = true)]
    store_dir: Vec<PathBuf>,
    /// Phase-1 sort buffer size in MiB
    #[arg(long, global = true)]
    buffer_mb: Option<usize>,
    /// External merge fan-in
    #[arg(long, global = true)]
    fan_in: Option<usize>,
    /// Worker thread count
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Ingest a text edge list into the binary graph format
    Convert {
        /// Input edge-list path
        input: PathBuf,
        /// Output graph name within the store
        graph: String,
        /// Bytes per edge weight: 0, 4, or 8
        #[arg(long, default_value_t = 0)]
        weight_width: u32,
    },
    /// Generate an R-MAT text edge list
    Generate {
        /// Output path
        output: PathBuf,
        #[arg(long)]
        scale: u32,
        #[arg(long, default_value_t = 16)]
        edge_factor: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run an algorithm over an ingested graph
    Run {
        /// bfs, pagerank, or bc
        algorithm: String,
        /// Graph name within the store
        graph: String,
        #[arg(long, default_value_t = 0)]
        root: u64,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        max_iters: Option<u64>,
        /// reject or redistribute
        #[arg(long)]
        sink_policy: Option<String>,
        /// Per-superstep CSV report path
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print graph metadata and degree statistics
    Stats {
        /// Graph name within the store
        graph: String,
    },
}

#[derive(Debug, Clone)]
struct RunConfig {
    store_dirs: Vec<PathBuf>,
    chunk_size: u64,
    buffer_bytes: usize,
    sub_chunk_bytes: Option<usize>,
    fan_in: usize,
    worker_threads: usize,
    consolidation_threshold: usize,
    superstep_cap: u64,
    eps: f64,
    max_iters: u64,
    sink_policy: SinkPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            store_dirs: Vec::new(),
            chunk_size: 1 << 20,
            buffer_bytes: 64 << 20,
            sub_chunk_bytes: None,
            fan_in: 16,
            worker_threads: 4,
            consolidation_threshold: 8,
            superstep_cap: 1_000_000,
            eps: 1e-7,
            max_iters: 1000,
            sink_policy: SinkPolicy::Reject,
        }
    }
}

fn parse_sink_policy(s: &str) -> Result<SinkPolicy> {
    match s {
        "reject" => Ok(SinkPolicy::Reject),
        "redistribute" => Ok(SinkPolicy::RedistributeUniform),
        other => Err(Error::Config(format!(
            "unknown sink policy '{other}' (reject | redistribute)"
        ))),
    }
}

impl RunConfig {
    fn apply_file(&mut self, path: &PathBuf) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            macro_rules! bad {
                () => {
                    |_| Error::Config(format!("{}:{}: bad value for {k}", path.display(), i + 1))
                };
            }
            match k {
                "store_dir" => {
                    self.store_dirs = v.split(',').map(|d| PathBuf::from(d.trim())).collect()
                }
                "chunk_size" => self.chunk_size = v.parse().map_err(bad!())?,
                "buffer_mb" => {
                    self.buffer_bytes = v.parse::<usize>().map_err(bad!())? << 20
                }
                "buffer_bytes" => self.buffer_bytes = v.parse().map_err(bad!())?,
                "sub_chunk_bytes" => self.sub_chunk_bytes = Some(v.parse().map_err(bad!())?),
                "fan_in" => self.fan_in = v.parse().map_err(bad!())?,
                "threads" => self.worker_threads = v.parse().map_err(bad!())?,
                "consolidation_threshold" => {
                    self.consolidation_threshold = v.parse().map_err(bad!())?
                }
                "superstep_cap" => self.superstep_cap = v.parse().map_err(bad!())?,
                "eps" => self.eps = v.parse().map_err(bad!())?,
                "max_iters" => self.max_iters = v.parse().map_err(bad!())?,
                "sink_policy" => self.sink_policy = parse_sink_policy(v)?,
                other => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown key '{other}'",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, cli: &Cli) {
        if !cli.store_dir.is_empty() {
            self.store_dirs = cli.store_dir.clone();
        }
        if let Some(mb) = cli.buffer_mb {
            self.buffer_bytes = mb << 20;
        }
        if let Some(f) = cli.fan_in {
            self.fan_in = f;
        }
        if let Some(t) = cli.threads {
            self.worker_threads = t;
        }
    }

    fn sort_config(&self) -> SortReduceConfig {
        SortReduceConfig {
            buffer_bytes: self.buffer_bytes,
            sub_chunk_bytes: self
                .sub_chunk_bytes
                .unwrap_or((self.buffer_bytes / 8).max(4096)),
            fan_in: self.fan_in,
            merge_read_ahead: 4 << 20,
            worker_threads: self.worker_threads,
        }
    }

    fn open_store(&self) -> Result<Store> {
        let mut dirs = self.store_dirs.clone();
        if dirs.is_empty() {
            if let Ok(env) = std::env::var("BIGSR_STORE") {
                dirs = env.split(',').map(PathBuf::from).collect();
            }
        }
        if dirs.is_empty() {
            return Err(Error::Config(
                "no store directory (use --store-dir, config store_dir=, or $BIGSR_STORE)".into(),
            ));
        }
        let mut cfg = StoreConfig::new(dirs);
        cfg.chunk_size = self.chunk_size;
        Store::open(cfg)
    }

    fn engine(&self, store: &Store) -> Result<Engine> {
        Engine::new(
            store.clone(),
            EngineConfig {
                sort: self.sort_config(),
                consolidation_threshold: self.consolidation_threshold,
                superstep_cap: self.superstep_cap,
                read_ahead: 1 << 20,
            },
        )
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::NotFound(_) | Error::StorageExhausted { .. } => EXIT_IO,
        Error::NonConvergence(_) => EXIT_NONCONVERGENCE,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` and runs the selected command; returns the process exit
/// code. Errors are printed to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        if let Err(e) = cfg.apply_file(path) {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    }
    cfg.apply_flags(&cli);
    match dispatch(&cli, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.cmd {
        Cmd::Convert {
            input,
            graph,
            weight_width,
        } => cmd_convert(cfg, input, graph, *weight_width),
        Cmd::Generate {
            output,
            scale,
            edge_factor,
            seed,
        } => cmd_generate(output, *scale, *edge_factor, *seed),
        Cmd::Run {
            algorithm,
            graph,
            root,
            eps,
            max_iters,
            sink_policy,
            report,
        } => {
            let mut cfg = cfg.clone();
            if let Some(e) = eps {
                cfg.eps = *e;
            }
            if let Some(m) = max_iters {
                cfg.max_iters = *m;
            }
            if let Some(p) = sink_policy {
                cfg.sink_policy = parse_sink_policy(p)?;
            }
            cmd_run(&cfg, algorithm, graph, *root, report.as_deref())
        }
        Cmd::Stats { graph } => cmd_stats(cfg, graph),
    }
}

fn cmd_convert(cfg: &RunConfig, input: &PathBuf, graph: &str, weight_width: u32) -> Result<()> {
    let store = cfg.open_store()?;
    let file = fs::File::open(input).map_err(|e| Error::io(input, e))?;
    let g = ingest_edge_list(
        &store,
        graph,
        BufReader::new(file),
        weight_width,
        cfg.buffer_bytes as u64,
    )?;
    println!(
        "{} vertices, {} edges",
        g.meta().num_vertices,
        g.meta().num_edges
    );
    Ok(())
}

fn cmd_generate(output: &PathBuf, scale: u32, edge_factor: u64, seed: u64) -> Result<()> {
    if scale == 0 || scale > 30 {
        return Err(Error::Config(format!("scale {scale} out of range (1..=30)")));
    }
    let file = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut w = std::io::BufWriter::new(file);
    generate_rmat(scale, edge_factor, seed, &mut w)?;
    w.flush().map_err(|e| Error::io(output, e))?;
    println!("{} edges over {} vertices", edge_factor << scale, 1u64 << scale);
    Ok(())
}

fn write_report(path: &std::path::Path, csv: &str) -> Result<()> {
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

fn cmd_run(
    cfg: &RunConfig,
    algorithm: &str,
    graph: &str,
    root: u64,
    report: Option<&std::path::Path>,
) -> Result<()> {
    let store = cfg.open_store()?;
    let g = Graph::open(&store, graph)?;
    let engine = cfg.engine(&store)?;
    let job = format!("{graph}.{algorithm}");
    // Re-running a job replaces its previous outputs.
    let stale = format!("{job}.");
    for name in store.list()? {
        if name.starts_with(&stale) {
            store.delete(&name)?;
        }
    }
    match algorithm {
        "bfs" => {
            let res = algorithms::bfs(&engine, &g, &job, root)?;
            if let Some(p) = report {
                write_report(p, &report_csv(&res.reports))?;
            }
            println!(
                "reached {} of {} vertices, max depth {}, {} supersteps",
                res.reached,
                g.meta().num_vertices,
                res.max_depth,
                res.reports.len()
            );
            println!("results: {} (parents), {} (depths)", res.parent_file, res.depth_file);
        }
        "pagerank" => {
            let res = algorithms::pagerank(
                &engine,
                &g,
                &job,
                cfg.eps,
                cfg.max_iters,
                cfg.sink_policy,
            )?;
            if let Some(p) = report {
                write_report(p, &report_csv(&res.reports))?;
            }
            let mut src = DenseFileSource::open(&store, &res.rank_file)?;
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            use crate::vsource::VertexSource;
            while src.has_next(None)? {
                let r = get_f64(&src.get_next()?.value);
                min = min.min(r);
                max = max.max(r);
            }
            println!(
                "{} iterations, max delta {:.3e}, rank min {:.6e} max {:.6e}",
                res.iterations, res.max_delta, min, max
            );
            println!("results: {}", res.rank_file);
        }
        "bc" => {
            let res = algorithms::bc(&engine, &g, &job, root)?;
            if let Some(p) = report {
                write_report(p, &report_csv(&res.bfs.reports))?;
            }
            let mut src = DenseFileSource::open(&store, &res.score_file)?;
            let mut max = 0u64;
            use crate::vsource::VertexSource;
            while src.has_next(None)? {
                max = max.max(get_u64(&src.get_next()?.value));
            }
            println!(
                "reached {} vertices, max depth {}, max score {}",
                res.bfs.reached, res.bfs.max_depth, max
            );
            println!("results: {}", res.score_file);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown algorithm '{other}' (bfs | pagerank | bc)"
            )))
        }
    }
    Ok(())
}

fn cmd_stats(cfg: &RunConfig, graph: &str) -> Result<()> {
    let store = cfg.open_store()?;
    let g = Graph::open(&store, graph)?;
    let meta = g.meta();
    let (mut min, mut max, mut total) = (u64::MAX, 0u64, 0u64);
    for v in 0..meta.num_vertices {
        let d = g.out_degree(v)?;
        min = min.min(d);
        max = max.max(d);
        total += d;
    }
    println!("num_vertices {}", meta.num_vertices);
    println!("num_edges {}", meta.num_edges);
    println!("weight_width {}", meta.weight_width);
    println!(
        "min out-degree {min}, max out-degree {max}, mean out-degree {:.3}",
        total as f64 / meta.num_vertices as f64
    );
    let idx_bytes = (meta.num_vertices + 1) * 8;
    let edge_bytes = meta.num_edges * meta.edge_record_size();
    println!("index bytes {idx_bytes}, edge bytes {edge_bytes}");
    Ok(())
}

// Keep the sentinel check close to where ids enter the system.
const _: () = assert!(UNVISITED == u64::MAX);
