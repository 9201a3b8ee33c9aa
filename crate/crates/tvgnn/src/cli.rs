//! Operator commands: data preparation, pattern-graph precomputation,
//! training, evaluation, forecasting, and the verification suites.
//!
//! Exit codes: 0 success, 1 user error, 2 internal error. Human-readable
//! output goes to stdout; machine artifacts are written only to explicit
//! paths (cache and run directories).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctvgcru::{
    forward, load_checkpoint, save_checkpoint, Ablation, GraphSupports, ModelConfig,
};
use crate::data::{
    load_series, split_and_window, synth_network, write_packed, PreparedData, SeriesLayout,
};
use crate::graphs::{build_pattern_graph, build_topology, parse_edge_csv, GraphSet};
use crate::numcore::{Tape, Tensor};
use crate::trainer::{
    evaluate, train, write_log, HorizonMode, Split, TrainOptions, TrainerError,
};
use crate::verify::run_suite;

pub enum CliError {
    User(String),
    Internal(String),
}

type CliResult<T> = std::result::Result<T, CliError>;

impl From<crate::data::DataError> for CliError {
    fn from(e: crate::data::DataError) -> Self {
        match e {
            crate::data::DataError::Io(io) => CliError::Internal(format!("io: {io}")),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<crate::graphs::GraphError> for CliError {
    fn from(e: crate::graphs::GraphError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<crate::numcore::NumError> for CliError {
    fn from(e: crate::numcore::NumError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Invalid(msg) => CliError::User(msg),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("json: {e}"))
    }
}

// ── Command definitions ──────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "tvgnn", about = "Time-varying graph neural network for traffic forecasting", disable_help_subcommand = true)]
struct Cli {
    /// Cache directory for prepared datasets and pattern graphs.
    #[arg(long, global = true, env = "TVGNN_CACHE_DIR", default_value = "cache")]
    cache_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest (or synthesize) a traffic series and cache the prepared splits.
    Prepare(PrepareArgs),
    /// Precompute the DTW traffic-pattern graph for a cached dataset.
    Dtw(DtwArgs),
    /// Train a model on a cached dataset.
    Train(TrainArgs),
    /// Evaluate a finished run on one split and print the metric grid.
    Eval(EvalArgs),
    /// Forecast one window and write the predictions as packed binary.
    Forecast(ForecastArgs),
    /// Run a verification suite (gradcheck | invariants | oracles).
    Verify(VerifyArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset name inside the cache.
    #[arg(long)]
    name: Option<String>,
    /// Series file (csv_grid or packed binary).
    #[arg(long)]
    data: Option<PathBuf>,
    /// File layout: "csv" (needs --nodes/--channels) or "bin".
    #[arg(long, default_value = "bin")]
    layout: String,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Edge-list CSV (from,to,cost with a header line) for the topology.
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Treat the edge list as directed.
    #[arg(long, default_value_t = false)]
    directed: bool,
    /// Generate a synthetic network instead of reading files.
    #[arg(long, default_value_t = false)]
    synthetic: bool,
    #[arg(long, default_value_t = 8)]
    synth_nodes: usize,
    #[arg(long, default_value_t = 4)]
    synth_days: usize,
    #[arg(long, default_value_t = 1)]
    synth_seed: u64,
    #[arg(long, default_value_t = 3.0)]
    synth_noise: f64,
    #[arg(long, default_value_t = 6.0)]
    synth_coupling: f64,
    /// Sampling interval in minutes.
    #[arg(long, default_value_t = 15)]
    interval: u32,
    /// Day of week of the first sample (0..=6).
    #[arg(long, default_value_t = 0)]
    start_dow: u32,
    /// Chronological split ratios, three comma-separated values.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    ratios: String,
    #[arg(long, default_value_t = 12)]
    t_in: usize,
    #[arg(long, default_value_t = 12)]
    t_out: usize,
}

#[derive(Args)]
struct DtwArgs {
    #[arg(long, default_value = "synthetic")]
    name: String,
    /// Fraction of ordered node pairs kept as pattern edges.
    #[arg(long, default_value_t = 0.01)]
    sparsity: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Hyperparameter preset (pems03|pems04|pems07|pems08|synthetic).
    #[arg(long, default_value = "synthetic")]
    preset: String,
    /// Cached dataset name; defaults to the preset name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "full")]
    ablation: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 15)]
    patience: usize,
    /// Pattern-graph sparsity to load from the cache.
    #[arg(long, default_value_t = 0.01)]
    sparsity: f64,
    /// Key=value config file overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for the checkpoint, metric log and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Horizon grouping: "avg" (mean over steps 1..k) or "at" (step k only).
    #[arg(long, default_value = "avg")]
    horizon_mode: String,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Window index inside the chosen split.
    #[arg(long, default_value_t = 0)]
    window_index: usize,
    /// Output path for the packed-binary predictions [t_out, N, C].
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "invariants")]
    suite: String,
}

// ── Cache metadata ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize, PartialEq, Debug, Clone)]
struct DatasetMeta {
    name: String,
    source: String,
    interval_minutes: u32,
    start_day_of_week: u32,
    ratios: [f64; 3],
    t_in: usize,
    t_out: usize,
    series_hash: String,
    topo_hash: String,
}

#[derive(Serialize, Deserialize, Debug)]
struct RunManifest {
    preset: String,
    ablation: String,
    seed: u64,
    epochs: usize,
    patience: usize,
    sparsity: f64,
    dataset_name: String,
    series_hash: String,
    pattern_hash: String,
    config: String,
    artifacts: RunArtifacts,
}

#[derive(Serialize, Deserialize, Debug)]
struct RunArtifacts {
    checkpoint: PathBuf,
    metrics: PathBuf,
    config: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn parse_ratios(text: &str) -> CliResult<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::User(format!(
            "--ratios needs three comma-separated values, got {text:?}"
        )));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| CliError::User(format!("bad ratio {part:?}")))?;
    }
    Ok(out)
}

fn pattern_file(cache: &Path, name: &str, sparsity: f64, series_hash: &str) -> PathBuf {
    cache.join(name).join(format!(
        "pattern_s{}_{}.bin",
        (sparsity * 1e6).round() as u64,
        &series_hash[..16]
    ))
}

// ── Loading helpers ──────────────────────────────────────────────────

struct CachedDataset {
    meta: DatasetMeta,
    prepared: PreparedData,
    graphs: GraphSet,
}

fn load_cached(cache: &Path, name: &str, sparsity: f64) -> CliResult<CachedDataset> {
    let dir = cache.join(name);
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(CliError::User(format!(
            "no prepared dataset {name:?} in {}; run `tvgnn prepare --name {name} ...` first",
            cache.display()
        )));
    }
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let series_path = dir.join("series.bin");
    let ds = load_series(
        &series_path,
        SeriesLayout::PackedBinary,
        meta.interval_minutes,
        meta.start_day_of_week,
    )?;
    let (topo_data, topo_shape) = {
        let (v, s) = crate::data::read_packed_rank(&dir.join("topo.bin"), 2)?;
        (v, s)
    };
    let a_topo = Tensor::new(topo_data, &topo_shape).map_err(|e| CliError::Internal(e.to_string()))?;

    let pattern_path = pattern_file(cache, name, sparsity, &meta.series_hash);
    if !pattern_path.exists() {
        return Err(CliError::User(format!(
            "no pattern graph for sparsity {sparsity}; run `tvgnn dtw --name {name} --sparsity {sparsity}` first"
        )));
    }
    let (dtw_data, dtw_shape) = crate::data::read_packed_rank(&pattern_path, 2)?;
    let a_dtw = Tensor::new(dtw_data, &dtw_shape).map_err(|e| CliError::Internal(e.to_string()))?;
    let graphs = GraphSet::new(a_topo, a_dtw)?;

    let prepared = split_and_window(ds, (meta.ratios[0], meta.ratios[1], meta.ratios[2]), meta.t_in, meta.t_out)?;
    for (split, windows) in [("train", &prepared.train), ("val", &prepared.val), ("test", &prepared.test)] {
        let cached = read_window_index(&dir.join(format!("windows_{split}.idx")))?;
        if &cached != windows {
            return Err(CliError::Internal(format!(
                "cached {split} window index disagrees with the prepared split; re-run prepare"
            )));
        }
    }
    Ok(CachedDataset { meta, prepared, graphs })
}

struct LoadedRun {
    cfg: ModelConfig,
    manifest: RunManifest,
    params: crate::ctvgcru::ModelParams,
}

fn load_run(run: &Path) -> CliResult<LoadedRun> {
    let manifest_path = run.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CliError::User(format!(
            "{} is not a run directory (missing manifest.json)",
            run.display()
        )));
    }
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let cfg = ModelConfig::from_kv(&std::fs::read_to_string(run.join("config.txt"))?)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let params = load_checkpoint(&run.join("checkpoint.bin"), &cfg)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(LoadedRun { cfg, manifest, params })
}

// ── Commands ─────────────────────────────────────────────────────────

fn cmd_prepare(cache: &Path, args: &PrepareArgs) -> CliResult<()> {
    let ratios = parse_ratios(&args.ratios)?;
    let (ds, a_topo, source, name) = if args.synthetic {
        let (ds, graphs) = synth_network(
            args.synth_nodes,
            args.synth_days,
            args.synth_seed,
            args.interval,
            args.synth_noise,
            args.synth_coupling,
        )?;
        let source = format!(
            "synthetic(nodes={},days={},seed={},interval={},noise={},coupling={})",
            args.synth_nodes, args.synth_days, args.synth_seed, args.interval, args.synth_noise, args.synth_coupling
        );
        let name = args.name.clone().unwrap_or_else(|| "synthetic".to_string());
        (ds, graphs.a_topo, source, name)
    } else {
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| CliError::User("either --data or --synthetic is required".into()))?;
        let layout = match args.layout.as_str() {
            "bin" => SeriesLayout::PackedBinary,
            "csv" => {
                let nodes = args
                    .nodes
                    .ok_or_else(|| CliError::User("--layout csv requires --nodes".into()))?;
                SeriesLayout::CsvGrid { nodes, channels: args.channels }
            }
            other => return Err(CliError::User(format!("unknown layout {other:?} (csv or bin)"))),
        };
        let ds = load_series(data, layout, args.interval, args.start_dow)?;
        let a_topo = match &args.edges {
            Some(path) => {
                let edges = parse_edge_csv(&std::fs::read_to_string(path)?)?;
                build_topology(&edges, ds.n_nodes(), args.directed)?
            }
            None => Tensor::eye(ds.n_nodes()),
        };
        let name = args.name.clone().unwrap_or_else(|| {
            data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
        });
        (ds, a_topo, format!("file:{}", data.display()), name)
    };

    // Window feasibility check up front so a bad prepare fails loudly.
    let pd = split_and_window(ds.clone(), (ratios[0], ratios[1], ratios[2]), args.t_in, args.t_out)?;

    let dir = cache.join(&name);
    std::fs::create_dir_all(&dir)?;
    let series_bytes = pack_to_bytes(&ds.values.data, &ds.values.shape);
    let topo_bytes = pack_to_bytes(&a_topo.data, &a_topo.shape);
    let meta = DatasetMeta {
        name: name.clone(),
        source,
        interval_minutes: ds.interval_minutes,
        start_day_of_week: ds.start_day_of_week,
        ratios,
        t_in: args.t_in,
        t_out: args.t_out,
        series_hash: sha256_hex(&series_bytes),
        topo_hash: sha256_hex(&topo_bytes),
    };

    let meta_path = dir.join("meta.json");
    if meta_path.exists() {
        if let Ok(existing) = serde_json::from_str::<DatasetMeta>(&std::fs::read_to_string(&meta_path)?) {
            if existing == meta {
                println!("cache hit: dataset {name:?} is already prepared ({})", &meta.series_hash[..16]);
                return Ok(());
            }
        }
    }
    std::fs::write(dir.join("series.bin"), &series_bytes)?;
    std::fs::write(dir.join("topo.bin"), &topo_bytes)?;
    for (split, windows) in [("train", &pd.train), ("val", &pd.val), ("test", &pd.test)] {
        write_window_index(&dir.join(format!("windows_{split}.idx")), windows)?;
    }
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    println!(
        "prepared dataset {name:?}: {} steps x {} nodes x {} channels, splits {:?}",
        ds.steps(),
        ds.n_nodes(),
        ds.channels(),
        ratios
    );
    Ok(())
}

/// Per-split window caches: little-endian u64 count, then the start indices.
fn write_window_index(path: &Path, windows: &[usize]) -> CliResult<()> {
    let mut out = Vec::with_capacity(8 * (windows.len() + 1));
    out.extend_from_slice(&(windows.len() as u64).to_le_bytes());
    for &w in windows {
        out.extend_from_slice(&(w as u64).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_window_index(path: &Path) -> CliResult<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CliError::Internal(format!("{} is truncated", path.display())));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 8 * (count + 1) {
        return Err(CliError::Internal(format!("{} does not match its count", path.display())));
    }
    Ok(bytes[8..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect())
}

fn pack_to_bytes(data: &[f64], shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (shape.len() + data.len()));
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn cmd_dtw(cache: &Path, args: &DtwArgs) -> CliResult<()> {
    let dir = cache.join(&args.name);
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(CliError::User(format!(
            "no prepared dataset {:?}; run `tvgnn prepare --name {} ...` first",
            args.name, args.name
        )));
    }
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let target = pattern_file(cache, &args.name, args.sparsity, &meta.series_hash);
    if target.exists() {
        println!("cache hit: pattern graph {} already built", target.display());
        return Ok(());
    }
    let ds = load_series(
        &dir.join("series.bin"),
        SeriesLayout::PackedBinary,
        meta.interval_minutes,
        meta.start_day_of_week,
    )?;
    let a_dtw = build_pattern_graph(&ds, meta.ratios[0], args.sparsity)?;
    write_packed(&target, &a_dtw.data, &a_dtw.shape)?;
    let edges = a_dtw.data.iter().filter(|&&v| v != 0.0).count() - ds.n_nodes();
    println!(
        "pattern graph: {} off-diagonal edges at sparsity {} -> {}",
        edges,
        args.sparsity,
        target.display()
    );
    Ok(())
}

fn cmd_train(cache: &Path, args: &TrainArgs) -> CliResult<()> {
    let ablation = Ablation::parse(&args.ablation).map_err(|e| CliError::User(e.to_string()))?;
    let name = args.name.clone().unwrap_or_else(|| args.preset.clone());
    let cached = load_cached(cache, &name, args.sparsity)?;
    let ds = &cached.prepared.dataset;
    let mut cfg = ModelConfig::from_preset(&args.preset, ds.n_nodes(), ds.samples_per_day, ds.channels())
        .map_err(|e| CliError::User(e.to_string()))?;
    cfg.t_in = cached.meta.t_in;
    cfg.t_out = cached.meta.t_out;
    if let Some(path) = &args.config {
        cfg.apply_kv(&std::fs::read_to_string(path)?)
            .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        // Dataset geometry and window lengths are pinned by the cache.
        let ds = &cached.prepared.dataset;
        cfg.n_nodes = ds.n_nodes();
        cfg.samples_per_day = ds.samples_per_day;
        cfg.channels = ds.channels();
        cfg.t_in = cached.meta.t_in;
        cfg.t_out = cached.meta.t_out;
    }
    cfg.check().map_err(|e| CliError::User(e.to_string()))?;

    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{name}-{}-seed{}", ablation.name(), args.seed)));
    std::fs::create_dir_all(&out_dir)?;

    let mut opts = TrainOptions::new(args.epochs, args.seed, ablation);
    opts.patience = args.patience;
    opts.checkpoint_path = Some(out_dir.join("checkpoint.bin"));
    opts.progress_every = Some(25);

    println!(
        "training preset={} ablation={} seed={} on {:?}: {} train / {} val / {} test windows",
        args.preset,
        ablation.name(),
        args.seed,
        name,
        cached.prepared.train.len(),
        cached.prepared.val.len(),
        cached.prepared.test.len()
    );
    let outcome = train(&cfg, &cached.prepared, &cached.graphs, &opts)?;
    save_checkpoint(&out_dir.join("checkpoint.bin"), &outcome.params)?;
    write_log(&out_dir.join("metrics.csv"), &outcome.log)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_kv())?;

    let pattern_path = pattern_file(cache, &name, args.sparsity, &cached.meta.series_hash);
    let manifest = RunManifest {
        preset: args.preset.clone(),
        ablation: ablation.name().to_string(),
        seed: args.seed,
        epochs: args.epochs,
        patience: args.patience,
        sparsity: args.sparsity,
        dataset_name: name.clone(),
        series_hash: cached.meta.series_hash.clone(),
        pattern_hash: hash_file(&pattern_path)?,
        config: cfg.to_kv(),
        artifacts: RunArtifacts {
            checkpoint: out_dir.join("checkpoint.bin"),
            metrics: out_dir.join("metrics.csv"),
            config: out_dir.join("config.txt"),
        },
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    println!(
        "finished after {} epochs; best validation MAE {:.4}; artifacts in {}",
        outcome.epochs_run,
        outcome.best_val_mae,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(cache: &Path, args: &EvalArgs) -> CliResult<()> {
    let split = Split::parse(&args.split).map_err(|e| CliError::User(e.to_string()))?;
    let mode = match args.horizon_mode.as_str() {
        "avg" => HorizonMode::CumulativeMean,
        "at" => HorizonMode::AtStep,
        other => return Err(CliError::User(format!("unknown horizon mode {other:?} (avg or at)"))),
    };
    let run = load_run(&args.run)?;
    let cached = load_cached(cache, &run.manifest.dataset_name, run.manifest.sparsity)?;
    let ablation = Ablation::parse(&run.manifest.ablation).map_err(|e| CliError::Internal(e.to_string()))?;
    let report = evaluate(&run.cfg, &run.params, &cached.prepared, &cached.graphs, split, ablation)?;
    println!("split: {}", split.name());
    print!("{}", report.format_table(&run.manifest.ablation, mode));
    Ok(())
}

fn cmd_forecast(cache: &Path, args: &ForecastArgs) -> CliResult<()> {
    let split = Split::parse(&args.split).map_err(|e| CliError::User(e.to_string()))?;
    let run = load_run(&args.run)?;
    let cached = load_cached(cache, &run.manifest.dataset_name, run.manifest.sparsity)?;
    let windows = match split {
        Split::Train => &cached.prepared.train,
        Split::Val => &cached.prepared.val,
        Split::Test => &cached.prepared.test,
    };
    let start = *windows.get(args.window_index).ok_or_else(|| {
        CliError::User(format!(
            "window index {} out of range for {} {} windows",
            args.window_index,
            windows.len(),
            split.name()
        ))
    })?;
    let ablation = Ablation::parse(&run.manifest.ablation).map_err(|e| CliError::Internal(e.to_string()))?;
    let batch = cached.prepared.make_batch(&[start]);
    let supports = GraphSupports::from_graphs(&cached.graphs);
    let mut tape = Tape::new();
    let ids = run.params.bind(&mut tape);
    let pred = forward(&mut tape, &ids, &run.cfg, &batch, &supports, ablation, &cached.prepared.norm, None)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let data = tape.data(pred);
    write_packed(
        &args.out,
        data,
        &[run.cfg.t_out, run.cfg.n_nodes, run.cfg.channels],
    )?;
    println!(
        "forecast for {} window {} written to {}",
        split.name(),
        args.window_index,
        args.out.display()
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let checks = run_suite(&args.suite).ok_or_else(|| {
        CliError::User(format!(
            "unknown suite {:?} (gradcheck, invariants or oracles)",
            args.suite
        ))
    })?;
    let mut failures = 0;
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status} {} — {}", check.name, check.detail);
        if !check.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Internal(format!("{failures} verification check(s) failed")));
    }
    println!("{} checks passed", checks.len());
    Ok(())
}

/// Parse and execute. Returns the process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::Prepare(a) => cmd_prepare(&cli.cache_dir, a),
        Cmd::Dtw(a) => cmd_dtw(&cli.cache_dir, a),
        Cmd::Train(a) => cmd_train(&cli.cache_dir, a),
        Cmd::Eval(a) => cmd_eval(&cli.cache_dir, a),
        Cmd::Forecast(a) => cmd_forecast(&cli.cache_dir, a),
        Cmd::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            2
        }
    }
}
