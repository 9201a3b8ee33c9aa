//! Traffic series ingestion, z-score normalization, chronological
//! split/windowing, and the seeded synthetic network generator.
//!
//! File formats:
//! - `csv_grid`: steps rows x (nodes * channels) columns, empty cells imputed
//!   by the previous valid value in the same column (leading holes become 0).
//! - `packed_binary`: little-endian header of {steps, nodes, channels} as
//!   u64, followed by row-major f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graphs::{build_topology, GraphSet};
use crate::numcore::Tensor;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("normalization error: {0}")]
    Normalize(String),
    #[error("windowing error: {0}")]
    Window(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const MINUTES_PER_DAY: u32 = 1440;

// ── SeriesDataset ────────────────────────────────────────────────────

/// Raw traffic series plus the calendar geometry needed to index the
/// time-varying mask embeddings.
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    /// Raw-scale values, shape [steps, nodes, channels].
    pub values: Tensor,
    pub interval_minutes: u32,
    /// Samples per day, always 1440 / interval_minutes.
    pub samples_per_day: usize,
    /// Day of week of step 0, in 0..=6.
    pub start_day_of_week: u32,
}

impl SeriesDataset {
    pub fn from_values(
        values: Vec<f64>,
        steps: usize,
        nodes: usize,
        channels: usize,
        interval_minutes: u32,
        start_day_of_week: u32,
    ) -> Result<Self> {
        if interval_minutes == 0 || MINUTES_PER_DAY % interval_minutes != 0 {
            return Err(DataError::Ingest(format!(
                "interval {interval_minutes} min does not divide a day"
            )));
        }
        if start_day_of_week > 6 {
            return Err(DataError::Ingest(format!(
                "start day of week {start_day_of_week} out of 0..=6"
            )));
        }
        let tensor = Tensor::new(values, &[steps, nodes, channels])
            .map_err(|e| DataError::Ingest(e.to_string()))?;
        Ok(SeriesDataset {
            values: tensor,
            interval_minutes,
            samples_per_day: (MINUTES_PER_DAY / interval_minutes) as usize,
            start_day_of_week,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.shape[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape[2]
    }

    pub fn value(&self, step: usize, node: usize, channel: usize) -> f64 {
        let (n, c) = (self.n_nodes(), self.channels());
        self.values.data[(step * n + node) * c + channel]
    }

    /// Time-of-day slot of an absolute step index.
    pub fn time_of_day(&self, step: usize) -> usize {
        step % self.samples_per_day
    }

    /// Day-of-week of an absolute step index.
    pub fn day_of_week(&self, step: usize) -> usize {
        (self.start_day_of_week as usize + step / self.samples_per_day) % 7
    }
}

// ── File formats ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesLayout {
    CsvGrid { nodes: usize, channels: usize },
    PackedBinary,
}

pub fn load_series(
    path: &Path,
    layout: SeriesLayout,
    interval_minutes: u32,
    start_day_of_week: u32,
) -> Result<SeriesDataset> {
    match layout {
        SeriesLayout::CsvGrid { nodes, channels } => {
            let text = std::fs::read_to_string(path)?;
            let (values, steps) = parse_csv_grid(&text, nodes, channels)?;
            SeriesDataset::from_values(values, steps, nodes, channels, interval_minutes, start_day_of_week)
        }
        SeriesLayout::PackedBinary => {
            let (values, shape) = read_packed(path)?;
            if shape.len() != 3 {
                return Err(DataError::Ingest(format!(
                    "series container must be rank 3, header says {shape:?}"
                )));
            }
            SeriesDataset::from_values(
                values,
                shape[0],
                shape[1],
                shape[2],
                interval_minutes,
                start_day_of_week,
            )
        }
    }
}

fn parse_csv_grid(text: &str, nodes: usize, channels: usize) -> Result<(Vec<f64>, usize)> {
    let cols = nodes * channels;
    let mut values: Vec<f64> = Vec::new();
    let mut last_valid: Vec<Option<f64>> = vec![None; cols];
    let mut steps = 0usize;
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(DataError::Ingest(format!(
                "row {} has {} columns, expected {}",
                row + 1,
                fields.len(),
                cols
            )));
        }
        for (col, field) in fields.iter().enumerate() {
            let field = field.trim();
            let v = if field.is_empty() {
                // Previous-valid-value imputation; leading holes become 0.
                last_valid[col].unwrap_or(0.0)
            } else {
                let parsed = field.parse::<f64>().map_err(|_| {
                    DataError::Ingest(format!(
                        "unparseable number {field:?} at row {}, column {}",
                        row + 1,
                        col + 1
                    ))
                })?;
                last_valid[col] = Some(parsed);
                parsed
            };
            values.push(v);
        }
        steps += 1;
    }
    if steps == 0 {
        return Err(DataError::Ingest("empty series file".into()));
    }
    Ok((values, steps))
}

/// Write a tensor in the packed binary container.
pub fn write_packed(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(DataError::Ingest(format!(
            "shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a packed container written with a 3-extent header.
pub fn read_packed(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    read_packed_rank(path, 3)
}

/// Read a packed container with `rank` header extents.
pub fn read_packed_rank(path: &Path, rank: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut shape = Vec::with_capacity(rank);
    let mut buf8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf8)
            .map_err(|_| DataError::Ingest("container too short for header".into()))?;
        shape.push(u64::from_le_bytes(buf8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != numel * 8 {
        return Err(DataError::Ingest(format!(
            "header {shape:?} implies {} bytes of data, found {}",
            numel * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((values, shape))
}

// ── Normalization ────────────────────────────────────────────────────

/// Per-channel z-score statistics fitted on the training partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn normalize(&self, v: f64, channel: usize) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, v: f64, channel: usize) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Fit per-channel mean and population standard deviation on the leading
/// `train_fraction` of the time axis.
pub fn zscore_fit(ds: &SeriesDataset, train_fraction: f64) -> Result<Normalization> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(DataError::Normalize(format!(
            "train fraction {train_fraction} out of (0, 1)"
        )));
    }
    let train_steps = ((ds.steps() as f64 * train_fraction).floor() as usize).clamp(1, ds.steps());
    let channels = ds.channels();
    let count = (train_steps * ds.n_nodes()) as f64;
    let mut mean = vec![0.0; channels];
    for t in 0..train_steps {
        for node in 0..ds.n_nodes() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += ds.value(t, node, c);
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; channels];
    for t in 0..train_steps {
        for node in 0..ds.n_nodes() {
            for (c, v) in var.iter_mut().enumerate() {
                let d = ds.value(t, node, c) - mean[c];
                *v += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
    if let Some(c) = std.iter().position(|&s| s <= 0.0) {
        return Err(DataError::Normalize(format!(
            "channel {c} has zero standard deviation on the training partition"
        )));
    }
    Ok(Normalization { mean, std })
}

/// Normalized copy of the full series.
pub fn zscore_transform(ds: &SeriesDataset, norm: &Normalization) -> Tensor {
    let channels = ds.channels();
    let mut out = ds.values.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i % channels;
        *v = (*v - norm.mean[c]) / norm.std[c];
    }
    out
}

/// Fit on the training prefix, then transform the whole series.
pub fn zscore_fit_transform(ds: &SeriesDataset, train_fraction: f64) -> Result<(Tensor, Normalization)> {
    let norm = zscore_fit(ds, train_fraction)?;
    Ok((zscore_transform(ds, &norm), norm))
}

// ── Split and window ─────────────────────────────────────────────────

/// Windowed, normalized dataset ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: SeriesDataset,
    pub normalized: Tensor,
    pub norm: Normalization,
    pub t_in: usize,
    pub t_out: usize,
    /// Window start indices (first input step) per chronological partition.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A windowed input/target pair with calendar indices, batched.
#[derive(Clone, Debug)]
pub struct ForecastBatch {
    /// Normalized inputs, shape [B, T, N, C].
    pub x: Tensor,
    /// Raw-scale targets, shape [B, tau, N, C].
    pub y: Tensor,
    /// Time-of-day slot per input step, length B*T.
    pub tod: Vec<usize>,
    /// Day-of-week per input step, length B*T.
    pub dow: Vec<usize>,
    pub batch: usize,
    pub t_in: usize,
    pub t_out: usize,
}

/// Chronological 3-way split plus stride-1 windows inside each partition.
/// Validation and test partitions may legitimately contain zero windows;
/// a train partition with no complete window is an error.
pub fn split_and_window(
    ds: SeriesDataset,
    ratios: (f64, f64, f64),
    t_in: usize,
    t_out: usize,
) -> Result<PreparedData> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val < 0.0 || r_test < 0.0 || (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(DataError::Window(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let steps = ds.steps();
    if steps < t_in + t_out {
        return Err(DataError::Window(format!(
            "{steps} steps cannot hold one window of {t_in}+{t_out}"
        )));
    }
    let train_end = (steps as f64 * r_train).floor() as usize;
    let val_end = train_end + (steps as f64 * r_val).floor() as usize;

    let windows_in = |lo: usize, hi: usize| -> Vec<usize> {
        if hi < lo + t_in + t_out {
            return Vec::new();
        }
        (lo..=hi - t_in - t_out).collect()
    };
    let train = windows_in(0, train_end);
    let val = windows_in(train_end, val_end);
    let test = windows_in(val_end, steps);
    if train.is_empty() {
        return Err(DataError::Window(format!(
            "training partition of {train_end} steps is shorter than one {t_in}+{t_out} window"
        )));
    }

    let (normalized, norm) = zscore_fit_transform(&ds, r_train)?;
    Ok(PreparedData {
        dataset: ds,
        normalized,
        norm,
        t_in,
        t_out,
        train,
        val,
        test,
    })
}

impl PreparedData {
    /// Assemble a batch from window start indices.
    pub fn make_batch(&self, starts: &[usize]) -> ForecastBatch {
        let ds = &self.dataset;
        let (n, c) = (ds.n_nodes(), ds.channels());
        let (t_in, t_out) = (self.t_in, self.t_out);
        let b = starts.len();
        let mut x = Vec::with_capacity(b * t_in * n * c);
        let mut y = Vec::with_capacity(b * t_out * n * c);
        let mut tod = Vec::with_capacity(b * t_in);
        let mut dow = Vec::with_capacity(b * t_in);
        for &s in starts {
            for t in s..s + t_in {
                tod.push(ds.time_of_day(t));
                dow.push(ds.day_of_week(t));
                let base = (t * n) * c;
                x.extend_from_slice(&self.normalized.data[base..base + n * c]);
            }
            for t in s + t_in..s + t_in + t_out {
                let base = (t * n) * c;
                y.extend_from_slice(&ds.values.data[base..base + n * c]);
            }
        }
        ForecastBatch {
            x: Tensor::new(x, &[b, t_in, n, c]).expect("window extents are consistent"),
            y: Tensor::new(y, &[b, t_out, n, c]).expect("window extents are consistent"),
            tod,
            dow,
            batch: b,
            t_in,
            t_out,
        }
    }
}

// ── Synthetic network ────────────────────────────────────────────────

/// Deterministic synthetic traffic network: per-node daily sinusoid plus
/// neighbor-lagged noise coupling along a random connected topology. The
/// coupling strength follows a rush-hour gate, so spatial influence is
/// strong inside two daily windows and weak elsewhere.
///
/// With `noise_amp == 0` the series is exactly periodic with period
/// `samples_per_day`; with `coupling == 0` node residuals are independent.
pub fn synth_network(
    nodes: usize,
    days: usize,
    seed: u64,
    interval_minutes: u32,
    noise_amp: f64,
    coupling: f64,
) -> Result<(SeriesDataset, GraphSet)> {
    if nodes < 2 || days < 2 {
        return Err(DataError::Ingest(format!(
            "synthetic network needs nodes >= 2 and days >= 2, got {nodes}, {days}"
        )));
    }
    if MINUTES_PER_DAY % interval_minutes != 0 {
        return Err(DataError::Ingest(format!(
            "interval {interval_minutes} min does not divide a day"
        )));
    }
    let n = (MINUTES_PER_DAY / interval_minutes) as usize;
    let steps = days * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random connected topology: spanning tree plus a few chords.
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 1..nodes {
        let parent = rng.random_range(0..i);
        edges.push((parent, i, 1.0));
    }
    for _ in 0..nodes / 2 {
        let a = rng.random_range(0..nodes);
        let b = rng.random_range(0..nodes);
        if a != b {
            edges.push((a, b, 1.0));
        }
    }
    let a_topo = build_topology(&edges, nodes, false).map_err(|e| DataError::Ingest(e.to_string()))?;

    // Per-node daily profile parameters.
    let base: Vec<f64> = (0..nodes).map(|_| rng.random_range(150.0..250.0)).collect();
    let amp: Vec<f64> = (0..nodes).map(|_| rng.random_range(40.0..80.0)).collect();
    let phase: Vec<f64> = (0..nodes).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let neighbors: Vec<Vec<usize>> = (0..nodes)
        .map(|i| {
            (0..nodes)
                .filter(|&j| j != i && a_topo.data[i * nodes + j] != 0.0)
                .collect()
        })
        .collect();

    let mut noise = vec![0.0; steps * nodes];
    for v in noise.iter_mut() {
        *v = rng.random_range(-1.0..1.0) * noise_amp;
    }

    // Rush-hour gate: full coupling in the second and fourth quarter of the
    // day, a trickle elsewhere.
    let quarter = n / 4;
    let gate = |tod: usize| -> f64 {
        if (quarter..2 * quarter).contains(&tod) || (3 * quarter..n).contains(&tod) {
            1.0
        } else {
            0.1
        }
    };

    let mut values = Vec::with_capacity(steps * nodes);
    for t in 0..steps {
        let tod = t % n;
        for i in 0..nodes {
            let ang = std::f64::consts::TAU * tod as f64 / n as f64 + phase[i];
            let mut v = base[i] + amp[i] * ang.sin() + noise[t * nodes + i];
            if t > 0 && !neighbors[i].is_empty() {
                let lagged: f64 = neighbors[i].iter().map(|&j| noise[(t - 1) * nodes + j]).sum();
                v += coupling * gate(tod) * lagged / neighbors[i].len() as f64;
            }
            values.push(v);
        }
    }

    let ds = SeriesDataset::from_values(values, steps, nodes, 1, interval_minutes, 0)?;
    // Pattern edges are built separately; start from the neutral identity.
    let graphs = GraphSet::new(a_topo, Tensor::eye(nodes)).map_err(|e| DataError::Ingest(e.to_string()))?;
    Ok((ds, graphs))
}
