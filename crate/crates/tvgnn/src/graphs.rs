//! Predefined road-network graphs: binary topology adjacency and the DTW
//! traffic-pattern adjacency, plus their union used to mask dynamic graphs.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::SeriesDataset;
use crate::numcore::Tensor;

#[derive(Error, Debug)]
pub enum GraphError {
    #[error("graph error: {0}")]
    Invalid(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Binary topology adjacency and binary DTW pattern adjacency for one road
/// network. Diagonals are always 1 (self-connection retained).
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub a_topo: Tensor,
    pub a_dtw: Tensor,
    pub n_nodes: usize,
}

impl GraphSet {
    pub fn new(a_topo: Tensor, a_dtw: Tensor) -> Result<Self> {
        let n = match a_topo.shape.as_slice() {
            [r, c] if r == c => *r,
            s => return Err(GraphError::Invalid(format!("topology must be square, got {s:?}"))),
        };
        if a_dtw.shape != [n, n] {
            return Err(GraphError::Invalid(format!(
                "pattern graph shape {:?} does not match {n} nodes",
                a_dtw.shape
            )));
        }
        for m in [&a_topo, &a_dtw] {
            for i in 0..n {
                if m.data[i * n + i] != 1.0 {
                    return Err(GraphError::Invalid(format!("diagonal entry ({i},{i}) must be 1")));
                }
            }
            if m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(GraphError::Invalid("adjacency entries must be 0 or 1".into()));
            }
        }
        Ok(GraphSet { a_topo, a_dtw, n_nodes: n })
    }
}

/// Build a binary adjacency from an edge list. Costs are accepted but
/// binarized; the diagonal is forced to 1.
pub fn build_topology(edges: &[(usize, usize, f64)], n_nodes: usize, directed: bool) -> Result<Tensor> {
    let mut a = Tensor::zeros(&[n_nodes, n_nodes]);
    for &(from, to, _cost) in edges {
        if from >= n_nodes || to >= n_nodes {
            return Err(GraphError::Invalid(format!(
                "edge ({from}, {to}) out of range for {n_nodes} nodes"
            )));
        }
        a.data[from * n_nodes + to] = 1.0;
        if !directed {
            a.data[to * n_nodes + from] = 1.0;
        }
    }
    for i in 0..n_nodes {
        a.data[i * n_nodes + i] = 1.0;
    }
    Ok(a)
}

/// Parse an edge-list CSV of `from,to,cost` lines with one header line.
pub fn parse_edge_csv(text: &str) -> Result<Vec<(usize, usize, f64)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(GraphError::Invalid(format!(
                "edge line {} needs at least from,to: {line:?}",
                lineno + 1
            )));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| GraphError::Invalid(format!("bad {what} {s:?} on line {}", lineno + 1)))
        };
        let from = parse(fields[0], "from-node")?;
        let to = parse(fields[1], "to-node")?;
        let cost = if fields.len() > 2 {
            fields[2].parse::<f64>().unwrap_or(1.0)
        } else {
            1.0
        };
        edges.push((from, to, cost));
    }
    Ok(edges)
}

/// Classic dynamic-programming alignment cost with |xi - yj| local cost and
/// (up, left, diagonal) transitions.
pub fn dtw_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(GraphError::Contract("dtw on empty series".into()));
    }
    // Two-row rolling table over the (len(x)+1) x (len(y)+1) grid.
    let m = y.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &xv in x {
        cur[0] = f64::INFINITY;
        for (j, &yv) in y.iter().enumerate() {
            let cost = (xv - yv).abs();
            cur[j + 1] = cost + prev[j + 1].min(cur[j]).min(prev[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Binary traffic-pattern graph: nodes whose mean daily flow profiles are
/// closest under DTW get edges. Profiles come from the training partition
/// only; the kept edge count is `round(sparsity * N * (N-1))`.
pub fn build_pattern_graph(ds: &SeriesDataset, train_fraction: f64, sparsity: f64) -> Result<Tensor> {
    if !(0.0 < sparsity && sparsity <= 1.0) {
        return Err(GraphError::Invalid(format!("sparsity must be in (0, 1], got {sparsity}")));
    }
    let n_nodes = ds.n_nodes();
    let profiles = mean_daily_profiles(ds, train_fraction);

    // Pairwise DTW over unordered pairs; the matrix is symmetric.
    let pairs: Vec<(usize, usize)> = (0..n_nodes)
        .flat_map(|i| (i + 1..n_nodes).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance(&profiles[i], &profiles[j]).expect("profiles are nonempty"))
        .collect();

    let keep = ((n_nodes * (n_nodes - 1)) as f64 * sparsity).round() as usize;
    if keep == 0 {
        return Err(GraphError::Invalid(format!(
            "sparsity {sparsity} keeps zero edges on {n_nodes} nodes"
        )));
    }
    // Rank directed pairs by (distance, i, j) for deterministic ties.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(2 * pairs.len());
    for (&(i, j), &d) in pairs.iter().zip(&dists) {
        ranked.push((d, i, j));
        ranked.push((d, j, i));
    }
    ranked.sort_by(|a, b| a.partial_cmp(b).expect("dtw distances are finite"));

    let mut a = Tensor::zeros(&[n_nodes, n_nodes]);
    for &(_, i, j) in ranked.iter().take(keep) {
        a.data[i * n_nodes + j] = 1.0;
    }
    for i in 0..n_nodes {
        a.data[i * n_nodes + i] = 1.0;
    }
    Ok(a)
}

/// Per-node mean daily profile (length = samples per day) over the leading
/// `train_fraction` of the time axis, flow channel only.
pub fn mean_daily_profiles(ds: &SeriesDataset, train_fraction: f64) -> Vec<Vec<f64>> {
    let n_nodes = ds.n_nodes();
    let n = ds.samples_per_day;
    let steps = (ds.steps() as f64 * train_fraction).floor() as usize;
    let steps = steps.max(1).min(ds.steps());
    let mut sums = vec![vec![0.0; n]; n_nodes];
    let mut counts = vec![0usize; n];
    for t in 0..steps {
        let slot = t % n;
        counts[slot] += 1;
        for (node, sum) in sums.iter_mut().enumerate() {
            sum[slot] += ds.value(t, node, 0);
        }
    }
    for sum in &mut sums {
        for (slot, v) in sum.iter_mut().enumerate() {
            if counts[slot] > 0 {
                *v /= counts[slot] as f64;
            }
        }
    }
    sums
}

/// Union of topology and pattern supports, clipped to {0, 1}. Serves as the
/// support mask for learned dynamic graphs.
pub fn dynamic_mask(g: &GraphSet) -> Tensor {
    let n = g.n_nodes;
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n * n {
        m.data[i] = if g.a_topo.data[i] != 0.0 || g.a_dtw.data[i] != 0.0 { 1.0 } else { 0.0 };
    }
    m
}
