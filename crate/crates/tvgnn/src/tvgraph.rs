//! Learned adjacency matrices: per-step adaptive static graphs causally
//! coupled across the input window, and per-step dynamic graphs scored from
//! hidden features and masked to the union of topology and pattern supports.

use crate::numcore::{NumError, Result, Tape, Tensor, TensorId};

/// Weight used to silence causally-forbidden coupling entries before the
/// softmax; exp(-BLOCK) underflows to exactly 0 in f64, so future steps
/// contribute exact zeros.
const BLOCK: f64 = 1e9;

// ── Static graphs ────────────────────────────────────────────────────

/// Trainable pieces of the time-varying static graph learner.
#[derive(Clone, Debug)]
pub struct StaticGraphParams {
    /// Global node embedding, [N, d_embed].
    pub node_embed: Tensor,
    /// Per-step additive bias, [T, N, d_embed].
    pub step_bias: Tensor,
    /// Mixing weights over current and earlier steps, [T, T]; only the lower
    /// triangle (including the diagonal) is ever read.
    pub coupling: Tensor,
}

pub struct StaticGraphIds {
    pub node_embed: TensorId,
    pub step_bias: TensorId,
    pub coupling: TensorId,
    pub t_len: usize,
}

impl StaticGraphParams {
    pub fn t_len(&self) -> usize {
        self.step_bias.shape[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> StaticGraphIds {
        StaticGraphIds {
            node_embed: tape.leaf(&self.node_embed),
            step_bias: tape.leaf(&self.step_bias),
            coupling: tape.leaf(&self.coupling),
            t_len: self.t_len(),
        }
    }
}

/// Row-softmax Gram graph of the step-`t` embedding: softmax((E + e_t)(E + e_t)ᵀ).
pub fn static_graph_at(tape: &mut Tape, ids: &StaticGraphIds, t: usize) -> Result<TensorId> {
    if t >= ids.t_len {
        return Err(NumError::Contract(format!(
            "step {t} out of range for {} coupled steps",
            ids.t_len
        )));
    }
    let bias_t = tape.narrow(ids.step_bias, 0, t, 1)?; // [1, N, d_embed]
    let shape = tape.shape(ids.node_embed).to_vec();
    let bias_t = tape.reshape(bias_t, &shape)?;
    let embed = tape.add(ids.node_embed, bias_t)?;
    let scores = {
        let et = tape.transpose_last2(embed)?;
        tape.matmul(embed, et)?
    };
    tape.softmax(scores, 1)
}

/// All per-step graphs at once: softmax over the node axis of the stacked
/// Gram products, shape [T, N, N].
pub fn per_step_graphs(tape: &mut Tape, ids: &StaticGraphIds) -> Result<TensorId> {
    let embeds = tape.add(ids.step_bias, ids.node_embed)?; // [T, N, d_embed]
    let et = tape.transpose_last2(embeds)?;
    let scores = tape.matmul(embeds, et)?; // [T, N, N]
    tape.softmax(scores, 2)
}

/// Causally coupled time-varying graphs, shape [T, N, N]: step `t` is the
/// convex combination of per-step graphs 0..=t with softmax-normalized
/// mixing weights. Future steps receive exact-zero weight, so perturbing a
/// later embedding can never move an earlier coupled graph.
pub fn coupled_static_graphs(tape: &mut Tape, ids: &StaticGraphIds) -> Result<TensorId> {
    let t_len = ids.t_len;
    let base = per_step_graphs(tape, ids)?;
    let n = tape.shape(base)[1];

    // Causal mask: subtract BLOCK from strictly-upper entries, then row
    // softmax. exp underflows to exact zero beyond the diagonal.
    let mut mask = vec![0.0; t_len * t_len];
    for row in 0..t_len {
        for col in row + 1..t_len {
            mask[row * t_len + col] = -BLOCK;
        }
    }
    let mask = tape.constant(mask, &[t_len, t_len])?;
    let masked = tape.add(ids.coupling, mask)?;
    let weights = tape.softmax(masked, 1)?; // [T, T], row t convex over 0..=t

    let flat = tape.reshape(base, &[t_len, n * n])?;
    let mixed = tape.matmul(weights, flat)?;
    tape.reshape(mixed, &[t_len, n, n])
}

/// Static-graph ablation variants. Each provider yields per-step graphs
/// [T, N, N] and per-step node embeddings [T, N, d_embed] for the
/// node-adaptive convolutions downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaticGraphKind {
    /// Coupled time-varying graphs.
    Full,
    /// Per-step graphs without coupling.
    NoCoupling,
    /// One shared adaptive graph from the global embedding.
    SingleAdaptive,
    /// Row-normalized predefined topology; not trainable.
    TopologyOnly,
}

impl StaticGraphKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StaticGraphKind::Full),
            "no-coupling" => Ok(StaticGraphKind::NoCoupling),
            "single-adaptive" => Ok(StaticGraphKind::SingleAdaptive),
            "topology-only" => Ok(StaticGraphKind::TopologyOnly),
            other => Err(NumError::Contract(format!("unknown graph kind {other:?}"))),
        }
    }
}

/// Row-normalize a nonnegative adjacency so rows sum to 1.
pub fn row_normalize(a: &Tensor) -> Tensor {
    let n = a.shape[0];
    let mut out = a.clone();
    for i in 0..n {
        let row = &mut out.data[i * n..(i + 1) * n];
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    out
}

/// Dispatch a static-graph provider. Returns (graphs [T, N, N],
/// embeddings [T, N, d_embed]).
pub fn ablation_graph(
    tape: &mut Tape,
    ids: &StaticGraphIds,
    kind: StaticGraphKind,
    topology: &Tensor,
) -> Result<(TensorId, TensorId)> {
    let t_len = ids.t_len;
    let embeds_tv = tape.add(ids.step_bias, ids.node_embed)?; // [T, N, d_embed]
    match kind {
        StaticGraphKind::Full => {
            let graphs = coupled_static_graphs(tape, ids)?;
            Ok((graphs, embeds_tv))
        }
        StaticGraphKind::NoCoupling => {
            let graphs = per_step_graphs(tape, ids)?;
            Ok((graphs, embeds_tv))
        }
        StaticGraphKind::SingleAdaptive => {
            let et = tape.transpose_last2(ids.node_embed)?;
            let scores = tape.matmul(ids.node_embed, et)?;
            let graph = tape.softmax(scores, 1)?;
            let (graphs, embeds) = (repeat_leading(tape, graph, t_len)?, repeat_leading(tape, ids.node_embed, t_len)?);
            Ok((graphs, embeds))
        }
        StaticGraphKind::TopologyOnly => {
            let norm = row_normalize(topology);
            let n = norm.shape[0];
            let mut data = Vec::with_capacity(t_len * n * n);
            for _ in 0..t_len {
                data.extend_from_slice(&norm.data);
            }
            let graphs = tape.constant(data, &[t_len, n, n])?;
            let embeds = repeat_leading(tape, ids.node_embed, t_len)?;
            Ok((graphs, embeds))
        }
    }
}

fn repeat_leading(tape: &mut Tape, x: TensorId, reps: usize) -> Result<TensorId> {
    let ids = vec![x; reps];
    tape.stack(&ids)
}

// ── Dynamic graphs ───────────────────────────────────────────────────

/// Trainable pieces of the dynamic graph learner: a per-node linear feature
/// map and the pair-score vector.
#[derive(Clone, Debug)]
pub struct DynamicGraphParams {
    /// [c_in, d_feat]
    pub feature_map: Tensor,
    /// [2 * d_feat]
    pub score_weights: Tensor,
}

pub struct DynamicGraphIds {
    pub feature_map: TensorId,
    pub score_weights: TensorId,
}

impl DynamicGraphParams {
    pub fn bind(&self, tape: &mut Tape) -> DynamicGraphIds {
        DynamicGraphIds {
            feature_map: tape.leaf(&self.feature_map),
            score_weights: tape.leaf(&self.score_weights),
        }
    }
}

/// Attention-scored adjacency from hidden features, Hadamard-masked to the
/// predefined support. `hidden` is [B, N, c_in]; `mask` is a constant
/// [N, N]. Returns (masked graph [B, N, N], mapped features [B, N, d_feat]).
pub fn dynamic_graph_at(
    tape: &mut Tape,
    ids: &DynamicGraphIds,
    hidden: TensorId,
    mask: TensorId,
) -> Result<(TensorId, TensorId)> {
    let d_feat = tape.shape(ids.feature_map)[1];
    let mapped = tape.matmul(hidden, ids.feature_map)?; // [B, N, d_feat]

    // Score e_ij = a · (f_i || f_j) splits into a rank-1 outer sum.
    let score_col = tape.reshape(ids.score_weights, &[2 * d_feat, 1])?;
    let a_src = tape.narrow(score_col, 0, 0, d_feat)?;
    let a_dst = tape.narrow(score_col, 0, d_feat, d_feat)?;
    let u = tape.matmul(mapped, a_src)?; // [B, N, 1]
    let v = tape.matmul(mapped, a_dst)?;
    let vt = tape.transpose_last2(v)?; // [B, 1, N]
    let scores = tape.add(u, vt)?; // [B, N, N]
    let soft = tape.softmax(scores, 2)?;
    let masked = tape.mul(soft, mask)?;
    Ok((masked, mapped))
}
