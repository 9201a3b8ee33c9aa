//! Positional encoding and temporal-perception multi-head self-attention.
//!
//! The attention operates across nodes within each time step. Its keys are
//! optionally pre-multiplied by a per-step N x N mask matrix, the Gram matrix
//! of a calendar-indexed mask embedding: a static node table modulated
//! elementwise by a daily row (time-of-day) and a weekly row (day-of-week).

use crate::numcore::{NumError, Result, Tape, Tensor, TensorId};

// ── Positional encoding ──────────────────────────────────────────────

/// Sine/cosine positional table of shape [len, d_model]; `d_model` must be
/// even.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(NumError::Contract(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    let mut pe = Tensor::zeros(&[len, d_model]);
    for pos in 0..len {
        for d in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * d as f64 / d_model as f64);
            pe.data[pos * d_model + 2 * d] = angle.sin();
            pe.data[pos * d_model + 2 * d + 1] = angle.cos();
        }
    }
    Ok(pe)
}

// ── Mask embeddings ──────────────────────────────────────────────────

/// The three trainable mask tables: per-node, per-time-of-day, per-day-of-week.
#[derive(Clone, Debug)]
pub struct MaskEmbeddings {
    /// [N, d_mask]
    pub node: Tensor,
    /// [samples_per_day, d_mask]
    pub daily: Tensor,
    /// [7, d_mask]
    pub weekly: Tensor,
}

pub struct MaskEmbeddingIds {
    pub node: TensorId,
    pub daily: TensorId,
    pub weekly: TensorId,
}

impl MaskEmbeddings {
    pub fn bind(&self, tape: &mut Tape) -> MaskEmbeddingIds {
        MaskEmbeddingIds {
            node: tape.leaf(&self.node),
            daily: tape.leaf(&self.daily),
            weekly: tape.leaf(&self.weekly),
        }
    }
}

/// Mask embedding for one (time-of-day, day-of-week) pair: the node table
/// modulated elementwise by the selected daily and weekly rows, shape
/// [N, d_mask].
pub fn mask_embedding_at(tape: &mut Tape, ids: &MaskEmbeddingIds, tod: usize, dow: usize) -> Result<TensorId> {
    let n_daily = tape.shape(ids.daily)[0];
    if tod >= n_daily {
        return Err(NumError::Contract(format!(
            "time-of-day {tod} out of range for {n_daily} slots"
        )));
    }
    if dow >= 7 {
        return Err(NumError::Contract(format!("day-of-week {dow} out of range")));
    }
    let daily_row = tape.index_select(ids.daily, &[tod])?; // [1, d_mask]
    let weekly_row = tape.index_select(ids.weekly, &[dow])?; // [1, d_mask]
    let scaled = tape.mul(ids.node, daily_row)?; // broadcast over N rows
    tape.mul(scaled, weekly_row)
}

/// Gram mask matrix `m · mᵀ` for a mask embedding of shape [..., N, d_mask].
pub fn mask_matrix(tape: &mut Tape, m: TensorId) -> Result<TensorId> {
    let mt = tape.transpose_last2(m)?;
    tape.matmul(m, mt)
}

/// Stacked mask matrices for a batch of windows: shape [B, T, N, N], one Gram
/// mask per input step, indexed by that step's calendar slots.
pub fn mask_matrices(
    tape: &mut Tape,
    ids: &MaskEmbeddingIds,
    tod: &[usize],
    dow: &[usize],
    batch: usize,
    t_in: usize,
) -> Result<TensorId> {
    if tod.len() != batch * t_in || dow.len() != batch * t_in {
        return Err(NumError::Contract(format!(
            "expected {batch}x{t_in} calendar indices, got {} and {}",
            tod.len(),
            dow.len()
        )));
    }
    let d_mask = tape.shape(ids.node)[1];
    let daily_rows = tape.index_select(ids.daily, tod)?; // [B*T, d_mask]
    let weekly_rows = tape.index_select(ids.weekly, dow)?;
    let daily_rows = tape.reshape(daily_rows, &[batch, t_in, 1, d_mask])?;
    let weekly_rows = tape.reshape(weekly_rows, &[batch, t_in, 1, d_mask])?;
    let m = tape.mul(ids.node, daily_rows)?; // [B, T, N, d_mask]
    let m = tape.mul(m, weekly_rows)?;
    mask_matrix(tape, m)
}

// ── Multi-head self-attention ────────────────────────────────────────

/// Per-head projections plus the output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_model: usize,
    /// Per head: [d_model, d_head].
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    /// [heads * d_head, d_model].
    pub output: Tensor,
}

impl AttentionParams {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn check(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(NumError::Contract(format!(
                "model width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionIds {
        AttentionIds {
            query: self.query.iter().map(|t| tape.leaf(t)).collect(),
            key: self.key.iter().map(|t| tape.leaf(t)).collect(),
            value: self.value.iter().map(|t| tape.leaf(t)).collect(),
            output: tape.leaf(&self.output),
            heads: self.heads,
            d_model: self.d_model,
        }
    }
}

pub struct AttentionIds {
    pub query: Vec<TensorId>,
    pub key: Vec<TensorId>,
    pub value: Vec<TensorId>,
    pub output: TensorId,
    pub heads: usize,
    pub d_model: usize,
}

/// Temporal-perception multi-head self-attention over the node axis.
///
/// `x` is [B, T, N, D]; `masks`, when given, is [B, T, N, N] and multiplies
/// the keys per time step before the score product. Returns [B, T, N, D].
pub fn etpmsa(tape: &mut Tape, x: TensorId, masks: Option<TensorId>, params: &AttentionIds) -> Result<TensorId> {
    Ok(etpmsa_with_weights(tape, x, masks, params)?.0)
}

/// The attention weights of every head are also returned for inspection.
pub fn etpmsa_with_weights(
    tape: &mut Tape,
    x: TensorId,
    masks: Option<TensorId>,
    params: &AttentionIds,
) -> Result<(TensorId, Vec<TensorId>)> {
    let shape = tape.shape(x).to_vec();
    let [_b, _t, n, d] = match shape.as_slice() {
        [b, t, n, d] => [*b, *t, *n, *d],
        s => {
            return Err(NumError::Dim(format!(
                "attention input must be [B, T, N, D], got {s:?}"
            )))
        }
    };
    if d != params.d_model {
        return Err(NumError::Dim(format!(
            "input width {d} does not match model width {}",
            params.d_model
        )));
    }
    if let Some(m) = masks {
        let ms = tape.shape(m);
        if ms.len() != 4 || ms[2] != n || ms[3] != n {
            return Err(NumError::Dim(format!(
                "mask shape {ms:?} incompatible with {n} nodes"
            )));
        }
    }
    let d_head = params.d_model / params.heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(params.heads);
    let mut head_weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let q = tape.matmul(x, params.query[h])?; // [B, T, N, d_head]
        let k = tape.matmul(x, params.key[h])?;
        let v = tape.matmul(x, params.value[h])?;
        let k = match masks {
            Some(m) => tape.matmul(m, k)?, // per-step mask on the keys
            None => k,
        };
        let kt = tape.transpose_last2(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores, 3)?;
        head_weights.push(attn);
        head_outputs.push(tape.matmul(attn, v)?);
    }
    let merged = tape.concat(&head_outputs, 3)?;
    let out = tape.matmul(merged, params.output)?;
    Ok((out, head_weights))
}

/// Plain multi-head self-attention: the unmasked path.
pub fn mhsa_plain(tape: &mut Tape, x: TensorId, params: &AttentionIds) -> Result<TensorId> {
    etpmsa(tape, x, None, params)
}
