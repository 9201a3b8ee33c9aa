//! Model assembly: encoder attention feeding a stack of dual-graph-convolution
//! gated recurrent units, closed by a direct multi-horizon prediction head.
//!
//! Each GRU gate runs two node-adaptive graph convolutions in parallel, one
//! on the coupled static graph and one on the masked dynamic graph, fuses
//! them with a learned projection, and follows the standard convex update.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    etpmsa, mask_matrices, positional_encoding, AttentionIds, AttentionParams, MaskEmbeddingIds,
    MaskEmbeddings,
};
use crate::data::{ForecastBatch, Normalization};
use crate::graphs::{dynamic_mask, GraphSet};
use crate::numcore::{NumError, Result, Tape, Tensor, TensorId};
use crate::tvgraph::{
    ablation_graph, dynamic_graph_at, row_normalize, DynamicGraphIds, DynamicGraphParams,
    StaticGraphIds, StaticGraphKind, StaticGraphParams,
};

// ── Configuration ────────────────────────────────────────────────────

/// Resolved model hyperparameters: the preset octet plus dataset geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub encoder_layers: usize,
    /// Retained for preset fidelity; prediction is a one-shot head.
    pub decoder_layers: usize,
    pub batch: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Graph embedding width.
    pub d_embed: usize,
    /// Mask embedding width.
    pub d_mask: usize,
    pub ctvgcrm_layers: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    // Dataset geometry.
    pub n_nodes: usize,
    pub samples_per_day: usize,
    pub channels: usize,
}

impl ModelConfig {
    /// Named presets: (encoder, decoder, batch, heads, D, E, d_mask, layers).
    pub fn preset_octet(name: &str) -> Option<[usize; 8]> {
        match name {
            "pems03" => Some([1, 1, 16, 8, 64, 8, 8, 2]),
            "pems04" => Some([1, 1, 4, 8, 64, 6, 18, 2]),
            "pems07" => Some([1, 1, 8, 8, 64, 10, 24, 2]),
            "pems08" => Some([1, 1, 16, 8, 64, 5, 15, 2]),
            "synthetic" => Some([1, 1, 16, 2, 8, 3, 2, 1]),
            _ => None,
        }
    }

    pub fn from_preset(name: &str, n_nodes: usize, samples_per_day: usize, channels: usize) -> Result<Self> {
        let octet = Self::preset_octet(name)
            .ok_or_else(|| NumError::Contract(format!("unknown preset {name:?}")))?;
        let [encoder_layers, decoder_layers, batch, heads, d_model, d_embed, d_mask, ctvgcrm_layers] = octet;
        Ok(ModelConfig {
            preset: name.to_string(),
            encoder_layers,
            decoder_layers,
            batch,
            heads,
            d_model,
            d_embed,
            d_mask,
            ctvgcrm_layers,
            t_in: 12,
            t_out: 12,
            learning_rate: 1e-3,
            dropout: 0.0,
            n_nodes,
            samples_per_day,
            channels,
        })
    }

    /// Hidden width of the recurrent stack, tied to the model width.
    pub fn d_hidden(&self) -> usize {
        self.d_model
    }

    /// Input width of the gate convolutions (features concatenated with the
    /// hidden state).
    pub fn conv_in(&self) -> usize {
        self.d_model + self.d_hidden()
    }

    pub fn check(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(NumError::Contract(format!(
                "width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(NumError::Contract("model width must be even for the positional table".into()));
        }
        Ok(())
    }

    /// Plain-text key=value form.
    pub fn to_kv(&self) -> String {
        format!(
            "preset={}\nencoder_layers={}\ndecoder_layers={}\nbatch={}\nheads={}\nd_model={}\nd_embed={}\nd_mask={}\nctvgcrm_layers={}\nt_in={}\nt_out={}\nlearning_rate={}\ndropout={}\nn_nodes={}\nsamples_per_day={}\nchannels={}\n",
            self.preset,
            self.encoder_layers,
            self.decoder_layers,
            self.batch,
            self.heads,
            self.d_model,
            self.d_embed,
            self.d_mask,
            self.ctvgcrm_layers,
            self.t_in,
            self.t_out,
            self.learning_rate,
            self.dropout,
            self.n_nodes,
            self.samples_per_day,
            self.channels
        )
    }

    /// Apply key=value lines to this configuration; keys absent from the
    /// text keep their current values.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NumError::Contract(format!("config line {} is not key=value", lineno + 1)))?;
            let bad = |what: &str| NumError::Contract(format!("config {key}: bad {what} {value:?}"));
            let as_usize = || value.trim().parse::<usize>().map_err(|_| bad("integer"));
            match key.trim() {
                "preset" => self.preset = value.trim().to_string(),
                "encoder_layers" => self.encoder_layers = as_usize()?,
                "decoder_layers" => self.decoder_layers = as_usize()?,
                "batch" => self.batch = as_usize()?,
                "heads" => self.heads = as_usize()?,
                "d_model" => self.d_model = as_usize()?,
                "d_embed" => self.d_embed = as_usize()?,
                "d_mask" => self.d_mask = as_usize()?,
                "ctvgcrm_layers" => self.ctvgcrm_layers = as_usize()?,
                "t_in" => self.t_in = as_usize()?,
                "t_out" => self.t_out = as_usize()?,
                "n_nodes" => self.n_nodes = as_usize()?,
                "samples_per_day" => self.samples_per_day = as_usize()?,
                "channels" => self.channels = as_usize()?,
                "learning_rate" => self.learning_rate = value.trim().parse().map_err(|_| bad("real"))?,
                "dropout" => self.dropout = value.trim().parse().map_err(|_| bad("real"))?,
                other => return Err(NumError::Contract(format!("unknown config key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig {
            preset: String::new(),
            encoder_layers: 1,
            decoder_layers: 1,
            batch: 1,
            heads: 1,
            d_model: 2,
            d_embed: 1,
            d_mask: 1,
            ctvgcrm_layers: 1,
            t_in: 12,
            t_out: 12,
            learning_rate: 1e-3,
            dropout: 0.0,
            n_nodes: 1,
            samples_per_day: 288,
            channels: 1,
        };
        cfg.apply_kv(text)?;
        Ok(cfg)
    }
}

// ── Ablation switches ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Identity attention masks (plain multi-head self-attention).
    WoTm,
    /// Uncoupled per-step static graphs.
    WoCg,
    /// Both of the above.
    WoBc,
    /// Skip the attention encoder entirely.
    WoEtpmsa,
    /// Replace learned graphs with the normalized topology.
    WoTv,
    /// Replace the recurrent cell with a feed-forward graph convolution.
    WoTr,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "wo-tm" => Ok(Ablation::WoTm),
            "wo-cg" => Ok(Ablation::WoCg),
            "wo-bc" => Ok(Ablation::WoBc),
            "wo-etpmsa" => Ok(Ablation::WoEtpmsa),
            "wo-tv" => Ok(Ablation::WoTv),
            "wo-tr" => Ok(Ablation::WoTr),
            other => Err(NumError::Contract(format!("unknown ablation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WoTm => "wo-tm",
            Ablation::WoCg => "wo-cg",
            Ablation::WoBc => "wo-bc",
            Ablation::WoEtpmsa => "wo-etpmsa",
            Ablation::WoTv => "wo-tv",
            Ablation::WoTr => "wo-tr",
        }
    }

    fn use_time_mask(self) -> bool {
        !matches!(self, Ablation::WoTm | Ablation::WoBc)
    }

    fn skip_attention(self) -> bool {
        matches!(self, Ablation::WoEtpmsa)
    }

    fn static_kind(self) -> StaticGraphKind {
        match self {
            Ablation::WoCg | Ablation::WoBc => StaticGraphKind::NoCoupling,
            Ablation::WoTv | Ablation::WoTr => StaticGraphKind::TopologyOnly,
            _ => StaticGraphKind::Full,
        }
    }

    /// The dynamic branch also falls back to the normalized topology.
    fn topology_dynamic(self) -> bool {
        matches!(self, Ablation::WoTv | Ablation::WoTr)
    }

    fn no_recurrence(self) -> bool {
        matches!(self, Ablation::WoTr)
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// Node-adaptive convolution parameters for one gate branch.
#[derive(Clone, Debug)]
pub struct ConvParams {
    /// [d_pool_embed, d_in * d_out]
    pub pool_w: Tensor,
    /// [d_pool_embed, d_out]
    pub pool_b: Tensor,
}

/// One GRU gate: a static-branch conv, a dynamic-branch conv, and the fusion
/// projection back to the hidden width.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub static_conv: ConvParams,
    pub dynamic_conv: ConvParams,
    /// [2 * d_hidden, d_hidden]
    pub fusion: Tensor,
}

/// The three gates of one recurrent layer: update, reset, candidate.
#[derive(Clone, Debug)]
pub struct CellParams {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

#[derive(Clone, Debug)]
pub struct RecurrentLayerParams {
    pub dynamic: DynamicGraphParams,
    pub cell: CellParams,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// [d_hidden, t_out * channels]
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Every trainable tensor of the model, addressable by hierarchical name.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub encoder: Vec<EncoderLayerParams>,
    pub masks: MaskEmbeddings,
    pub static_graph: StaticGraphParams,
    pub layers: Vec<RecurrentLayerParams>,
    pub head: HeadParams,
}

impl ModelParams {
    /// Deterministic traversal of (name, tensor) pairs. `bind` and the
    /// optimizer rely on this order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("input.weight".into(), &self.input_w);
        f("input.bias".into(), &self.input_b);
        for (i, layer) in self.encoder.iter().enumerate() {
            for (h, t) in layer.attention.query.iter().enumerate() {
                f(format!("encoder.{i}.attn.query.{h}"), t);
            }
            for (h, t) in layer.attention.key.iter().enumerate() {
                f(format!("encoder.{i}.attn.key.{h}"), t);
            }
            for (h, t) in layer.attention.value.iter().enumerate() {
                f(format!("encoder.{i}.attn.value.{h}"), t);
            }
            f(format!("encoder.{i}.attn.output"), &layer.attention.output);
            f(format!("encoder.{i}.norm.gamma"), &layer.ln_gamma);
            f(format!("encoder.{i}.norm.beta"), &layer.ln_beta);
        }
        f("mask.node".into(), &self.masks.node);
        f("mask.daily".into(), &self.masks.daily);
        f("mask.weekly".into(), &self.masks.weekly);
        f("static.node_embed".into(), &self.static_graph.node_embed);
        f("static.step_bias".into(), &self.static_graph.step_bias);
        f("static.coupling".into(), &self.static_graph.coupling);
        for (l, layer) in self.layers.iter().enumerate() {
            f(format!("layer.{l}.dynamic.feature_map"), &layer.dynamic.feature_map);
            f(format!("layer.{l}.dynamic.score"), &layer.dynamic.score_weights);
            for (gate, p) in [
                ("update", &layer.cell.update),
                ("reset", &layer.cell.reset),
                ("candidate", &layer.cell.candidate),
            ] {
                f(format!("layer.{l}.{gate}.static.pool_w"), &p.static_conv.pool_w);
                f(format!("layer.{l}.{gate}.static.pool_b"), &p.static_conv.pool_b);
                f(format!("layer.{l}.{gate}.dynamic.pool_w"), &p.dynamic_conv.pool_w);
                f(format!("layer.{l}.{gate}.dynamic.pool_b"), &p.dynamic_conv.pool_b);
                f(format!("layer.{l}.{gate}.fusion"), &p.fusion);
            }
        }
        f("head.weight".into(), &self.head.weight);
        f("head.bias".into(), &self.head.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("input.weight".into(), &mut self.input_w);
        f("input.bias".into(), &mut self.input_b);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            for (h, t) in layer.attention.query.iter_mut().enumerate() {
                f(format!("encoder.{i}.attn.query.{h}"), t);
            }
            for (h, t) in layer.attention.key.iter_mut().enumerate() {
                f(format!("encoder.{i}.attn.key.{h}"), t);
            }
            for (h, t) in layer.attention.value.iter_mut().enumerate() {
                f(format!("encoder.{i}.attn.value.{h}"), t);
            }
            f(format!("encoder.{i}.attn.output"), &mut layer.attention.output);
            f(format!("encoder.{i}.norm.gamma"), &mut layer.ln_gamma);
            f(format!("encoder.{i}.norm.beta"), &mut layer.ln_beta);
        }
        f("mask.node".into(), &mut self.masks.node);
        f("mask.daily".into(), &mut self.masks.daily);
        f("mask.weekly".into(), &mut self.masks.weekly);
        f("static.node_embed".into(), &mut self.static_graph.node_embed);
        f("static.step_bias".into(), &mut self.static_graph.step_bias);
        f("static.coupling".into(), &mut self.static_graph.coupling);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(format!("layer.{l}.dynamic.feature_map"), &mut layer.dynamic.feature_map);
            f(format!("layer.{l}.dynamic.score"), &mut layer.dynamic.score_weights);
            for (gate, p) in [
                ("update", &mut layer.cell.update),
                ("reset", &mut layer.cell.reset),
                ("candidate", &mut layer.cell.candidate),
            ] {
                f(format!("layer.{l}.{gate}.static.pool_w"), &mut p.static_conv.pool_w);
                f(format!("layer.{l}.{gate}.static.pool_b"), &mut p.static_conv.pool_b);
                f(format!("layer.{l}.{gate}.dynamic.pool_w"), &mut p.dynamic_conv.pool_w);
                f(format!("layer.{l}.{gate}.dynamic.pool_b"), &mut p.dynamic_conv.pool_b);
                f(format!("layer.{l}.{gate}.fusion"), &mut p.fusion);
            }
        }
        f("head.weight".into(), &mut self.head.weight);
        f("head.bias".into(), &mut self.head.bias);
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelIds {
        ModelIds {
            input_w: tape.leaf(&self.input_w),
            input_b: tape.leaf(&self.input_b),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerIds {
                    attention: l.attention.bind(tape),
                    ln_gamma: tape.leaf(&l.ln_gamma),
                    ln_beta: tape.leaf(&l.ln_beta),
                })
                .collect(),
            masks: self.masks.bind(tape),
            static_graph: self.static_graph.bind(tape),
            layers: self
                .layers
                .iter()
                .map(|l| RecurrentLayerIds {
                    dynamic: l.dynamic.bind(tape),
                    cell: CellIds {
                        update: GateIds::bind(&l.cell.update, tape),
                        reset: GateIds::bind(&l.cell.reset, tape),
                        candidate: GateIds::bind(&l.cell.candidate, tape),
                    },
                })
                .collect(),
            head_w: tape.leaf(&self.head.weight),
            head_b: tape.leaf(&self.head.bias),
        }
    }
}

pub struct GateIds {
    pub static_pool_w: TensorId,
    pub static_pool_b: TensorId,
    pub dynamic_pool_w: TensorId,
    pub dynamic_pool_b: TensorId,
    pub fusion: TensorId,
}

impl GateIds {
    fn bind(p: &GateParams, tape: &mut Tape) -> Self {
        GateIds {
            static_pool_w: tape.leaf(&p.static_conv.pool_w),
            static_pool_b: tape.leaf(&p.static_conv.pool_b),
            dynamic_pool_w: tape.leaf(&p.dynamic_conv.pool_w),
            dynamic_pool_b: tape.leaf(&p.dynamic_conv.pool_b),
            fusion: tape.leaf(&p.fusion),
        }
    }
}

pub struct CellIds {
    pub update: GateIds,
    pub reset: GateIds,
    pub candidate: GateIds,
}

pub struct EncoderLayerIds {
    pub attention: AttentionIds,
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
}

pub struct RecurrentLayerIds {
    pub dynamic: DynamicGraphIds,
    pub cell: CellIds,
}

pub struct ModelIds {
    pub input_w: TensorId,
    pub input_b: TensorId,
    pub encoder: Vec<EncoderLayerIds>,
    pub masks: MaskEmbeddingIds,
    pub static_graph: StaticGraphIds,
    pub layers: Vec<RecurrentLayerIds>,
    pub head_w: TensorId,
    pub head_b: TensorId,
}

impl ModelIds {
    /// Rebuild the id structure from a flat list in `ModelParams::visit`
    /// order (the list a gradient checker hands back).
    pub fn from_ordered(cfg: &ModelConfig, ids: &[TensorId]) -> Result<Self> {
        let mut it = ids.iter().copied();
        let mut next = || {
            it.next()
                .ok_or_else(|| NumError::Contract("not enough tensors for the model layout".into()))
        };
        let input_w = next()?;
        let input_b = next()?;
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for _ in 0..cfg.encoder_layers {
            let query: Vec<TensorId> = (0..cfg.heads).map(|_| next()).collect::<Result<_>>()?;
            let key: Vec<TensorId> = (0..cfg.heads).map(|_| next()).collect::<Result<_>>()?;
            let value: Vec<TensorId> = (0..cfg.heads).map(|_| next()).collect::<Result<_>>()?;
            let output = next()?;
            let ln_gamma = next()?;
            let ln_beta = next()?;
            encoder.push(EncoderLayerIds {
                attention: AttentionIds { query, key, value, output, heads: cfg.heads, d_model: cfg.d_model },
                ln_gamma,
                ln_beta,
            });
        }
        let masks = MaskEmbeddingIds { node: next()?, daily: next()?, weekly: next()? };
        let static_graph = StaticGraphIds {
            node_embed: next()?,
            step_bias: next()?,
            coupling: next()?,
            t_len: cfg.t_in,
        };
        let mut layers = Vec::with_capacity(cfg.ctvgcrm_layers);
        for _ in 0..cfg.ctvgcrm_layers {
            let dynamic = DynamicGraphIds { feature_map: next()?, score_weights: next()? };
            let mut gates = Vec::with_capacity(3);
            for _ in 0..3 {
                gates.push(GateIds {
                    static_pool_w: next()?,
                    static_pool_b: next()?,
                    dynamic_pool_w: next()?,
                    dynamic_pool_b: next()?,
                    fusion: next()?,
                });
            }
            let candidate = gates.pop().expect("three gates");
            let reset = gates.pop().expect("three gates");
            let update = gates.pop().expect("three gates");
            layers.push(RecurrentLayerIds { dynamic, cell: CellIds { update, reset, candidate } });
        }
        let head_w = next()?;
        let head_b = next()?;
        if it.next().is_some() {
            return Err(NumError::Contract("extra tensors beyond the model layout".into()));
        }
        Ok(ModelIds { input_w, input_b, encoder, masks, static_graph, layers, head_w, head_b })
    }

    /// Same order as `ModelParams::visit`.
    pub fn ordered(&self) -> Vec<TensorId> {
        let mut out = vec![self.input_w, self.input_b];
        for l in &self.encoder {
            out.extend(&l.attention.query);
            out.extend(&l.attention.key);
            out.extend(&l.attention.value);
            out.push(l.attention.output);
            out.push(l.ln_gamma);
            out.push(l.ln_beta);
        }
        out.extend([self.masks.node, self.masks.daily, self.masks.weekly]);
        out.extend([
            self.static_graph.node_embed,
            self.static_graph.step_bias,
            self.static_graph.coupling,
        ]);
        for l in &self.layers {
            out.push(l.dynamic.feature_map);
            out.push(l.dynamic.score_weights);
            for g in [&l.cell.update, &l.cell.reset, &l.cell.candidate] {
                out.extend([g.static_pool_w, g.static_pool_b, g.dynamic_pool_w, g.dynamic_pool_b, g.fusion]);
            }
        }
        out.extend([self.head_w, self.head_b]);
        out
    }
}

// ── Initialization ───────────────────────────────────────────────────

/// Weights uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in the leading
/// extent; embeddings uniform(-0.1, 0.1); norm scales at identity.
/// Deterministic by seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(data, shape).expect("static shape").with_grad()
    }
    fn weight(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        uniform(rng, shape, 1.0 / (shape[0] as f64).sqrt())
    }
    fn embed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        uniform(rng, shape, 0.1)
    }

    let d = cfg.d_model;
    let d_head = d / cfg.heads;
    let input_w = weight(&mut rng, &[cfg.channels, d]);
    let input_b = uniform(&mut rng, &[d], 1.0 / (cfg.channels as f64).sqrt());

    let encoder = (0..cfg.encoder_layers)
        .map(|_| EncoderLayerParams {
            attention: AttentionParams {
                heads: cfg.heads,
                d_model: d,
                query: (0..cfg.heads).map(|_| weight(&mut rng, &[d, d_head])).collect(),
                key: (0..cfg.heads).map(|_| weight(&mut rng, &[d, d_head])).collect(),
                value: (0..cfg.heads).map(|_| weight(&mut rng, &[d, d_head])).collect(),
                output: weight(&mut rng, &[cfg.heads * d_head, d]),
            },
            ln_gamma: Tensor::filled(&[d], 1.0).with_grad(),
            ln_beta: Tensor::zeros(&[d]).with_grad(),
        })
        .collect();

    // The daily and weekly tables act multiplicatively on the node table, so
    // they start at the multiplicative identity; the node table starts at
    // weight scale so the initial Gram mask passes keys through at a usable
    // magnitude.
    fn identityish(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let mut t = uniform(rng, shape, 0.1);
        for v in &mut t.data {
            *v += 1.0;
        }
        t
    }
    let masks = MaskEmbeddings {
        node: uniform(&mut rng, &[cfg.n_nodes, cfg.d_mask], 1.0 / (cfg.d_mask as f64).sqrt()),
        daily: identityish(&mut rng, &[cfg.samples_per_day, cfg.d_mask]),
        weekly: identityish(&mut rng, &[7, cfg.d_mask]),
    };
    let static_graph = StaticGraphParams {
        node_embed: embed(&mut rng, &[cfg.n_nodes, cfg.d_embed]),
        step_bias: embed(&mut rng, &[cfg.t_in, cfg.n_nodes, cfg.d_embed]),
        coupling: embed(&mut rng, &[cfg.t_in, cfg.t_in]),
    };

    let d_h = cfg.d_hidden();
    let conv_in = cfg.conv_in();
    let gate = |rng: &mut ChaCha8Rng| GateParams {
        static_conv: ConvParams {
            pool_w: weight(rng, &[cfg.d_embed, conv_in * d_h]),
            pool_b: weight(rng, &[cfg.d_embed, d_h]),
        },
        dynamic_conv: ConvParams {
            pool_w: weight(rng, &[cfg.d_embed, conv_in * d_h]),
            pool_b: weight(rng, &[cfg.d_embed, d_h]),
        },
        fusion: weight(rng, &[2 * d_h, d_h]),
    };
    let layers = (0..cfg.ctvgcrm_layers)
        .map(|_| RecurrentLayerParams {
            dynamic: DynamicGraphParams {
                feature_map: weight(&mut rng, &[d, cfg.d_embed]),
                score_weights: weight(&mut rng, &[2 * cfg.d_embed]),
            },
            cell: CellParams {
                update: gate(&mut rng),
                reset: gate(&mut rng),
                candidate: gate(&mut rng),
            },
        })
        .collect();

    let head = HeadParams {
        weight: weight(&mut rng, &[d_h, cfg.t_out * cfg.channels]),
        bias: uniform(&mut rng, &[cfg.t_out * cfg.channels], 1.0 / (d_h as f64).sqrt()),
    };

    Ok(ModelParams {
        input_w,
        input_b,
        encoder,
        masks,
        static_graph,
        layers,
        head,
    })
}

// ── Graph convolution ────────────────────────────────────────────────

/// Node-adaptive graph convolution: aggregate with (I + A), then apply a
/// per-node weight matrix generated from the node embedding.
///
/// `x` is [B, N, d_in]; `adj` is [N, N] or [B, N, N]; `embed` is [N, d_e] or
/// [B, N, d_e]. Output [B, N, d_out].
pub fn graph_conv(
    tape: &mut Tape,
    x: TensorId,
    adj: TensorId,
    embed: TensorId,
    pool_w: TensorId,
    pool_b: TensorId,
) -> Result<TensorId> {
    let (b, n, d_in) = match tape.shape(x) {
        [b, n, d] => (*b, *n, *d),
        s => return Err(NumError::Dim(format!("graph_conv input must be [B, N, d], got {s:?}"))),
    };
    let d_out = tape.shape(pool_b)[1];
    if tape.shape(pool_w)[1] != d_in * d_out {
        return Err(NumError::Dim(format!(
            "weight pool {:?} does not generate [{d_in} x {d_out}] node maps",
            tape.shape(pool_w)
        )));
    }
    let agg = {
        let ax = tape.matmul(adj, x)?;
        tape.add(x, ax)?
    };
    let w = tape.matmul(embed, pool_w)?; // [(B,) N, d_in * d_out]
    let w_shape: Vec<usize> = if tape.shape(w).len() == 2 {
        vec![n, d_in, d_out]
    } else {
        vec![b, n, d_in, d_out]
    };
    let w = tape.reshape(w, &w_shape)?;
    let rows = tape.reshape(agg, &[b, n, 1, d_in])?;
    let mapped = tape.matmul(rows, w)?; // [B, N, 1, d_out]
    let mapped = tape.reshape(mapped, &[b, n, d_out])?;
    let bias = tape.matmul(embed, pool_b)?; // [(B,) N, d_out]
    tape.add(mapped, bias)
}

// ── Cell ─────────────────────────────────────────────────────────────

fn gate_context(gate: &str, e: NumError) -> NumError {
    match e {
        NumError::NonFinite(what) => NumError::NonFinite(format!("{gate}: {what}")),
        other => other,
    }
}

struct GateInput {
    a_static: TensorId,
    a_dynamic: TensorId,
    e_static: TensorId,
    e_dynamic: TensorId,
}

fn dual_conv(tape: &mut Tape, x: TensorId, g: &GateInput, p: &GateIds) -> Result<TensorId> {
    let s = graph_conv(tape, x, g.a_static, g.e_static, p.static_pool_w, p.static_pool_b)?;
    let d = graph_conv(tape, x, g.a_dynamic, g.e_dynamic, p.dynamic_pool_w, p.dynamic_pool_b)?;
    let cat = tape.concat(&[s, d], 2)?;
    tape.matmul(cat, p.fusion)
}

/// One recurrent step. `x_t` is the layer input at step t, [B, N, d_model];
/// `h_prev` is [B, N, d_hidden]. Gate preactivations fuse a static-graph and
/// a dynamic-graph convolution; the update is the standard convex blend.
#[allow(clippy::too_many_arguments)]
pub fn cell_step(
    tape: &mut Tape,
    x_t: TensorId,
    h_prev: TensorId,
    a_static: TensorId,
    a_dynamic: TensorId,
    e_static: TensorId,
    e_dynamic: TensorId,
    cell: &CellIds,
) -> Result<TensorId> {
    let g = GateInput { a_static, a_dynamic, e_static, e_dynamic };
    let joint = tape.concat(&[x_t, h_prev], 2)?;

    let z = (|| -> Result<TensorId> {
        let pre = dual_conv(tape, joint, &g, &cell.update)?;
        tape.sigmoid(pre)
    })()
    .map_err(|e| gate_context("update gate", e))?;

    let r = (|| -> Result<TensorId> {
        let pre = dual_conv(tape, joint, &g, &cell.reset)?;
        tape.sigmoid(pre)
    })()
    .map_err(|e| gate_context("reset gate", e))?;

    let c = (|| -> Result<TensorId> {
        let gated = tape.mul(r, h_prev)?;
        let joint_c = tape.concat(&[x_t, gated], 2)?;
        let pre = dual_conv(tape, joint_c, &g, &cell.candidate)?;
        tape.tanh(pre)
    })()
    .map_err(|e| gate_context("candidate state", e))?;

    let keep = tape.mul(z, h_prev)?;
    let gain = {
        let neg = tape.scale(z, -1.0)?;
        let one_minus = tape.add_scalar(neg, 1.0)?;
        tape.mul(one_minus, c)?
    };
    tape.add(keep, gain).map_err(|e| gate_context("state update", e))
}

// ── Forward ──────────────────────────────────────────────────────────

/// Constant graph structure shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphSupports {
    /// Union support for dynamic graphs, [N, N] binary.
    pub mask: Tensor,
    /// Row-normalized topology for the ablation fallbacks.
    pub topo_norm: Tensor,
}

impl GraphSupports {
    pub fn from_graphs(g: &GraphSet) -> Self {
        GraphSupports {
            mask: dynamic_mask(g),
            topo_norm: row_normalize(&g.a_topo),
        }
    }
}

/// Layer normalization over the trailing feature axis.
fn layer_norm(tape: &mut Tape, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
    let nd = tape.shape(x).len();
    let mu = tape.mean_axis(x, nd - 1)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, nd - 1)?;
    let var = tape.add_scalar(var, 1e-8)?;
    let sigma = tape.sqrt(var)?;
    let unit = tape.div(centered, sigma)?;
    let scaled = tape.mul(unit, gamma)?;
    tape.add(scaled, beta)
}

/// Inverted-dropout mask as a constant; `None` during evaluation.
fn apply_dropout(tape: &mut Tape, x: TensorId, p: f64, rng: &mut ChaCha8Rng) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let keep = 1.0 - p;
    let data: Vec<f64> = (0..numel)
        .map(|_| if rng.random_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant(data, &shape)?;
    tape.mul(x, mask)
}

/// Full model forward pass. Returns de-normalized predictions of shape
/// [B, t_out, N, C].
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    ids: &ModelIds,
    cfg: &ModelConfig,
    batch: &ForecastBatch,
    supports: &GraphSupports,
    ablation: Ablation,
    norm: &Normalization,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    let (b, t_in, n, c) = (batch.batch, batch.t_in, cfg.n_nodes, cfg.channels);
    if batch.x.shape != [b, t_in, n, c] {
        return Err(NumError::Dim(format!(
            "batch shape {:?} does not match configuration",
            batch.x.shape
        )));
    }
    let d = cfg.d_model;

    // Input projection to the model width.
    let x = tape.leaf(&batch.x);
    let mut h_seq = {
        let proj = tape.matmul(x, ids.input_w)?;
        tape.add(proj, ids.input_b)? // [B, T, N, D]
    };

    // Attention encoder with positional encoding, unless ablated away.
    if !ablation.skip_attention() {
        let pe = positional_encoding(t_in, d)?;
        let pe = tape.constant(pe.data, &[t_in, 1, d])?;
        h_seq = tape.add(h_seq, pe)?;
        let masks = if ablation.use_time_mask() {
            Some(mask_matrices(tape, &ids.masks, &batch.tod, &batch.dow, b, t_in)?)
        } else {
            None
        };
        for layer in &ids.encoder {
            let mut attn = etpmsa(tape, h_seq, masks, &layer.attention)?;
            if cfg.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    attn = apply_dropout(tape, attn, cfg.dropout, rng)?;
                }
            }
            let res = tape.add(h_seq, attn)?;
            h_seq = layer_norm(tape, res, layer.ln_gamma, layer.ln_beta)?;
        }
    }

    // Static graphs and per-step node embeddings for the whole window.
    let (static_graphs, static_embeds) =
        ablation_graph(tape, &ids.static_graph, ablation.static_kind(), &supports.topo_norm)?;
    let support_mask = tape.leaf(&supports.mask);
    let topo_norm = tape.leaf(&supports.topo_norm);

    // Recurrent stack. Each layer consumes the previous layer's per-step
    // outputs; the first consumes the encoder sequence.
    let d_h = cfg.d_hidden();
    let mut step_inputs: Vec<TensorId> = (0..t_in)
        .map(|t| {
            let slice = tape.narrow(h_seq, 1, t, 1)?;
            tape.reshape(slice, &[b, n, d])
        })
        .collect::<Result<_>>()?;

    let e_embed_width = cfg.d_embed;
    for layer in &ids.layers {
        let mut outputs = Vec::with_capacity(t_in);
        let mut h = tape.constant(vec![0.0; b * n * d_h], &[b, n, d_h])?;
        for (t, &x_t) in step_inputs.iter().enumerate() {
            let a_static = {
                let g = tape.narrow(static_graphs, 0, t, 1)?;
                tape.reshape(g, &[n, n])?
            };
            let e_static = {
                let e = tape.narrow(static_embeds, 0, t, 1)?;
                tape.reshape(e, &[n, e_embed_width])?
            };
            let (a_dynamic, e_dynamic) = if ablation.topology_dynamic() {
                let mapped = tape.matmul(x_t, layer.dynamic.feature_map)?;
                (topo_norm, mapped)
            } else {
                dynamic_graph_at(tape, &layer.dynamic, x_t, support_mask)?
            };
            let h_prev = if ablation.no_recurrence() {
                tape.constant(vec![0.0; b * n * d_h], &[b, n, d_h])?
            } else {
                h
            };
            h = if ablation.no_recurrence() {
                // Feed-forward fallback: the candidate path alone.
                let joint = tape.concat(&[x_t, h_prev], 2)?;
                let g = GateInput { a_static, a_dynamic, e_static, e_dynamic };
                let pre = dual_conv(tape, joint, &g, &layer.cell.candidate)?;
                tape.tanh(pre)?
            } else {
                cell_step(tape, x_t, h_prev, a_static, a_dynamic, e_static, e_dynamic, &layer.cell)?
            };
            outputs.push(h);
        }
        step_inputs = outputs;
    }

    // One-shot multi-horizon head on the final hidden state.
    let h_last = *step_inputs.last().expect("at least one input step");
    let out = tape.matmul(h_last, ids.head_w)?; // [B, N, t_out * C]
    let out = tape.add(out, ids.head_b)?;
    let out = tape.transpose_last2(out)?; // [B, t_out * C, N]
    let out = tape.reshape(out, &[b, batch.t_out, c, n])?;
    let out = tape.transpose_last2(out)?; // [B, t_out, N, C]

    // De-normalize to raw scale.
    let std = tape.constant(norm.std.clone(), &[c])?;
    let mean = tape.constant(norm.mean.clone(), &[c])?;
    let scaled = tape.mul(out, std)?;
    tape.add(scaled, mean)
}

// ── Checkpoints ──────────────────────────────────────────────────────

/// Save every named tensor: a manifest of (name, shape) pairs followed by the
/// packed f64 payloads, all little-endian.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> std::io::Result<()> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    params.visit(&mut |name, t| entries.push((name, t)));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in &entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in &entries {
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Load a checkpoint into parameters freshly shaped from `cfg`. Names and
/// shapes must match the manifest exactly.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path).map_err(|e| NumError::Contract(format!("checkpoint: {e}")))?);
    let mut u64_buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut u64_buf)
            .map_err(|_| NumError::Contract("checkpoint truncated".into()))?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let count = read_u64(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| NumError::Contract("checkpoint truncated".into()))?;
        let name = String::from_utf8(name).map_err(|_| NumError::Contract("bad name encoding".into()))?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        manifest.push((name, shape));
    }
    let mut params = init_params(cfg, 0)?;
    let mut idx = 0usize;
    let mut failure: Option<String> = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        if idx >= manifest.len() {
            failure = Some(format!("checkpoint is missing tensor {name}"));
            return;
        }
        let (m_name, m_shape) = &manifest[idx];
        if *m_name != name || *m_shape != t.shape {
            failure = Some(format!(
                "checkpoint entry {idx} is {m_name} {m_shape:?}, expected {name} {:?}",
                t.shape
            ));
            return;
        }
        let mut bytes = vec![0u8; t.numel() * 8];
        if r.read_exact(&mut bytes).is_err() {
            failure = Some("checkpoint payload truncated".into());
            return;
        }
        for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        idx += 1;
    });
    if let Some(msg) = failure {
        return Err(NumError::Contract(msg));
    }
    if idx != manifest.len() {
        return Err(NumError::Contract("checkpoint has extra tensors".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_and_window, synth_network, PreparedData};
    use crate::numcore::gradcheck_multi;
    use rand::Rng;
    use tempfile::tempdir;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            preset: "test".into(),
            encoder_layers: 1,
            decoder_layers: 1,
            batch: 2,
            heads: 2,
            d_model: 4,
            d_embed: 2,
            d_mask: 3,
            ctvgcrm_layers: 1,
            t_in: 4,
            t_out: 2,
            learning_rate: 1e-3,
            dropout: 0.0,
            n_nodes: 3,
            samples_per_day: 8,
            channels: 1,
        }
    }

    fn tiny_prepared(seed: u64) -> (PreparedData, GraphSet) {
        let (ds, graphs) = synth_network(3, 2, seed, 180, 0.5, 0.4).unwrap();
        let pd = split_and_window(ds, (0.6, 0.2, 0.2), 4, 2).unwrap();
        (pd, graphs)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).unwrap()
    }

    #[test]
    fn init_is_deterministic_by_seed() {
        let cfg = tiny_config();
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        let mut equal = true;
        a.visit(&mut |name, t| {
            let mut found = false;
            b.visit(&mut |name2, t2| {
                if name == name2 {
                    found = true;
                    if t.data != t2.data {
                        equal = false;
                    }
                }
            });
            assert!(found, "missing {name}");
        });
        assert!(equal);
        let c = init_params(&cfg, 6).unwrap();
        assert_ne!(a.input_w.data, c.input_w.data);
    }

    #[test]
    fn bind_order_matches_visit_order() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        let mut shapes = Vec::new();
        params.visit(&mut |_, t| shapes.push(t.shape.clone()));
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let ordered = ids.ordered();
        assert_eq!(shapes.len(), ordered.len());
        for (shape, id) in shapes.iter().zip(&ordered) {
            assert_eq!(shape.as_slice(), tape.shape(*id));
        }
        // from_ordered reproduces the same wiring.
        let rebuilt = ModelIds::from_ordered(&cfg, &ordered).unwrap();
        assert_eq!(rebuilt.ordered(), ordered);
    }

    #[test]
    fn pems08_parameter_count_is_pinned() {
        // Counting oracle over the declared shapes.
        let cfg = ModelConfig::from_preset("pems08", 170, 288, 1).unwrap();
        let (n, nn, d, h, e, dm, t, tau, c, layers) =
            (170usize, 288usize, 64usize, 8usize, 5usize, 15usize, 12usize, 12usize, 1usize, 2usize);
        let input = c * d + d;
        let encoder = h * 3 * (d * (d / h)) + d * d + 2 * d;
        let masks = n * dm + nn * dm + 7 * dm;
        let statics = n * e + t * n * e + t * t;
        let conv_in = 2 * d;
        let per_gate = 2 * (e * conv_in * d + e * d) + conv_in * d;
        let per_layer = d * e + 2 * e + 3 * per_gate;
        let head = d * tau * c + tau * c;
        let expected = input + encoder + masks + statics + layers * per_layer + head;
        assert_eq!(expected, 580_761); // regression constant
        let params = init_params(&cfg, 0).unwrap();
        assert_eq!(params.param_count(), expected);
    }

    #[test]
    fn near_zero_step_bias_keeps_initial_graphs_nearly_time_invariant() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let ids = params.static_graph.bind(&mut tape);
        let graphs = crate::tvgraph::per_step_graphs(&mut tape, &ids).unwrap();
        let n = cfg.n_nodes;
        let data = tape.data(graphs);
        let first = &data[..n * n];
        for t in 1..cfg.t_in {
            for (a, b) in first.iter().zip(&data[t * n * n..(t + 1) * n * n]) {
                assert!((a - b).abs() < 0.1);
            }
        }
    }

    #[test]
    fn graph_conv_without_aggregation_is_a_per_node_map() {
        // A = 0 leaves (I + A)X = X; with shared embeddings the map is the
        // same for every node.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, d_in, d_out, d_e) = (2usize, 3usize, 2usize, 1usize);
        let pool_w = rand_tensor(&mut rng, &[d_e, d_in * d_out], -1.0, 1.0);
        let pool_b = rand_tensor(&mut rng, &[d_e, d_out], -1.0, 1.0);
        let row = [0.5, -1.0, 2.0];
        let x = Tensor::new([row, row].concat(), &[1, n, d_in]).unwrap();
        let embed = Tensor::filled(&[n, d_e], 1.0);
        let mut tape = Tape::new();
        let (xi, ai, ei, wi, bi) = (
            tape.leaf(&x),
            tape.leaf(&Tensor::zeros(&[n, n])),
            tape.leaf(&embed),
            tape.leaf(&pool_w),
            tape.leaf(&pool_b),
        );
        let out = graph_conv(&mut tape, xi, ai, ei, wi, bi).unwrap();
        let expect: Vec<f64> = (0..d_out)
            .map(|o| (0..d_in).map(|k| row[k] * pool_w.data[k * d_out + o]).sum::<f64>() + pool_b.data[o])
            .collect();
        for node in 0..n {
            for o in 0..d_out {
                assert!((tape.data(out)[node * d_out + o] - expect[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_conv_matches_per_node_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, n, d_in, d_out, d_e) = (2usize, 2usize, 3usize, 2usize, 2usize);
        let x = rand_tensor(&mut rng, &[b, n, d_in], -1.0, 1.0);
        let adj = rand_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let embed = rand_tensor(&mut rng, &[n, d_e], -1.0, 1.0);
        let pool_w = rand_tensor(&mut rng, &[d_e, d_in * d_out], -1.0, 1.0);
        let pool_b = rand_tensor(&mut rng, &[d_e, d_out], -1.0, 1.0);

        let mut expect = vec![0.0; b * n * d_out];
        for bi in 0..b {
            // s = x + A x
            let mut s = vec![0.0; n * d_in];
            for i in 0..n {
                for k in 0..d_in {
                    s[i * d_in + k] = x.data[(bi * n + i) * d_in + k];
                    for j in 0..n {
                        s[i * d_in + k] += adj.data[i * n + j] * x.data[(bi * n + j) * d_in + k];
                    }
                }
            }
            for i in 0..n {
                // per-node weight and bias from the pools
                for o in 0..d_out {
                    let mut acc = 0.0;
                    for k in 0..d_in {
                        let mut w = 0.0;
                        for e in 0..d_e {
                            w += embed.data[i * d_e + e] * pool_w.data[e * (d_in * d_out) + k * d_out + o];
                        }
                        acc += s[i * d_in + k] * w;
                    }
                    for e in 0..d_e {
                        acc += embed.data[i * d_e + e] * pool_b.data[e * d_out + o];
                    }
                    expect[(bi * n + i) * d_out + o] = acc;
                }
            }
        }

        let mut tape = Tape::new();
        let (xi, ai, ei, wi, bi_) = (
            tape.leaf(&x),
            tape.leaf(&adj),
            tape.leaf(&embed),
            tape.leaf(&pool_w),
            tape.leaf(&pool_b),
        );
        let out = graph_conv(&mut tape, xi, ai, ei, wi, bi_).unwrap();
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    struct CellFixture {
        x: Tensor,
        h: Tensor,
        a_static: Tensor,
        a_dynamic: Tensor,
        e_static: Tensor,
        e_dynamic: Tensor,
        cell: CellParams,
    }

    fn cell_fixture(seed: u64) -> CellFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (2usize, 2usize);
        let conv_in = 2 * d;
        let gate = |rng: &mut ChaCha8Rng| GateParams {
            static_conv: ConvParams {
                pool_w: rand_tensor(rng, &[1, conv_in * d], -0.6, 0.6),
                pool_b: rand_tensor(rng, &[1, d], -0.6, 0.6),
            },
            dynamic_conv: ConvParams {
                pool_w: rand_tensor(rng, &[1, conv_in * d], -0.6, 0.6),
                pool_b: rand_tensor(rng, &[1, d], -0.6, 0.6),
            },
            fusion: rand_tensor(rng, &[2 * d, d], -0.6, 0.6),
        };
        CellFixture {
            x: rand_tensor(&mut rng, &[1, n, d], -1.0, 1.0),
            h: rand_tensor(&mut rng, &[1, n, d], -1.0, 1.0),
            a_static: rand_tensor(&mut rng, &[n, n], 0.0, 0.5),
            a_dynamic: rand_tensor(&mut rng, &[1, n, n], 0.0, 0.5),
            e_static: rand_tensor(&mut rng, &[n, 1], -1.0, 1.0),
            e_dynamic: rand_tensor(&mut rng, &[1, n, 1], -1.0, 1.0),
            cell: CellParams {
                update: gate(&mut rng),
                reset: gate(&mut rng),
                candidate: gate(&mut rng),
            },
        }
    }

    fn run_cell(f: &CellFixture) -> Vec<f64> {
        let mut tape = Tape::new();
        let cell = CellIds {
            update: GateIds::bind(&f.cell.update, &mut tape),
            reset: GateIds::bind(&f.cell.reset, &mut tape),
            candidate: GateIds::bind(&f.cell.candidate, &mut tape),
        };
        let (x, h, as_, ad, es, ed) = (
            tape.leaf(&f.x),
            tape.leaf(&f.h),
            tape.leaf(&f.a_static),
            tape.leaf(&f.a_dynamic),
            tape.leaf(&f.e_static),
            tape.leaf(&f.e_dynamic),
        );
        let out = cell_step(&mut tape, x, h, as_, ad, es, ed, &cell).unwrap();
        tape.data(out).to_vec()
    }

    #[test]
    fn cell_matches_fully_expanded_oracle() {
        let f = cell_fixture(11);
        let (n, d) = (2usize, 2usize);
        let conv_in = 2 * d;

        // Expression-tree oracle in plain arrays.
        let conv = |x4: &[f64], adj: &[f64], adj_batched: bool, e: &[f64], p: &ConvParams| -> Vec<f64> {
            let mut s = vec![0.0; n * conv_in];
            for i in 0..n {
                for k in 0..conv_in {
                    s[i * conv_in + k] = x4[i * conv_in + k];
                    for j in 0..n {
                        let a = if adj_batched { adj[i * n + j] } else { adj[i * n + j] };
                        s[i * conv_in + k] += a * x4[j * conv_in + k];
                    }
                }
            }
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for o in 0..d {
                    let mut acc = 0.0;
                    for k in 0..conv_in {
                        acc += s[i * conv_in + k] * e[i] * p.pool_w.data[k * d + o];
                    }
                    out[i * d + o] = acc + e[i] * p.pool_b.data[o];
                }
            }
            out
        };
        let fuse = |a: &[f64], b: &[f64], w: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for o in 0..d {
                    for m in 0..d {
                        out[i * d + o] += a[i * d + m] * w.data[m * d + o];
                        out[i * d + o] += b[i * d + m] * w.data[(d + m) * d + o];
                    }
                }
            }
            out
        };
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());

        let mut joint = vec![0.0; n * conv_in];
        for i in 0..n {
            for k in 0..d {
                joint[i * conv_in + k] = f.x.data[i * d + k];
                joint[i * conv_in + d + k] = f.h.data[i * d + k];
            }
        }
        let gate_pre = |x4: &[f64], g: &GateParams| -> Vec<f64> {
            let s = conv(x4, &f.a_static.data, false, &f.e_static.data, &g.static_conv);
            let ddd = conv(x4, &f.a_dynamic.data, true, &f.e_dynamic.data, &g.dynamic_conv);
            fuse(&s, &ddd, &g.fusion)
        };
        let z: Vec<f64> = gate_pre(&joint, &f.cell.update).iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = gate_pre(&joint, &f.cell.reset).iter().map(|&v| sigmoid(v)).collect();
        let mut joint_c = vec![0.0; n * conv_in];
        for i in 0..n {
            for k in 0..d {
                joint_c[i * conv_in + k] = f.x.data[i * d + k];
                joint_c[i * conv_in + d + k] = r[i * d + k] * f.h.data[i * d + k];
            }
        }
        let c: Vec<f64> = gate_pre(&joint_c, &f.cell.candidate).iter().map(|&v| v.tanh()).collect();
        let expect: Vec<f64> = (0..n * d)
            .map(|i| z[i] * f.h.data[i] + (1.0 - z[i]) * c[i])
            .collect();

        let got = run_cell(&f);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn saturated_update_gate_freezes_or_replaces_state() {
        let mut f = cell_fixture(12);
        let (n, d) = (2usize, 2usize);
        let conv_in = 2 * d;
        f.e_static = Tensor::filled(&[n, 1], 1.0);
        f.e_dynamic = Tensor::filled(&[1, n, 1], 1.0);

        // Forced z = 1: the state passes through bitwise.
        f.cell.update = GateParams {
            static_conv: ConvParams {
                pool_w: Tensor::zeros(&[1, conv_in * d]),
                pool_b: Tensor::filled(&[1, d], 100.0),
            },
            dynamic_conv: ConvParams {
                pool_w: Tensor::zeros(&[1, conv_in * d]),
                pool_b: Tensor::filled(&[1, d], 100.0),
            },
            fusion: Tensor::filled(&[2 * d, d], 1.0),
        };
        let got = run_cell(&f);
        assert_eq!(got, f.h.data);

        // Forced z = 0: the state is replaced by the candidate.
        f.cell.update.static_conv.pool_b = Tensor::filled(&[1, d], -100.0);
        f.cell.update.dynamic_conv.pool_b = Tensor::filled(&[1, d], -100.0);
        let got = run_cell(&f);
        // Candidate oracle: z ~ 0 so h' ~ c = tanh(candidate path).
        let mut tape = Tape::new();
        let cell = CellIds {
            update: GateIds::bind(&f.cell.update, &mut tape),
            reset: GateIds::bind(&f.cell.reset, &mut tape),
            candidate: GateIds::bind(&f.cell.candidate, &mut tape),
        };
        let (x, h, as_, ad, es, ed) = (
            tape.leaf(&f.x),
            tape.leaf(&f.h),
            tape.leaf(&f.a_static),
            tape.leaf(&f.a_dynamic),
            tape.leaf(&f.e_static),
            tape.leaf(&f.e_dynamic),
        );
        let g = GateInput { a_static: as_, a_dynamic: ad, e_static: es, e_dynamic: ed };
        let joint = tape.concat(&[x, h], 2).unwrap();
        let r_pre = dual_conv(&mut tape, joint, &g, &cell.reset).unwrap();
        let r = tape.sigmoid(r_pre).unwrap();
        let gated = tape.mul(r, h).unwrap();
        let joint_c = tape.concat(&[x, gated], 2).unwrap();
        let pre = dual_conv(&mut tape, joint_c, &g, &cell.candidate).unwrap();
        let c = tape.tanh(pre).unwrap();
        for (a, b) in got.iter().zip(tape.data(c)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn state_update_respects_the_convex_bound() {
        for seed in 0..20 {
            let f = cell_fixture(100 + seed);
            let got = run_cell(&f);
            // helper: recompute candidate with z forced to 0 is awkward here;
            // the convex bound |h'| <= max(|h|, 1) holds since |c| <= 1.
            for (i, &v) in got.iter().enumerate() {
                let bound = f.h.data[i].abs().max(1.0) + 1e-12;
                assert!(v.abs() <= bound, "entry {i}: {v} exceeds {bound}");
            }
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_config();
        let (pd, graphs) = tiny_prepared(41);
        let params = init_params(&cfg, 2).unwrap();
        let supports = GraphSupports::from_graphs(&graphs);
        let batch = pd.make_batch(&pd.train[..2]);

        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let out = forward(&mut tape, &ids, &cfg, &batch, &supports, Ablation::Full, &pd.norm, None).unwrap();
            assert_eq!(tape.shape(out), &[2, 2, 3, 1]);
            tape.data(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_ablation_changes_the_output() {
        let cfg = tiny_config();
        let (pd, graphs) = tiny_prepared(42);
        let params = init_params(&cfg, 3).unwrap();
        let supports = GraphSupports::from_graphs(&graphs);
        let batch = pd.make_batch(&pd.train[..2]);

        let run = |ab: Ablation| -> Vec<f64> {
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let out = forward(&mut tape, &ids, &cfg, &batch, &supports, ab, &pd.norm, None).unwrap();
            tape.data(out).to_vec()
        };
        let full = run(Ablation::Full);
        for ab in [Ablation::WoTm, Ablation::WoCg, Ablation::WoBc, Ablation::WoEtpmsa, Ablation::WoTv, Ablation::WoTr] {
            assert_ne!(full, run(ab), "{} output coincides with full", ab.name());
        }
    }

    #[test]
    fn zero_head_predicts_the_training_mean() {
        let cfg = tiny_config();
        let (pd, graphs) = tiny_prepared(43);
        let mut params = init_params(&cfg, 4).unwrap();
        params.head.weight = Tensor::zeros(&[cfg.d_model, cfg.t_out * cfg.channels]).with_grad();
        params.head.bias = Tensor::zeros(&[cfg.t_out * cfg.channels]).with_grad();
        let supports = GraphSupports::from_graphs(&graphs);
        let batch = pd.make_batch(&pd.train[..1]);
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let out = forward(&mut tape, &ids, &cfg, &batch, &supports, Ablation::Full, &pd.norm, None).unwrap();
        for &v in tape.data(out) {
            assert_eq!(v, pd.norm.mean[0]);
        }
    }

    #[test]
    fn dropout_perturbs_training_forward_only() {
        let mut cfg = tiny_config();
        let (pd, graphs) = tiny_prepared(44);
        let params = init_params(&cfg, 6).unwrap();
        let supports = GraphSupports::from_graphs(&graphs);
        let batch = pd.make_batch(&pd.train[..2]);
        let run = |cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>| -> Vec<f64> {
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let out = forward(&mut tape, &ids, cfg, &batch, &supports, Ablation::Full, &pd.norm, rng).unwrap();
            tape.data(out).to_vec()
        };
        let clean = run(&cfg, None);
        cfg.dropout = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dropped = run(&cfg, Some(&mut rng));
        assert_ne!(clean, dropped);
        // Same dropout seed reproduces the same perturbation.
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dropped, run(&cfg, Some(&mut rng2)));
        // Evaluation path (no rng) ignores the probability.
        assert_eq!(clean, run(&cfg, None));
    }

    #[test]
    fn wo_bc_combines_both_single_switches() {
        // Removing masks and coupling together must agree with the masked
        // path disabled inside the uncoupled variant: outputs of wo-bc match
        // wo-cg when the mask tables are forced to the identity-free path.
        let cfg = tiny_config();
        let (pd, graphs) = tiny_prepared(45);
        let params = init_params(&cfg, 8).unwrap();
        let supports = GraphSupports::from_graphs(&graphs);
        let batch = pd.make_batch(&pd.train[..1]);
        let run = |ab: Ablation| -> Vec<f64> {
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let out = forward(&mut tape, &ids, &cfg, &batch, &supports, ab, &pd.norm, None).unwrap();
            tape.data(out).to_vec()
        };
        // wo-bc differs from each single switch on generic parameters...
        let bc = run(Ablation::WoBc);
        assert_ne!(bc, run(Ablation::WoTm));
        assert_ne!(bc, run(Ablation::WoCg));
        // ...but equals wo-cg when the masks were already plain (tables that
        // reproduce the unmasked path would be needed for exact equality, so
        // check the flag wiring directly instead).
        assert!(!Ablation::WoBc.use_time_mask());
        assert_eq!(Ablation::WoBc.static_kind(), crate::tvgraph::StaticGraphKind::NoCoupling);
        assert!(Ablation::WoTm.static_kind() == crate::tvgraph::StaticGraphKind::Full);
        assert!(!Ablation::WoTm.use_time_mask());
        assert!(Ablation::WoCg.use_time_mask());
    }

    #[test]
    fn multi_channel_forward_and_loss_are_consistent() {
        // Two channels with very different scales: the head layout and the
        // per-channel de-normalization must agree with the target layout.
        let (steps, nodes, channels) = (40usize, 2usize, 2usize);
        let mut values = Vec::new();
        for t in 0..steps {
            for node in 0..nodes {
                values.push(100.0 + (t * 7 % 13) as f64 + node as f64);
                values.push(0.5 + 0.01 * ((t * 3 % 11) as f64) + node as f64 * 0.1);
            }
        }
        let ds = crate::data::SeriesDataset::from_values(values, steps, nodes, channels, 360, 0).unwrap();
        let pd = crate::data::split_and_window(ds, (0.6, 0.2, 0.2), 4, 3).unwrap();
        let cfg = ModelConfig {
            preset: "c2".into(),
            encoder_layers: 1,
            decoder_layers: 1,
            batch: 2,
            heads: 2,
            d_model: 4,
            d_embed: 2,
            d_mask: 2,
            ctvgcrm_layers: 1,
            t_in: 4,
            t_out: 3,
            learning_rate: 1e-3,
            dropout: 0.0,
            n_nodes: nodes,
            samples_per_day: 4,
            channels,
        };
        let topo = Tensor::eye(nodes);
        let graphs = GraphSet::new(topo, Tensor::eye(nodes)).unwrap();
        let supports = GraphSupports::from_graphs(&graphs);
        let batch = pd.make_batch(&pd.train[..2]);

        // Zeroed head: channel c must predict channel c's training mean.
        let mut params = init_params(&cfg, 3).unwrap();
        params.head.weight = Tensor::zeros(&[cfg.d_model, cfg.t_out * channels]).with_grad();
        params.head.bias = Tensor::zeros(&[cfg.t_out * channels]).with_grad();
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let out = forward(&mut tape, &ids, &cfg, &batch, &supports, Ablation::Full, &pd.norm, None).unwrap();
        assert_eq!(tape.shape(out), &[2, 3, nodes, channels]);
        for (i, &v) in tape.data(out).iter().enumerate() {
            assert_eq!(v, pd.norm.mean[i % channels]);
        }

        // A one-hot head bias lands on exactly one (step, channel) cell.
        let mut params = init_params(&cfg, 3).unwrap();
        params.head.weight = Tensor::zeros(&[cfg.d_model, cfg.t_out * channels]).with_grad();
        let mut bias = Tensor::zeros(&[cfg.t_out * channels]);
        let (target_step, target_chan) = (1usize, 1usize);
        bias.data[target_step * channels + target_chan] = 2.5;
        params.head.bias = bias.with_grad();
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let out = forward(&mut tape, &ids, &cfg, &batch, &supports, Ablation::Full, &pd.norm, None).unwrap();
        let d = tape.data(out);
        for b in 0..2 {
            for s in 0..cfg.t_out {
                for n in 0..nodes {
                    for c in 0..channels {
                        let v = d[((b * cfg.t_out + s) * nodes + n) * channels + c];
                        let expect = if s == target_step && c == target_chan {
                            pd.norm.denormalize(2.5, c)
                        } else {
                            pd.norm.mean[c]
                        };
                        assert!((v - expect).abs() < 1e-12, "cell (b{b}, s{s}, n{n}, c{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 9).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path, &cfg).unwrap();
        let mut entries = Vec::new();
        params.visit(&mut |name, t| entries.push((name, t.data.clone())));
        let mut same = true;
        loaded.visit(&mut |name, t| {
            let (expect_name, expect_data) = &entries.remove(0);
            if *expect_name != name || *expect_data != t.data {
                same = false;
            }
        });
        assert!(same);
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = ModelConfig::from_preset("pems08", 170, 288, 1).unwrap();
        let text = cfg.to_kv();
        let back = ModelConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(ModelConfig::from_kv("nonsense").is_err());
        assert!(ModelConfig::from_kv("batch=abc").is_err());
    }

    #[test]
    fn preset_octets_match_the_published_table() {
        assert_eq!(ModelConfig::preset_octet("pems08").unwrap(), [1, 1, 16, 8, 64, 5, 15, 2]);
        assert_eq!(ModelConfig::preset_octet("pems04").unwrap(), [1, 1, 4, 8, 64, 6, 18, 2]);
        assert_eq!(ModelConfig::preset_octet("pems03").unwrap(), [1, 1, 16, 8, 64, 8, 8, 2]);
        assert_eq!(ModelConfig::preset_octet("pems07").unwrap(), [1, 1, 8, 8, 64, 10, 24, 2]);
        assert!(ModelConfig::preset_octet("pems99").is_none());
    }

    #[test]
    fn gradcheck_small_forward() {
        let cfg = ModelConfig {
            preset: "grad".into(),
            encoder_layers: 1,
            decoder_layers: 1,
            batch: 1,
            heads: 2,
            d_model: 4,
            d_embed: 2,
            d_mask: 2,
            ctvgcrm_layers: 1,
            t_in: 2,
            t_out: 1,
            learning_rate: 1e-3,
            dropout: 0.0,
            n_nodes: 2,
            samples_per_day: 8,
            channels: 1,
        };
        let (ds, graphs) = synth_network(2, 2, 77, 180, 0.5, 0.3).unwrap();
        let pd = split_and_window(ds, (0.6, 0.2, 0.2), 2, 1).unwrap();
        let supports = GraphSupports::from_graphs(&graphs);
        let batch = pd.make_batch(&pd.train[..1]);
        let params = init_params(&cfg, 5).unwrap();
        let mut flat = Vec::new();
        params.visit(&mut |_, t| flat.push(t.clone()));
        let norm = pd.norm.clone();

        let err = gradcheck_multi(
            |tape, ids| {
                let mids = ModelIds::from_ordered(&cfg, ids)?;
                let out = forward(tape, &mids, &cfg, &batch, &supports, Ablation::Full, &norm, None)?;
                let sq = tape.mul(out, out)?;
                let s = tape.sum_all(sq)?;
                tape.scale(s, 1e-4) // keep the scalar small against raw-scale outputs
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
