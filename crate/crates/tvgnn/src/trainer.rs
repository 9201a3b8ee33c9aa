//! Optimization loop and evaluation: masked-MAE training with Adam, the
//! MAE/RMSE/MAPE metric set with per-horizon breakdown, early stopping on
//! validation MAE, and deterministic metric logging.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ctvgcru::{forward, init_params, save_checkpoint, Ablation, GraphSupports, ModelConfig, ModelParams};
use crate::data::{DataError, PreparedData};
use crate::graphs::GraphSet;
use crate::numcore::{NumError, Tape, Tensor, TensorId};

#[derive(Error, Debug)]
pub enum TrainerError {
    #[error("numeric error: {0}")]
    Num(#[from] NumError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training aborted at epoch {epoch}: non-finite loss; last good checkpoint retained")]
    NanLoss { epoch: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-3;

// ── Metrics ──────────────────────────────────────────────────────────

/// MAE / RMSE / MAPE(%) for one slice of predictions. MAPE is undefined
/// (None) when every target is masked by the zero threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

/// Overall metrics plus the per-horizon-step breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub overall: StepMetrics,
    pub per_step: Vec<StepMetrics>,
}

/// How a horizon group summarizes its steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizonMode {
    /// Mean of the per-step metrics over steps 1..=k.
    CumulativeMean,
    /// The single metric at step k.
    AtStep,
}

fn flat_metrics(pred: &[f64], target: &[f64], zero_threshold: f64) -> StepMetrics {
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut ape_sum = 0.0;
    let mut ape_count = 0usize;
    for (&p, &y) in pred.iter().zip(target) {
        let d = p - y;
        abs_sum += d.abs();
        sq_sum += d * d;
        if y.abs() > zero_threshold {
            ape_sum += (d / y).abs();
            ape_count += 1;
        }
    }
    StepMetrics {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        mape: if ape_count == 0 { None } else { Some(ape_sum / ape_count as f64 * 100.0) },
    }
}

/// Direct-formula metrics on raw-scale values. Shapes must match; with rank
/// >= 2 the second axis is treated as the prediction horizon.
pub fn metrics(pred: &Tensor, target: &Tensor, zero_threshold: f64) -> Result<MetricReport> {
    if pred.shape != target.shape {
        return Err(TrainerError::Invalid(format!(
            "metric shapes differ: {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    if pred.data.is_empty() {
        return Err(TrainerError::Invalid("metrics on an empty evaluation set".into()));
    }
    let overall = flat_metrics(&pred.data, &target.data, zero_threshold);
    let per_step = if pred.shape.len() >= 2 {
        let steps = pred.shape[1];
        let outer = pred.shape[0];
        let inner: usize = pred.shape[2..].iter().product();
        (0..steps)
            .map(|s| {
                let mut p = Vec::with_capacity(outer * inner);
                let mut y = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    let base = (o * steps + s) * inner;
                    p.extend_from_slice(&pred.data[base..base + inner]);
                    y.extend_from_slice(&target.data[base..base + inner]);
                }
                flat_metrics(&p, &y, zero_threshold)
            })
            .collect()
    } else {
        vec![overall]
    };
    Ok(MetricReport { overall, per_step })
}

impl MetricReport {
    /// Summary over the first `steps` horizon steps (clamped to the horizon).
    pub fn horizon_group(&self, steps: usize, mode: HorizonMode) -> StepMetrics {
        let k = steps.clamp(1, self.per_step.len());
        match mode {
            HorizonMode::AtStep => self.per_step[k - 1],
            HorizonMode::CumulativeMean => {
                let slice = &self.per_step[..k];
                let mean = |f: &dyn Fn(&StepMetrics) -> f64| slice.iter().map(f).sum::<f64>() / k as f64;
                let defined: Vec<f64> = slice.iter().filter_map(|s| s.mape).collect();
                StepMetrics {
                    mae: mean(&|s| s.mae),
                    rmse: mean(&|s| s.rmse),
                    mape: if defined.is_empty() {
                        None
                    } else {
                        Some(defined.iter().sum::<f64>() / defined.len() as f64)
                    },
                }
            }
        }
    }

    /// The 15/30/60-minute groups plus the whole-horizon average, in the
    /// published column order.
    pub fn table_groups(&self, mode: HorizonMode) -> [(&'static str, StepMetrics); 4] {
        let tau = self.per_step.len();
        [
            ("15min", self.horizon_group(3.min(tau), mode)),
            ("30min", self.horizon_group(6.min(tau), mode)),
            ("60min", self.horizon_group(12.min(tau), mode)),
            ("Average", self.horizon_group(tau, HorizonMode::CumulativeMean)),
        ]
    }

    /// Fixed-layout evaluation grid: four column groups, three metrics each.
    pub fn format_table(&self, label: &str, mode: HorizonMode) -> String {
        let groups = self.table_groups(mode);
        let fmt_mape = |m: Option<f64>| m.map(|v| format!("{v:.2}")).unwrap_or_else(|| "undef".into());
        let mut out = String::new();
        out.push_str(&format!("{:12}", "Model"));
        for (name, _) in &groups {
            out.push_str(&format!("| {name:<22}"));
        }
        out.push('\n');
        out.push_str(&format!("{:12}", ""));
        for _ in &groups {
            out.push_str(&format!("| {:<7}{:<8}{:<7}", "MAE", "MAPE(%)", "RMSE"));
        }
        out.push('\n');
        out.push_str(&format!("{label:<12}"));
        for (_, g) in &groups {
            out.push_str(&format!("| {:<7.2}{:<8}{:<7.2}", g.mae, fmt_mape(g.mape), g.rmse));
        }
        out.push('\n');
        out
    }

    /// One machine-readable CSV row.
    pub fn csv_row(&self, epoch: usize, split: &str) -> String {
        let f = |v: f64| format!("{v}");
        let m = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut cols = vec![
            epoch.to_string(),
            split.to_string(),
            f(self.overall.mae),
            f(self.overall.rmse),
            m(self.overall.mape),
        ];
        for (_, g) in self.table_groups(HorizonMode::CumulativeMean) {
            cols.push(f(g.mae));
            cols.push(f(g.rmse));
            cols.push(m(g.mape));
        }
        cols.join(",")
    }

    pub fn csv_header() -> &'static str {
        "epoch,split,mae,rmse,mape,mae_15,rmse_15,mape_15,mae_30,rmse_30,mape_30,mae_60,rmse_60,mape_60,mae_avg,rmse_avg,mape_avg"
    }
}

// ── Loss ─────────────────────────────────────────────────────────────

/// Mean absolute error on raw-scale predictions, excluding targets whose
/// magnitude falls below the zero threshold (the MAPE denominator rule).
pub fn masked_mae_loss(tape: &mut Tape, pred: TensorId, target: &Tensor, zero_threshold: f64) -> Result<TensorId> {
    let mask: Vec<f64> = target
        .data
        .iter()
        .map(|&y| if y.abs() > zero_threshold { 1.0 } else { 0.0 })
        .collect();
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Err(TrainerError::Invalid("every target entry is masked by the zero threshold".into()));
    }
    let y = tape.constant(target.data.clone(), &target.shape)?;
    let m = tape.constant(mask, &target.shape)?;
    let diff = tape.sub(pred, y)?;
    let dist = tape.abs(diff)?;
    let masked = tape.mul(dist, m)?;
    let total = tape.sum_all(masked)?;
    Ok(tape.scale(total, 1.0 / count)?)
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers aligned with `ModelParams::visit` order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &ModelParams) -> Self {
        let mut sizes = Vec::new();
        params.visit(&mut |_, t| sizes.push(t.numel()));
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Standard bias-corrected Adam update. `grads` is aligned with the visit
/// order; a missing gradient leaves that parameter's moments untouched.
pub fn adam_step(params: &mut ModelParams, grads: &[Option<Vec<f64>>], state: &mut AdamState, hyper: &AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let mut idx = 0usize;
    params.visit_mut(&mut |_, tensor| {
        if let Some(g) = grads.get(idx).and_then(|g| g.as_ref()) {
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            for ((p, &gi), (mi, vi)) in tensor.data.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
                *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
        idx += 1;
    });
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(TrainerError::Invalid(format!("unknown split {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn split_windows(pd: &PreparedData, split: Split) -> &[usize] {
    match split {
        Split::Train => &pd.train,
        Split::Val => &pd.val,
        Split::Test => &pd.test,
    }
}

/// Forward the model over a window list. Batches are independent and run in
/// parallel; outputs are concatenated in window order, so the result is
/// deterministic. Returns stacked (predictions, targets) of shape
/// [W, t_out, N, C].
pub fn predict_windows(
    cfg: &ModelConfig,
    params: &ModelParams,
    pd: &PreparedData,
    supports: &GraphSupports,
    windows: &[usize],
    ablation: Ablation,
) -> Result<(Tensor, Tensor)> {
    if windows.is_empty() {
        return Err(TrainerError::Invalid("no windows to evaluate".into()));
    }
    let chunks: Vec<&[usize]> = windows.chunks(cfg.batch.max(1)).collect();
    let results: Vec<std::result::Result<(Vec<f64>, Vec<f64>), NumError>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch = pd.make_batch(chunk);
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let out = forward(&mut tape, &ids, cfg, &batch, supports, ablation, &pd.norm, None)?;
            Ok((tape.data(out).to_vec(), batch.y.data))
        })
        .collect();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for r in results {
        let (p, y) = r?;
        preds.extend(p);
        targets.extend(y);
    }
    let shape = [windows.len(), cfg.t_out, cfg.n_nodes, cfg.channels];
    Ok((
        Tensor::new(preds, &shape).map_err(TrainerError::Num)?,
        Tensor::new(targets, &shape).map_err(TrainerError::Num)?,
    ))
}

/// Deterministic full-split evaluation with per-horizon breakdown.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams,
    pd: &PreparedData,
    graphs: &GraphSet,
    split: Split,
    ablation: Ablation,
) -> Result<MetricReport> {
    let supports = GraphSupports::from_graphs(graphs);
    let windows = split_windows(pd, split);
    let (pred, target) = predict_windows(cfg, params, pd, &supports, windows, ablation)?;
    metrics(&pred, &target, DEFAULT_ZERO_THRESHOLD)
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub zero_threshold: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// Print a one-line progress summary every N epochs.
    pub progress_every: Option<usize>,
}

impl TrainOptions {
    pub fn new(epochs: usize, seed: u64, ablation: Ablation) -> Self {
        TrainOptions {
            epochs,
            patience: 15,
            seed,
            ablation,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
            checkpoint_path: None,
            progress_every: None,
        }
    }
}

/// Optimizer state carried across epochs.
pub struct TrainState {
    pub epoch: usize,
    pub adam: AdamState,
    pub best_val_mae: f64,
    pub epochs_since_best: usize,
    pub seed: u64,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    /// CSV lines: a comment header, the column header, then one train row
    /// and one validation row per epoch.
    pub log: Vec<String>,
    pub best_val_mae: f64,
    pub epochs_run: usize,
}

/// Train with Adam on the masked-MAE loss, evaluating the validation split
/// every epoch and early-stopping on its MAE. Window shuffling is seeded;
/// identical options reproduce identical logs bit for bit.
pub fn train(cfg: &ModelConfig, pd: &PreparedData, graphs: &GraphSet, opts: &TrainOptions) -> Result<TrainOutcome> {
    let supports = GraphSupports::from_graphs(graphs);
    let mut params = init_params(cfg, opts.seed)?;
    let mut state = TrainState {
        epoch: 0,
        adam: AdamState::for_params(&params),
        best_val_mae: f64::INFINITY,
        epochs_since_best: 0,
        seed: opts.seed,
    };
    let hyper = AdamHyper::with_lr(cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add(2));

    let mut log = vec![
        format!(
            "# preset={} ablation={} seed={} epochs={} patience={}",
            cfg.preset,
            opts.ablation.name(),
            opts.seed,
            opts.epochs,
            opts.patience
        ),
        MetricReport::csv_header().to_string(),
    ];
    let mut best = params.clone();
    let mut order: Vec<usize> = pd.train.to_vec();

    for epoch in 0..opts.epochs {
        state.epoch = epoch;
        order.shuffle(&mut shuffle_rng);

        let mut train_pred = Vec::new();
        let mut train_target = Vec::new();
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch = pd.make_batch(chunk);
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let rng = if cfg.dropout > 0.0 { Some(&mut dropout_rng) } else { None };
            let step = (|| -> std::result::Result<(f64, Vec<Option<Vec<f64>>>, Vec<f64>), TrainerError> {
                let pred = forward(&mut tape, &ids, cfg, &batch, &supports, opts.ablation, &pd.norm, rng)?;
                let loss = masked_mae_loss(&mut tape, pred, &batch.y, opts.zero_threshold)?;
                let loss_value = tape.scalar(loss)?;
                let pred_data = tape.data(pred).to_vec();
                tape.backward(loss)?;
                let grads = ids.ordered().iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();
                Ok((loss_value, grads, pred_data))
            })();
            let (loss_value, grads, pred_data) = match step {
                Ok(v) => v,
                Err(TrainerError::Num(NumError::NonFinite(_))) => {
                    if let Some(path) = &opts.checkpoint_path {
                        save_checkpoint(path, &best)?;
                    }
                    return Err(TrainerError::NanLoss { epoch });
                }
                Err(e) => return Err(e),
            };
            if !loss_value.is_finite() {
                if let Some(path) = &opts.checkpoint_path {
                    save_checkpoint(path, &best)?;
                }
                return Err(TrainerError::NanLoss { epoch });
            }
            adam_step(&mut params, &grads, &mut state.adam, &hyper);
            train_pred.extend(pred_data);
            train_target.extend(batch.y.data);
        }

        let shape = [order.len(), cfg.t_out, cfg.n_nodes, cfg.channels];
        let train_report = metrics(
            &Tensor::new(train_pred, &shape).map_err(TrainerError::Num)?,
            &Tensor::new(train_target, &shape).map_err(TrainerError::Num)?,
            opts.zero_threshold,
        )?;
        log.push(train_report.csv_row(epoch, "train"));

        // Selection metric: validation MAE, or the train MAE when the
        // validation partition holds no window.
        let selection_mae = if pd.val.is_empty() {
            train_report.overall.mae
        } else {
            let (pred, target) = predict_windows(cfg, &params, pd, &supports, &pd.val, opts.ablation)?;
            let val_report = metrics(&pred, &target, opts.zero_threshold)?;
            log.push(val_report.csv_row(epoch, "val"));
            val_report.overall.mae
        };

        if let Some(every) = opts.progress_every {
            if every > 0 && (epoch + 1) % every == 0 {
                println!(
                    "epoch {:>4}: train MAE {:.4}, selection MAE {:.4}",
                    epoch,
                    train_report.overall.mae,
                    selection_mae
                );
            }
        }
        if selection_mae < state.best_val_mae {
            state.best_val_mae = selection_mae;
            state.epochs_since_best = 0;
            best = params.clone();
            if let Some(path) = &opts.checkpoint_path {
                save_checkpoint(path, &best)?;
            }
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= opts.patience {
                return Ok(TrainOutcome {
                    params: best,
                    log,
                    best_val_mae: state.best_val_mae,
                    epochs_run: epoch + 1,
                });
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        log,
        best_val_mae: state.best_val_mae,
        epochs_run: opts.epochs,
    })
}

/// Write the metric log to disk exactly as accumulated.
pub fn write_log(path: &Path, log: &[String]) -> std::io::Result<()> {
    std::fs::write(path, log.join("\n") + "\n")
}
