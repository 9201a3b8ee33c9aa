//! Runtime verification suites: gradient checks, algebraic invariants, and
//! independent oracles. These run end to end behind the `verify` command and
//! are reused by the acceptance tests.
//!
//! Every oracle here is written against the contract, not the production
//! code path it checks: the DTW oracle is a memoized recursion (the library
//! uses a rolling table), the matmul oracle a naive triple loop, the metric
//! oracles direct formula transcriptions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    etpmsa, etpmsa_with_weights, mask_matrices, mhsa_plain, positional_encoding, AttentionIds,
    AttentionParams, MaskEmbeddings,
};
use crate::ctvgcru::{forward, init_params, Ablation, GraphSupports, ModelConfig, ModelIds};
use crate::data::{split_and_window, synth_network, zscore_fit, PreparedData, SeriesDataset};
use crate::graphs::{dtw_distance, GraphSet};
use crate::numcore::{gradcheck_multi, NumError, Tape, Tensor};
use crate::trainer::{adam_step, masked_mae_loss, metrics, AdamHyper, AdamState};
use crate::tvgraph::{coupled_static_graphs, dynamic_graph_at, DynamicGraphParams, StaticGraphParams};

/// One verification check: a name, a pass flag, and a short detail line.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed, detail }
    }
}

pub fn run_suite(suite: &str) -> Option<Vec<CheckResult>> {
    match suite {
        "gradcheck" => Some(gradcheck_suite()),
        "invariants" => Some(invariants_suite()),
        "oracles" => Some(oracles_suite()),
        _ => None,
    }
}

// ── Oracles ──────────────────────────────────────────────────────────

/// Independent DTW oracle: memoized recursion over the full alignment grid.
pub fn dtw_oracle(x: &[f64], y: &[f64]) -> f64 {
    fn go(x: &[f64], y: &[f64], i: usize, j: usize, memo: &mut Vec<Vec<Option<f64>>>) -> f64 {
        if i == 0 && j == 0 {
            return (x[0] - y[0]).abs();
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let mut best = f64::INFINITY;
        if i > 0 {
            best = best.min(go(x, y, i - 1, j, memo));
        }
        if j > 0 {
            best = best.min(go(x, y, i, j - 1, memo));
        }
        if i > 0 && j > 0 {
            best = best.min(go(x, y, i - 1, j - 1, memo));
        }
        let v = (x[i] - y[j]).abs() + best;
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; y.len()]; x.len()];
    go(x, y, x.len() - 1, y.len() - 1, &mut memo)
}

/// Independent matmul oracle: naive triple loop.
pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("static shape")
}

/// DTW agreement with the oracle on `pairs` random short series; also checks
/// identity and symmetry. Returns the number of disagreements.
pub fn dtw_oracle_disagreements(pairs: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..pairs {
        let lx = rng.random_range(1..16);
        let ly = rng.random_range(1..16);
        let x: Vec<f64> = (0..lx).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..ly).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d = dtw_distance(&x, &y).expect("nonempty");
        if d != dtw_oracle(&x, &y) || d != dtw_distance(&y, &x).expect("nonempty") || dtw_distance(&x, &x).expect("nonempty") != 0.0 {
            bad += 1;
        }
    }
    bad
}

// ── The acceptance-scale model fixture ───────────────────────────────

/// Toy instance matching the gradient-integrity acceptance shape:
/// B=1, T=4, t_out=2, N=3, D=8, h=2, d_mask=4, d_embed=3.
pub fn toy_fixture(seed: u64) -> (ModelConfig, PreparedData, GraphSet) {
    toy_fixture_nodes(3, seed)
}

/// As [`toy_fixture`] with a configurable node count.
pub fn toy_fixture_nodes(nodes: usize, seed: u64) -> (ModelConfig, PreparedData, GraphSet) {
    let (ds, graphs) = synth_network(nodes, 2, seed, 90, 2.0, 4.0).expect("valid synthetic arguments");
    let pd = split_and_window(ds, (0.6, 0.2, 0.2), 4, 2).expect("window fits");
    let cfg = ModelConfig {
        preset: "toy".into(),
        encoder_layers: 1,
        decoder_layers: 1,
        batch: 1,
        heads: 2,
        d_model: 8,
        d_embed: 3,
        d_mask: 4,
        ctvgcrm_layers: 1,
        t_in: 4,
        t_out: 2,
        learning_rate: 1e-3,
        dropout: 0.0,
        n_nodes: nodes,
        samples_per_day: 16,
        channels: 1,
    };
    (cfg, pd, graphs)
}

/// Gradient check of the complete training loss (forward plus masked MAE)
/// on the toy fixture. Returns the max relative error.
pub fn full_model_gradcheck(seed: u64) -> f64 {
    full_model_gradcheck_nodes(3, seed)
}

/// As [`full_model_gradcheck`] with a configurable node count.
pub fn full_model_gradcheck_nodes(nodes: usize, seed: u64) -> f64 {
    let (cfg, pd, graphs) = toy_fixture_nodes(nodes, seed);
    let supports = GraphSupports::from_graphs(&graphs);
    let batch = pd.make_batch(&pd.train[..1]);
    let params = init_params(&cfg, seed).expect("valid config");
    let mut flat = Vec::new();
    params.visit(&mut |_, t| flat.push(t.clone()));
    let norm = pd.norm.clone();

    gradcheck_multi(
        |tape, ids| {
            let mids = ModelIds::from_ordered(&cfg, ids)?;
            let pred = forward(tape, &mids, &cfg, &batch, &supports, Ablation::Full, &norm, None)?;
            masked_mae_loss(tape, pred, &batch.y, 1e-3).map_err(|e| NumError::Contract(e.to_string()))
        },
        &flat,
        1e-5,
    )
    .expect("gradcheck evaluates")
}

// ── Suites ───────────────────────────────────────────────────────────

pub fn gradcheck_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // Primitive operations under a quadratic readout.
    let x = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    let y = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let ops: Vec<(&str, Box<dyn Fn(&mut Tape, &[crate::numcore::TensorId]) -> crate::numcore::Result<crate::numcore::TensorId>>)> = vec![
        ("matmul", Box::new(|t, ids| {
            let p = t.matmul(ids[0], ids[2])?;
            let q = t.mul(p, p)?;
            t.sum_all(q)
        })),
        ("softmax", Box::new(|t, ids| {
            let s = t.softmax(ids[0], 1)?;
            let q = t.mul(s, ids[1])?;
            t.sum_all(q)
        })),
        ("sigmoid", Box::new(|t, ids| {
            let s = t.sigmoid(ids[0])?;
            t.sum_all(s)
        })),
        ("tanh", Box::new(|t, ids| {
            let s = t.tanh(ids[0])?;
            t.sum_all(s)
        })),
        ("abs", Box::new(|t, ids| {
            let s = t.abs(ids[0])?;
            t.sum_all(s)
        })),
        ("concat", Box::new(|t, ids| {
            let c = t.concat(&[ids[0], ids[1]], 1)?;
            let q = t.mul(c, c)?;
            t.sum_all(q)
        })),
        ("mean_axis", Box::new(|t, ids| {
            let m = t.mean_axis(ids[0], 1)?;
            let q = t.mul(m, m)?;
            t.sum_all(q)
        })),
    ];
    for (name, f) in &ops {
        let err = gradcheck_multi(f, &[x.clone(), y.clone(), w.clone()], 1e-5).expect("evaluates");
        out.push(CheckResult::new(
            &format!("gradcheck/{name}"),
            err < 1e-4,
            format!("max relative error {err:.3e}"),
        ));
    }

    // Masked attention block.
    {
        let (b, t_in, n, d, h, d_mask) = (1, 2, 3, 4, 2, 3);
        let d_head = d / h;
        let params = AttentionParams {
            heads: h,
            d_model: d,
            query: (0..h).map(|_| rand_tensor(&mut rng, &[d, d_head], -0.5, 0.5)).collect(),
            key: (0..h).map(|_| rand_tensor(&mut rng, &[d, d_head], -0.5, 0.5)).collect(),
            value: (0..h).map(|_| rand_tensor(&mut rng, &[d, d_head], -0.5, 0.5)).collect(),
            output: rand_tensor(&mut rng, &[d, d], -0.5, 0.5),
        };
        let me = MaskEmbeddings {
            node: rand_tensor(&mut rng, &[n, d_mask], -0.8, 0.8),
            daily: rand_tensor(&mut rng, &[6, d_mask], -0.8, 0.8),
            weekly: rand_tensor(&mut rng, &[7, d_mask], -0.8, 0.8),
        };
        let xin = rand_tensor(&mut rng, &[b, t_in, n, d], -1.0, 1.0);
        let mut inputs = vec![xin, me.node.clone(), me.daily.clone(), me.weekly.clone()];
        for i in 0..h {
            inputs.push(params.query[i].clone());
            inputs.push(params.key[i].clone());
            inputs.push(params.value[i].clone());
        }
        inputs.push(params.output.clone());
        let err = gradcheck_multi(
            |tape, ids| {
                let mids = crate::attention::MaskEmbeddingIds { node: ids[1], daily: ids[2], weekly: ids[3] };
                let att = AttentionIds {
                    query: vec![ids[4], ids[7]],
                    key: vec![ids[5], ids[8]],
                    value: vec![ids[6], ids[9]],
                    output: ids[10],
                    heads: h,
                    d_model: d,
                };
                let masks = mask_matrices(tape, &mids, &[1, 4], &[0, 3], b, t_in)?;
                let o = etpmsa(tape, ids[0], Some(masks), &att)?;
                let q = tape.mul(o, o)?;
                tape.sum_all(q)
            },
            &inputs,
            1e-5,
        )
        .expect("evaluates");
        out.push(CheckResult::new(
            "gradcheck/masked-attention",
            err < 1e-4,
            format!("max relative error {err:.3e}"),
        ));
    }

    // Graph learners.
    {
        let (t_len, n, d) = (3, 3, 2);
        let sp = StaticGraphParams {
            node_embed: rand_tensor(&mut rng, &[n, d], -1.0, 1.0),
            step_bias: rand_tensor(&mut rng, &[t_len, n, d], -1.0, 1.0),
            coupling: rand_tensor(&mut rng, &[t_len, t_len], -1.0, 1.0),
        };
        let dp = DynamicGraphParams {
            feature_map: rand_tensor(&mut rng, &[d, d], -1.0, 1.0),
            score_weights: rand_tensor(&mut rng, &[2 * d], -1.0, 1.0),
        };
        let hidden = rand_tensor(&mut rng, &[1, n, d], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[t_len, n, n], -1.0, 1.0);
        let err = gradcheck_multi(
            |tape, ids| {
                let sids = crate::tvgraph::StaticGraphIds {
                    node_embed: ids[0],
                    step_bias: ids[1],
                    coupling: ids[2],
                    t_len,
                };
                let dids = crate::tvgraph::DynamicGraphIds { feature_map: ids[3], score_weights: ids[4] };
                let probe_id = tape.leaf(&probe);
                let ones = tape.constant(vec![1.0; n * n], &[n, n])?;
                let coupled = coupled_static_graphs(tape, &sids)?;
                let s1 = {
                    let m = tape.mul(coupled, probe_id)?;
                    tape.sum_all(m)?
                };
                let (dyn_g, _) = dynamic_graph_at(tape, &dids, ids[5], ones)?;
                let probe1 = tape.narrow(probe_id, 0, 0, 1)?;
                let s2 = {
                    let m = tape.mul(dyn_g, probe1)?;
                    tape.sum_all(m)?
                };
                tape.add(s1, s2)
            },
            &[sp.node_embed, sp.step_bias, sp.coupling, dp.feature_map, dp.score_weights, hidden],
            1e-5,
        )
        .expect("evaluates");
        out.push(CheckResult::new(
            "gradcheck/graph-learners",
            err < 1e-4,
            format!("max relative error {err:.3e}"),
        ));
    }

    // The complete loss on the toy fixture.
    let err = full_model_gradcheck(2025);
    out.push(CheckResult::new(
        "gradcheck/full-model-loss",
        err < 1e-4,
        format!("max relative error {err:.3e}"),
    ));
    out
}

pub fn invariants_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // Coupled static graphs stay row-stochastic.
    {
        let (t_len, n, d) = (4, 5, 3);
        let sp = StaticGraphParams {
            node_embed: rand_tensor(&mut rng, &[n, d], -1.0, 1.0),
            step_bias: rand_tensor(&mut rng, &[t_len, n, d], -1.0, 1.0),
            coupling: rand_tensor(&mut rng, &[t_len, t_len], -1.0, 1.0),
        };
        let mut tape = Tape::new();
        let ids = sp.bind(&mut tape);
        let g = coupled_static_graphs(&mut tape, &ids).expect("builds");
        let worst = tape
            .data(g)
            .chunks(n)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0f64, f64::max);
        out.push(CheckResult::new(
            "invariants/coupled-rows-stochastic",
            worst < 1e-10,
            format!("max row-sum deviation {worst:.3e}"),
        ));
    }

    // Dynamic graph support is exactly inside the predefined union.
    {
        let n = 5;
        let dp = DynamicGraphParams {
            feature_map: rand_tensor(&mut rng, &[3, 2], -1.0, 1.0),
            score_weights: rand_tensor(&mut rng, &[4], -1.0, 1.0),
        };
        let mut mask = Tensor::eye(n);
        mask.data[1] = 1.0;
        mask.data[2 * n + 4] = 1.0;
        let mut tape = Tape::new();
        let ids = dp.bind(&mut tape);
        let h = tape.leaf(&rand_tensor(&mut rng, &[2, n, 3], -1.0, 1.0));
        let m = tape.leaf(&mask);
        let (g, _) = dynamic_graph_at(&mut tape, &ids, h, m).expect("builds");
        let mut exact = true;
        for (i, &v) in tape.data(g).iter().enumerate() {
            if mask.data[i % (n * n)] == 0.0 && v != 0.0 {
                exact = false;
            }
        }
        out.push(CheckResult::new(
            "invariants/dynamic-support-subset",
            exact,
            "off-support entries are exact zeros".into(),
        ));
    }

    // Coupling causality: perturbing a later step bias is invisible earlier.
    {
        let (t_len, n, d) = (4, 3, 2);
        let sp = StaticGraphParams {
            node_embed: rand_tensor(&mut rng, &[n, d], -1.0, 1.0),
            step_bias: rand_tensor(&mut rng, &[t_len, n, d], -1.0, 1.0),
            coupling: rand_tensor(&mut rng, &[t_len, t_len], -1.0, 1.0),
        };
        let run = |p: &StaticGraphParams| {
            let mut tape = Tape::new();
            let ids = p.bind(&mut tape);
            let g = coupled_static_graphs(&mut tape, &ids).expect("builds");
            tape.data(g).to_vec()
        };
        let base = run(&sp);
        let mut bumped = sp.clone();
        for v in bumped.step_bias.data[3 * n * d..].iter_mut() {
            *v += 3.5;
        }
        let after = run(&bumped);
        let delta = base[..3 * n * n]
            .iter()
            .zip(&after[..3 * n * n])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        out.push(CheckResult::new(
            "invariants/coupling-causality",
            delta == 0.0,
            format!("earlier-step probe delta {delta:.1e}"),
        ));
    }

    // Identity masks reduce the attention to the plain path.
    {
        let (b, t_in, n, d, h) = (2, 2, 4, 8, 2);
        let d_head = d / h;
        let params = AttentionParams {
            heads: h,
            d_model: d,
            query: (0..h).map(|_| rand_tensor(&mut rng, &[d, d_head], -0.5, 0.5)).collect(),
            key: (0..h).map(|_| rand_tensor(&mut rng, &[d, d_head], -0.5, 0.5)).collect(),
            value: (0..h).map(|_| rand_tensor(&mut rng, &[d, d_head], -0.5, 0.5)).collect(),
            output: rand_tensor(&mut rng, &[d, d], -0.5, 0.5),
        };
        let x = rand_tensor(&mut rng, &[b, t_in, n, d], -1.0, 1.0);
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let xid = tape.leaf(&x);
        let eye = Tensor::eye(n);
        let mut data = Vec::new();
        for _ in 0..b * t_in {
            data.extend_from_slice(&eye.data);
        }
        let masks = tape.constant(data, &[b, t_in, n, n]).expect("builds");
        let (masked, weights) = etpmsa_with_weights(&mut tape, xid, Some(masks), &ids).expect("runs");
        let plain = mhsa_plain(&mut tape, xid, &ids).expect("runs");
        let max_diff = tape
            .data(masked)
            .iter()
            .zip(tape.data(plain))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        out.push(CheckResult::new(
            "invariants/identity-mask-reduction",
            max_diff < 1e-12,
            format!("max |masked - plain| = {max_diff:.3e}"),
        ));
        let worst_row = weights
            .iter()
            .flat_map(|&w| tape.data(w).chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0f64, f64::max);
        out.push(CheckResult::new(
            "invariants/attention-rows-sum-to-one",
            worst_row < 1e-10,
            format!("max row-sum deviation {worst_row:.3e}"),
        ));
    }

    // Calendar indices are congruent to the absolute step index.
    {
        let (ds, _) = synth_network(3, 8, 7, 120, 1.0, 0.5).expect("valid");
        let n = ds.samples_per_day;
        let ok = (0..ds.steps()).all(|t| ds.time_of_day(t) == t % n && ds.day_of_week(t) == (t / n) % 7);
        out.push(CheckResult::new(
            "invariants/calendar-congruence",
            ok,
            format!("checked {} steps at {} samples/day", ds.steps(), n),
        ));
    }

    // Normalization inverts to raw values.
    {
        let (ds, _) = synth_network(4, 2, 9, 60, 1.0, 0.5).expect("valid");
        let norm = zscore_fit(&ds, 0.6).expect("fit");
        let worst = ds
            .values
            .data
            .iter()
            .map(|&v| (norm.denormalize(norm.normalize(v, 0), 0) - v).abs())
            .fold(0.0f64, f64::max);
        out.push(CheckResult::new(
            "invariants/normalization-roundtrip",
            worst < 1e-10,
            format!("max reconstruction error {worst:.3e}"),
        ));
    }
    out
}

pub fn oracles_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    let bad = dtw_oracle_disagreements(200, 17);
    out.push(CheckResult::new(
        "oracles/dtw-dp-table",
        bad == 0,
        format!("{bad} disagreements over 200 random pairs"),
    ));

    {
        let x = [1.0, 2.0, 3.0];
        let y = [2.0, 3.0, 4.0];
        let d = dtw_distance(&x, &y).expect("nonempty");
        out.push(CheckResult::new("oracles/dtw-3x3-case", d == 2.0, format!("distance {d}")));
    }

    {
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let expect = matmul_oracle(&a, &b, 3, 4, 2);
        let mut tape = Tape::new();
        let ia = tape.leaf(&Tensor::new(a, &[3, 4]).expect("shape"));
        let ib = tape.leaf(&Tensor::new(b, &[4, 2]).expect("shape"));
        let ic = tape.matmul(ia, ib).expect("matmul");
        let worst = tape.data(ic).iter().zip(&expect).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        out.push(CheckResult::new(
            "oracles/matmul-triple-loop",
            worst < 1e-12,
            format!("max deviation {worst:.3e}"),
        ));
    }

    {
        let pred = Tensor::new(vec![2.0, 4.0], &[2]).expect("shape");
        let target = Tensor::new(vec![1.0, 2.0], &[2]).expect("shape");
        let r = metrics(&pred, &target, 1e-3).expect("metrics");
        let ok = (r.overall.mae - 1.5).abs() < 1e-12
            && (r.overall.rmse - 2.5f64.sqrt()).abs() < 1e-12
            && (r.overall.mape.unwrap() - 100.0).abs() < 1e-12;
        out.push(CheckResult::new(
            "oracles/metric-formulas",
            ok,
            format!("mae {} rmse {} mape {:?}", r.overall.mae, r.overall.rmse, r.overall.mape),
        ));
    }

    {
        // Z-score on train = [1,2,3]: mean 2, population std sqrt(2/3).
        let ds = SeriesDataset::from_values(vec![1.0, 2.0, 3.0, 9.0], 4, 1, 1, 360, 0).expect("valid");
        let norm = zscore_fit(&ds, 0.75).expect("fit");
        let ok = (norm.mean[0] - 2.0).abs() < 1e-15
            && (norm.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15
            && (norm.normalize(3.0, 0) - 1.224744871391589).abs() < 1e-12;
        out.push(CheckResult::new(
            "oracles/zscore-formula",
            ok,
            format!("mean {} std {}", norm.mean[0], norm.std[0]),
        ));
    }

    {
        // First Adam step with unit gradient: delta = -lr / (1 + eps).
        let cfg = toy_fixture(1).0;
        let mut params = init_params(&cfg, 3).expect("valid config");
        let before = params.input_b.data.clone();
        let mut state = AdamState::for_params(&params);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        params.visit(&mut |name, t| {
            grads.push(if name == "input.bias" { Some(vec![1.0; t.numel()]) } else { None })
        });
        let hyper = AdamHyper::with_lr(1e-3);
        adam_step(&mut params, &grads, &mut state, &hyper);
        let expect = -hyper.lr / (1.0 + hyper.eps);
        let worst = params
            .input_b
            .data
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b - expect).abs())
            .fold(0.0f64, f64::max);
        out.push(CheckResult::new(
            "oracles/adam-first-step",
            worst < 1e-15,
            format!("max deviation {worst:.3e}"),
        ));
    }

    {
        // Window counting: 100 steps at 6:2:2 gives 37 train windows.
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let ds = SeriesDataset::from_values(values, 100, 1, 1, 720, 0).expect("valid");
        let pd = split_and_window(ds, (0.6, 0.2, 0.2), 12, 12).expect("windows");
        out.push(CheckResult::new(
            "oracles/window-count",
            pd.train.len() == 37,
            format!("train windows {}", pd.train.len()),
        ));
    }

    {
        let pe = positional_encoding(8, 6).expect("even width");
        let ok = pe.data[6] == 1f64.sin() && pe.data[0] == 0.0 && pe.data[1] == 1.0;
        out.push(CheckResult::new(
            "oracles/positional-encoding",
            ok,
            format!("PE(1,0) = {}", pe.data[6]),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for suite in ["invariants", "oracles"] {
            for check in run_suite(suite).unwrap() {
                assert!(check.passed, "{}: {}", check.name, check.detail);
            }
        }
    }

    #[test]
    fn gradcheck_suite_passes() {
        for check in gradcheck_suite() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn unknown_suite_is_none() {
        assert!(run_suite("everything").is_none());
    }

    #[test]
    fn four_node_full_loss_gradcheck() {
        let err = full_model_gradcheck_nodes(4, 7);
        assert!(err < 1e-4, "relative error {err}");
    }
}
