//! Finite-difference gradient suite over every graph op and both toy models.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{DualSourceConfig, DualSourceModel, Example, Seq2Seq, Seq2SeqConfig, Seq2SeqModel};
use crate::tensor::{grad_check, grad_check_model, GradCheckOptions, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradSuiteConfig {
    /// Seeds for the per-op checks.
    pub op_seeds: u64,
    /// Seeds for each full-model check.
    pub model_seeds: u64,
    /// Entries sampled per parameter tensor in the model checks.
    pub model_entries: usize,
    pub tol: f64,
    pub base_seed: u64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            op_seeds: 100,
            model_seeds: 100,
            model_entries: 4,
            tol: 1e-4,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub check: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub tol: f64,
    pub entries: Vec<SuiteEntry>,
    pub elapsed_secs: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

pub const OPS: [&str; 20] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_bias",
    "mul",
    "scale",
    "softmax",
    "layer_norm",
    "embedding",
    "relu",
    "sigmoid",
    "tanh",
    "concat_rows",
    "concat_cols",
    "slice",
    "transpose",
    "cross_entropy",
    "cross_entropy_masked_smoothed",
    "sum",
    "lstm_cell",
];

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Magnitudes in [0.1, 1] so a step of `h` never crosses the kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Contracts a non-scalar output with fixed random weights, so that
/// symmetric reductions (e.g. softmax rows summing to one) stay informative.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// One per-op check. Returns the largest relative error over all entries.
pub fn check_op(op: &str, seed: u64, tol: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (m, n, k) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let opts = GradCheckOptions {
        tol,
        seed,
        ..GradCheckOptions::default()
    };
    let report = match op {
        "matmul" | "matmul_nt" => {
            let a = s.add("a", rand_tensor(&mut rng, &[m, k]))?;
            let bshape = if op == "matmul" { [k, n] } else { [n, k] };
            let b = s.add("b", rand_tensor(&mut rng, &bshape))?;
            let r = rand_tensor(&mut rng, &[m, n]);
            let nt = op == "matmul_nt";
            grad_check(
                &mut s,
                |g, s| {
                    let (a, b) = (g.param(s, a), g.param(s, b));
                    let y = if nt { g.matmul_nt(a, b)? } else { g.matmul(a, b)? };
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "add" | "mul" => {
            let a = s.add("a", rand_tensor(&mut rng, &[m, n]))?;
            let b = s.add("b", rand_tensor(&mut rng, &[m, n]))?;
            let r = rand_tensor(&mut rng, &[m, n]);
            let is_mul = op == "mul";
            grad_check(
                &mut s,
                |g, s| {
                    let (a, b) = (g.param(s, a), g.param(s, b));
                    let y = if is_mul { g.mul(a, b)? } else { g.add(a, b)? };
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "add_bias" => {
            let a = s.add("a", rand_tensor(&mut rng, &[m, n]))?;
            let b = s.add("b", rand_tensor(&mut rng, &[n]))?;
            let r = rand_tensor(&mut rng, &[m, n]);
            grad_check(
                &mut s,
                |g, s| {
                    let (a, b) = (g.param(s, a), g.param(s, b));
                    let y = g.add(a, b)?;
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "scale" | "softmax" | "relu" | "sigmoid" | "tanh" | "transpose" => {
            let x = if op == "relu" {
                away_from_zero(&mut rng, &[m, n])
            } else {
                rand_tensor(&mut rng, &[m, n])
            };
            let x = s.add("x", x)?;
            let c = rng.random_range(-2.0..2.0);
            let rshape = if op == "transpose" { [n, m] } else { [m, n] };
            let r = rand_tensor(&mut rng, &rshape);
            grad_check(
                &mut s,
                |g, s| {
                    let x = g.param(s, x);
                    let y = match op {
                        "scale" => g.scale(x, c)?,
                        "softmax" => g.softmax(x)?,
                        "relu" => g.relu(x)?,
                        "sigmoid" => g.sigmoid(x)?,
                        "tanh" => g.tanh(x)?,
                        _ => g.transpose(x)?,
                    };
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "layer_norm" => {
            // d = 2 maps every row to ±gamma + beta, leaving only rounding noise to check
            let d = rng.random_range(3..=6);
            let x = s.add("x", rand_tensor(&mut rng, &[m, d]))?;
            let gamma = s.add("gamma", rand_tensor(&mut rng, &[d]))?;
            let beta = s.add("beta", rand_tensor(&mut rng, &[d]))?;
            let r = rand_tensor(&mut rng, &[m, d]);
            grad_check(
                &mut s,
                |g, s| {
                    let (x, ga, be) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
                    let y = g.layer_norm(x, ga, be)?;
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "embedding" => {
            let table = s.add("table", rand_tensor(&mut rng, &[m, n]))?;
            let count = rng.random_range(1..=6);
            let ids: Vec<usize> = (0..count).map(|_| rng.random_range(0..m)).collect();
            let r = rand_tensor(&mut rng, &[count, n]);
            grad_check(
                &mut s,
                |g, s| {
                    let t = g.param(s, table);
                    let y = g.embedding(t, &ids)?;
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "concat_rows" | "concat_cols" => {
            let axis = usize::from(op == "concat_cols");
            let parts: Vec<_> = (0..rng.random_range(2..=3))
                .map(|i| {
                    let shape = if axis == 0 {
                        [dim(&mut rng), n]
                    } else {
                        [m, dim(&mut rng)]
                    };
                    s.add(format!("p{i}"), rand_tensor(&mut rng, &shape))
                })
                .collect::<Result<_>>()?;
            let total: usize = parts.iter().map(|&p| s.get(p).value.shape()[axis]).sum();
            let rshape = if axis == 0 { [total, n] } else { [m, total] };
            let r = rand_tensor(&mut rng, &rshape);
            grad_check(
                &mut s,
                |g, s| {
                    let vs: Vec<Var> = parts.iter().map(|&p| g.param(s, p)).collect();
                    let y = g.concat(&vs, axis)?;
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "slice" => {
            let axis = rng.random_range(0..2);
            let len = if axis == 0 { m } else { n };
            let start = rng.random_range(0..len);
            let end = rng.random_range(start + 1..=len);
            let x = s.add("x", rand_tensor(&mut rng, &[m, n]))?;
            let rshape = if axis == 0 { [end - start, n] } else { [m, end - start] };
            let r = rand_tensor(&mut rng, &rshape);
            grad_check(
                &mut s,
                |g, s| {
                    let x = g.param(s, x);
                    let y = g.slice(x, axis, start, end)?;
                    project(g, y, &r)
                },
                &opts,
            )?
        }
        "cross_entropy" | "cross_entropy_masked_smoothed" => {
            let v = rng.random_range(2..=5);
            let logits = s.add("logits", rand_tensor(&mut rng, &[m, v]).map_scaled(3.0))?;
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..v)).collect();
            let (mask, smoothing) = if op == "cross_entropy" {
                (None, 0.0)
            } else {
                let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
                let keep = rng.random_range(0..m);
                mask[keep] = true;
                (Some(mask), rng.random_range(0.0..0.3))
            };
            grad_check(
                &mut s,
                |g, s| {
                    let l = g.param(s, logits);
                    g.cross_entropy_mean(l, &targets, mask.as_deref(), smoothing)
                },
                &opts,
            )?
        }
        "sum" => {
            let x = s.add("x", rand_tensor(&mut rng, &[m, n]))?;
            grad_check(
                &mut s,
                |g, s| {
                    let x = g.param(s, x);
                    let y = g.mul(x, x)?;
                    g.sum(y)
                },
                &opts,
            )?
        }
        "lstm_cell" => {
            let (din, hd) = (dim(&mut rng), dim(&mut rng));
            let w = s.add("w", rand_tensor(&mut rng, &[din + hd, 4 * hd]))?;
            let b = s.add("b", rand_tensor(&mut rng, &[4 * hd]))?;
            let x = s.add("x", rand_tensor(&mut rng, &[m, din]))?;
            let h = s.add("h", rand_tensor(&mut rng, &[m, hd]))?;
            let c = s.add("c", rand_tensor(&mut rng, &[m, hd]))?;
            let rh = rand_tensor(&mut rng, &[m, hd]);
            let rc = rand_tensor(&mut rng, &[m, hd]);
            grad_check(
                &mut s,
                |g, s| {
                    let vars = [w, b, x, h, c].map(|p| g.param(s, p));
                    let (h2, c2) = crate::model::lstm_cell_step(g, vars[0], vars[1], vars[2], vars[3], vars[4])?;
                    let a = project(g, h2, &rh)?;
                    let b = project(g, c2, &rc)?;
                    g.add(a, b)
                },
                &opts,
            )?
        }
        other => return Err(crate::Error::Config(format!("unknown op `{other}`"))),
    };
    Ok(report.max_rel_err())
}

trait Scaled {
    fn map_scaled(self, c: f64) -> Self;
}

impl Scaled for Tensor<f64> {
    fn map_scaled(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= c);
        self
    }
}

fn random_examples(rng: &mut ChaCha8Rng, vocab: u32, with_query: bool) -> Vec<Example> {
    let n = rng.random_range(1..=3);
    let seq = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<u32> {
        let len = rng.random_range(lo..=hi);
        (0..len).map(|_| rng.random_range(5..vocab)).collect()
    };
    (0..n)
        .map(|i| {
            let mut source = seq(rng, 1, 5);
            source.push(2);
            let query = if with_query {
                let mut q = seq(rng, 1, 3);
                q.push(2);
                q
            } else {
                Vec::new()
            };
            Example {
                id: format!("g{i}"),
                keys: vec!["p".into()],
                source,
                query,
                target: seq(rng, 0, 3),
            }
        })
        .collect()
}

/// Toy dual-source configuration used by the model checks.
pub fn toy_dual_config() -> DualSourceConfig {
    DualSourceConfig {
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        depth: 2,
        vocab: 50,
        ..DualSourceConfig::desk()
    }
}

pub fn toy_seq2seq_config() -> Seq2SeqConfig {
    Seq2SeqConfig {
        embed_dim: 8,
        hidden_dim: 6,
        layers: 2,
        vocab: 30,
        ..Seq2SeqConfig::desk()
    }
}

pub fn check_dual_model(seed: u64, entries: usize, tol: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_dual_config();
    let vocab = cfg.vocab as u32;
    let mut m = DualSourceModel::<f64>::new(cfg, seed)?;
    let batch = random_examples(&mut rng, vocab, true);
    let refs: Vec<&Example> = batch.iter().collect();
    let smoothing = if seed.is_multiple_of(2) { 0.0 } else { 0.1 };
    let opts = GradCheckOptions {
        tol,
        seed,
        max_entries_per_param: Some(entries),
        ..GradCheckOptions::default()
    };
    Ok(grad_check_model(&mut m, |g, m| m.loss(g, &refs, smoothing, None), &opts)?.max_rel_err())
}

pub fn check_seq2seq_model(seed: u64, entries: usize, tol: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_seq2seq_config();
    let vocab = cfg.vocab as u32;
    let mut m = Seq2SeqModel::<f64>::new(cfg, seed)?;
    let batch = random_examples(&mut rng, vocab, false);
    let refs: Vec<&Example> = batch.iter().collect();
    let opts = GradCheckOptions {
        tol,
        seed,
        max_entries_per_param: Some(entries),
        ..GradCheckOptions::default()
    };
    Ok(grad_check_model(&mut m, |g, m| m.loss(g, &refs, 0.0, None), &opts)?.max_rel_err())
}

/// The shared encoder's gradient must equal the sum of the gradients of two
/// untied copies started from the same values. Returns the largest relative gap.
pub fn check_shared_encoder(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_dual_config();
    let vocab = cfg.vocab as u32;
    let shared = DualSourceModel::<f64>::new(cfg.clone(), seed)?;
    let mut untied = DualSourceModel::<f64>::with_untied_encoders(cfg, seed)?;
    for (_, p) in shared.store.iter() {
        let dst = untied.store.id(&p.name).expect("untied model has every shared name");
        untied.store.get_mut(dst).value = p.value.clone();
    }
    let batch = random_examples(&mut rng, vocab, true);
    let refs: Vec<&Example> = batch.iter().collect();
    let grads = |m: &DualSourceModel<f64>| -> Result<ParamStore<f64>> {
        let mut store = m.store.clone();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &refs, 0.0, None)?;
        g.backward(l, &mut store)?;
        Ok(store)
    };
    let (gs, gu) = (grads(&shared)?, grads(&untied)?);
    let mut worst = 0.0f64;
    for name in shared.encoder_param_names() {
        let a = &gs.get(gs.id(&name).expect("shared name")).grad;
        let b1 = &gu.get(gu.id(&name).expect("untied name")).grad;
        let b2 = &gu
            .get(gu.id(&name.replacen("enc", "enc_prop", 1)).expect("untied copy"))
            .grad;
        for ((x, y), z) in a.data().iter().zip(b1.data()).zip(b2.data()) {
            worst = worst.max(crate::tensor::relative_error(*x, y + z));
        }
    }
    Ok(worst)
}

fn run_seeds<F: FnMut(u64) -> Result<f64>>(name: &str, base: u64, n: u64, tol: f64, mut f: F) -> Result<SuiteEntry> {
    let mut worst = (0.0f64, base);
    for s in base..base + n {
        let e = f(s)?;
        if e > worst.0 || e.is_nan() {
            worst = (e, s);
        }
    }
    Ok(SuiteEntry {
        check: name.to_string(),
        seeds: n,
        max_rel_err: worst.0,
        worst_seed: worst.1,
        passed: worst.0 <= tol,
    })
}

/// Runs every op check and both model checks.
pub fn run(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let mut entries = Vec::new();
    for op in OPS {
        entries.push(run_seeds(op, cfg.base_seed, cfg.op_seeds, cfg.tol, |s| {
            check_op(op, s, cfg.tol)
        })?);
    }
    entries.push(run_seeds(
        "dual_source_model",
        cfg.base_seed,
        cfg.model_seeds,
        cfg.tol,
        |s| check_dual_model(s, cfg.model_entries, cfg.tol),
    )?);
    entries.push(run_seeds(
        "seq2seq_model",
        cfg.base_seed,
        cfg.model_seeds,
        cfg.tol,
        |s| check_seq2seq_model(s, cfg.model_entries, cfg.tol),
    )?);
    entries.push(run_seeds(
        "shared_encoder_sum",
        cfg.base_seed,
        cfg.model_seeds,
        cfg.tol,
        check_shared_encoder,
    )?);
    Ok(GradSuiteReport {
        tol: cfg.tol,
        entries,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
