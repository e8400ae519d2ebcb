//! Shared helpers for integration tests: tiny models and a naive oracle.
#![allow(dead_code)]

use ndarray::Array2;
use simdiff::model::{AbsentSelfCond, DenoiserParams, ModelConfig};
use simdiff::rng::RngStream;
use simdiff::TokenId;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 24,
        time_steps: 10,
        time_quantum: 5,
        tie_embeddings: false,
        absent_self_cond: AbsentSelfCond::Zero,
        input_temperature: 1.0,
    }
}

/// Init, then push every gain/bias away from 1/0 so all paths carry signal.
pub fn randomized<S: simdiff::Scalar>(cfg: &ModelConfig, seed: u64, scale: f64) -> DenoiserParams<S> {
    let mut p = DenoiserParams::<S>::init(cfg, seed).unwrap();
    let mut rng = RngStream::named(seed, "test-perturb");
    for (name, mut t) in p.tensors_mut() {
        let boost = if name.ends_with("_g") || name.ends_with("_b") || name.ends_with("b1") || name.ends_with("b2") {
            0.3
        } else {
            scale
        };
        t.mapv_inplace(|v| v + S::of(boost * rng.standard_normal::<f64>()));
    }
    p
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut RngStream) -> Vec<TokenId> {
    (0..n).map(|_| rng.int_inclusive(0, vocab - 1) as TokenId).collect()
}

pub fn random_logits(rows: usize, vocab: usize, k: f64, rng: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, vocab), || k * rng.standard_normal::<f64>())
}

// ---------------------------------------------------------------------------
// Naive oracle: plain nested loops over Vec<f64>, no ndarray arithmetic.
// ---------------------------------------------------------------------------

type Mat = Vec<Vec<f64>>;

fn get(p: &DenoiserParams<f64>, name: &str) -> Mat {
    let (_, t) = p
        .tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("no tensor {name}"));
    let shape = t.shape().to_vec();
    let flat: Vec<f64> = t.iter().copied().collect();
    if shape.len() == 1 {
        vec![flat]
    } else {
        flat.chunks(shape[1]).map(|c| c.to_vec()).collect()
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * r * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Rows of a mixed input: clean tokens, or noisy logits with optional
/// self-conditioning.
pub enum OracleRow {
    Token { id: TokenId, pos: usize, ctx_time: Option<usize> },
    Noisy { logits: Vec<f64>, cond: Option<Vec<f64>>, pos: usize, time: usize },
}

/// Straight-line transformer forward; returns logits for every row.
pub fn oracle_forward(p: &DenoiserParams<f64>, rows: &[OracleRow], mask: &[Vec<bool>]) -> Mat {
    let cfg = &p.config;
    let d = cfg.d_model;
    let tok = get(p, "tok_emb");
    let pos = get(p, "pos_emb");
    let ctx_time = get(p, "ctx_time");
    let diff_time = get(p, "diff_time");
    let w_diff = get(p, "w_diff");
    let w_pred = get(p, "w_pred");
    let mut x: Mat = rows
        .iter()
        .map(|r| {
            let mut h = vec![0.0; d];
            match r {
                OracleRow::Token { id, pos: ps, ctx_time: ct } => {
                    for j in 0..d {
                        h[j] = tok[*id as usize][j] + pos[*ps][j];
                        if let Some(t) = ct {
                            h[j] += ctx_time[*t][j];
                        }
                    }
                }
                OracleRow::Noisy { logits, cond, pos: ps, time } => {
                    let sm = softmax(logits);
                    for j in 0..d {
                        let mut acc = pos[*ps][j] + diff_time[*time][j];
                        for (v, s) in sm.iter().enumerate() {
                            acc += s * w_diff[v][j];
                        }
                        h[j] = acc;
                    }
                    let cond_probs = match cond {
                        Some(c) => Some(softmax(c)),
                        None => match cfg.absent_self_cond {
                            AbsentSelfCond::Zero => None,
                            AbsentSelfCond::Uniform => Some(vec![1.0 / cfg.vocab as f64; cfg.vocab]),
                        },
                    };
                    if let Some(cp) = cond_probs {
                        for j in 0..d {
                            for (v, s) in cp.iter().enumerate() {
                                h[j] += s * w_pred[v][j];
                            }
                        }
                    }
                }
            }
            h
        })
        .collect();

    let n = rows.len();
    let heads = cfg.n_heads;
    let dh = d / heads;
    for l in 0..cfg.n_layers {
        let t = |s: &str| get(p, &format!("layers.{l}.{s}"));
        let a = layer_norm(&x, &t("ln1_g")[0], &t("ln1_b")[0]);
        let q = matmul(&a, &t("wq"));
        let k = matmul(&a, &t("wk"));
        let v = matmul(&a, &t("wv"));
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if mask[i][j] {
                        let mut s = 0.0;
                        for c in h * dh..(h + 1) * dh {
                            s += q[i][c] * k[j][c];
                        }
                        scores[j] = s / (dh as f64).sqrt();
                    }
                }
                let probs = softmax(&scores);
                for c in h * dh..(h + 1) * dh {
                    att[i][c] = (0..n).map(|j| probs[j] * v[j][c]).sum();
                }
            }
        }
        let proj = matmul(&att, &t("wo"));
        for i in 0..n {
            for j in 0..d {
                x[i][j] += proj[i][j];
            }
        }
        let m = layer_norm(&x, &t("ln2_g")[0], &t("ln2_b")[0]);
        let mut u = matmul(&m, &t("w1"));
        let b1 = &t("b1")[0];
        for row in u.iter_mut() {
            for (j, val) in row.iter_mut().enumerate() {
                *val = gelu(*val + b1[j]);
            }
        }
        let f = matmul(&u, &t("w2"));
        let b2 = &t("b2")[0];
        for i in 0..n {
            for j in 0..d {
                x[i][j] += f[i][j] + b2[j];
            }
        }
    }
    let y = layer_norm(&x, &get(p, "lnf_g")[0], &get(p, "lnf_b")[0]);
    let head: Mat = match &p.head_w {
        Some(_) => get(p, "head_w"),
        None => {
            let t = get(p, "tok_emb");
            (0..d).map(|j| t.iter().map(|row| row[j]).collect()).collect()
        }
    };
    let hb = &get(p, "head_b")[0];
    let mut logits = matmul(&y, &head);
    for row in logits.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += hb[j];
        }
    }
    logits
}

/// Central finite differences over every parameter entry.
///
/// Returns the worst relative error `|a - n| / max(|a|, |n|, floor)` and the
/// number of entries checked.
pub fn finite_difference_check(
    params: &DenoiserParams<f64>,
    analytic: &DenoiserParams<f64>,
    loss: impl Fn(&DenoiserParams<f64>) -> f64,
    step: f64,
    floor: f64,
) -> (f64, String, usize) {
    let mut worst = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    let names: Vec<(String, usize)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.iter().copied().collect()).collect();
    for (ti, (name, len)) in names.iter().enumerate() {
        for idx in 0..*len {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut tensors = p.tensors_mut();
                let slot = tensors[ti].1.iter_mut().nth(idx).unwrap();
                *slot += delta;
                drop(tensors);
                loss(&p)
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = grads[ti][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{idx}] analytic={a:e} numeric={numeric:e}");
            }
            checked += 1;
        }
    }
    (worst, worst_name, checked)
}
