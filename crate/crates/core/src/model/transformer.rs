//! Pre-norm transformer forward pass with a recorded tape, and its backward.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{AbsentSelfCond, DenoiserParams, LayerParams};
use crate::{Error, Result, Scalar, TokenId};

const LN_EPS: f64 = 1e-5;

/// Noisy diffusion rows appended after the clean token rows.
#[derive(Clone, Copy, Debug)]
pub struct BlockRows<'a, S> {
    pub noisy: ArrayView2<'a, S>,
    pub self_cond: Option<ArrayView2<'a, S>>,
    pub positions: &'a [usize],
    /// Diffusion-time index of each row.
    pub times: &'a [usize],
}

/// One transformer input: clean token rows followed by optional block rows.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInput<'a, S> {
    pub tokens: &'a [TokenId],
    pub token_positions: &'a [usize],
    /// Context-time index for the token rows; `None` omits the time embedding
    /// (autoregressive mode).
    pub ctx_time: Option<usize>,
    pub block: Option<BlockRows<'a, S>>,
    /// Attention accessibility, `rows x (prefix + rows)`; `None` means full.
    pub mask: Option<ArrayView2<'a, bool>>,
}

impl<S> SequenceInput<'_, S> {
    pub fn rows(&self) -> usize {
        self.tokens.len() + self.block.as_ref().map_or(0, |b| b.positions.len())
    }
}

/// Keys and values of rows encoded earlier, attended to by every new row.
#[derive(Clone, Debug)]
pub struct KvPrefix<S> {
    pub keys: Vec<Array2<S>>,
    pub values: Vec<Array2<S>>,
}

impl<S> KvPrefix<S> {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct NormTape<S> {
    xhat: Array2<S>,
    rstd: Array1<S>,
}

pub(crate) struct LayerTape<S> {
    norm1: NormTape<S>,
    a: Array2<S>,
    q: Array2<S>,
    pub(crate) k: Array2<S>,
    pub(crate) v: Array2<S>,
    probs: Vec<Array2<S>>,
    att: Array2<S>,
    norm2: NormTape<S>,
    m: Array2<S>,
    u: Array2<S>,
    g: Array2<S>,
}

pub(crate) struct EmbedTape<S> {
    tokens: Vec<TokenId>,
    token_positions: Vec<usize>,
    ctx_time: Option<usize>,
    block_probs: Option<Array2<S>>,
    cond_probs: Option<Array2<S>>,
    block_positions: Vec<usize>,
    block_times: Vec<usize>,
}

/// Everything the backward pass needs from a forward pass.
pub struct Tape<S> {
    embed: EmbedTape<S>,
    pub(crate) layers: Vec<LayerTape<S>>,
    final_norm: NormTape<S>,
    y: Array2<S>,
}

pub(crate) fn softmax_rows<S: Scalar>(x: ArrayView2<'_, S>, temperature: f64) -> Array2<S> {
    let inv_t = S::of(1.0 / temperature);
    let mut out = x.mapv(|v| v * inv_t);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: S = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn layer_norm<S: Scalar>(x: &Array2<S>, g: &Array1<S>, b: &Array1<S>) -> (Array2<S>, NormTape<S>) {
    let d = S::of(x.ncols() as f64);
    let eps = S::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<S>() / d;
        *r = S::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, NormTape { xhat, rstd })
}

fn layer_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    tape: &NormTape<S>,
    g: &Array1<S>,
    dg: &mut Array1<S>,
    db: &mut Array1<S>,
) -> Array2<S> {
    *dg += &(dy * &tape.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = S::of(dy.ncols() as f64);
    let mut dx = dy * g;
    for ((mut row, xhat), &rstd) in dx
        .axis_iter_mut(Axis(0))
        .zip(tape.xhat.axis_iter(Axis(0)))
        .zip(tape.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<S>() / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|v, &xh| *v = rstd * (*v - mean_d - xh * mean_dx));
    }
    dx
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::of(3.0) * a * x * x)
}

fn check_finite<S: Scalar>(name: impl FnOnce() -> String, x: &Array2<S>) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            tensor: name(),
            detail: format!("non-finite value at flat index {pos}"),
        });
    }
    Ok(())
}

fn row_bound<S>(table: &Array2<S>, idx: usize, what: &str) -> Result<()> {
    if idx >= table.nrows() {
        return Err(Error::Contract(format!(
            "{what} index {idx} exceeds table size {}",
            table.nrows()
        )));
    }
    Ok(())
}

pub(crate) fn embed<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &SequenceInput<'_, S>,
) -> Result<(Array2<S>, EmbedTape<S>)> {
    let cfg = &params.config;
    let d = cfg.d_model;
    if input.tokens.len() != input.token_positions.len() {
        return Err(Error::Contract("token and position counts differ".into()));
    }
    let mut x = Array2::zeros((input.rows(), d));
    for (r, (&tok, &pos)) in input.tokens.iter().zip(input.token_positions).enumerate() {
        row_bound(&params.tok_emb, tok as usize, "token")?;
        row_bound(&params.pos_emb, pos, "position")?;
        let mut row = x.row_mut(r);
        row += &params.tok_emb.row(tok as usize);
        row += &params.pos_emb.row(pos);
        if let Some(tq) = input.ctx_time {
            row_bound(&params.ctx_time, tq, "context time")?;
            row += &params.ctx_time.row(tq);
        }
    }
    let mut tape = EmbedTape {
        tokens: input.tokens.to_vec(),
        token_positions: input.token_positions.to_vec(),
        ctx_time: input.ctx_time,
        block_probs: None,
        cond_probs: None,
        block_positions: Vec::new(),
        block_times: Vec::new(),
    };
    if let Some(block) = &input.block {
        let rows = block.noisy.nrows();
        if block.noisy.ncols() != cfg.vocab || block.positions.len() != rows || block.times.len() != rows {
            return Err(Error::Contract(format!(
                "noisy block is {:?} with {} positions and {} times; expected {} columns and one of each per row",
                block.noisy.dim(),
                block.positions.len(),
                block.times.len(),
                cfg.vocab
            )));
        }
        let off = input.tokens.len();
        let probs = softmax_rows(block.noisy, cfg.input_temperature);
        let mut h = probs.dot(&params.w_diff);
        let cond_probs = match block.self_cond {
            Some(sc) => {
                if sc.dim() != block.noisy.dim() {
                    return Err(Error::Contract("self-conditioning shape differs from the noisy block".into()));
                }
                Some(softmax_rows(sc, cfg.input_temperature))
            }
            None => match cfg.absent_self_cond {
                AbsentSelfCond::Zero => None,
                AbsentSelfCond::Uniform => {
                    Some(Array2::from_elem(block.noisy.dim(), S::one() / S::of(cfg.vocab as f64)))
                }
            },
        };
        if let Some(cp) = &cond_probs {
            h += &cp.dot(&params.w_pred);
        }
        for (r, (&pos, &t)) in block.positions.iter().zip(block.times).enumerate() {
            row_bound(&params.pos_emb, pos, "position")?;
            row_bound(&params.diff_time, t, "diffusion time")?;
            let mut row = h.row_mut(r);
            row += &params.pos_emb.row(pos);
            row += &params.diff_time.row(t);
        }
        x.slice_mut(s![off.., ..]).assign(&h);
        tape.block_probs = Some(probs);
        tape.cond_probs = cond_probs;
        tape.block_positions = block.positions.to_vec();
        tape.block_times = block.times.to_vec();
    }
    Ok((x, tape))
}

fn layer_forward<S: Scalar>(
    layer: &LayerParams<S>,
    n_heads: usize,
    x: &Array2<S>,
    prefix: Option<(&Array2<S>, &Array2<S>)>,
    mask: Option<ArrayView2<'_, bool>>,
) -> (Array2<S>, LayerTape<S>) {
    let rows = x.nrows();
    let d = x.ncols();
    let dh = d / n_heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let (a, norm1) = layer_norm(x, &layer.ln1_g, &layer.ln1_b);
    let q = a.dot(&layer.wq);
    let k = a.dot(&layer.wk);
    let v = a.dot(&layer.wv);
    let (k_all, v_all) = match prefix {
        Some((pk, pv)) => (
            ndarray::concatenate(Axis(0), &[pk.view(), k.view()]).expect("matching widths"),
            ndarray::concatenate(Axis(0), &[pv.view(), v.view()]).expect("matching widths"),
        ),
        None => (k.clone(), v.clone()),
    };
    let mut att = Array2::zeros((rows, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k_all.slice(cols).t());
        for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
            let mut max = S::neg_infinity();
            for (j, val) in row.iter_mut().enumerate() {
                *val *= scale;
                if allowed(j) && *val > max {
                    max = *val;
                }
            }
            let mut total = S::zero();
            for (j, val) in row.iter_mut().enumerate() {
                *val = if allowed(j) { (*val - max).exp() } else { S::zero() };
                total += *val;
            }
            row.mapv_inplace(|e| e / total);
        }
        att.slice_mut(cols).assign(&p.dot(&v_all.slice(cols)));
        probs.push(p);
    }
    let x1 = x + &att.dot(&layer.wo);
    let (m, norm2) = layer_norm(&x1, &layer.ln2_g, &layer.ln2_b);
    let u = m.dot(&layer.w1) + &layer.b1;
    let g = u.mapv(gelu);
    let out = &x1 + &(g.dot(&layer.w2) + &layer.b2);
    let tape = LayerTape {
        norm1,
        a,
        q,
        k,
        v,
        probs,
        att,
        norm2,
        m,
        u,
        g,
    };
    (out, tape)
}

/// Run the network; returns logits for every input row.
pub fn forward<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &SequenceInput<'_, S>,
    prefix: Option<&KvPrefix<S>>,
) -> Result<(Array2<S>, Tape<S>)> {
    let rows = input.rows();
    let prefix_len = prefix.map_or(0, |p| p.len());
    if let Some(m) = &input.mask {
        if m.dim() != (rows, prefix_len + rows) {
            return Err(Error::Contract(format!(
                "mask is {:?}, layout needs ({rows}, {})",
                m.dim(),
                prefix_len + rows
            )));
        }
    }
    if rows == 0 {
        return Err(Error::Contract("forward pass over an empty input".into()));
    }
    let (mut x, embed_tape) = embed(params, input)?;
    check_finite(|| "embedding".into(), &x)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let kv = prefix.map(|p| (&p.keys[l], &p.values[l]));
        let (out, tape) = layer_forward(layer, params.config.n_heads, &x, kv, input.mask);
        check_finite(|| format!("layers.{l}.output"), &out)?;
        x = out;
        layers.push(tape);
    }
    let (y, final_norm) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = y.dot(&params.head()) + &params.head_b;
    check_finite(|| "logits".into(), &logits)?;
    Ok((
        logits,
        Tape {
            embed: embed_tape,
            layers,
            final_norm,
            y,
        },
    ))
}

fn scatter_rows<S: Scalar>(table: &mut Array2<S>, idx: usize, grad: ArrayView1<'_, S>) {
    let mut row = table.row_mut(idx);
    row += &grad;
}

/// Accumulate parameter gradients for `dlogits` into `grads`.
///
/// Masked attention entries have zero probability, so they carry zero
/// gradient without consulting the mask. Only valid for passes run without a
/// key/value prefix.
pub fn backward<S: Scalar>(
    params: &DenoiserParams<S>,
    tape: &Tape<S>,
    dlogits: &Array2<S>,
    grads: &mut DenoiserParams<S>,
) {
    let head = params.head();
    match &mut grads.head_w {
        Some(gw) => *gw += &tape.y.t().dot(dlogits),
        None => grads.tok_emb += &dlogits.t().dot(&tape.y),
    }
    grads.head_b += &dlogits.sum_axis(Axis(0));
    let dy = dlogits.dot(&head.t());
    let mut dx = layer_norm_backward(
        &dy,
        &tape.final_norm,
        &params.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    let n_heads = params.config.n_heads;
    let dh = params.config.head_dim();
    let scale = S::of(1.0 / (dh as f64).sqrt());
    for (l, (layer, lt)) in params.layers.iter().zip(&tape.layers).enumerate().rev() {
        let gl = &mut grads.layers[l];
        // feed-forward residual
        gl.b2 += &dx.sum_axis(Axis(0));
        gl.w2 += &lt.g.t().dot(&dx);
        let mut du = dx.dot(&layer.w2.t());
        Zip::from(&mut du).and(&lt.u).for_each(|d, &u| *d *= gelu_grad(u));
        gl.b1 += &du.sum_axis(Axis(0));
        gl.w1 += &lt.m.t().dot(&du);
        let dm = du.dot(&layer.w1.t());
        dx += &layer_norm_backward(&dm, &lt.norm2, &layer.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);

        // attention residual
        gl.wo += &lt.att.t().dot(&dx);
        let datt = dx.dot(&layer.wo.t());
        let mut dq = Array2::zeros(lt.q.dim());
        let mut dk = Array2::zeros(lt.k.dim());
        let mut dv = Array2::zeros(lt.v.dim());
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lt.probs[h];
            let dout = datt.slice(cols);
            let dp = dout.dot(&lt.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let mut ds = p * &dp;
            for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let inner: S = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * inner);
            }
            ds.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
        }
        gl.wq += &lt.a.t().dot(&dq);
        gl.wk += &lt.a.t().dot(&dk);
        gl.wv += &lt.a.t().dot(&dv);
        let da = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        dx += &layer_norm_backward(&da, &lt.norm1, &layer.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
    }

    let et = &tape.embed;
    for (r, (&tok, &pos)) in et.tokens.iter().zip(&et.token_positions).enumerate() {
        let g = dx.row(r);
        scatter_rows(&mut grads.tok_emb, tok as usize, g);
        scatter_rows(&mut grads.pos_emb, pos, g);
        if let Some(tq) = et.ctx_time {
            scatter_rows(&mut grads.ctx_time, tq, g);
        }
    }
    if let Some(probs) = &et.block_probs {
        let off = et.tokens.len();
        let dh_block = dx.slice(s![off.., ..]);
        grads.w_diff += &probs.t().dot(&dh_block);
        if let Some(cp) = &et.cond_probs {
            grads.w_pred += &cp.t().dot(&dh_block);
        }
        for (r, (&pos, &t)) in et.block_positions.iter().zip(&et.block_times).enumerate() {
            let g = dh_block.row(r);
            scatter_rows(&mut grads.pos_emb, pos, g);
            scatter_rows(&mut grads.diff_time, t, g);
        }
    }
}

/// Mean (weighted) cross-entropy over the rows that carry a target, and its
/// gradient with respect to the logits. `norm` is the divisor for the mean.
pub fn cross_entropy<S: Scalar>(
    logits: &Array2<S>,
    targets: &[Option<TokenId>],
    norm: f64,
) -> (f64, Array2<S>) {
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    let inv = S::of(1.0 / norm);
    for ((row, mut drow), target) in logits
        .axis_iter(Axis(0))
        .zip(dlogits.axis_iter_mut(Axis(0)))
        .zip(targets)
    {
        let Some(target) = *target else { continue };
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let total: S = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        loss += (log_z - row[target as usize]).as_f64();
        Zip::from(&mut drow).and(&row).for_each(|d, &v| *d = (v - log_z).exp() * inv);
        drow[target as usize] -= inv;
    }
    (loss / norm, dlogits)
}
