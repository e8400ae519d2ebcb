use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use sha2::{Digest, Sha256};

use crate::rng::{RngStream, INIT};
use crate::{Error, Result, Scalar};

/// How an absent self-conditioning input enters the block embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbsentSelfCond {
    /// No `W_pred` contribution at all.
    Zero,
    /// Treat absence as uniform logits, i.e. `W_pred` applied to `1/V`.
    Uniform,
}

impl std::str::FromStr for AbsentSelfCond {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(AbsentSelfCond::Zero),
            "uniform" => Ok(AbsentSelfCond::Uniform),
            other => Err(Error::Config(format!("unknown absent self-conditioning mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AbsentSelfCond {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AbsentSelfCond::Zero => "zero",
            AbsentSelfCond::Uniform => "uniform",
        })
    }
}

/// Architecture and input-encoding settings persisted with the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Number of diffusion steps `T`; the time tables have `T + 1` rows.
    pub time_steps: usize,
    /// Context-time inputs are quantized to multiples of this.
    pub time_quantum: usize,
    pub tie_embeddings: bool,
    pub absent_self_cond: AbsentSelfCond,
    /// Temperature of the softmax applied to noisy and self-conditioning logits.
    pub input_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: 256,
            time_steps: 200,
            time_quantum: 50,
            tie_embeddings: false,
            absent_self_cond: AbsentSelfCond::Zero,
            input_temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("time_steps", self.time_steps),
            ("time_quantum", self.time_quantum),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.input_temperature > 0.0) {
            return Err(Error::Config("input_temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub ln1_g: Array1<S>,
    pub ln1_b: Array1<S>,
    pub wq: Array2<S>,
    pub wk: Array2<S>,
    pub wv: Array2<S>,
    pub wo: Array2<S>,
    pub ln2_g: Array1<S>,
    pub ln2_b: Array1<S>,
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

/// All learnable weights of the denoiser.
///
/// Matrices are stored `input x output`, so a layer is `x.dot(&w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<S> {
    pub config: ModelConfig,
    /// Clean-token embedding, `V x d`.
    pub tok_emb: Array2<S>,
    /// Projection of softmaxed noisy logits, `V x d`.
    pub w_diff: Array2<S>,
    /// Projection of softmaxed self-conditioning logits, `V x d`.
    pub w_pred: Array2<S>,
    pub pos_emb: Array2<S>,
    pub diff_time: Array2<S>,
    pub ctx_time: Array2<S>,
    pub layers: Vec<LayerParams<S>>,
    pub lnf_g: Array1<S>,
    pub lnf_b: Array1<S>,
    /// Output head, `d x V`; `None` when tied to `tok_emb`.
    pub head_w: Option<Array2<S>>,
    pub head_b: Array1<S>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> DenoiserParams<S> {
    /// Gaussian init (std 0.02) for matrices, unit gains, zero biases. An
    /// untied output head uses std `0.02 / sqrt(d_model)`, so a fresh model's
    /// logits have std about 0.02 at any width and its predictions start near
    /// uniform.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::named(seed, INIT);
        let mut scaled = |rows: usize, cols: usize, std: f64| {
            Array2::from_shape_simple_fn((rows, cols), || S::of(std) * rng.standard_normal::<S>())
        };
        let mut normal = |rows: usize, cols: usize| scaled(rows, cols, INIT_STD);
        let (v, d, ff) = (config.vocab, config.d_model, config.d_ff);
        let tok_emb = normal(v, d);
        let w_diff = normal(v, d);
        let w_pred = normal(v, d);
        let pos_emb = normal(config.max_len, d);
        let diff_time = normal(config.time_steps + 1, d);
        let ctx_time = normal(config.time_steps + 1, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: normal(d, d),
                wk: normal(d, d),
                wv: normal(d, d),
                wo: normal(d, d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: normal(d, ff),
                b1: Array1::zeros(ff),
                w2: normal(ff, d),
                b2: Array1::zeros(d),
            })
            .collect();
        let head_w = (!config.tie_embeddings).then(|| scaled(d, v, INIT_STD / (d as f64).sqrt()));
        Ok(DenoiserParams {
            config: config.clone(),
            tok_emb,
            w_diff,
            w_pred,
            pos_emb,
            diff_time,
            ctx_time,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head_w,
            head_b: Array1::zeros(v),
        })
    }

    /// Same shapes, all zeros. Used as the gradient and moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(S::zero());
        }
        out
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("w_diff".to_string(), self.w_diff.view().into_dyn()),
            ("w_pred".to_string(), self.w_pred.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
            ("diff_time".to_string(), self.diff_time.view().into_dyn()),
            ("ctx_time".to_string(), self.ctx_time.view().into_dyn()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1_g"), layer.ln1_g.view().into_dyn()),
                (p("ln1_b"), layer.ln1_b.view().into_dyn()),
                (p("wq"), layer.wq.view().into_dyn()),
                (p("wk"), layer.wk.view().into_dyn()),
                (p("wv"), layer.wv.view().into_dyn()),
                (p("wo"), layer.wo.view().into_dyn()),
                (p("ln2_g"), layer.ln2_g.view().into_dyn()),
                (p("ln2_b"), layer.ln2_b.view().into_dyn()),
                (p("w1"), layer.w1.view().into_dyn()),
                (p("b1"), layer.b1.view().into_dyn()),
                (p("w2"), layer.w2.view().into_dyn()),
                (p("b2"), layer.b2.view().into_dyn()),
            ]);
        }
        out.push(("lnf_g".to_string(), self.lnf_g.view().into_dyn()));
        out.push(("lnf_b".to_string(), self.lnf_b.view().into_dyn()));
        if let Some(w) = &self.head_w {
            out.push(("head_w".to_string(), w.view().into_dyn()));
        }
        out.push(("head_b".to_string(), self.head_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("w_diff".to_string(), self.w_diff.view_mut().into_dyn()),
            ("w_pred".to_string(), self.w_pred.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
            ("diff_time".to_string(), self.diff_time.view_mut().into_dyn()),
            ("ctx_time".to_string(), self.ctx_time.view_mut().into_dyn()),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1_g"), layer.ln1_g.view_mut().into_dyn()),
                (p("ln1_b"), layer.ln1_b.view_mut().into_dyn()),
                (p("wq"), layer.wq.view_mut().into_dyn()),
                (p("wk"), layer.wk.view_mut().into_dyn()),
                (p("wv"), layer.wv.view_mut().into_dyn()),
                (p("wo"), layer.wo.view_mut().into_dyn()),
                (p("ln2_g"), layer.ln2_g.view_mut().into_dyn()),
                (p("ln2_b"), layer.ln2_b.view_mut().into_dyn()),
                (p("w1"), layer.w1.view_mut().into_dyn()),
                (p("b1"), layer.b1.view_mut().into_dyn()),
                (p("w2"), layer.w2.view_mut().into_dyn()),
                (p("b2"), layer.b2.view_mut().into_dyn()),
            ]);
        }
        out.push(("lnf_g".to_string(), self.lnf_g.view_mut().into_dyn()));
        out.push(("lnf_b".to_string(), self.lnf_b.view_mut().into_dyn()));
        if let Some(w) = &mut self.head_w {
            out.push(("head_w".to_string(), w.view_mut().into_dyn()));
        }
        out.push(("head_b".to_string(), self.head_b.view_mut().into_dyn()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += scale * y);
        }
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }

    /// SHA-256 over the raw bytes of every tensor (at `f64` width).
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Output head as a `d x V` view, transposing the token table when tied.
    pub fn head(&self) -> ndarray::ArrayView2<'_, S> {
        match &self.head_w {
            Some(w) => w.view(),
            None => self.tok_emb.t(),
        }
    }

    /// Convert every tensor to another scalar type.
    pub fn cast<T: Scalar>(&self) -> DenoiserParams<T> {
        let c2 = |a: &Array2<S>| a.mapv(|v| T::of(v.as_f64()));
        let c1 = |a: &Array1<S>| a.mapv(|v| T::of(v.as_f64()));
        DenoiserParams {
            config: self.config.clone(),
            tok_emb: c2(&self.tok_emb),
            w_diff: c2(&self.w_diff),
            w_pred: c2(&self.w_pred),
            pos_emb: c2(&self.pos_emb),
            diff_time: c2(&self.diff_time),
            ctx_time: c2(&self.ctx_time),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: c1(&l.ln1_g),
                    ln1_b: c1(&l.ln1_b),
                    wq: c2(&l.wq),
                    wk: c2(&l.wk),
                    wv: c2(&l.wv),
                    wo: c2(&l.wo),
                    ln2_g: c1(&l.ln2_g),
                    ln2_b: c1(&l.ln2_b),
                    w1: c2(&l.w1),
                    b1: c1(&l.b1),
                    w2: c2(&l.w2),
                    b2: c1(&l.b2),
                })
                .collect(),
            lnf_g: c1(&self.lnf_g),
            lnf_b: c1(&self.lnf_b),
            head_w: self.head_w.as_ref().map(c2),
            head_b: c1(&self.head_b),
        }
    }
}
