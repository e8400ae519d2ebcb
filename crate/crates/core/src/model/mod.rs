//! The denoiser network and its entry points.
//!
//! One backbone serves two roles. In diffusion mode, clean context tokens and
//! a noisy block (softmaxed and projected through `W_diff`, plus an optional
//! self-conditioning term through `W_pred`) are encoded under a block mask and
//! the block rows yield token logits. In autoregressive mode the same weights
//! run causally over tokens alone and predict the next token.

mod checkpoint;
mod params;
mod transformer;

use ndarray::{Array2, ArrayView2};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{AbsentSelfCond, DenoiserParams, LayerParams, ModelConfig};
pub use transformer::{cross_entropy, BlockRows, KvPrefix, SequenceInput, Tape};

use crate::mask::{causal_mask, ParallelLayout};
use crate::{Error, Result, Scalar, TokenId};

/// Self-conditioning input: the previous prediction's logits, or nothing.
#[derive(Clone, Copy, Debug)]
pub enum SelfCond<'a, S> {
    Absent,
    Logits(&'a Array2<S>),
}

impl<'a, S> SelfCond<'a, S> {
    pub fn from_option(o: Option<&'a Array2<S>>) -> Self {
        o.map_or(SelfCond::Absent, SelfCond::Logits)
    }

    fn view(&self) -> Option<ArrayView2<'a, S>> {
        match *self {
            SelfCond::Absent => None,
            SelfCond::Logits(l) => Some(l.view()),
        }
    }
}

/// One masked parallel diffusion pass over all blocks of a sequence.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionInput<'a, S> {
    pub layout: &'a ParallelLayout,
    /// Noisy logits for all `n * B` target positions.
    pub noisy: &'a Array2<S>,
    pub self_cond: SelfCond<'a, S>,
    /// Diffusion timestep of each block.
    pub block_times: &'a [usize],
    /// Context-time index, already quantized.
    pub ctx_time: usize,
}

/// Quantize a timestep to the start of its `q`-wide bucket.
pub fn quantize_timestep(t: usize, q: usize) -> usize {
    t - t % q.max(1)
}

fn check_len<S: Scalar>(params: &DenoiserParams<S>, len: usize) -> Result<()> {
    if len > params.config.max_len {
        return Err(Error::Contract(format!(
            "sequence of {len} positions exceeds max_len {}",
            params.config.max_len
        )));
    }
    Ok(())
}

fn diffusion_sequence<'a, S: Scalar>(
    params: &DenoiserParams<S>,
    input: &DiffusionInput<'a, S>,
    row_times: &'a [usize],
) -> Result<SequenceInput<'a, S>> {
    let layout = input.layout;
    let b = layout.block();
    if input.block_times.len() != layout.n_blocks() {
        return Err(Error::Contract(format!(
            "{} block times for {} blocks",
            input.block_times.len(),
            layout.n_blocks()
        )));
    }
    if input.noisy.nrows() != layout.n_blocks() * b {
        return Err(Error::Contract(format!(
            "noisy block has {} rows, layout needs {}",
            input.noisy.nrows(),
            layout.n_blocks() * b
        )));
    }
    check_len(params, layout.c0() + layout.targets.len())?;
    Ok(SequenceInput {
        tokens: &layout.context,
        token_positions: layout.context_positions(),
        ctx_time: Some(input.ctx_time),
        block: Some(BlockRows {
            noisy: input.noisy.view(),
            self_cond: input.self_cond.view(),
            positions: layout.block_positions(),
            times: row_times,
        }),
        mask: Some(layout.mask.delta.view()),
    })
}

fn expand_times(block_times: &[usize], b: usize) -> Vec<usize> {
    block_times.iter().flat_map(|&t| std::iter::repeat_n(t, b)).collect()
}

/// Predicted logits for every noisy block position (`n * B` rows).
pub fn denoise_forward<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &DiffusionInput<'_, S>,
) -> Result<Array2<S>> {
    let times = expand_times(input.block_times, input.layout.block());
    let seq = diffusion_sequence(params, input, &times)?;
    let (logits, _) = transformer::forward(params, &seq, None)?;
    let ctx = input.layout.context.len();
    Ok(logits.slice(ndarray::s![ctx.., ..]).to_owned())
}

/// Summed input embeddings before the first transformer layer.
pub fn input_embedding<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &DiffusionInput<'_, S>,
) -> Result<Array2<S>> {
    let times = expand_times(input.block_times, input.layout.block());
    let seq = diffusion_sequence(params, input, &times)?;
    Ok(transformer::embed(params, &seq)?.0)
}

/// Next-token logits, one row per prefix position.
pub fn ar_forward<S: Scalar>(params: &DenoiserParams<S>, prefix: &[TokenId]) -> Result<Array2<S>> {
    if prefix.is_empty() {
        return Err(Error::Contract("autoregressive forward needs a non-empty prefix".into()));
    }
    check_len(params, prefix.len())?;
    let positions: Vec<usize> = (0..prefix.len()).collect();
    let mask = causal_mask(prefix.len());
    let seq = SequenceInput {
        tokens: prefix,
        token_positions: &positions,
        ctx_time: None,
        block: None,
        mask: Some(mask.view()),
    };
    Ok(transformer::forward(params, &seq, None)?.0)
}

/// What a loss is computed over.
#[derive(Clone, Copy, Debug)]
pub enum LossInput<'a, S> {
    /// Targets are `layout.targets`; `loss_mask[i]` keeps target `i`.
    Diffusion {
        input: DiffusionInput<'a, S>,
        loss_mask: &'a [bool],
    },
    /// Tokens `w`; row `i` predicts `w[i + 1]` when `loss_mask[i]`.
    Autoregressive {
        tokens: &'a [TokenId],
        loss_mask: &'a [bool],
    },
}

impl<S> LossInput<'_, S> {
    /// Number of target tokens that contribute to the loss.
    pub fn target_count(&self) -> usize {
        let mask = match self {
            LossInput::Diffusion { loss_mask, .. } => loss_mask,
            LossInput::Autoregressive { loss_mask, .. } => loss_mask,
        };
        mask.iter().filter(|&&m| m).count()
    }
}

/// Summed NLL divided by `norm`, and its gradient for every parameter.
///
/// With `norm = target_count()` this is the mean token cross-entropy; batch
/// training passes the batch-wide count so per-example results simply add.
pub fn loss_and_grads_normalized<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &LossInput<'_, S>,
    norm: f64,
) -> Result<(f64, DenoiserParams<S>)> {
    let mut grads = params.zeros_like();
    let loss = match input {
        LossInput::Diffusion { input, loss_mask } => {
            let layout = input.layout;
            if loss_mask.len() != layout.targets.len() {
                return Err(Error::Contract("loss mask length differs from the targets".into()));
            }
            let times = expand_times(input.block_times, layout.block());
            let seq = diffusion_sequence(params, input, &times)?;
            let (logits, tape) = transformer::forward(params, &seq, None)?;
            let ctx = layout.context.len();
            let targets: Vec<Option<TokenId>> = (0..logits.nrows())
                .map(|r| {
                    (r >= ctx && loss_mask[r - ctx]).then(|| layout.targets[r - ctx])
                })
                .collect();
            validate_targets(&targets, params.config.vocab)?;
            let (loss, dlogits) = cross_entropy(&logits, &targets, norm);
            transformer::backward(params, &tape, &dlogits, &mut grads);
            loss
        }
        LossInput::Autoregressive { tokens, loss_mask } => {
            if tokens.len() < 2 || loss_mask.len() != tokens.len() - 1 {
                return Err(Error::Contract(
                    "autoregressive loss needs >= 2 tokens and one mask entry per target".into(),
                ));
            }
            check_len(params, tokens.len())?;
            let positions: Vec<usize> = (0..tokens.len()).collect();
            let mask = causal_mask(tokens.len());
            let seq = SequenceInput {
                tokens,
                token_positions: &positions,
                ctx_time: None,
                block: None,
                mask: Some(mask.view()),
            };
            let (logits, tape) = transformer::forward(params, &seq, None)?;
            let targets: Vec<Option<TokenId>> = (0..tokens.len())
                .map(|r| (r + 1 < tokens.len() && loss_mask[r]).then(|| tokens[r + 1]))
                .collect();
            validate_targets(&targets, params.config.vocab)?;
            let (loss, dlogits) = cross_entropy(&logits, &targets, norm);
            transformer::backward(params, &tape, &dlogits, &mut grads);
            loss
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numeric {
            tensor: "loss".into(),
            detail: format!("loss evaluated to {loss}"),
        });
    }
    Ok((loss, grads))
}

/// Mean token cross-entropy and its gradients.
pub fn loss_and_grads<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &LossInput<'_, S>,
) -> Result<(f64, DenoiserParams<S>)> {
    let count = input.target_count();
    if count == 0 {
        return Err(Error::Contract("no target contributes to the loss".into()));
    }
    loss_and_grads_normalized(params, input, count as f64)
}

fn validate_targets(targets: &[Option<TokenId>], vocab: usize) -> Result<()> {
    match targets.iter().flatten().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(Error::Domain(format!("target id {t} outside vocabulary {vocab}"))),
        None => Ok(()),
    }
}

/// Encoded keys/values of a clean context, reused across denoising steps.
#[derive(Clone, Debug)]
pub struct ContextCache<S> {
    prefix: KvPrefix<S>,
    len: usize,
    ctx_time: usize,
}

impl<S: Scalar> ContextCache<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ctx_time(&self) -> usize {
        self.ctx_time
    }
}

/// Causally encode `context` at the (quantized) context time.
pub fn encode_context<S: Scalar>(
    params: &DenoiserParams<S>,
    context: &[TokenId],
    ctx_time: usize,
) -> Result<ContextCache<S>> {
    check_len(params, context.len())?;
    let d = params.config.d_model;
    if context.is_empty() {
        let empty = || vec![Array2::zeros((0, d)); params.layers.len()];
        return Ok(ContextCache {
            prefix: KvPrefix {
                keys: empty(),
                values: empty(),
            },
            len: 0,
            ctx_time,
        });
    }
    let positions: Vec<usize> = (0..context.len()).collect();
    let mask = causal_mask(context.len());
    let seq = SequenceInput {
        tokens: context,
        token_positions: &positions,
        ctx_time: Some(ctx_time),
        block: None,
        mask: Some(mask.view()),
    };
    let (_, tape) = transformer::forward(params, &seq, None)?;
    let (keys, values) = tape.layers.into_iter().map(|l| (l.k, l.v)).unzip();
    Ok(ContextCache {
        prefix: KvPrefix { keys, values },
        len: context.len(),
        ctx_time,
    })
}

/// Logits for one noisy block that follows an encoded context.
pub fn denoise_block<S: Scalar>(
    params: &DenoiserParams<S>,
    cache: &ContextCache<S>,
    noisy: &Array2<S>,
    self_cond: SelfCond<'_, S>,
    t: usize,
) -> Result<Array2<S>> {
    let rows = noisy.nrows();
    check_len(params, cache.len + rows)?;
    let positions: Vec<usize> = (cache.len..cache.len + rows).collect();
    let times = vec![t; rows];
    let seq = SequenceInput {
        tokens: &[],
        token_positions: &[],
        ctx_time: None,
        block: Some(BlockRows {
            noisy: noisy.view(),
            self_cond: self_cond.view(),
            positions: &positions,
            times: &times,
        }),
        mask: None,
    };
    Ok(transformer::forward(params, &seq, Some(&cache.prefix))?.0)
}
