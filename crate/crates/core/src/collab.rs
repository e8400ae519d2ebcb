//! Inference-time ensembling of a core model with a user model that alone
//! sees the expert data.

use ndarray::{Array2, Axis, Zip};

use crate::decode::{decode_sequence, BlockDenoiser, DecodeConfig, DecodeOutput, MemberRecord, ModelStream, ShardTable};
use crate::model::{ar_forward, DenoiserParams};
use crate::rng::{RngStream, PROJECTION};
use crate::simplex::Projection;
use crate::{Error, Result, Scalar, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollabMode {
    Diffusion,
    Autoregressive,
}

impl std::str::FromStr for CollabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(CollabMode::Diffusion),
            "autoregressive" | "ar" => Ok(CollabMode::Autoregressive),
            other => Err(Error::Config(format!("unknown collaboration mode `{other}`"))),
        }
    }
}

fn check_weights(lambda: f64, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

/// `(1 - l) core + l (1 + a) with - l a without`. Terms whose coefficient
/// is zero are skipped, so the reductions are exact.
pub fn combine_logits<S: Scalar>(
    core: &Array2<S>,
    with_expert: &Array2<S>,
    without_expert: &Array2<S>,
    lambda: f64,
    alpha: f64,
) -> Result<Array2<S>> {
    check_weights(lambda, alpha)?;
    if core.dim() != with_expert.dim() || core.dim() != without_expert.dim() {
        return Err(Error::Contract(format!(
            "logit shapes differ: {:?}, {:?}, {:?}",
            core.dim(),
            with_expert.dim(),
            without_expert.dim()
        )));
    }
    let mut out = Array2::zeros(core.dim());
    let mut add = |coef: f64, x: &Array2<S>| {
        if coef != 0.0 {
            let c = S::of(coef);
            Zip::from(&mut out).and(x).for_each(|o, &v| *o += c * v);
        }
    };
    add(1.0 - lambda, core);
    add(lambda * (1.0 + alpha), with_expert);
    add(-lambda * alpha, without_expert);
    Ok(out)
}

/// Next-token distribution of the autoregressive ensemble for one position.
pub fn combined_next_token_distribution(
    core: &[f64],
    with_expert: &[f64],
    without_expert: &[f64],
    lambda: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).map_err(|e| Error::Contract(e.to_string()));
    let combined = combine_logits(&row(core)?, &row(with_expert)?, &row(without_expert)?, lambda, alpha)?;
    let max = combined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = combined.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// A core model, a user model, and how to weigh them.
#[derive(Clone, Debug)]
pub struct CollabSpec<'a, S> {
    pub core: ShardTable<'a, S>,
    pub user: ShardTable<'a, S>,
    pub lambda: f64,
    pub alpha: f64,
    /// Expert data, visible to the user model only.
    pub expert: Vec<TokenId>,
    pub instruction: Vec<TokenId>,
    /// Feed the combined logits back as every model's self-conditioning.
    pub feed_combined: bool,
}

impl<S: Scalar> CollabSpec<'_, S> {
    pub fn validate(&self) -> Result<()> {
        check_weights(self.lambda, self.alpha)?;
        if self.core.vocab() != self.user.vocab() {
            return Err(Error::Config(format!(
                "core vocabulary {} differs from user vocabulary {}",
                self.core.vocab(),
                self.user.vocab()
            )));
        }
        Ok(())
    }
}

/// Three model streams combined at every denoising iteration.
pub struct CollabDenoiser<'a, S> {
    core: ModelStream<'a, S>,
    user_with: ModelStream<'a, S>,
    user_without: ModelStream<'a, S>,
    expert: Vec<TokenId>,
    lambda: f64,
    alpha: f64,
    feed_combined: bool,
}

impl<'a, S: Scalar> CollabDenoiser<'a, S> {
    pub fn new(spec: &CollabSpec<'a, S>) -> Result<Self> {
        spec.validate()?;
        Ok(CollabDenoiser {
            core: ModelStream::new("core", spec.core.clone()),
            user_with: ModelStream::new("user+expert", spec.user.clone()),
            user_without: ModelStream::new("user", spec.user.clone()),
            expert: spec.expert.clone(),
            lambda: spec.lambda,
            alpha: spec.alpha,
            feed_combined: spec.feed_combined,
        })
    }
}

impl<S: Scalar> BlockDenoiser<S> for CollabDenoiser<'_, S> {
    fn vocab(&self) -> usize {
        self.core.vocab()
    }

    fn max_len(&self) -> usize {
        self.core
            .max_len()
            .min(self.user_with.max_len().saturating_sub(self.expert.len()))
    }

    fn reset(&mut self) {
        self.core.reset();
        self.user_with.reset();
        self.user_without.reset();
    }

    fn predict(
        &mut self,
        context: &[TokenId],
        noisy: &Array2<S>,
        t: usize,
        cfg: &DecodeConfig,
    ) -> Result<(Array2<S>, Vec<MemberRecord>)> {
        let mut expert_context = self.expert.clone();
        expert_context.extend_from_slice(context);
        let (core, (with, without)) = rayon::join(
            || self.core.predict(context, noisy, t, cfg),
            || {
                rayon::join(
                    || self.user_with.predict(&expert_context, noisy, t, cfg),
                    || self.user_without.predict(context, noisy, t, cfg),
                )
            },
        );
        let (core, mut records) = core?;
        let (with, r) = with?;
        records.extend(r);
        let (without, r) = without?;
        records.extend(r);
        let combined = combine_logits(&core, &with, &without, self.lambda, self.alpha)?;
        if self.feed_combined {
            self.core.set_self_cond(combined.clone());
            self.user_with.set_self_cond(combined.clone());
            self.user_without.set_self_cond(combined.clone());
        }
        Ok((combined, records))
    }
}

/// Block-diffusion decode of the ensemble, prompted by the instruction.
pub fn collab_decode_diffusion<S: Scalar>(spec: &CollabSpec<'_, S>, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let mut den = CollabDenoiser::new(spec)?;
    decode_sequence(&mut den, &spec.instruction, cfg)
}

/// Options for token-by-token generation.
#[derive(Clone, Debug, PartialEq)]
pub struct ArDecodeConfig {
    pub max_tokens: usize,
    pub projection: Projection,
    pub seed: u64,
    pub eos: Option<TokenId>,
}

fn last_row<S: Scalar>(params: &DenoiserParams<S>, prefix: &[TokenId]) -> Result<Array2<S>> {
    let logits = ar_forward(params, prefix)?;
    let last = logits.nrows() - 1;
    Ok(logits.select(Axis(0), &[last]))
}

fn ar_loop(
    mut next: impl FnMut(&[TokenId]) -> Result<Array2<f64>>,
    prefix_extra: usize,
    max_len: usize,
    prompt: &[TokenId],
    cfg: &ArDecodeConfig,
) -> Result<Vec<TokenId>> {
    cfg.projection.validate()?;
    if prompt.is_empty() {
        return Err(Error::Contract("autoregressive decoding needs a non-empty prompt".into()));
    }
    let mut rng = RngStream::named(cfg.seed, PROJECTION);
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_tokens && context.len() + prefix_extra < max_len {
        let logits = next(&context)?;
        let id = cfg.projection.choose(&logits, &mut rng)?[0];
        if cfg.eos == Some(id) {
            break;
        }
        out.push(id);
        context.push(id);
    }
    Ok(out)
}

fn to_f64<S: Scalar>(a: Array2<S>) -> Array2<f64> {
    a.mapv(|v| v.as_f64())
}

/// Plain autoregressive generation from one model.
pub fn ar_decode<S: Scalar>(params: &DenoiserParams<S>, prompt: &[TokenId], cfg: &ArDecodeConfig) -> Result<Vec<TokenId>> {
    ar_loop(
        |ctx| last_row(params, ctx).map(to_f64),
        0,
        params.config.max_len,
        prompt,
        cfg,
    )
}

/// Token-level product-of-experts ensemble using the autoregressive heads.
pub fn collab_decode_ar<S: Scalar>(
    core: &DenoiserParams<S>,
    user: &DenoiserParams<S>,
    spec: &CollabSpec<'_, S>,
    cfg: &ArDecodeConfig,
) -> Result<Vec<TokenId>> {
    check_weights(spec.lambda, spec.alpha)?;
    if core.config.vocab != user.config.vocab {
        return Err(Error::Config(format!(
            "core vocabulary {} differs from user vocabulary {}",
            core.config.vocab, user.config.vocab
        )));
    }
    let max_len = core.config.max_len.min(user.config.max_len.saturating_sub(spec.expert.len()));
    ar_loop(
        |ctx| {
            let mut with_ctx = spec.expert.clone();
            with_ctx.extend_from_slice(ctx);
            let c = to_f64(last_row(core, ctx)?);
            let w = to_f64(last_row(user, &with_ctx)?);
            let wo = to_f64(last_row(user, ctx)?);
            combine_logits(&c, &w, &wo, spec.lambda, spec.alpha)
        },
        0,
        max_len,
        &spec.instruction,
        cfg,
    )
}

/// Decode once per lambda, all other settings fixed.
pub fn lambda_sweep<S: Scalar>(
    spec: &CollabSpec<'_, S>,
    lambdas: &[f64],
    cfg: &DecodeConfig,
) -> Result<Vec<(f64, DecodeOutput)>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let spec = CollabSpec {
                lambda,
                ..spec.clone()
            };
            collab_decode_diffusion(&spec, cfg).map(|out| (lambda, out))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn worked_combination() {
        let out: Array2<f64> = combine_logits(&array![[2.0, 0.0]], &array![[0.0, 2.0]], &array![[1.0, 1.0]], 0.2, 1.0).unwrap();
        assert!((out[[0, 0]] - 1.4).abs() < 1e-12);
        assert!((out[[0, 1]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn balanced_experts_give_uniform_distribution() {
        let l3 = 3f64.ln();
        let d = combined_next_token_distribution(&[l3, 0.0], &[0.0, l3], &[9.0, -4.0], 0.5, 0.0).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reductions_are_exact() {
        let core = array![[0.3, -1.2, 7.0]];
        let with = array![[5.0, 0.25, -3.0]];
        let without = array![[f64::NAN, 1.0, 2.0]];
        assert_eq!(combine_logits(&core, &with, &without, 0.0, 1.0).unwrap(), core);
        assert_eq!(combine_logits(&core, &with, &without, 1.0, 0.0).unwrap(), with);
    }

    #[test]
    fn bad_weights_and_shapes() {
        let a = array![[1.0, 2.0]];
        assert!(matches!(combine_logits(&a, &a, &a, 1.5, 1.0), Err(Error::Config(_))));
        assert!(matches!(combine_logits(&a, &a, &a, 0.5, -1.0), Err(Error::Config(_))));
        let b = array![[1.0, 2.0, 3.0]];
        assert!(matches!(combine_logits(&a, &b, &a, 0.5, 1.0), Err(Error::Contract(_))));
    }

    fn rows(v: Vec<f64>) -> Array2<f64> {
        Array2::from_shape_vec((2, 3), v).unwrap()
    }

    proptest! {
        #[test]
        fn affine_in_core(
            a in prop::collection::vec(-5.0..5.0f64, 6),
            u in prop::collection::vec(-5.0..5.0f64, 6),
            v in prop::collection::vec(-5.0..5.0f64, 6),
            d in prop::collection::vec(-5.0..5.0f64, 6),
            lambda in 0.0..=1.0f64,
            alpha in 0.0..3.0f64,
        ) {
            let (a, u, v, d) = (rows(a), rows(u), rows(v), rows(d));
            let base = combine_logits(&a, &u, &v, lambda, alpha).unwrap();
            let moved = combine_logits(&(&a + &d), &u, &v, lambda, alpha).unwrap();
            let diff = &moved - &base;
            for (x, y) in diff.iter().zip(d.iter()) {
                prop_assert!((x - (1.0 - lambda) * y).abs() < 1e-9);
            }
        }

        #[test]
        fn shared_shift_moves_output_and_keeps_argmax(
            a in prop::collection::vec(-5.0..5.0f64, 6),
            u in prop::collection::vec(-5.0..5.0f64, 6),
            v in prop::collection::vec(-5.0..5.0f64, 6),
            shift in -5.0..5.0f64,
            lambda in 0.0..=1.0f64,
            alpha in 0.0..3.0f64,
        ) {
            let (a, u, v) = (rows(a), rows(u), rows(v));
            let base = combine_logits(&a, &u, &v, lambda, alpha).unwrap();
            let moved = combine_logits(&(&a + shift), &(&u + shift), &(&v + shift), lambda, alpha).unwrap();
            for (m, b) in moved.iter().zip(base.iter()) {
                prop_assert!((m - b - shift).abs() < 1e-9);
            }
            let am = |m: &Array2<f64>| m.rows().into_iter().map(crate::simplex::argmax_row).collect::<Vec<_>>();
            let near_tie = base.rows().into_iter().any(|r| {
                let mut s: Vec<f64> = r.to_vec();
                s.sort_by(|x, y| y.total_cmp(x));
                s[0] - s[1] < 1e-6
            });
            if !near_tie {
                prop_assert_eq!(am(&moved), am(&base));
            }
        }
    }
}
