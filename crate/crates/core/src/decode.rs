//! Iterative block decoding: denoise from pure noise, project, re-noise,
//! and append finished blocks to the context.

use std::fmt::Write as _;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::model::{denoise_block, encode_context, ContextCache, DenoiserParams, SelfCond};
use crate::rng::{RngStream, NOISE, PROJECTION};
use crate::simplex::{
    add_noise, argmax_row, logits_projection, sample_noise, NoiseSchedule, Projection, ScheduleKind, SimplexLogits,
};
use crate::tokenizer::EOS;
use crate::{Error, Result, Scalar, TokenId};

pub use crate::model::quantize_timestep;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub steps: usize,
    /// Denoising stops once `t` reaches `floor(stop_at * T)`.
    pub stop_at: f64,
    pub block: usize,
    pub max_rounds: usize,
    pub projection: Projection,
    pub seed: u64,
    /// Context-time quantization granularity.
    pub quantum: usize,
    pub schedule: ScheduleKind,
    pub k: f64,
    pub eos: Option<TokenId>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            steps: 200,
            stop_at: 0.4,
            block: 4,
            max_rounds: 16,
            projection: Projection::TopP {
                p: 0.95,
                temperature: 1.0,
            },
            seed: 0,
            quantum: 50,
            schedule: ScheduleKind::Cosine,
            k: 5.0,
            eos: Some(EOS),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("decode steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.stop_at) {
            return Err(Error::Config(format!("stop_at must be in [0, 1), got {}", self.stop_at)));
        }
        if self.block == 0 {
            return Err(Error::Config("block size must be >= 1".into()));
        }
        if self.quantum == 0 {
            return Err(Error::Config("timestep quantum must be >= 1".into()));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config("K must be positive".into()));
        }
        self.projection.validate()
    }

    /// Last timestep that is denoised.
    pub fn final_step(&self) -> usize {
        (self.stop_at * self.steps as f64).floor() as usize + 1
    }

    /// `T - floor(stop_at * T)`.
    pub fn iterations(&self) -> usize {
        self.steps + 1 - self.final_step()
    }
}

/// Models responsible for disjoint timestep ranges `(lo * T, hi * T]`.
#[derive(Clone, Debug)]
pub struct ShardTable<'a, S> {
    shards: Vec<(f64, f64, &'a DenoiserParams<S>)>,
}

impl<'a, S: Scalar> ShardTable<'a, S> {
    /// One model for every timestep.
    pub fn single(params: &'a DenoiserParams<S>) -> Self {
        ShardTable {
            shards: vec![(0.0, 1.0, params)],
        }
    }

    /// The three-way split `(0.4, 0.6]`, `(0.6, 0.8]`, `(0.8, 1.0]`.
    pub fn three(
        low: &'a DenoiserParams<S>,
        mid: &'a DenoiserParams<S>,
        high: &'a DenoiserParams<S>,
    ) -> Result<Self> {
        Self::new(vec![(0.4, 0.6, low), (0.6, 0.8, mid), (0.8, 1.0, high)])
    }

    pub fn new(shards: Vec<(f64, f64, &'a DenoiserParams<S>)>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Config("shard table is empty".into()));
        }
        for &(lo, hi, _) in &shards {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!("shard range ({lo}, {hi}] is not inside (0, 1]")));
            }
        }
        let mut sorted: Vec<(f64, f64)> = shards.iter().map(|&(lo, hi, _)| (lo, hi)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.windows(2).any(|w| w[1].0 < w[0].1 - 1e-12) {
            return Err(Error::Config("shard ranges overlap".into()));
        }
        let first = &shards[0].2.config;
        if shards
            .iter()
            .any(|(_, _, p)| p.config.vocab != first.vocab || p.config.max_len != first.max_len)
        {
            return Err(Error::Config("shard models disagree on vocabulary or max length".into()));
        }
        Ok(ShardTable { shards })
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.shards[0].2.config.vocab
    }

    pub fn max_len(&self) -> usize {
        self.shards[0].2.config.max_len
    }

    /// The shard whose range contains `t`.
    pub fn select(&self, t: usize, total: usize) -> Result<(usize, &'a DenoiserParams<S>)> {
        let t = t as f64;
        let total_f = total as f64;
        const SLACK: f64 = 1e-9;
        self.shards
            .iter()
            .enumerate()
            .find(|(_, &(lo, hi, _))| t > lo * total_f + SLACK && t <= hi * total_f + SLACK)
            .map(|(i, &(_, _, p))| (i, p))
            .ok_or(Error::Dispatch {
                t: t as usize,
                total,
            })
    }
}

/// Short hex digest of a tensor's values, for trace identity checks.
pub fn tensor_checksum<S: Scalar>(a: &Array2<S>) -> String {
    let mut h = Sha256::new();
    h.update((a.nrows() as u64).to_le_bytes());
    h.update((a.ncols() as u64).to_le_bytes());
    for v in a.iter() {
        h.update(v.as_f64().to_le_bytes());
    }
    h.finalize()[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// What one model saw and produced in one iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberRecord {
    pub name: String,
    pub shard: usize,
    pub recomputed_context: bool,
    pub noisy: String,
    pub self_cond: Option<String>,
    pub logits: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterationRecord {
    pub round: usize,
    pub t: usize,
    pub members: Vec<MemberRecord>,
    /// Checksum of the logits handed to projection.
    pub logits: String,
    pub argmax: Vec<TokenId>,
}

impl IterationRecord {
    /// `round<TAB>t<TAB>shards<TAB>argmax tokens`.
    pub fn line(&self) -> String {
        let shards: Vec<String> = self.members.iter().map(|m| format!("{}={}", m.name, m.shard)).collect();
        let tokens: Vec<String> = self.argmax.iter().map(|t| t.to_string()).collect();
        format!("{}\t{}\t{}\t{}", self.round, self.t, shards.join(","), tokens.join(","))
    }
}

/// Anything that can turn a noisy block into logits, one iteration at a time.
pub trait BlockDenoiser<S> {
    fn vocab(&self) -> usize;

    fn max_len(&self) -> usize;

    /// Forget self-conditioning and cached context before a new block.
    fn reset(&mut self);

    /// Logits for `noisy` at step `t` after `context`.
    fn predict(
        &mut self,
        context: &[TokenId],
        noisy: &Array2<S>,
        t: usize,
        cfg: &DecodeConfig,
    ) -> Result<(Array2<S>, Vec<MemberRecord>)>;
}

/// One (possibly sharded) model with its own self-conditioning state.
pub struct ModelStream<'a, S> {
    name: String,
    table: ShardTable<'a, S>,
    cache: Option<(usize, ContextCache<S>)>,
    prev: Option<Array2<S>>,
}

impl<'a, S: Scalar> ModelStream<'a, S> {
    pub fn new(name: &str, table: ShardTable<'a, S>) -> Self {
        ModelStream {
            name: name.to_string(),
            table,
            cache: None,
            prev: None,
        }
    }

    /// Replace the logits fed back as self-conditioning next iteration.
    pub fn set_self_cond(&mut self, logits: Array2<S>) {
        self.prev = Some(logits);
    }
}

impl<S: Scalar> BlockDenoiser<S> for ModelStream<'_, S> {
    fn vocab(&self) -> usize {
        self.table.vocab()
    }

    fn max_len(&self) -> usize {
        self.table.max_len()
    }

    fn reset(&mut self) {
        self.cache = None;
        self.prev = None;
    }

    fn predict(
        &mut self,
        context: &[TokenId],
        noisy: &Array2<S>,
        t: usize,
        cfg: &DecodeConfig,
    ) -> Result<(Array2<S>, Vec<MemberRecord>)> {
        let (shard, params) = self.table.select(t, cfg.steps)?;
        let ctx_time = quantize_timestep(t, cfg.quantum);
        let stale = match &self.cache {
            Some((s, c)) => *s != shard || c.ctx_time() != ctx_time || c.len() != context.len(),
            None => true,
        };
        if stale {
            self.cache = Some((shard, encode_context(params, context, ctx_time)?));
        }
        let cache = &self.cache.as_ref().expect("cache filled above").1;
        let logits = denoise_block(params, cache, noisy, SelfCond::from_option(self.prev.as_ref()), t)?;
        let record = MemberRecord {
            name: self.name.clone(),
            shard,
            recomputed_context: stale,
            noisy: tensor_checksum(noisy),
            self_cond: self.prev.as_ref().map(tensor_checksum),
            logits: tensor_checksum(&logits),
        };
        self.prev = Some(logits.clone());
        Ok((logits, vec![record]))
    }
}

/// Random streams consumed by decoding.
#[derive(Clone, Debug)]
pub struct DecodeRngs {
    pub noise: RngStream,
    pub projection: RngStream,
}

impl DecodeRngs {
    pub fn new(seed: u64) -> Self {
        DecodeRngs {
            noise: RngStream::named(seed, NOISE),
            projection: RngStream::named(seed, PROJECTION),
        }
    }
}

/// Denoise one block of `cfg.block` tokens after `context`.
///
/// With early stopping the argmax of the last logits is returned; with
/// `stop_at = 0` the argmax of the final projected block.
pub fn decode_block<S: Scalar, D: BlockDenoiser<S> + ?Sized>(
    den: &mut D,
    context: &[TokenId],
    cfg: &DecodeConfig,
    rngs: &mut DecodeRngs,
    round: usize,
) -> Result<(Vec<TokenId>, Vec<IterationRecord>)> {
    cfg.validate()?;
    if context.len() + cfg.block > den.max_len() {
        return Err(Error::Contract(format!(
            "context of {} plus a block of {} exceeds max length {}",
            context.len(),
            cfg.block,
            den.max_len()
        )));
    }
    let k = S::of(cfg.k);
    let schedule = NoiseSchedule::<S>::new(cfg.steps, cfg.schedule, k)?;
    let vocab = den.vocab();
    den.reset();
    let mut noisy = sample_noise(cfg.block, vocab, k, &mut rngs.noise);
    let mut trace = Vec::with_capacity(cfg.iterations());
    let mut last_logits = None;
    let mut last_projection: Option<SimplexLogits<S>> = None;
    for (i, t) in (cfg.final_step()..=cfg.steps).rev().enumerate() {
        let (logits, members) = den.predict(context, &noisy.values, t, cfg)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                tensor: "logits".into(),
                detail: format!("non-finite logits at iteration {i} (t = {t})"),
            });
        }
        let projected = logits_projection(&logits, &cfg.projection, k, &mut rngs.projection)?;
        noisy = add_noise(&projected, t - 1, &schedule, &mut rngs.noise)?;
        trace.push(IterationRecord {
            round,
            t,
            members,
            logits: tensor_checksum(&logits),
            argmax: logits.rows().into_iter().map(|r| argmax_row(r) as TokenId).collect(),
        });
        last_logits = Some(logits);
        last_projection = Some(projected);
    }
    let tokens = if cfg.final_step() > 1 {
        let logits = last_logits.expect("at least one iteration");
        logits.rows().into_iter().map(|r| argmax_row(r) as TokenId).collect()
    } else {
        last_projection.expect("at least one iteration").argmax()
    };
    Ok((tokens, trace))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub rounds: usize,
    /// Stopped because the next block would not fit.
    pub truncated: bool,
    pub trace: Vec<IterationRecord>,
}

/// Generate block after block until EOS, `max_rounds`, or the length limit.
/// Output excludes the prompt, the first EOS, and everything after it.
pub fn decode_sequence<S: Scalar, D: BlockDenoiser<S> + ?Sized>(
    den: &mut D,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    if prompt.len() + cfg.block > den.max_len() {
        return Err(Error::Contract(format!(
            "prompt of {} leaves no room for a block of {} within max length {}",
            prompt.len(),
            cfg.block,
            den.max_len()
        )));
    }
    let mut rngs = DecodeRngs::new(cfg.seed);
    let mut context = prompt.to_vec();
    let mut out = DecodeOutput {
        tokens: Vec::new(),
        rounds: 0,
        truncated: false,
        trace: Vec::new(),
    };
    for round in 0..cfg.max_rounds {
        if context.len() + cfg.block > den.max_len() {
            out.truncated = true;
            break;
        }
        let (block, trace) = decode_block(den, &context, cfg, &mut rngs, round)?;
        out.trace.extend(trace);
        out.rounds += 1;
        if let Some(pos) = cfg.eos.and_then(|eos| block.iter().position(|&t| t == eos)) {
            out.tokens.extend_from_slice(&block[..pos]);
            break;
        }
        out.tokens.extend_from_slice(&block);
        context.extend_from_slice(&block);
    }
    Ok(out)
}

/// Single-model convenience wrapper around [`decode_sequence`].
pub fn decode_with<S: Scalar>(
    table: ShardTable<'_, S>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let mut stream = ModelStream::new("model", table);
    decode_sequence(&mut stream, prompt, cfg)
}
