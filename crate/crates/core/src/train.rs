//! Training: noise every target block, optionally self-condition on a
//! gradient-free first prediction, and take one AdamW step on the
//! cross-entropy of the clean tokens.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Zip};
use rayon::prelude::*;

use crate::mask::{layout_parallel_batch, ParallelLayout};
use crate::model::{
    cross_entropy, denoise_forward, loss_and_grads_normalized, quantize_timestep, save_checkpoint,
    Checkpoint, DenoiserParams, DiffusionInput, LossInput, SelfCond,
};
use crate::rng::{RngStream, StreamSet};
use crate::simplex::{add_noise, logits_initialization, NoiseSchedule, ScheduleKind};
use crate::{Error, Result, Scalar, TokenId};

/// What the network is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Denoise every response block (the default).
    Diffusion,
    /// Next-token prediction over the response, for the autoregressive baseline.
    Autoregressive,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Objective::Diffusion),
            "autoregressive" | "ar" => Ok(Objective::Autoregressive),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// How diffusion timesteps are drawn for the blocks of one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepSampling {
    /// One `t` shared by every block of an example.
    PerSequence,
    /// An independent `t` for each block.
    PerBlock,
}

impl std::str::FromStr for TimestepSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(TimestepSampling::PerSequence),
            "block" => Ok(TimestepSampling::PerBlock),
            other => Err(Error::Config(format!("unknown timestep sampling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub block: usize,
    pub self_cond_prob: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Leading steps trained with the self-conditioning probability forced to 0.
    pub warmup_steps: u64,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub k: f64,
    pub timesteps: TimestepSampling,
    /// Restrict `t` to `(lo * T, hi * T]`, for time-range shard finetuning.
    pub t_range: Option<(f64, f64)>,
    pub save_every: u64,
    pub objective: Objective,
    /// Compare parallel and per-block losses every this many steps.
    pub equivalence_check_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            block: 4,
            self_cond_prob: 0.5,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            total_steps: 2000,
            warmup_steps: 0,
            seed: 0,
            schedule: ScheduleKind::Cosine,
            k: 5.0,
            timesteps: TimestepSampling::PerBlock,
            t_range: None,
            save_every: 500,
            objective: Objective::Diffusion,
            equivalence_check_every: None,
        }
    }
}

impl TrainConfig {
    /// Block size 25 and (with a 1000-step model) the large-scale settings.
    pub fn large_block_preset() -> Self {
        TrainConfig {
            block: 25,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 {
            return Err(Error::Config("train.block must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.self_cond_prob) {
            return Err(Error::Config(format!(
                "self-conditioning probability must be in [0, 1], got {}",
                self.self_cond_prob
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config("K must be positive".into()));
        }
        if let Some((lo, hi)) = self.t_range {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!("t range ({lo}, {hi}] is not inside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// A prompt and a block-aligned response with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedExample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

/// Pad `response` with EOS up to the next multiple of `block`. The EOS
/// padding stays in the loss.
pub fn prepare_example(
    prompt: &[TokenId],
    response: &[TokenId],
    block: usize,
    eos: TokenId,
) -> Result<PreparedExample> {
    if response.is_empty() {
        return Err(Error::Contract("response must be non-empty".into()));
    }
    if block == 0 {
        return Err(Error::Config("block size must be >= 1".into()));
    }
    let padded_len = response.len().div_ceil(block) * block;
    let mut padded = response.to_vec();
    padded.resize(padded_len, eos);
    Ok(PreparedExample {
        prompt: prompt.to_vec(),
        response: padded,
        loss_mask: vec![true; padded_len],
    })
}

impl PreparedExample {
    /// Extend the response to `len` tokens with `pad`, excluded from the loss.
    pub fn pad_to(&mut self, len: usize, pad: TokenId) {
        if len > self.response.len() {
            self.response.resize(len, pad);
            self.loss_mask.resize(len, false);
        }
    }
}

/// Pad every example of a batch to the longest response.
pub fn collate(batch: &[PreparedExample], pad: TokenId) -> Vec<PreparedExample> {
    let longest = batch.iter().map(|e| e.response.len()).max().unwrap_or(0);
    batch
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.pad_to(longest, pad);
            e
        })
        .collect()
}

/// Everything sampled for one example in one step.
struct NoisedExample<S> {
    layout: ParallelLayout,
    noisy: Array2<S>,
    block_times: Vec<usize>,
    ctx_time: usize,
    loss_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub self_conditioned: bool,
    /// Batch-wide forward passes performed (1 or 2).
    pub forward_passes: usize,
    /// Block timesteps of each example.
    pub t_values: Vec<Vec<usize>>,
}

impl StepReport {
    /// `step<TAB>loss<TAB>branch<TAB>t-list`, examples separated by `;`.
    pub fn log_line(&self) -> String {
        let ts: Vec<String> = self
            .t_values
            .iter()
            .map(|ts| ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        format!(
            "{}\t{}\t{}\t{}",
            self.step,
            self.loss,
            self.self_conditioned as u8,
            ts.join(";")
        )
    }
}

/// Parameters, optimizer moments, and the random streams of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub params: DenoiserParams<S>,
    m: DenoiserParams<S>,
    v: DenoiserParams<S>,
    pub step: u64,
    pub cfg: TrainConfig,
    schedule: NoiseSchedule<S>,
    streams: StreamSet,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(params: DenoiserParams<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = NoiseSchedule::new(params.config.time_steps, cfg.schedule, S::of(cfg.k))?;
        Ok(Trainer {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            step: 0,
            streams: StreamSet::new(cfg.seed),
            schedule,
            cfg,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint<S>, cfg: TrainConfig) -> Result<Self> {
        let mut trainer = Trainer::new(ckpt.params, cfg)?;
        if let Some((m, v)) = ckpt.moments {
            trainer.m = m;
            trainer.v = v;
        }
        let field = |key: &str| -> Result<&String> {
            ckpt.meta
                .get(key)
                .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}` entry; cannot resume")))
        };
        let parse = |key: &str| -> Result<u128> {
            field(key)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint entry `{key}` is not an integer")))
        };
        trainer.step = parse("train.step")? as u64;
        let seed = parse("train.seed")? as u64;
        if seed != trainer.cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {seed}, config says {}",
                trainer.cfg.seed
            )));
        }
        let positions: Vec<(String, u128)> = trainer
            .streams
            .positions()
            .iter()
            .map(|(name, _)| Ok((name.to_string(), parse(&format!("rng.{name}"))?)))
            .collect::<Result<_>>()?;
        trainer.streams = StreamSet::restore(seed, &positions);
        Ok(trainer)
    }

    /// Snapshot with moments and stream positions for exact resumption.
    pub fn checkpoint(&self) -> Checkpoint<S> {
        let mut ckpt = Checkpoint::new(self.params.clone());
        ckpt.moments = Some((self.m.clone(), self.v.clone()));
        ckpt.meta.insert("train.step".into(), self.step.to_string());
        ckpt.meta.insert("train.seed".into(), self.cfg.seed.to_string());
        for (name, pos) in self.streams.positions() {
            ckpt.meta.insert(format!("rng.{name}"), pos.to_string());
        }
        ckpt
    }

    pub fn schedule(&self) -> &NoiseSchedule<S> {
        &self.schedule
    }

    fn sample_t(&mut self) -> usize {
        let total = self.schedule.steps();
        let (lo, hi) = match self.cfg.t_range {
            Some((lo, hi)) => (
                ((lo * total as f64).floor() as usize + 1).min(total),
                ((hi * total as f64).floor() as usize).max(1),
            ),
            None => (1, total),
        };
        self.streams.timestep.int_inclusive(lo, hi.max(lo))
    }

    fn noise_example(&mut self, ex: &PreparedExample) -> Result<NoisedExample<S>> {
        let block = self.cfg.block;
        let layout = layout_parallel_batch(&ex.prompt, &ex.response, block)?;
        let n = layout.n_blocks();
        let block_times: Vec<usize> = match self.cfg.timesteps {
            TimestepSampling::PerSequence => vec![self.sample_t(); n],
            TimestepSampling::PerBlock => (0..n).map(|_| self.sample_t()).collect(),
        };
        let vocab = self.params.config.vocab;
        let clean = logits_initialization(&ex.response, vocab, self.schedule.k())?;
        let mut noisy = Array2::zeros(clean.values.dim());
        for (k, &t) in block_times.iter().enumerate() {
            let rows = s![k * block..(k + 1) * block, ..];
            let block_clean = crate::simplex::SimplexLogits::new(clean.values.slice(rows).to_owned(), clean.k);
            let w_t = add_noise(&block_clean, t, &self.schedule, &mut self.streams.noise)?;
            noisy.slice_mut(rows).assign(&w_t.values);
        }
        let ctx_time = quantize_timestep(block_times[0], self.params.config.time_quantum);
        Ok(NoisedExample {
            layout,
            noisy,
            block_times,
            ctx_time,
            loss_mask: ex.loss_mask.clone(),
        })
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[PreparedExample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let batch = collate(batch, crate::tokenizer::PAD);
        if self.cfg.objective == Objective::Autoregressive {
            return self.autoregressive_step(&batch);
        }
        let noised = batch
            .iter()
            .map(|ex| self.noise_example(ex))
            .collect::<Result<Vec<_>>>()?;
        let p = if self.step < self.cfg.warmup_steps {
            0.0
        } else {
            self.cfg.self_cond_prob
        };
        let self_conditioned = self.streams.branch.bernoulli(p);
        let mut forward_passes = 0;

        let self_cond: Vec<Option<Array2<S>>> = if self_conditioned {
            forward_passes += 1;
            self_condition_pass(&self.params, &noised)?
        } else {
            vec![None; noised.len()]
        };

        let total_targets: usize = noised.iter().map(|n| n.loss_mask.iter().filter(|&&m| m).count()).sum();
        if total_targets == 0 {
            return Err(Error::Contract("batch has no in-loss targets".into()));
        }
        let params = &self.params;
        let results: Vec<Result<(f64, DenoiserParams<S>)>> = noised
            .par_iter()
            .zip(self_cond.par_iter())
            .map(|(ex, sc)| {
                let input = LossInput::Diffusion {
                    input: DiffusionInput {
                        layout: &ex.layout,
                        noisy: &ex.noisy,
                        self_cond: SelfCond::from_option(sc.as_ref()),
                        block_times: &ex.block_times,
                        ctx_time: ex.ctx_time,
                    },
                    loss_mask: &ex.loss_mask,
                };
                loss_and_grads_normalized(params, &input, total_targets as f64)
            })
            .collect();
        forward_passes += 1;

        // Fixed reduction order keeps runs reproducible.
        let mut loss = 0.0;
        let mut grads = self.params.zeros_like();
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_scaled(&g, S::one());
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                tensor: "loss".into(),
                detail: format!("batch loss {loss} at step {}", self.step),
            });
        }
        if let Some(every) = self.cfg.equivalence_check_every {
            if every > 0 && self.step.is_multiple_of(every) {
                for (ex, sc) in noised.iter().zip(&self_cond) {
                    let worst = equivalence_gap(&self.params, ex, sc.as_ref())?;
                    if worst > 1e-3 {
                        return Err(Error::Numeric {
                            tensor: "parallel-loss".into(),
                            detail: format!("parallel and per-block losses differ by {worst:e}"),
                        });
                    }
                }
            }
        }
        self.apply_adamw(&grads);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            self_conditioned,
            forward_passes,
            t_values: noised.into_iter().map(|n| n.block_times).collect(),
        })
    }

    fn autoregressive_step(&mut self, batch: &[PreparedExample]) -> Result<StepReport> {
        let sequences: Vec<(Vec<TokenId>, Vec<bool>)> = batch
            .iter()
            .map(|ex| {
                let mut tokens = ex.prompt.clone();
                tokens.extend_from_slice(&ex.response);
                let mut mask = vec![false; ex.prompt.len().saturating_sub(1)];
                mask.extend_from_slice(&ex.loss_mask);
                (tokens, mask)
            })
            .collect();
        let total: usize = sequences.iter().map(|(_, m)| m.iter().filter(|&&x| x).count()).sum();
        if total == 0 {
            return Err(Error::Contract("batch has no in-loss targets".into()));
        }
        let params = &self.params;
        let results: Vec<Result<(f64, DenoiserParams<S>)>> = sequences
            .par_iter()
            .map(|(tokens, mask)| {
                let input = LossInput::Autoregressive {
                    tokens,
                    loss_mask: mask,
                };
                loss_and_grads_normalized(params, &input, total as f64)
            })
            .collect();
        let mut loss = 0.0;
        let mut grads = self.params.zeros_like();
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_scaled(&g, S::one());
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                tensor: "loss".into(),
                detail: format!("batch loss {loss} at step {}", self.step),
            });
        }
        self.apply_adamw(&grads);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            self_conditioned: false,
            forward_passes: 1,
            t_values: vec![Vec::new(); batch.len()],
        })
    }

    fn apply_adamw(&mut self, grads: &DenoiserParams<S>) {
        let cfg = &self.cfg;
        let t = (self.step + 1) as i32;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let c1 = S::of(1.0 - cfg.beta1.powi(t));
        let c2 = S::of(1.0 - cfg.beta2.powi(t));
        let lr = S::of(cfg.learning_rate);
        let wd = S::of(cfg.weight_decay);
        let eps = S::of(cfg.eps);
        let one = S::one();
        let p_t = self.params.tensors_mut();
        let m_t = self.m.tensors_mut();
        let v_t = self.v.tensors_mut();
        for (((_, mut p), (_, mut m)), ((_, mut v), (_, g))) in
            p_t.into_iter().zip(m_t).zip(v_t.into_iter().zip(grads.tensors()))
        {
            let decay = p.ndim() == 2;
            Zip::from(&mut p)
                .and(&mut m)
                .and(&mut v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    if decay {
                        *p -= lr * wd * *p;
                    }
                    *p -= lr * update;
                });
        }
    }
}

/// Gradient-free first pass producing self-conditioning logits.
fn self_condition_pass<S: Scalar>(
    params: &DenoiserParams<S>,
    noised: &[NoisedExample<S>],
) -> Result<Vec<Option<Array2<S>>>> {
    noised
        .par_iter()
        .map(|ex| {
            denoise_forward(
                params,
                &DiffusionInput {
                    layout: &ex.layout,
                    noisy: &ex.noisy,
                    self_cond: SelfCond::Absent,
                    block_times: &ex.block_times,
                    ctx_time: ex.ctx_time,
                },
            )
            .map(Some)
        })
        .collect()
}

/// Per-block mean cross-entropy from one masked parallel pass.
pub fn per_block_losses_parallel<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &DiffusionInput<'_, S>,
) -> Result<Vec<f64>> {
    let logits = denoise_forward(params, input)?;
    let b = input.layout.block();
    Ok((0..input.layout.n_blocks())
        .map(|k| block_loss(&logits.slice(s![k * b..(k + 1) * b, ..]).to_owned(), &input.layout.targets[k * b..(k + 1) * b]))
        .collect())
}

/// Per-block mean cross-entropy from `n` independent passes, block `k`
/// conditioning on the clean prefix `w[..c0 + kB]` only.
pub fn per_block_losses_sequential<S: Scalar>(
    params: &DenoiserParams<S>,
    input: &DiffusionInput<'_, S>,
) -> Result<Vec<f64>> {
    let layout = input.layout;
    let b = layout.block();
    let c0 = layout.c0();
    let mut full = layout.context[..c0].to_vec();
    full.extend_from_slice(&layout.targets);
    (0..layout.n_blocks())
        .map(|k| {
            let rows = s![k * b..(k + 1) * b, ..];
            let target = &layout.targets[k * b..(k + 1) * b];
            let sub = layout_parallel_batch(&full[..c0 + k * b], target, b)?;
            let noisy = input.noisy.slice(rows).to_owned();
            let cond = match input.self_cond {
                SelfCond::Logits(c) => Some(c.slice(rows).to_owned()),
                SelfCond::Absent => None,
            };
            let logits = denoise_forward(
                params,
                &DiffusionInput {
                    layout: &sub,
                    noisy: &noisy,
                    self_cond: SelfCond::from_option(cond.as_ref()),
                    block_times: &input.block_times[k..k + 1],
                    ctx_time: input.ctx_time,
                },
            )?;
            Ok(block_loss(&logits, target))
        })
        .collect()
}

/// Summed cross-entropy of recovering every response block from noise level
/// `t` (shared by all blocks, no self-conditioning), and the number of
/// targets it covers.
pub fn reconstruction_nll<S: Scalar>(
    params: &DenoiserParams<S>,
    examples: &[PreparedExample],
    block: usize,
    t: usize,
    schedule: &NoiseSchedule<S>,
    rng: &mut RngStream,
) -> Result<(f64, usize)> {
    let (mut nll, mut count) = (0.0, 0);
    for ex in examples {
        let layout = layout_parallel_batch(&ex.prompt, &ex.response, block)?;
        let clean = logits_initialization(&ex.response, params.config.vocab, schedule.k())?;
        let noisy = add_noise(&clean, t, schedule, rng)?;
        let block_times = vec![t; layout.n_blocks()];
        let logits = denoise_forward(
            params,
            &DiffusionInput {
                layout: &layout,
                noisy: &noisy.values,
                self_cond: SelfCond::Absent,
                block_times: &block_times,
                ctx_time: quantize_timestep(t, params.config.time_quantum),
            },
        )?;
        let targets: Vec<Option<TokenId>> =
            layout.targets.iter().zip(&ex.loss_mask).map(|(&tok, &m)| m.then_some(tok)).collect();
        count += targets.iter().flatten().count();
        nll += cross_entropy(&logits, &targets, 1.0).0;
    }
    if !nll.is_finite() {
        return Err(Error::Numeric {
            tensor: "reconstruction loss".into(),
            detail: format!("evaluated to {nll}"),
        });
    }
    Ok((nll, count))
}

fn block_loss<S: Scalar>(logits: &Array2<S>, targets: &[TokenId]) -> f64 {
    let t: Vec<Option<TokenId>> = targets.iter().map(|&x| Some(x)).collect();
    cross_entropy(logits, &t, targets.len() as f64).0
}

fn equivalence_gap<S: Scalar>(
    params: &DenoiserParams<S>,
    ex: &NoisedExample<S>,
    sc: Option<&Array2<S>>,
) -> Result<f64> {
    let input = DiffusionInput {
        layout: &ex.layout,
        noisy: &ex.noisy,
        self_cond: SelfCond::from_option(sc),
        block_times: &ex.block_times,
        ctx_time: ex.ctx_time,
    };
    let par = per_block_losses_parallel(params, &input)?;
    let seq = per_block_losses_sequential(params, &input)?;
    Ok(par
        .iter()
        .zip(&seq)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
        .fold(0.0, f64::max))
}

/// Where a training loop writes its outputs.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
    /// Extra metadata stored in every checkpoint (tokenizer, run config).
    pub meta: Vec<(String, String)>,
}

impl RunOutputs {
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{step:08}.bin"))
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.log")
    }

    fn save<S: Scalar>(&self, trainer: &Trainer<S>) -> Result<PathBuf> {
        let mut ckpt = trainer.checkpoint();
        for (k, v) in &self.meta {
            ckpt.meta.insert(k.clone(), v.clone());
        }
        let path = self.checkpoint_path(trainer.step);
        save_checkpoint(&path, &ckpt)?;
        Ok(path)
    }
}

/// Train until `trainer.cfg.total_steps`, logging every step.
///
/// A fresh run writes the step-0 checkpoint first; checkpoints follow every
/// `save_every` steps and at the final step. Returns the step reports.
pub fn train_loop<S: Scalar>(
    trainer: &mut Trainer<S>,
    corpus: &[PreparedExample],
    out: &RunOutputs,
) -> Result<Vec<StepReport>> {
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    if trainer.step == 0 {
        out.save(trainer)?;
    }
    let log_path = out.loss_log();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut reports = Vec::new();
    while trainer.step < trainer.cfg.total_steps {
        let batch: Vec<PreparedExample> = (0..trainer.cfg.batch_size)
            .map(|_| corpus[trainer.streams.data.int_inclusive(0, corpus.len() - 1)].clone())
            .collect();
        let report = trainer.train_step(&batch)?;
        writeln!(log, "{}", report.log_line()).map_err(|e| Error::io(&log_path, e))?;
        let every = trainer.cfg.save_every;
        if (every > 0 && trainer.step.is_multiple_of(every)) || trainer.step == trainer.cfg.total_steps {
            out.save(trainer)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Parse a loss-log file back into its text lines.
pub fn read_loss_log(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(String::from).collect())
}
