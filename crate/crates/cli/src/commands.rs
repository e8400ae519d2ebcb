use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use simdiff::collab::{collab_decode_ar, lambda_sweep, ArDecodeConfig, CollabMode, CollabSpec};
use simdiff::decode::{decode_with, DecodeConfig, ShardTable};
use simdiff::mask::build_block_mask;
use simdiff::model::{load_checkpoint, AbsentSelfCond, Checkpoint, DenoiserParams, ModelConfig};
use simdiff::rng::RngStream;
use simdiff::simplex::{NoiseSchedule, Projection, ScheduleKind};
use simdiff::tokenizer::{Tokenizer, BOS, EOS};
use simdiff::train::{prepare_example, reconstruction_nll, train_loop, PreparedExample, RunOutputs, TrainConfig};
use simdiff::{Error, Result, TokenId};

use crate::config::RunConfig;

pub const VERSION_TAG: &str = concat!("simdiff-", env!("CARGO_PKG_VERSION"));

/// Noise levels probed by `eval`, as fractions of `T`.
pub const EVAL_LEVELS: [f64; 3] = [0.2, 0.5, 0.8];

const TOKENIZER_KEY: &str = "tokenizer.map";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Tabs and newlines escaped so text fits one TSV cell.
fn tsv_cell(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

/// Write `<output_dir>/<command>.meta`: version, seed, and every config value.
fn write_run_meta(cfg: &RunConfig, command: &str, seed: u64, extra: &[(String, String)]) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let mut text = format!("command\t{command}\nversion\t{VERSION_TAG}\nseed\t{seed}\n");
    for (k, v) in cfg.snapshot().iter().chain(extra) {
        let _ = writeln!(text, "{k}\t{}", tsv_cell(v));
    }
    let path = dir.join(format!("{command}.meta"));
    write_text(&path, &text)?;
    Ok(path)
}

/// One corpus line: optional `prompt<TAB>`, then the response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusLine {
    pub line: usize,
    pub prompt: String,
    pub response: String,
}

pub fn parse_corpus(text: &str) -> Vec<CorpusLine> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let l = l.strip_suffix('\r').unwrap_or(l);
            let (prompt, response) = l.split_once('\t').unwrap_or(("", l));
            CorpusLine {
                line: i + 1,
                prompt: prompt.to_string(),
                response: response.to_string(),
            }
        })
        .collect()
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusLine>> {
    let lines = parse_corpus(&read_text(path)?);
    if lines.is_empty() {
        return Err(Error::Config(format!("{}: corpus has no examples", path.display())));
    }
    Ok(lines)
}

fn encode_prompt(tok: &Tokenizer, text: &str) -> Result<Vec<TokenId>> {
    let mut ids = vec![BOS];
    ids.extend(tok.encode(text)?);
    Ok(ids)
}

fn prepare_corpus(tok: &Tokenizer, lines: &[CorpusLine], block: usize, path: &Path) -> Result<Vec<PreparedExample>> {
    lines
        .iter()
        .map(|l| {
            let at = |e: Error| Error::Domain(format!("{}:{}: {e}", path.display(), l.line));
            let prompt = encode_prompt(tok, &l.prompt).map_err(at)?;
            let response = tok.encode(&l.response).map_err(at)?;
            prepare_example(&prompt, &response, block, EOS).map_err(at)
        })
        .collect()
}

fn load(path: &Path) -> Result<Checkpoint<f32>> {
    load_checkpoint::<f32>(path)
}

/// Tokenizer from `[data] token_map`, else the one stored in the checkpoint.
fn tokenizer_for(cfg: &RunConfig, meta: Option<&Checkpoint<f32>>) -> Result<Tokenizer> {
    if let Some(p) = cfg.existing_path("data", "token_map")? {
        return Tokenizer::from_token_map(&read_text(&p)?);
    }
    match meta.and_then(|c| c.meta.get(TOKENIZER_KEY)) {
        Some(map) => Tokenizer::from_token_map(map),
        None => Err(Error::Config(
            "checkpoint carries no token map; set data.token_map".into(),
        )),
    }
}

fn check_vocab(tok: &Tokenizer, params: &DenoiserParams<f32>) -> Result<()> {
    if tok.vocab_size() > params.config.vocab {
        return Err(Error::Config(format!(
            "token map has {} entries but the model vocabulary is {}",
            tok.vocab_size(),
            params.config.vocab
        )));
    }
    Ok(())
}

fn model_config(cfg: &RunConfig, min_vocab: usize) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let vocab = cfg.get_or("model", "vocab", min_vocab)?;
    if vocab < min_vocab {
        return Err(cfg.error("model", "vocab", format!("smaller than the {min_vocab} tokens of the token map")));
    }
    let m = ModelConfig {
        vocab,
        d_model: cfg.get_or("model", "d_model", d.d_model)?,
        n_layers: cfg.get_or("model", "n_layers", d.n_layers)?,
        n_heads: cfg.get_or("model", "n_heads", d.n_heads)?,
        d_ff: cfg.get_or("model", "d_ff", d.d_ff)?,
        max_len: cfg.get_or("model", "max_len", d.max_len)?,
        time_steps: cfg.get_or("model", "time_steps", d.time_steps)?,
        time_quantum: cfg.get_or("model", "time_quantum", d.time_quantum)?,
        tie_embeddings: cfg.get_or("model", "tie_embeddings", d.tie_embeddings)?,
        absent_self_cond: cfg.get_or::<AbsentSelfCond>("model", "absent_self_cond", d.absent_self_cond)?,
        input_temperature: cfg.get_or("model", "input_temperature", d.input_temperature)?,
    };
    m.validate().map_err(|e| cfg.in_section("model", e))?;
    Ok(m)
}

fn train_config(cfg: &RunConfig, seed: u64) -> Result<TrainConfig> {
    let base = match cfg.raw("train", "preset") {
        None | Some("desk") => TrainConfig::default(),
        Some("large") => TrainConfig::large_block_preset(),
        Some(other) => return Err(cfg.error("train", "preset", format!("unknown preset `{other}` (desk, large)"))),
    };
    let t_range = match cfg.list::<f64>("train", "t_range")? {
        None => base.t_range,
        Some(v) if v.len() == 2 => Some((v[0], v[1])),
        Some(_) => return Err(cfg.error("train", "t_range", "expected `lo, hi`")),
    };
    let tc = TrainConfig {
        block: cfg.get_or("train", "block", base.block)?,
        self_cond_prob: cfg.get_or("train", "self_cond_prob", base.self_cond_prob)?,
        learning_rate: cfg.get_or("train", "learning_rate", base.learning_rate)?,
        weight_decay: cfg.get_or("train", "weight_decay", base.weight_decay)?,
        beta1: cfg.get_or("train", "beta1", base.beta1)?,
        beta2: cfg.get_or("train", "beta2", base.beta2)?,
        eps: cfg.get_or("train", "eps", base.eps)?,
        batch_size: cfg.get_or("train", "batch_size", base.batch_size)?,
        total_steps: cfg.get_or("train", "total_steps", base.total_steps)?,
        warmup_steps: cfg.get_or("train", "warmup_steps", base.warmup_steps)?,
        seed,
        schedule: cfg.get_or("train", "schedule", base.schedule)?,
        k: cfg.get_or("train", "k", base.k)?,
        timesteps: cfg.get_or("train", "timesteps", base.timesteps)?,
        t_range,
        save_every: cfg.get_or("train", "save_every", base.save_every)?,
        objective: cfg.get_or("train", "objective", base.objective)?,
        equivalence_check_every: cfg.get("train", "equivalence_check_every")?.or(base.equivalence_check_every),
    };
    tc.validate().map_err(|e| cfg.in_section("train", e))?;
    Ok(tc)
}

pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub output_dir: PathBuf,
}

pub fn train(config: &Path) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed()?;
    let corpus_path = cfg.require_existing_path("data", "corpus")?;
    let tcfg = train_config(&cfg, seed)?;
    let resume = cfg.existing_path("train", "resume")?;
    let init = cfg.existing_path("train", "init_checkpoint")?;
    if resume.is_some() && init.is_some() {
        return Err(cfg.error("train", "init_checkpoint", "cannot be combined with train.resume"));
    }
    let corpus = read_corpus(&corpus_path)?;

    let source = match resume.as_ref().or(init.as_ref()) {
        Some(p) => Some(load(p)?),
        None => None,
    };
    let tok = match (&source, cfg.existing_path("data", "token_map")?) {
        (_, Some(p)) => Tokenizer::from_token_map(&read_text(&p)?)?,
        (Some(ckpt), None) => tokenizer_for(&cfg, Some(ckpt))?,
        (None, None) => Tokenizer::from_corpus(corpus.iter().flat_map(|l| [l.prompt.as_str(), l.response.as_str()]))?,
    };
    let mut trainer = match source {
        Some(ckpt) if resume.is_some() => simdiff::Trainer32::resume(ckpt, tcfg.clone())?,
        Some(ckpt) => simdiff::Trainer32::new(ckpt.params, tcfg.clone())?,
        None => simdiff::Trainer32::new(DenoiserParams::init(&model_config(&cfg, tok.vocab_size())?, seed)?, tcfg.clone())?,
    };
    check_vocab(&tok, &trainer.params)?;
    let examples = prepare_corpus(&tok, &corpus, tcfg.block, &corpus_path)?;

    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let map = tok.to_token_map();
    write_text(&dir.join("token_map.tsv"), &map)?;
    let out = RunOutputs {
        dir: dir.clone(),
        meta: vec![
            (TOKENIZER_KEY.into(), map),
            ("train.block".into(), tcfg.block.to_string()),
            ("train.schedule".into(), tcfg.schedule.to_string()),
            ("train.k".into(), tcfg.k.to_string()),
            ("version".into(), VERSION_TAG.into()),
        ],
    };
    write_run_meta(
        &cfg,
        "train",
        seed,
        &[
            ("start_step".into(), trainer.step.to_string()),
            ("start_params_sha256".into(), hex(&trainer.params.checksum())),
        ],
    )?;
    let reports = train_loop(&mut trainer, &examples, &out)?;
    Ok(TrainSummary {
        steps: reports.len() as u64,
        first_loss: reports.first().map(|r| r.loss),
        last_loss: reports.last().map(|r| r.loss),
        output_dir: dir,
    })
}

fn meta_parse<T: std::str::FromStr>(ckpt: &Checkpoint<f32>, key: &str) -> Option<T> {
    ckpt.meta.get(key).and_then(|v| v.parse().ok())
}

/// Decode settings, defaulting block/schedule/K to what the model was trained
/// with and the step count and quantum to the model's own.
fn decode_config(cfg: &RunConfig, seed: u64, ckpt: &Checkpoint<f32>) -> Result<DecodeConfig> {
    let d = DecodeConfig::default();
    let model = &ckpt.params.config;
    let steps = cfg.get_or("decode", "steps", model.time_steps)?;
    if steps > model.time_steps {
        return Err(cfg.error("decode", "steps", format!("exceeds the model's {} diffusion steps", model.time_steps)));
    }
    let temperature = cfg.get_or("decode", "temperature", 1.0)?;
    let projection = match cfg.raw("decode", "projection").unwrap_or("top-p") {
        "argmax" => Projection::Argmax,
        "sample" => Projection::Sample { temperature },
        "top-p" => Projection::TopP {
            p: cfg.get_or("decode", "top_p", 0.95)?,
            temperature,
        },
        other => {
            return Err(cfg.error("decode", "projection", format!("unknown projection `{other}` (argmax, sample, top-p)")))
        }
    };
    let dc = DecodeConfig {
        steps,
        stop_at: cfg.get_or("decode", "stop_at", d.stop_at)?,
        block: cfg.get_or("decode", "block", meta_parse(ckpt, "train.block").unwrap_or(d.block))?,
        max_rounds: cfg.get_or("decode", "max_rounds", d.max_rounds)?,
        projection,
        seed,
        quantum: cfg.get_or("decode", "quantum", model.time_quantum)?,
        schedule: cfg.get_or::<ScheduleKind>("decode", "schedule", meta_parse(ckpt, "train.schedule").unwrap_or(d.schedule))?,
        k: cfg.get_or("decode", "k", meta_parse(ckpt, "train.k").unwrap_or(d.k))?,
        eos: cfg.get_or("decode", "stop_at_eos", true)?.then_some(EOS),
    };
    dc.validate().map_err(|e| cfg.in_section("decode", e))?;
    Ok(dc)
}

/// Time range, source path, and weights of one decode shard.
type LoadedShard = (f64, f64, PathBuf, Checkpoint<f32>);

/// `[decode] shards = lo:hi:path, ...`, else the single `[model] checkpoint`.
fn load_shards(cfg: &RunConfig) -> Result<Vec<LoadedShard>> {
    let Some(list) = cfg.raw("decode", "shards") else {
        let p = cfg.require_existing_path("model", "checkpoint")?;
        return Ok(vec![(0.0, 1.0, p.clone(), load(&p)?)]);
    };
    list.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().splitn(3, ':').collect();
            let bad = |msg: String| cfg.error("decode", "shards", msg);
            if parts.len() != 3 {
                return Err(bad(format!("expected `lo:hi:path`, got `{}`", item.trim())));
            }
            let lo: f64 = parts[0].parse().map_err(|_| bad(format!("bad range start `{}`", parts[0])))?;
            let hi: f64 = parts[1].parse().map_err(|_| bad(format!("bad range end `{}`", parts[1])))?;
            let p = cfg.resolve(parts[2]);
            if !p.exists() {
                return Err(bad(format!("path {} does not exist", p.display())));
            }
            let ckpt = load(&p)?;
            Ok((lo, hi, p, ckpt))
        })
        .collect()
}

fn checkpoint_meta(label: &str, path: &Path, ckpt: &Checkpoint<f32>) -> [(String, String); 2] {
    [
        (format!("{label}.path"), path.display().to_string()),
        (format!("{label}.params_sha256"), hex(&ckpt.params.checksum())),
    ]
}

pub enum Prompt {
    Text(String),
    File(PathBuf),
}

impl Prompt {
    fn text(&self) -> Result<String> {
        match self {
            Prompt::Text(t) => Ok(t.clone()),
            Prompt::File(p) => Ok(read_text(p)?.trim_end_matches(['\n', '\r']).to_string()),
        }
    }
}

pub fn decode(config: &Path, prompt: &Prompt, trace: Option<&Path>) -> Result<String> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed()?;
    let shards = load_shards(&cfg)?;
    let first = &shards[0].3;
    let tok = tokenizer_for(&cfg, Some(first))?;
    check_vocab(&tok, &first.params)?;
    let dcfg = decode_config(&cfg, seed, first)?;
    let table = ShardTable::new(shards.iter().map(|(lo, hi, _, c)| (*lo, *hi, &c.params)).collect())?;
    let prompt_text = prompt.text()?;
    let ids = encode_prompt(&tok, &prompt_text)?;

    let mut extra = vec![("prompt".to_string(), prompt_text)];
    for (i, (_, _, p, c)) in shards.iter().enumerate() {
        extra.extend(checkpoint_meta(&format!("shard{i}"), p, c));
    }
    write_run_meta(&cfg, "decode", seed, &extra)?;

    let out = decode_with(table, &ids, &dcfg)?;
    if let Some(path) = trace {
        let mut text = String::from("# round\tt\tshards\targmax\n");
        for rec in &out.trace {
            text.push_str(&rec.line());
            text.push('\n');
        }
        write_text(path, &text)?;
    }
    Ok(tok.decode(&out.tokens))
}

/// One λ-sweep row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub text: String,
    pub tokens: usize,
    /// Whether the output equals `[collab] expected`, when set.
    pub matches: Option<bool>,
}

impl SweepRow {
    pub const HEADER: &'static str = "lambda\ttokens\tmatch\ttext";

    pub fn line(&self) -> String {
        let m = self.matches.map_or("-", |m| if m { "1" } else { "0" });
        format!("{}\t{}\t{m}\t{}", self.lambda, self.tokens, tsv_cell(&self.text))
    }
}

pub fn collab(config: &Path, instruction: &str, expert_file: &Path, lambdas: Option<&[f64]>) -> Result<Vec<SweepRow>> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed()?;
    let core_path = cfg.require_existing_path("collab", "core")?;
    let user_path = cfg.require_existing_path("collab", "user")?;
    let lambdas = match lambdas {
        Some(l) => l.to_vec(),
        None => cfg.list::<f64>("collab", "lambdas")?.unwrap_or_else(|| vec![0.0, 0.1, 0.2, 0.3, 0.5]),
    };
    let mode: CollabMode = cfg.get_or("collab", "mode", CollabMode::Diffusion)?;
    let alpha = cfg.get_or("collab", "alpha", 1.0)?;
    let expected = cfg.raw("collab", "expected").map(String::from);

    let core = load(&core_path)?;
    let user = load(&user_path)?;
    let tok = tokenizer_for(&cfg, Some(&core))?;
    if cfg.raw("data", "token_map").is_none() && core.meta.get(TOKENIZER_KEY) != user.meta.get(TOKENIZER_KEY) {
        return Err(Error::Config("core and user checkpoints use different token maps".into()));
    }
    check_vocab(&tok, &core.params)?;
    let expert_text = read_text(expert_file)?;
    let expert = tok.encode(expert_text.trim_end_matches(['\n', '\r']))?;
    let instruction_ids = encode_prompt(&tok, instruction)?;
    let dcfg = decode_config(&cfg, seed, &core)?;

    let mut extra = vec![
        ("instruction".to_string(), instruction.to_string()),
        ("expert_file".to_string(), expert_file.display().to_string()),
        (
            "lambdas".to_string(),
            lambdas.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        ),
    ];
    extra.extend(checkpoint_meta("core", &core_path, &core));
    extra.extend(checkpoint_meta("user", &user_path, &user));
    write_run_meta(&cfg, "collab", seed, &extra)?;

    let spec = CollabSpec {
        core: ShardTable::single(&core.params),
        user: ShardTable::single(&user.params),
        lambda: 0.0,
        alpha,
        expert,
        instruction: instruction_ids,
        feed_combined: cfg.get_or("collab", "feed_combined", false)?,
    };
    let outputs: Vec<(f64, Vec<TokenId>)> = match mode {
        CollabMode::Diffusion => lambda_sweep(&spec, &lambdas, &dcfg)?
            .into_iter()
            .map(|(l, out)| (l, out.tokens))
            .collect(),
        CollabMode::Autoregressive => {
            let ar = ArDecodeConfig {
                max_tokens: cfg.get_or("collab", "max_tokens", 64)?,
                projection: dcfg.projection,
                seed,
                eos: dcfg.eos,
            };
            lambdas
                .iter()
                .map(|&lambda| {
                    let s = CollabSpec { lambda, ..spec.clone() };
                    collab_decode_ar(&core.params, &user.params, &s, &ar).map(|t| (lambda, t))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(outputs
        .into_iter()
        .map(|(lambda, tokens)| {
            let text = tok.decode(&tokens);
            SweepRow {
                lambda,
                matches: expected.as_ref().map(|e| *e == text),
                tokens: tokens.len(),
                text,
            }
        })
        .collect())
}

/// Reconstruction loss at one probed noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub t: usize,
    pub mean_ce: f64,
    pub targets: usize,
}

pub fn eval(config: &Path, held_out: &Path) -> Result<(Vec<EvalRow>, usize)> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed()?;
    let ckpt_path = cfg.require_existing_path("model", "checkpoint")?;
    let ckpt = load(&ckpt_path)?;
    let tok = tokenizer_for(&cfg, Some(&ckpt))?;
    check_vocab(&tok, &ckpt.params)?;
    let dcfg = decode_config(&cfg, seed, &ckpt)?;
    let lines = read_corpus(held_out)?;
    let examples = prepare_corpus(&tok, &lines, dcfg.block, held_out)?;

    let mut extra = vec![("held_out".to_string(), held_out.display().to_string())];
    extra.extend(checkpoint_meta("model", &ckpt_path, &ckpt));
    write_run_meta(&cfg, "eval", seed, &extra)?;

    let total = ckpt.params.config.time_steps;
    let schedule = NoiseSchedule::new(total, dcfg.schedule, dcfg.k as f32)?;
    let mut rng = RngStream::named(seed, "eval");
    let rows = EVAL_LEVELS
        .iter()
        .map(|&level| {
            let t = ((level * total as f64).round() as usize).clamp(1, total);
            let (nll, targets) = reconstruction_nll(&ckpt.params, &examples, dcfg.block, t, &schedule, &mut rng)?;
            Ok(EvalRow {
                t,
                mean_ce: nll / targets.max(1) as f64,
                targets,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, ckpt.params.config.vocab))
}

pub fn mask_dump(c0: usize, n: usize, block: usize) -> Result<Vec<String>> {
    Ok(build_block_mask(c0, n, block)?.to_rows())
}
