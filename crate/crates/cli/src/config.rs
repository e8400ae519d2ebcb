//! Flat `[section]` / `key = value` run configuration.
//!
//! Every key is validated against a fixed schema so typos fail loudly, and
//! every error names the file and line it came from.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use simdiff::{Error, Result};

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "output_dir"]),
    ("data", &["corpus", "token_map"]),
    (
        "model",
        &[
            "checkpoint",
            "vocab",
            "d_model",
            "n_layers",
            "n_heads",
            "d_ff",
            "max_len",
            "time_steps",
            "time_quantum",
            "tie_embeddings",
            "absent_self_cond",
            "input_temperature",
        ],
    ),
    (
        "train",
        &[
            "preset",
            "block",
            "self_cond_prob",
            "learning_rate",
            "weight_decay",
            "beta1",
            "beta2",
            "eps",
            "batch_size",
            "total_steps",
            "warmup_steps",
            "schedule",
            "k",
            "timesteps",
            "t_range",
            "save_every",
            "objective",
            "equivalence_check_every",
            "init_checkpoint",
            "resume",
        ],
    ),
    (
        "decode",
        &[
            "shards",
            "steps",
            "stop_at",
            "block",
            "max_rounds",
            "projection",
            "top_p",
            "temperature",
            "quantum",
            "schedule",
            "k",
            "stop_at_eos",
        ],
    ),
    (
        "collab",
        &[
            "core",
            "user",
            "mode",
            "alpha",
            "lambdas",
            "feed_combined",
            "max_tokens",
            "expected",
        ],
    ),
];

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    path: PathBuf,
    entries: BTreeMap<(String, String), Entry>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig {
            path: path.to_path_buf(),
            entries: BTreeMap::new(),
        };
        let mut section: Option<&str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg.err_at(line, "unterminated section header"))?
                    .trim();
                let known = SCHEMA.iter().find(|(s, _)| *s == name);
                section = Some(
                    known
                        .map(|(s, _)| *s)
                        .ok_or_else(|| cfg.err_at(line, format!("unknown section [{name}]")))?,
                );
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| cfg.err_at(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.ok_or_else(|| cfg.err_at(line, format!("key `{key}` outside any section")))?;
            let keys = SCHEMA.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !keys.contains(&key) {
                return Err(cfg.err_at(line, format!("unknown key `{key}` in [{sec}]")));
            }
            let slot = (sec.to_string(), key.to_string());
            if let Some(prev) = cfg.entries.get(&slot) {
                return Err(cfg.err_at(line, format!("duplicate key {sec}.{key} (first set on line {})", prev.line)));
            }
            cfg.entries.insert(
                slot,
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(cfg)
    }

    fn err_at(&self, line: usize, msg: impl Display) -> Error {
        Error::Config(format!("{}:{line}: {msg}", self.path.display()))
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.get(&(section.to_string(), key.to_string()))
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.entry(section, key).map(|e| e.value.as_str())
    }

    /// Error pinned to the line that set `section.key`, or to the file.
    pub fn error(&self, section: &str, key: &str, msg: impl Display) -> Error {
        match self.entry(section, key) {
            Some(e) => self.err_at(e.line, format!("{section}.{key}: {msg}")),
            None => Error::Config(format!("{}: {section}.{key}: {msg}", self.path.display())),
        }
    }

    /// Re-attribute a validation failure to the first line of `section`.
    pub fn in_section(&self, section: &str, err: Error) -> Error {
        let Error::Config(msg) = err else { return err };
        let first = self.entries.iter().filter(|((s, _), _)| s == section).map(|(_, e)| e.line).min();
        match first {
            Some(line) => self.err_at(line, format!("[{section}] {msg}")),
            None => Error::Config(format!("{}: [{section}] {msg}", self.path.display())),
        }
    }

    pub fn get<T>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| self.err_at(e.line, format!("invalid value `{}` for {section}.{key}: {err}", e.value))),
        }
    }

    pub fn get_or<T>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|item| {
                item.trim()
                    .parse::<T>()
                    .map_err(|err| self.err_at(e.line, format!("invalid item `{}` in {section}.{key}: {err}", item.trim())))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    /// Resolve a path value relative to the config file's directory.
    pub fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    /// A path that must already exist.
    pub fn existing_path(&self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        let p = self.resolve(&e.value);
        if !p.exists() {
            return Err(self.err_at(e.line, format!("{section}.{key}: path {} does not exist", p.display())));
        }
        Ok(Some(p))
    }

    pub fn require_existing_path(&self, section: &str, key: &str) -> Result<PathBuf> {
        self.existing_path(section, key)?
            .ok_or_else(|| Error::Config(format!("{}: missing required key {section}.{key}", self.path.display())))
    }

    /// Directory for run outputs; defaults to the config file's directory.
    pub fn output_dir(&self) -> PathBuf {
        self.raw("run", "output_dir").map_or_else(|| self.base_dir(), |v| self.resolve(v))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("run", "seed", 0)
    }

    /// Every set key as `section.key = value`, in sorted order.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|((s, k), e)| (format!("{s}.{k}"), e.value.clone()))
            .collect()
    }
}
