//! Character-level tokenizer with a plain-text token map.
//!
//! Ids 0, 1 and 2 are reserved for padding, beginning-of-sequence and
//! end-of-sequence. A token map file holds one `token<TAB>id` pair per line;
//! tokens may span several characters and are matched greedily, longest first.
//! Backslash escapes `\t`, `\n` and `\\` encode those characters in the file.

use std::collections::BTreeMap;

use crate::{Error, Result, TokenId};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    to_id: BTreeMap<String, TokenId>,
    to_text: Vec<String>,
    longest: usize,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl Tokenizer {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut to_id = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Config(format!("empty token at id {i}")));
            }
            if to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token `{}`", escape(t))));
            }
        }
        let longest = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Tokenizer {
            to_id,
            to_text: tokens,
            longest,
        })
    }

    /// Specials plus every distinct character of `texts`, in sorted order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars: Vec<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.into_iter().map(String::from));
        Self::from_tokens(tokens)
    }

    pub fn from_token_map(text: &str) -> Result<Self> {
        let mut entries: Vec<(TokenId, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| {
                Error::Config(format!("token map line {}: expected `token<TAB>id`", lineno + 1))
            })?;
            let id: TokenId = id.trim().parse().map_err(|_| {
                Error::Config(format!("token map line {}: bad id `{id}`", lineno + 1))
            })?;
            entries.push((id, unescape(tok)));
        }
        entries.sort_by_key(|(id, _)| *id);
        for (expect, (id, _)) in entries.iter().enumerate() {
            if *id as usize != expect {
                return Err(Error::Config(format!("token map ids must be dense from 0; missing id {expect}")));
            }
        }
        let tokens: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("token map must reserve id {i} for {s}")));
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn to_token_map(&self) -> String {
        self.to_text
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}\t{i}\n", escape(t)))
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.to_text.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let max = self.longest.min(chars.len() - i);
            let hit = (1..=max).rev().find_map(|len| {
                let piece: String = chars[i..i + len].iter().collect();
                self.to_id.get(&piece).map(|&id| (id, len))
            });
            match hit {
                Some((id, len)) if id > EOS => {
                    out.push(id);
                    i += len;
                }
                _ => {
                    return Err(Error::Domain(format!(
                        "character {:?} at offset {i} is not in the vocabulary",
                        chars[i]
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Text of the given ids, skipping the reserved specials.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id > EOS)
            .filter_map(|&id| self.to_text.get(id as usize))
            .map(String::as_str)
            .collect()
    }
}
