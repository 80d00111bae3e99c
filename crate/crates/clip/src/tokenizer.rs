//! Byte-level BPE tokenizer compatible with OpenAI CLIP checkpoints.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use regex::Regex;

use crate::{ClipError, Result};

/// Merge table shipped with every OpenAI CLIP checkpoint.
static DEFAULT_VOCAB_GZ: &[u8] = include_bytes!("../assets/bpe_simple_vocab_16e6.txt.gz");

const MERGE_COUNT: usize = 49152 - 256 - 2;
const START_OF_TEXT: &str = "<start_of_text>";
const END_OF_TEXT: &str = "<end_of_text>";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
}

impl Tokenizer {
    /// Tokenizer backed by the bundled merge table.
    pub fn bundled() -> Self {
        Self::from_gz_bytes(DEFAULT_VOCAB_GZ).expect("bundled vocabulary is valid")
    }

    pub fn from_gz_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ClipError::Io { path: path.to_owned(), source })?;
        Self::from_gz_bytes(&bytes)
    }

    pub fn from_gz_bytes(bytes: &[u8]) -> Result<Self> {
        let mut text = String::new();
        GzDecoder::new(bytes).read_to_string(&mut text).map_err(|e| ClipError::Vocabulary(e.to_string()))?;
        let merges: Vec<(String, String)> = text
            .split('\n')
            .skip(1)
            .take(MERGE_COUNT)
            .map(|line| {
                let mut parts = line.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some(a), Some(b)) => Ok((a.to_owned(), b.to_owned())),
                    _ => Err(ClipError::Vocabulary(format!("malformed merge line `{line}`"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_merges(merges))
    }

    /// Builds the vocabulary the same way CLIP does: byte symbols, byte
    /// symbols with the end-of-word marker, one entry per merge, then the
    /// two special tokens.
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let byte_encoder = bytes_to_unicode();
        let mut vocab: Vec<String> = vocab_byte_order().into_iter().map(|b| byte_encoder[b as usize].to_string()).collect();
        let with_marker: Vec<String> = vocab.iter().map(|v| format!("{v}</w>")).collect();
        vocab.extend(with_marker);
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push(START_OF_TEXT.to_owned());
        vocab.push(END_OF_TEXT.to_owned());
        let encoder: HashMap<String, u32> = vocab.into_iter().enumerate().map(|(i, v)| (v, i as u32)).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let sot = encoder[START_OF_TEXT];
        let eot = encoder[END_OF_TEXT];
        let pattern = Regex::new(r"(?i)<start_of_text>|<end_of_text>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+")
            .expect("static pattern");
        Self { encoder, ranks, byte_encoder, pattern, sot, eot }
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn start_of_text(&self) -> u32 {
        self.sot
    }

    pub fn end_of_text(&self) -> u32 {
        self.eot
    }

    /// BPE ids of `text` without the special tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = clean_text(text);
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let token: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&token) {
                // every BPE output symbol is in the vocabulary by construction
                ids.push(self.encoder[&piece]);
            }
        }
        ids
    }

    /// `[sot] + encode(text) + [eot]`, rejected when longer than `context_length`.
    pub fn tokenize(&self, text: &str, context_length: usize) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(context_length);
        ids.push(self.sot);
        ids.extend(self.encode(text));
        ids.push(self.eot);
        if ids.len() > context_length {
            return Err(ClipError::PromptTooLong { tokens: ids.len(), limit: context_length });
        }
        Ok(ids)
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }
}

fn clean_text(text: &str) -> String {
    let unescaped =
        text.replace("&quot;", "\"").replace("&#39;", "'").replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&");
    unescaped.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Reversible byte -> printable character map used by GPT-2 style BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~')).collect();
    printable.extend(u32::from('¡')..=u32::from('¬'));
    printable.extend(u32::from('®')..=u32::from('ÿ'));
    let mut table = ['\0'; 256];
    let mut extra = 0;
    for b in 0..256u32 {
        let code = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(code).unwrap();
    }
    table
}

/// Byte symbols in vocabulary order: printable bytes first, then the rest.
fn vocab_byte_order() -> Vec<u8> {
    let table = bytes_to_unicode();
    let mut bytes: Vec<u8> = (0..=255u8).collect();
    bytes.sort_by_key(|&b| {
        let shifted = u32::from(table[b as usize]) != u32::from(b);
        (shifted, b)
    });
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_a_bijection() {
        let table = bytes_to_unicode();
        let mut seen: Vec<char> = table.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(table[b'a' as usize], 'a');
        assert_eq!(table[b' ' as usize], 'Ġ');
    }

    #[test]
    fn merges_apply_by_rank() {
        let merges = vec![("l".into(), "o".into()), ("lo".into(), "o</w>".into())];
        let tok = Tokenizer::from_merges(merges);
        assert_eq!(tok.bpe("loo"), vec!["loo</w>".to_string()]);
        assert_eq!(tok.bpe("ol"), vec!["o".to_string(), "l</w>".to_string()]);
    }

    #[test]
    fn whitespace_and_case_are_normalized() {
        assert_eq!(clean_text("  This  IS\tvery loonah "), "this is very loonah");
    }
}
