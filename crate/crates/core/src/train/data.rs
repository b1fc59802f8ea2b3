//! Byte-level tokenizer and synthetic corpora.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB: usize = 259;

pub const BUNDLED_TEXT: &str = include_str!("../../data/corpus.txt");

/// Bytes map to their value; three specials follow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Encodes with a leading BOS.
    pub fn encode_prompt(&self, text: &str) -> Vec<usize> {
        std::iter::once(BOS).chain(self.encode(text)).collect()
    }

    /// Drops specials; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corpus {
    /// `BOS x SEP x EOS` episodes, `x` drawn from `alphabet` lowercase letters.
    Copy { min_len: usize, max_len: usize, alphabet: usize },
    /// Lines `a+b=c` modulo `modulus`.
    ModAdd { modulus: usize },
    /// Windows of the bundled text.
    Text,
}

const SEP: u8 = b'|';

impl Corpus {
    pub fn copy_default() -> Self {
        Corpus::Copy { min_len: 2, max_len: 8, alphabet: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Corpus::Copy { min_len, max_len, alphabet } => {
                if min_len == 0 || min_len > max_len {
                    return Err(Error::Config(format!("copy lengths {min_len}..={max_len}")));
                }
                if !(1..=26).contains(&alphabet) {
                    return Err(Error::Config(format!("copy alphabet {alphabet} outside 1..=26")));
                }
            }
            Corpus::ModAdd { modulus } if modulus < 2 => {
                return Err(Error::Config(format!("modulus {modulus} below 2")));
            }
            _ => {}
        }
        Ok(())
    }

    fn episode<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<usize>) {
        match *self {
            Corpus::Copy { min_len, max_len, alphabet } => {
                let n = rng.gen_range(min_len..=max_len);
                let x: Vec<usize> = (0..n).map(|_| usize::from(b'a') + rng.gen_range(0..alphabet)).collect();
                out.push(BOS);
                out.extend(&x);
                out.push(usize::from(SEP));
                out.extend(&x);
                out.push(EOS);
            }
            Corpus::ModAdd { modulus } => {
                let (a, b) = (rng.gen_range(0..modulus), rng.gen_range(0..modulus));
                out.extend(ByteTokenizer.encode(&format!("{a}+{b}={}\n", (a + b) % modulus)));
            }
            Corpus::Text => unreachable!(),
        }
    }

    /// `len` tokens; episodes are concatenated and the last one truncated.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        if let Corpus::Text = self {
            let text = ByteTokenizer.encode(BUNDLED_TEXT);
            let start = rng.gen_range(0..text.len().saturating_sub(len).max(1));
            let mut out: Vec<usize> = text.iter().cycle().skip(start).take(len).copied().collect();
            out.truncate(len);
            return out;
        }
        let mut out = Vec::with_capacity(len + 32);
        while out.len() < len {
            self.episode(rng, &mut out);
        }
        out.truncate(len);
        out
    }

    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, len: usize) -> Vec<Vec<usize>> {
        (0..batch).map(|_| self.sample(rng, len)).collect()
    }
}
