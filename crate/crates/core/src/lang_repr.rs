//! Vocabularies, token sequences, the one-hot lift and the argmax decoder.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    /// Names must be unique, non-empty and free of whitespace so that
    /// space-separated sequence files stay unambiguous.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Vocabulary(format!("need at least 2 tokens, got {}", names.len())));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token name {n:?}")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate token name {n:?}")));
            }
        }
        Ok(Vocabulary { names })
    }

    /// Tokens named `t0`, `t1`, ...
    pub fn numbered(size: usize) -> Result<Self> {
        Vocabulary::new((0..size).map(|i| format!("t{i}")).collect())
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, token: usize) -> &str {
        &self.names[token]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// One token name per line; the line number is the token index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for n in &self.names {
            writeln!(f, "{n}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut names = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.is_empty() {
                names.push(line);
            }
        }
        Vocabulary::new(names)
    }

    /// Parses a space-separated line of token names.
    pub fn parse_sequence(&self, line: &str) -> Result<TokenSequence> {
        line.split_whitespace()
            .map(|w| {
                self.index_of(w)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown token {w:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn render(&self, seq: &TokenSequence) -> String {
        seq.0.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab: vocab_size }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// `L x |V|` one-hot rows of `y`.
pub fn encode_onehot(y: &TokenSequence, vocab_size: usize) -> Result<Tensor> {
    y.validate(vocab_size)?;
    let mut data = vec![0.0; y.len() * vocab_size];
    for (l, &tok) in y.0.iter().enumerate() {
        data[l * vocab_size + tok] = 1.0;
    }
    Tensor::new(vec![y.len(), vocab_size], data)
}

/// Stacks a batch of equal-length sequences into `(B*L) x |V|` rows.
pub fn encode_batch(batch: &[TokenSequence], vocab_size: usize) -> Result<Tensor> {
    let len = batch.first().map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(batch.len() * len * vocab_size);
    for seq in batch {
        if seq.len() != len {
            return Err(Error::Shape(format!("ragged batch: {} vs {}", seq.len(), len)));
        }
        data.extend_from_slice(encode_onehot(seq, vocab_size)?.data());
    }
    Tensor::new(vec![batch.len() * len, vocab_size], data)
}

/// Per-row argmax; ties go to the lowest index.
pub fn decode_argmax(x: &Tensor) -> TokenSequence {
    let c = x.cols();
    TokenSequence(x.data().chunks(c).map(argmax).collect())
}

/// Splits `(B*L) x |V|` rows into `B` decoded sequences of length `seq_len`.
pub fn decode_batch(x: &Tensor, seq_len: usize) -> Vec<TokenSequence> {
    let flat = decode_argmax(x).0;
    flat.chunks(seq_len).map(|c| TokenSequence(c.to_vec())).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
