//! Desk-scale corpora: draws from a toy joint, walks of a seeded Markov
//! chain with known statistics, and character-level text.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::denoiser_net::Denoiser;
use crate::error::{Error, Result};
use crate::lang_repr::{TokenSequence, Vocabulary};
use crate::numerics::{SeededRng, Tensor};
use crate::toy_oracle::ToySpec;

/// Token standing for a space in character-level corpora.
pub const SPACE_TOKEN: &str = "<sp>";
/// Token for characters beyond the vocabulary cap.
pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ToyPreset {
    #[default]
    TwoCities,
    Skewed,
    ThreeModes,
    /// `modes` random sequences over a numbered vocabulary.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSpec {
    ToyModes {
        #[serde(default)]
        preset: ToyPreset,
        #[serde(default = "default_toy_vocab")]
        vocab_size: usize,
        #[serde(default = "default_toy_len")]
        seq_len: usize,
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default)]
        seed: u64,
    },
    MarkovGrammar {
        vocab_size: usize,
        seq_len: usize,
        /// Successors per state.
        branching: usize,
        #[serde(default)]
        seed: u64,
    },
    TextFile {
        path: PathBuf,
        seq_len: usize,
        /// Most frequent characters kept; the rest map to `<unk>`.
        #[serde(default = "default_vocab_cap")]
        vocab_cap: usize,
    },
}

fn default_toy_vocab() -> usize {
    256
}
fn default_toy_len() -> usize {
    2
}
fn default_modes() -> usize {
    8
}
fn default_vocab_cap() -> usize {
    64
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::ToyModes {
            preset: ToyPreset::TwoCities,
            vocab_size: default_toy_vocab(),
            seq_len: default_toy_len(),
            modes: default_modes(),
            seed: 0,
        }
    }
}

/// A seeded random Markov chain over `|V|` states.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    /// Row-stochastic transition matrix.
    pub transition: Tensor,
    /// Distribution of the first token.
    pub initial: Vec<f64>,
}

impl MarkovChain {
    /// Each state gets `branching` distinct successors with random weights.
    /// The first token is drawn from a stationary distribution.
    pub fn random(vocab_size: usize, branching: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || branching == 0 || branching > vocab_size {
            return Err(Error::Config(format!("branching {branching} for {vocab_size} states")));
        }
        let mut rng = SeededRng::new(seed).fork(21);
        let mut p = vec![0.0; vocab_size * vocab_size];
        for i in 0..vocab_size {
            let mut states: Vec<usize> = (0..vocab_size).collect();
            rng.shuffle(&mut states);
            let w: Vec<f64> = (0..branching).map(|_| 0.5 + rng.uniform()).collect();
            let total: f64 = w.iter().sum();
            for (&j, wj) in states[..branching].iter().zip(&w) {
                p[i * vocab_size + j] = wj / total;
            }
        }
        let transition = Tensor::new(vec![vocab_size, vocab_size], p)?;
        let initial = stationary(&transition);
        Ok(MarkovChain { transition, initial })
    }

    pub fn vocab_size(&self) -> usize {
        self.initial.len()
    }

    /// Marginal of position `k`.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        let mut m = self.initial.clone();
        for _ in 0..k {
            m = step(&self.transition, &m);
        }
        m
    }

    /// Expected bigram distribution of length-`seq_len` walks, averaged over
    /// the `seq_len - 1` adjacent pairs.
    pub fn bigram_truth(&self, seq_len: usize) -> Result<Tensor> {
        if seq_len < 2 {
            return Err(Error::Config("bigrams need length at least 2".into()));
        }
        let v = self.vocab_size();
        let mut out = vec![0.0; v * v];
        let mut m = self.initial.clone();
        for _ in 0..seq_len - 1 {
            for i in 0..v {
                for j in 0..v {
                    out[i * v + j] += m[i] * self.transition.data()[i * v + j];
                }
            }
            m = step(&self.transition, &m);
        }
        let n = (seq_len - 1) as f64;
        Tensor::new(vec![v, v], out.into_iter().map(|x| x / n).collect())
    }

    pub fn walk(&self, rng: &mut SeededRng, seq_len: usize) -> TokenSequence {
        let v = self.vocab_size();
        let mut cur = rng.categorical(&self.initial);
        let mut out = vec![cur];
        for _ in 1..seq_len {
            cur = rng.categorical(&self.transition.data()[cur * v..(cur + 1) * v]);
            out.push(cur);
        }
        TokenSequence(out)
    }
}

/// Exact denoiser of a Markov-chain corpus. The per-position posterior
/// given `x` is a hidden Markov model with Gaussian emissions, so
/// forward-backward gives `D(x, t)` exactly.
#[derive(Debug, Clone)]
pub struct MarkovDenoiser {
    pub chain: MarkovChain,
    pub seq_len: usize,
}

impl MarkovDenoiser {
    pub fn new(chain: MarkovChain, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        Ok(MarkovDenoiser { chain, seq_len })
    }

    fn posterior(&self, x: &[f64], t: f64) -> Vec<f64> {
        let v = self.chain.vocab_size();
        let l = self.seq_len;
        let p = self.chain.transition.data();
        let t = t.clamp(0.0, 1.0 - crate::interpolant::SINGULARITY_EPS);
        let a = t / ((1.0 - t) * (1.0 - t));
        // emissions, scaled per position
        let emit: Vec<Vec<f64>> = x
            .chunks(v)
            .map(|row| {
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(a * z));
                row.iter().map(|&z| (a * z - m).exp()).collect()
            })
            .collect();
        let normalize = |w: &mut Vec<f64>| {
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|z| *z /= s);
        };
        let mut fwd = vec![vec![0.0; v]; l];
        fwd[0] = self.chain.initial.iter().zip(&emit[0]).map(|(a, b)| a * b).collect();
        normalize(&mut fwd[0]);
        for k in 1..l {
            let mut f = step(&self.chain.transition, &fwd[k - 1]);
            f.iter_mut().zip(&emit[k]).for_each(|(a, b)| *a *= b);
            normalize(&mut f);
            fwd[k] = f;
        }
        let mut out = vec![0.0; l * v];
        let mut bwd = vec![1.0; v];
        for k in (0..l).rev() {
            let mut post: Vec<f64> = fwd[k].iter().zip(&bwd).map(|(a, b)| a * b).collect();
            normalize(&mut post);
            out[k * v..(k + 1) * v].copy_from_slice(&post);
            if k > 0 {
                let w: Vec<f64> = bwd.iter().zip(&emit[k]).map(|(a, b)| a * b).collect();
                let mut nb: Vec<f64> = (0..v).map(|i| (0..v).map(|j| p[i * v + j] * w[j]).sum()).collect();
                normalize(&mut nb);
                bwd = nb;
            }
        }
        out
    }
}

impl Denoiser for MarkovDenoiser {
    fn vocab_size(&self) -> usize {
        self.chain.vocab_size()
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn denoise(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let block = self.seq_len * self.vocab_size();
        if x.len() != block * t.len() {
            return Err(Error::Shape(format!("{} values for {} examples of {block}", x.len(), t.len())));
        }
        let mut out = Vec::with_capacity(x.len());
        for (chunk, &tt) in x.data().chunks(block).zip(t) {
            out.extend(self.posterior(chunk, tt));
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

fn step(p: &Tensor, m: &[f64]) -> Vec<f64> {
    let v = m.len();
    let mut out = vec![0.0; v];
    for i in 0..v {
        for j in 0..v {
            out[j] += m[i] * p.data()[i * v + j];
        }
    }
    out
}

/// A stationary distribution: the Cesaro average of the uniform start
/// pushed through the chain, which converges for periodic chains too.
fn stationary(p: &Tensor) -> Vec<f64> {
    let v = p.rows();
    let mut m = vec![1.0 / v as f64; v];
    let mut avg = vec![0.0; v];
    let iters = 4096;
    for _ in 0..iters {
        for (a, x) in avg.iter_mut().zip(&m) {
            *a += x;
        }
        m = step(p, &m);
    }
    let total: f64 = avg.iter().sum();
    avg.into_iter().map(|a| a / total).collect()
}

/// A generated or ingested corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub sequences: Vec<TokenSequence>,
    pub seq_len: usize,
}

impl CorpusSpec {
    pub fn seq_len(&self) -> usize {
        match self {
            CorpusSpec::ToyModes { preset, seq_len, .. } => match preset {
                ToyPreset::Random => *seq_len,
                _ => 2,
            },
            CorpusSpec::MarkovGrammar { seq_len, .. } | CorpusSpec::TextFile { seq_len, .. } => *seq_len,
        }
    }

    /// The toy joint behind a `toy_modes` spec.
    pub fn toy_spec(&self) -> Result<ToySpec> {
        match self {
            CorpusSpec::ToyModes {
                preset,
                vocab_size,
                seq_len,
                modes,
                seed,
            } => Ok(match preset {
                ToyPreset::TwoCities => ToySpec::default(),
                ToyPreset::Skewed => ToySpec::skewed(),
                ToyPreset::ThreeModes => ToySpec::three_modes(),
                ToyPreset::Random => ToySpec::random_modes(*vocab_size, *seq_len, *modes, &mut SeededRng::new(*seed).fork(22))?,
            }),
            _ => Err(Error::Config("only toy_modes corpora have an enumerable joint".into())),
        }
    }

    pub fn markov_chain(&self) -> Result<MarkovChain> {
        match self {
            CorpusSpec::MarkovGrammar {
                vocab_size,
                branching,
                seed,
                ..
            } => MarkovChain::random(*vocab_size, *branching, *seed),
            _ => Err(Error::Config("not a markov_grammar corpus".into())),
        }
    }

    /// `n` sequences (for text files, at most `n` packed chunks).
    pub fn generate(&self, rng: &mut SeededRng, n: usize) -> Result<Corpus> {
        if n == 0 {
            return Err(Error::Config("corpus size must be at least 1".into()));
        }
        match self {
            CorpusSpec::ToyModes { .. } => {
                let spec = self.toy_spec()?;
                Ok(Corpus {
                    seq_len: spec.seq_len,
                    sequences: spec.sample(rng, n),
                    vocab: spec.vocab,
                })
            }
            CorpusSpec::MarkovGrammar { vocab_size, seq_len, .. } => {
                if *seq_len == 0 {
                    return Err(Error::Config("seq_len must be positive".into()));
                }
                let chain = self.markov_chain()?;
                Ok(Corpus {
                    vocab: Vocabulary::numbered(*vocab_size)?,
                    sequences: (0..n).map(|_| chain.walk(rng, *seq_len)).collect(),
                    seq_len: *seq_len,
                })
            }
            CorpusSpec::TextFile { path, seq_len, vocab_cap } => {
                let text = std::fs::read_to_string(path)?;
                let mut c = text_corpus(&text, *seq_len, *vocab_cap)?;
                c.sequences.truncate(n);
                Ok(c)
            }
        }
    }
}

/// Writes `# <header>` then one space-separated line of token names per
/// sequence.
pub fn write_sequences(out: &mut dyn std::io::Write, header: &str, vocab: &Vocabulary, seqs: &[TokenSequence]) -> Result<()> {
    writeln!(out, "# {header}")?;
    for s in seqs {
        s.validate(vocab.size())?;
        writeln!(out, "{}", vocab.render(s))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a sequence file; `#` lines and blank lines are skipped.
pub fn read_sequences(path: &std::path::Path, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| vocab.parse_sequence(l))
        .collect()
}

/// Character tokens of `text` with whitespace runs collapsed to one space.
pub fn normalize_chars(text: &str) -> Vec<String> {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .map(|c| if c == ' ' { SPACE_TOKEN.to_string() } else { c.to_string() })
        .collect()
}

/// Character-level corpus packed into consecutive length-`seq_len` chunks.
pub fn text_corpus(text: &str, seq_len: usize, vocab_cap: usize) -> Result<Corpus> {
    if vocab_cap < 2 {
        return Err(Error::Config(format!("vocab_cap {vocab_cap} must be at least 2")));
    }
    let chars = normalize_chars(text);
    if chars.is_empty() {
        return Err(Error::Config("text file is empty".into()));
    }
    if seq_len == 0 || chars.len() < seq_len {
        return Err(Error::Config(format!("text of {} characters cannot fill length {seq_len}", chars.len())));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &chars {
        *freq.entry(c.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let overflow = ranked.len() > vocab_cap;
    let keep = if overflow { vocab_cap.saturating_sub(1) } else { ranked.len() };
    let mut names: Vec<String> = ranked[..keep].iter().map(|(c, _)| c.to_string()).collect();
    names.sort();
    if overflow {
        names.push(UNKNOWN_TOKEN.to_string());
    }
    let vocab = Vocabulary::new(names)?;
    let unk = vocab.index_of(UNKNOWN_TOKEN);
    let ids: Vec<usize> = chars
        .iter()
        .map(|c| vocab.index_of(c).or(unk).expect("kept or unknown"))
        .collect();
    let sequences = ids.chunks_exact(seq_len).map(|c| TokenSequence(c.to_vec())).collect();
    Ok(Corpus { vocab, sequences, seq_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{bigram_tv, tv_to_truth};

    #[test]
    fn toy_corpus_matches_joint() {
        let spec = CorpusSpec::default();
        let c = spec.generate(&mut SeededRng::new(1), 10_000).unwrap();
        assert!(tv_to_truth(&c.sequences, &spec.toy_spec().unwrap()).unwrap() <= 0.02);
    }

    #[test]
    fn markov_denoiser_matches_enumerated_posterior() {
        use crate::toy_oracle::ExactDenoiser;
        let chain = MarkovChain::random(3, 2, 4).unwrap();
        let (v, l) = (3, 3);
        let mut support = Vec::new();
        for code in 0..27usize {
            let y = TokenSequence(vec![code / 9, (code / 3) % 3, code % 3]);
            let mut p = chain.initial[y.0[0]];
            for w in y.0.windows(2) {
                p *= chain.transition.data()[w[0] * v + w[1]];
            }
            if p > 0.0 {
                support.push((y, p));
            }
        }
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        support.iter_mut().for_each(|(_, p)| *p /= total);
        let spec = ToySpec::new(Vocabulary::numbered(v).unwrap(), l, support).unwrap();
        let exact = ExactDenoiser::new(spec);
        let hmm = MarkovDenoiser::new(chain, l).unwrap();
        let mut rng = SeededRng::new(8);
        for t in [0.0, 0.2, 0.5, 0.8, 0.97] {
            let x = Tensor::new(vec![l, v], (0..l * v).map(|_| rng.normal() + t).collect()).unwrap();
            let a = exact.denoise(&x, &[t]).unwrap();
            let b = hmm.denoise(&x, &[t]).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10, "t={t}: {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn sequence_file_round_trip() {
        let spec = CorpusSpec::default();
        let c = spec.generate(&mut SeededRng::new(4), 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seqs.txt");
        let mut f = std::fs::File::create(&p).unwrap();
        write_sequences(&mut f, "config_hash=abc", &c.vocab, &c.sequences).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config_hash=abc\n"));
        assert_eq!(read_sequences(&p, &c.vocab).unwrap(), c.sequences);
    }

    #[test]
    fn deterministic_chain_repeats_after_first_token() {
        let spec = CorpusSpec::MarkovGrammar {
            vocab_size: 8,
            seq_len: 6,
            branching: 1,
            seed: 3,
        };
        let c = spec.generate(&mut SeededRng::new(2), 200).unwrap();
        let mut by_start: BTreeMap<usize, &TokenSequence> = BTreeMap::new();
        for s in &c.sequences {
            let prev = by_start.entry(s.0[0]).or_insert(s);
            assert_eq!(*prev, s);
        }
    }

    #[test]
    fn generation_is_reproducible_and_bigrams_match_truth() {
        let spec = CorpusSpec::MarkovGrammar {
            vocab_size: 16,
            seq_len: 16,
            branching: 3,
            seed: 5,
        };
        let a = spec.generate(&mut SeededRng::new(9), 4000).unwrap();
        let b = spec.generate(&mut SeededRng::new(9), 4000).unwrap();
        assert_eq!(a, b);
        let chain = spec.markov_chain().unwrap();
        let truth = chain.bigram_truth(16).unwrap();
        assert!((truth.sum() - 1.0).abs() < 1e-12);
        assert!(bigram_tv(&a.sequences, &truth).unwrap() < 0.03);
        for r in 0..16 {
            assert!((chain.transition.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let m1 = chain.marginal(1);
        for (x, y) in m1.iter().zip(&chain.initial) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn text_corpus_packs_characters() {
        let c = text_corpus("ab  ba\n\tab", 4, 64).unwrap();
        assert_eq!(c.vocab.names(), &["<sp>", "a", "b"]);
        assert_eq!(c.sequences.len(), 2);
        assert_eq!(c.vocab.render(&c.sequences[0]), c.vocab.render(&TokenSequence(vec![1, 2, 0, 2])));
        assert!(text_corpus("   \n", 4, 64).is_err());
        assert!(text_corpus("aaab", 2, 1).is_err());
        let capped = text_corpus("aaabbc", 2, 2).unwrap();
        assert_eq!(capped.vocab.names(), &["a", "<unk>"]);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = CorpusSpec::MarkovGrammar {
            vocab_size: 16,
            seq_len: 16,
            branching: 3,
            seed: 5,
        };
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"kind\":\"markov_grammar\""));
        assert_eq!(serde_json::from_str::<CorpusSpec>(&s).unwrap(), spec);
    }
}
