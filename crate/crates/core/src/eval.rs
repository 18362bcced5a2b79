//! Sample-quality metrics: per-sample unigram entropy, Self-BLEU, decoding
//! error curves and total variation against known distributions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang_repr::TokenSequence;
use crate::numerics::Tensor;
use crate::sampler::Trajectory;
use crate::toy_oracle::{enumerate_joint, ToySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub samples: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn new(name: &str, value: f64, samples: usize, config_hash: &str) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("metric {name} is {value}")));
        }
        Ok(MetricReport {
            name: name.to_string(),
            value,
            samples,
            config_hash: config_hash.to_string(),
        })
    }
}

/// Entropy (nats) of one sequence's empirical token distribution.
pub fn sequence_entropy(seq: &TokenSequence) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in &seq.0 {
        *counts.entry(t).or_default() += 1;
    }
    let n = seq.len() as f64;
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    -c.iter().map(|&k| k as f64 / n).map(|p| p * p.ln()).sum::<f64>()
}

/// Mean per-sample unigram entropy in nats. Empty sequences are skipped.
pub fn unigram_entropy(samples: &[TokenSequence]) -> Result<f64> {
    let kept: Vec<&TokenSequence> = samples.iter().filter(|s| !s.is_empty()).collect();
    if kept.len() < samples.len() {
        log::warn!("skipping {} empty samples", samples.len() - kept.len());
    }
    if kept.is_empty() {
        return Err(Error::Config("unigram entropy needs a non-empty sample".into()));
    }
    Ok(kept.iter().map(|s| sequence_entropy(s)).sum::<f64>() / kept.len() as f64)
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for w in seq.windows(n) {
        *m.entry(w).or_default() += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBleu {
    pub value: f64,
    /// Order actually used (lowered when a sample is shorter than `max_n`).
    pub order: usize,
    /// Number of (sample, level) pairs with zero precision that were
    /// dropped from the geometric mean.
    pub dropped_levels: usize,
}

/// BLEU of `candidate` against `references`: clipped n-gram precisions up
/// to `order`, geometric mean over the nonzero levels, brevity penalty
/// from the closest reference length. Returns the score and the number of
/// dropped zero levels.
pub fn bleu(candidate: &[usize], references: &[&[usize]], order: usize) -> (f64, usize) {
    let mut log_sum = 0.0;
    let mut kept = 0;
    let mut dropped = 0;
    for n in 1..=order {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            dropped += 1;
            continue;
        }
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0))).sum();
        if clipped == 0 {
            dropped += 1;
            continue;
        }
        log_sum += (clipped as f64 / total as f64).ln();
        kept += 1;
    }
    if kept == 0 {
        return (0.0, dropped);
    }
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - candidate.len() as i64).abs(), len))
        .unwrap_or(candidate.len()) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * (log_sum / kept as f64).exp(), dropped)
}

/// Mean BLEU of each sample against all others.
pub fn self_bleu(samples: &[TokenSequence], max_n: usize) -> Result<SelfBleu> {
    if samples.len() < 2 {
        return Err(Error::Config("self-BLEU needs at least two samples".into()));
    }
    if max_n == 0 {
        return Err(Error::Config("self-BLEU order must be positive".into()));
    }
    let shortest = samples.iter().map(|s| s.len()).min().unwrap_or(0);
    if shortest == 0 {
        return Err(Error::Config("self-BLEU on an empty sample".into()));
    }
    let order = if max_n > shortest {
        log::warn!("self-BLEU order lowered from {max_n} to {shortest}");
        shortest
    } else {
        max_n
    };
    let mut total = 0.0;
    let mut dropped = 0;
    for (i, s) in samples.iter().enumerate() {
        let refs: Vec<&[usize]> = samples.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.0.as_slice()).collect();
        let (b, d) = bleu(&s.0, &refs, order);
        total += b;
        dropped += d;
    }
    Ok(SelfBleu {
        value: total / samples.len() as f64,
        order,
        dropped_levels: dropped,
    })
}

/// Mean decoding-error fraction at each recorded time over trajectories
/// sharing one grid.
pub fn empirical_decoding_error(trajectories: &[Trajectory]) -> Result<Vec<(f64, f64)>> {
    let first = trajectories.first().ok_or_else(|| Error::Config("no trajectories recorded".into()))?;
    if trajectories.iter().any(|t| t.times != first.times) {
        return Err(Error::Config("trajectories use different grids".into()));
    }
    let n = trajectories.len() as f64;
    Ok(first
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, trajectories.iter().map(|tr| tr.decoding_error[k]).sum::<f64>() / n))
        .collect())
}

/// Total variation between the empirical joint of `samples` and `spec`.
pub fn tv_to_truth(samples: &[TokenSequence], spec: &ToySpec) -> Result<f64> {
    Ok(enumerate_joint(samples, spec.vocab_size(), spec.seq_len)?.total_variation(spec))
}

/// Normalized counts of adjacent token pairs, `|V| x |V|`.
pub fn bigram_distribution(samples: &[TokenSequence], vocab: usize) -> Result<Tensor> {
    let mut counts = vec![0.0; vocab * vocab];
    let mut total = 0.0;
    for s in samples {
        s.validate(vocab)?;
        for w in s.0.windows(2) {
            counts[w[0] * vocab + w[1]] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(Error::Config("no bigrams in the sample".into()));
    }
    for c in &mut counts {
        *c /= total;
    }
    Tensor::new(vec![vocab, vocab], counts)
}

/// Total variation between the sample's bigram distribution and `truth`.
pub fn bigram_tv(samples: &[TokenSequence], truth: &Tensor) -> Result<f64> {
    let p = bigram_distribution(samples, truth.cols())?;
    Ok(0.5 * p.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Fraction of samples with positive probability under `spec`.
pub fn valid_rate(samples: &[TokenSequence], spec: &ToySpec) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| spec.probability(s) > 0.0).count() as f64 / samples.len() as f64
}
