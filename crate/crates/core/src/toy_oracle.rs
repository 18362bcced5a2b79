//! Exact ground truth on small enumerable datasets.
//!
//! For data supported on a handful of sequences `y_k` with probabilities
//! `p_k`, the interpolant satisfies `I_t | y_k ~ N(t f(y_k), (1-t)^2 I)`, so
//! the Bayes denoiser is a softmax over the support with logits
//! `ln p_k + t <x, f(y_k)> / (1-t)^2`. Everything else here (flows, flow
//! maps, two-time denoisers, the factorized baseline) is built on that.
//!
//! The flow integrator works in `lambda = -ln(1-t)`, where the ODE reads
//! `dx/dlambda = D(x, t) - x`. With `D` frozen over a step the solution is
//! exact, `x_b = e^{-h} x_a + (1 - e^{-h}) D`; averaging `D` at both ends
//! gives a second-order scheme whose first stage is the plain Euler step.

use std::collections::BTreeMap;

use crate::denoiser_net::Denoiser;
use crate::error::{Error, Result};
use crate::lang_repr::{argmax, encode_onehot, TokenSequence, Vocabulary};
use crate::numerics::{SeededRng, Tensor};

/// Largest outcome space [`enumerate_joint`] accepts.
pub const MAX_OUTCOMES: usize = 1 << 16;
pub const DEFAULT_FINE_STEPS: usize = 1 << 12;
/// Integrations ending at `t = 1` stop at `1 - T_END_GAP` and snap to the
/// limiting vertex.
pub const T_END_GAP: f64 = 1e-7;
pub const CONVERGENCE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub vocab: Vocabulary,
    pub seq_len: usize,
    pub support: Vec<(TokenSequence, f64)>,
}

impl Default for ToySpec {
    /// `new york` and `san diego`, each with probability 1/2.
    fn default() -> Self {
        ToySpec::two_cities(0.5)
    }
}

impl ToySpec {
    pub fn new(vocab: Vocabulary, seq_len: usize, support: Vec<(TokenSequence, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Config("empty support".into()));
        }
        let mut total = 0.0;
        for (y, p) in &support {
            if y.len() != seq_len {
                return Err(Error::Shape(format!("support sequence {y} has length {}", y.len())));
            }
            y.validate(vocab.size())?;
            if !(*p > 0.0) {
                return Err(Error::Config(format!("support probability {p} must be positive")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("support probabilities sum to {total}")));
        }
        let mut seen = support.iter().map(|(y, _)| y).collect::<Vec<_>>();
        seen.sort();
        seen.dedup();
        if seen.len() != support.len() {
            return Err(Error::Config("duplicate support sequence".into()));
        }
        Ok(ToySpec { vocab, seq_len, support })
    }

    fn cities() -> Vocabulary {
        Vocabulary::new(["new", "san", "york", "diego"].map(String::from).to_vec()).expect("valid vocabulary")
    }

    /// `new york` with probability `p`, `san diego` with `1 - p`.
    pub fn two_cities(p: f64) -> Self {
        ToySpec::new(
            ToySpec::cities(),
            2,
            vec![(TokenSequence(vec![0, 2]), p), (TokenSequence(vec![1, 3]), 1.0 - p)],
        )
        .expect("valid toy")
    }

    /// The 0.7 / 0.3 variant.
    pub fn skewed() -> Self {
        ToySpec::two_cities(0.7)
    }

    /// `new york`, `san diego`, `los angeles`, equally likely.
    pub fn three_modes() -> Self {
        let vocab = Vocabulary::new(["new", "san", "los", "york", "diego", "angeles"].map(String::from).to_vec())
            .expect("valid vocabulary");
        let third = 1.0 / 3.0;
        ToySpec::new(
            vocab,
            2,
            vec![
                (TokenSequence(vec![0, 3]), third),
                (TokenSequence(vec![1, 4]), third),
                (TokenSequence(vec![2, 5]), third),
            ],
        )
        .expect("valid toy")
    }

    /// `modes` distinct random sequences over a numbered vocabulary with
    /// Dirichlet(1)-like random weights.
    pub fn random_modes(vocab_size: usize, seq_len: usize, modes: usize, rng: &mut SeededRng) -> Result<Self> {
        let vocab = Vocabulary::numbered(vocab_size)?;
        let space = (vocab_size as f64).powi(seq_len as i32);
        if (modes as f64) > space {
            return Err(Error::Config(format!("{modes} modes exceed {space} outcomes")));
        }
        let mut seqs: Vec<TokenSequence> = Vec::with_capacity(modes);
        while seqs.len() < modes {
            let y = TokenSequence((0..seq_len).map(|_| rng.below(vocab_size)).collect());
            if !seqs.contains(&y) {
                seqs.push(y);
            }
        }
        let raw: Vec<f64> = (0..modes).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let total: f64 = raw.iter().sum();
        let support = seqs.into_iter().zip(raw.iter().map(|w| w / total)).collect();
        ToySpec::new(vocab, seq_len, support)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn probability(&self, y: &TokenSequence) -> f64 {
        self.support.iter().find(|(s, _)| s == y).map_or(0.0, |(_, p)| *p)
    }

    /// Draws i.i.d. sequences from the joint.
    pub fn sample(&self, rng: &mut SeededRng, n: usize) -> Vec<TokenSequence> {
        let weights: Vec<f64> = self.support.iter().map(|(_, p)| *p).collect();
        (0..n).map(|_| self.support[rng.categorical(&weights)].0.clone()).collect()
    }

    /// Per-position marginals, `L x |V|`.
    pub fn marginals(&self) -> Tensor {
        let v = self.vocab_size();
        let mut m = Tensor::zeros(&[self.seq_len, v]);
        for (y, p) in &self.support {
            for (l, &tok) in y.0.iter().enumerate() {
                m.data_mut()[l * v + tok] += p;
            }
        }
        m
    }
}

/// Bayes-optimal denoiser of a [`ToySpec`].
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    spec: ToySpec,
    log_prior: Vec<f64>,
}

impl ExactDenoiser {
    pub fn new(spec: ToySpec) -> Self {
        let log_prior = spec.support.iter().map(|(_, p)| p.ln()).collect();
        ExactDenoiser { spec, log_prior }
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    fn block(&self) -> usize {
        self.spec.seq_len * self.spec.vocab_size()
    }

    fn inner_products(&self, x: &[f64]) -> Vec<f64> {
        let v = self.spec.vocab_size();
        self.spec
            .support
            .iter()
            .map(|(y, _)| y.0.iter().enumerate().map(|(l, &tok)| x[l * v + tok]).sum())
            .collect()
    }

    /// Posterior over support sequences for one `L x |V|` state.
    pub fn posterior_weights(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.block() {
            return Err(Error::Shape(format!("state has {} entries, expected {}", x.len(), self.block())));
        }
        if !(0.0..1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("exact denoiser needs t in [0, 1), got {t}")));
        }
        let scale = t / ((1.0 - t) * (1.0 - t));
        let mut w: Vec<f64> = self
            .inner_products(x)
            .iter()
            .zip(&self.log_prior)
            .map(|(ip, lp)| lp + scale * ip)
            .collect();
        crate::numerics::softmax_in_place(&mut w);
        Ok(w)
    }

    fn mix(&self, weights: &[f64], out: &mut [f64]) {
        let v = self.spec.vocab_size();
        out.iter_mut().for_each(|o| *o = 0.0);
        for ((y, _), &w) in self.spec.support.iter().zip(weights) {
            for (l, &tok) in y.0.iter().enumerate() {
                out[l * v + tok] += w;
            }
        }
    }

    /// `D(x, t)` for one state.
    pub fn denoise_one(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let w = self.posterior_weights(x, t)?;
        let mut out = vec![0.0; self.block()];
        self.mix(&w, &mut out);
        Ok(out)
    }

    /// Index of the support sequence `D(x, t)` concentrates on as `t -> 1`:
    /// the largest `<x, f(y_k)>`, ties broken by prior then index.
    pub fn limit_index(&self, x: &[f64]) -> usize {
        let ips = self.inner_products(x);
        let mut best = 0;
        for k in 1..ips.len() {
            if ips[k] > ips[best] || (ips[k] == ips[best] && self.log_prior[k] > self.log_prior[best]) {
                best = k;
            }
        }
        best
    }

    /// `lim_{t -> 1} D(x, t)`: the one-hot rows of the limiting sequence.
    pub fn limit_one(&self, x: &[f64]) -> Vec<f64> {
        let k = self.limit_index(x);
        let mut w = vec![0.0; self.spec.support.len()];
        w[k] = 1.0;
        let mut out = vec![0.0; self.block()];
        self.mix(&w, &mut out);
        out
    }
}

impl Denoiser for ExactDenoiser {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size()
    }

    fn seq_len(&self) -> usize {
        self.spec.seq_len
    }

    fn denoise(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let block = self.block();
        if x.len() != block * t.len() {
            return Err(Error::Shape(format!("{} entries for {} examples", x.len(), t.len())));
        }
        let mut out = Tensor::zeros(x.shape());
        for ((o, xc), &tt) in out.data_mut().chunks_mut(block).zip(x.data().chunks(block)).zip(t) {
            let w = self.posterior_weights(xc, tt)?;
            self.mix(&w, o);
        }
        Ok(out)
    }
}

fn lambda(t: f64) -> f64 {
    -(-t).ln_1p()
}

fn t_of(lambda: f64) -> f64 {
    -(-lambda).exp_m1()
}

fn check_times(s: f64, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s > t {
        return Err(Error::OutOfRange(format!("need 0 <= s <= t <= 1, got s={s}, t={t}")));
    }
    Ok(())
}

/// States of the second-order integrator on a uniform `lambda` grid from
/// `s` to `min(t, 1 - T_END_GAP)`, paired with their times.
pub fn exact_trajectory(den: &ExactDenoiser, x: &[f64], s: f64, t: f64, steps: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    check_times(s, t)?;
    if steps == 0 {
        return Err(Error::Config("need at least one step".into()));
    }
    let end = t.min(1.0 - T_END_GAP);
    let mut out = vec![(s, x.to_vec())];
    if s >= end {
        return Ok(out);
    }
    let (la, lb) = (lambda(s), lambda(end));
    let h = (lb - la) / steps as f64;
    let decay = (-h).exp();
    let gain = -(-h).exp_m1();
    let mut cur = x.to_vec();
    let mut pred = vec![0.0; cur.len()];
    for n in 0..steps {
        let ta = if n == 0 { s } else { t_of(la + n as f64 * h) };
        let tb = if n + 1 == steps { end } else { t_of(la + (n + 1) as f64 * h) };
        let d1 = den.denoise_one(&cur, ta)?;
        for ((p, &c), &d) in pred.iter_mut().zip(&cur).zip(&d1) {
            *p = decay * c + gain * d;
        }
        let d2 = den.denoise_one(&pred, tb)?;
        for ((c, &a), &b) in cur.iter_mut().zip(&d1).zip(&d2) {
            *c = decay * *c + gain * 0.5 * (a + b);
        }
        out.push((tb, cur.clone()));
    }
    Ok(out)
}

fn integrate(den: &ExactDenoiser, x: &[f64], s: f64, t: f64, steps: usize) -> Result<Vec<f64>> {
    let traj = exact_trajectory(den, x, s, t, steps)?;
    let last = traj.last().expect("trajectory has a start").1.clone();
    if t == 1.0 {
        Ok(den.limit_one(&last))
    } else {
        Ok(last)
    }
}

/// Exact flow map `X_{s,t}(x)` of the probability-flow ODE with the exact
/// denoiser. Integrates with `fine_steps` and `2 fine_steps` and fails if
/// they differ by more than [`CONVERGENCE_TOL`] in any entry.
pub fn exact_flow_map(den: &ExactDenoiser, x: &[f64], s: f64, t: f64, fine_steps: usize) -> Result<Vec<f64>> {
    check_times(s, t)?;
    if fine_steps < DEFAULT_FINE_STEPS {
        return Err(Error::Config(format!("fine_steps {fine_steps} < {DEFAULT_FINE_STEPS}")));
    }
    if s == t {
        return Ok(x.to_vec());
    }
    let coarse = integrate(den, x, s, t, fine_steps)?;
    let fine = integrate(den, x, s, t, 2 * fine_steps)?;
    let gap = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if gap > CONVERGENCE_TOL {
        return Err(Error::Numerical(format!(
            "flow map not converged: doubling steps moved the state by {gap:.3e}"
        )));
    }
    Ok(fine)
}

/// Two-time denoiser from its weighted-average form
/// `delta_{s,t}(x) = (1-s)(1-t)/(t-s) * int_s^t D(X_{s,r}(x), r) / (1-r)^2 dr`.
///
/// `D` is taken piecewise linear in `lambda` along the integrator's
/// trajectory and the kernel integrated exactly on each piece, so the
/// quadrature weights are non-negative and sum to one. At `t = 1` the
/// average collapses to `X_{s,1}`; at `t = s` it is `D_s`.
pub fn oracle_two_time_denoiser(den: &ExactDenoiser, x: &[f64], s: f64, t: f64, steps: usize) -> Result<Vec<f64>> {
    check_times(s, t)?;
    if t == s {
        if s == 1.0 {
            return Ok(den.limit_one(x));
        }
        return den.denoise_one(x, s);
    }
    if t == 1.0 {
        return integrate(den, x, s, 1.0, steps);
    }
    let traj = exact_trajectory(den, x, s, t, steps)?;
    let weights = kernel_weights(&traj.iter().map(|(r, _)| lambda(*r)).collect::<Vec<_>>());
    let mut delta = vec![0.0; x.len()];
    for ((r, state), w) in traj.iter().zip(&weights) {
        let d = den.denoise_one(state, *r)?;
        for (o, dv) in delta.iter_mut().zip(&d) {
            *o += w * dv;
        }
    }
    Ok(delta)
}

/// Product-integration weights of `int e^lambda f(lambda) dlambda` for
/// piecewise-linear `f` on `nodes`, normalized by the total kernel mass.
pub fn kernel_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    if n < 2 {
        return vec![1.0; n];
    }
    let top = nodes[n - 1];
    for i in 0..n - 1 {
        let (a, b) = (nodes[i], nodes[i + 1]);
        let h = b - a;
        // scaled by e^{-top} to stay in range
        let ea = (a - top).exp();
        let eb = (b - top).exp();
        let span = -((a - b).exp_m1()) * eb; // e^b - e^a, scaled
        w[i] += (span - h * ea) / h;
        w[i + 1] += (h * eb - span) / h;
    }
    let total = -((nodes[0] - top).exp_m1());
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Convex-combination form of a flow map from a two-time denoiser:
/// `X = (1-t)/(1-s) x + (t-s)/(1-s) delta`.
pub fn flow_from_delta(x: &[f64], delta: &[f64], s: f64, t: f64) -> Vec<f64> {
    if s == 1.0 {
        return x.to_vec();
    }
    let a = (1.0 - t) / (1.0 - s);
    let b = (t - s) / (1.0 - s);
    x.iter().zip(delta).map(|(xv, dv)| a * xv + b * dv).collect()
}

/// Inverse of [`flow_from_delta`], defined for `t != s`.
pub fn delta_from_flow(x: &[f64], flow: &[f64], s: f64, t: f64) -> Vec<f64> {
    let a = (1.0 - t) / (1.0 - s);
    let c = (1.0 - s) / (t - s);
    x.iter().zip(flow).map(|(xv, fv)| c * (fv - a * xv)).collect()
}

/// Estimation-free masked-diffusion sampler. After step `k` of `steps`,
/// `round(L (steps - k) / steps)` positions remain masked; the positions to
/// reveal are chosen uniformly and each revealed token is drawn
/// independently from its exact conditional given the tokens revealed in
/// earlier steps. One step is the fully factorized sampler.
pub fn factorized_baseline_sample(spec: &ToySpec, steps: usize, rng: &mut SeededRng) -> Result<TokenSequence> {
    if steps == 0 {
        return Err(Error::Config("need at least one step".into()));
    }
    let l = spec.seq_len;
    let v = spec.vocab_size();
    let mut tokens: Vec<Option<usize>> = vec![None; l];
    let mut masked: Vec<usize> = (0..l).collect();
    for k in 1..=steps {
        let remain = ((l * (steps - k)) as f64 / steps as f64).round() as usize;
        let reveal = masked.len().saturating_sub(remain);
        if reveal == 0 {
            continue;
        }
        rng.shuffle(&mut masked);
        let chosen: Vec<usize> = masked.drain(..reveal).collect();
        let conditionals = conditional_marginals(spec, &tokens);
        let mut new_tokens = Vec::with_capacity(chosen.len());
        for &pos in &chosen {
            new_tokens.push((pos, rng.categorical(&conditionals[pos * v..(pos + 1) * v])));
        }
        for (pos, tok) in new_tokens {
            tokens[pos] = Some(tok);
        }
    }
    Ok(TokenSequence(tokens.into_iter().map(|t| t.expect("all positions revealed")).collect()))
}

/// Per-position marginals given the revealed tokens, flattened `L x |V|`.
/// Falls back to the unconditional marginals when no support sequence is
/// consistent with what has been revealed.
pub fn conditional_marginals(spec: &ToySpec, revealed: &[Option<usize>]) -> Vec<f64> {
    let v = spec.vocab_size();
    let mut out = vec![0.0; spec.seq_len * v];
    let mut mass = 0.0;
    for (y, p) in &spec.support {
        if revealed.iter().zip(&y.0).all(|(r, &tok)| r.is_none_or(|r| r == tok)) {
            mass += p;
            for (l, &tok) in y.0.iter().enumerate() {
                out[l * v + tok] += p;
            }
        }
    }
    if mass == 0.0 {
        return spec.marginals().into_data();
    }
    out.iter_mut().for_each(|o| *o /= mass);
    out
}

/// Empirical distribution over `V^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub counts: BTreeMap<TokenSequence, usize>,
    pub total: usize,
}

impl JointDistribution {
    pub fn probability(&self, y: &TokenSequence) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        *self.counts.get(y).unwrap_or(&0) as f64 / self.total as f64
    }

    pub fn probabilities(&self) -> impl Iterator<Item = (&TokenSequence, f64)> {
        self.counts.iter().map(|(y, &c)| (y, c as f64 / self.total as f64))
    }

    /// Total variation to the spec's joint.
    pub fn total_variation(&self, spec: &ToySpec) -> f64 {
        let mut tv = 0.0;
        for (y, p) in self.probabilities() {
            tv += (p - spec.probability(y)).abs();
        }
        for (y, p) in &spec.support {
            if !self.counts.contains_key(y) {
                tv += p;
            }
        }
        0.5 * tv
    }

    /// Total variation between two empirical joints.
    pub fn total_variation_to(&self, other: &JointDistribution) -> f64 {
        let mut keys: Vec<&TokenSequence> = self.counts.keys().chain(other.counts.keys()).collect();
        keys.sort();
        keys.dedup();
        0.5 * keys
            .into_iter()
            .map(|y| (self.probability(y) - other.probability(y)).abs())
            .sum::<f64>()
    }
}

/// Counts outcomes; fails when `|V|^L` exceeds [`MAX_OUTCOMES`].
pub fn enumerate_joint(samples: &[TokenSequence], vocab_size: usize, seq_len: usize) -> Result<JointDistribution> {
    let space = (vocab_size as f64).powi(seq_len as i32);
    if space > MAX_OUTCOMES as f64 {
        return Err(Error::OutcomeSpace(format!("{vocab_size}^{seq_len} outcomes exceed {MAX_OUTCOMES}")));
    }
    let mut counts = BTreeMap::new();
    for s in samples {
        if s.len() != seq_len {
            return Err(Error::Shape(format!("sample of length {} in a length-{seq_len} space", s.len())));
        }
        s.validate(vocab_size)?;
        *counts.entry(s.clone()).or_insert(0) += 1;
    }
    Ok(JointDistribution {
        counts,
        total: samples.len(),
    })
}

/// One row of the factorization comparison: how often each sampler
/// produced `outcome`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationRow {
    pub outcome: TokenSequence,
    pub flow: f64,
    pub baseline_one_step: f64,
    pub baseline_many_step: f64,
}

/// Frequencies of every combination of per-position support tokens (plus
/// anything else observed) under three samplers: the exact flow integrated
/// with `flow_steps` Euler steps on the decoding-error grid, and the
/// factorized baseline at 1 and at `many_steps` steps.
pub fn factorization_table(
    spec: &ToySpec,
    samples: usize,
    flow_steps: usize,
    many_steps: usize,
    seed: u64,
) -> Result<Vec<FactorizationRow>> {
    use crate::sampler::{sample, SampleModel, SampleRun};
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let den = ExactDenoiser::new(spec.clone());
    let warp = crate::time_warp::build_time_warp(spec.vocab_size())?;
    let run = SampleRun {
        steps: flow_steps,
        seed,
        ..SampleRun::default()
    };
    let flow = sample(SampleModel::Denoiser(&den), &run, &warp, samples)?.sequences;
    let mut rng = SeededRng::new(seed).fork(41);
    let one = (0..samples).map(|_| factorized_baseline_sample(spec, 1, &mut rng)).collect::<Result<Vec<_>>>()?;
    let mut rng = SeededRng::new(seed).fork(42);
    let many = (0..samples)
        .map(|_| factorized_baseline_sample(spec, many_steps, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let v = spec.vocab_size();
    let marg = spec.marginals();
    let mut outcomes: Vec<TokenSequence> = vec![TokenSequence(Vec::new())];
    for l in 0..spec.seq_len {
        let toks: Vec<usize> = (0..v).filter(|&k| marg.data()[l * v + k] > 0.0).collect();
        outcomes = outcomes
            .iter()
            .flat_map(|p| {
                toks.iter().map(move |&k| {
                    let mut q = p.0.clone();
                    q.push(k);
                    TokenSequence(q)
                })
            })
            .collect();
    }
    let joints = [&flow, &one, &many].map(|s| enumerate_joint(s, v, spec.seq_len));
    let [jf, j1, jm] = joints;
    let (jf, j1, jm) = (jf?, j1?, jm?);
    for j in [&jf, &j1, &jm] {
        for y in j.counts.keys() {
            if !outcomes.contains(y) {
                outcomes.push(y.clone());
            }
        }
    }
    Ok(outcomes
        .into_iter()
        .map(|y| FactorizationRow {
            flow: jf.probability(&y),
            baseline_one_step: j1.probability(&y),
            baseline_many_step: jm.probability(&y),
            outcome: y,
        })
        .collect())
}

/// Decodes a flattened `L x |V|` state.
pub fn decode_state(x: &[f64], vocab_size: usize) -> TokenSequence {
    TokenSequence(x.chunks(vocab_size).map(argmax).collect())
}

/// One-hot state of a support sequence.
pub fn support_state(spec: &ToySpec, k: usize) -> Vec<f64> {
    encode_onehot(&spec.support[k].0, spec.vocab_size())
        .expect("support validated")
        .into_data()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn spec_validation() {
        let v = Vocabulary::numbered(3).unwrap();
        assert!(ToySpec::new(v.clone(), 2, vec![(TokenSequence(vec![0, 1]), 0.4)]).is_err());
        assert!(ToySpec::new(v.clone(), 2, vec![(TokenSequence(vec![0, 5]), 1.0)]).is_err());
        assert!(ToySpec::new(v.clone(), 2, vec![(TokenSequence(vec![0]), 1.0)]).is_err());
        assert!(ToySpec::new(v, 2, vec![(TokenSequence(vec![0, 1]), 1.0)]).is_ok());
        let s = ToySpec::three_modes();
        assert_eq!(s.vocab_size(), 6);
        let r = ToySpec::random_modes(256, 2, 8, &mut SeededRng::new(1)).unwrap();
        assert_eq!(r.support.len(), 8);
    }

    #[test]
    fn denoiser_at_zero_is_the_marginal() {
        let d = ExactDenoiser::new(ToySpec::default());
        let mut rng = SeededRng::new(2);
        let x = noise(&mut rng, 8);
        let out = d.denoise_one(&x, 0.0).unwrap();
        assert_eq!(out, d.spec().marginals().into_data());
        assert!(d.denoise_one(&x, 1.0).is_err());
    }

    #[test]
    fn denoiser_concentrates_near_one() {
        let d = ExactDenoiser::new(ToySpec::default());
        let mut rng = SeededRng::new(3);
        let t = 0.999;
        let x: Vec<f64> = support_state(d.spec(), 1).iter().map(|&v| t * v + 1e-3 * rng.normal()).collect();
        let w = d.posterior_weights(&x, t).unwrap();
        assert!(w[1] > 1.0 - 1e-12);
        assert_eq!(d.limit_index(&x), 1);
    }

    #[test]
    fn posterior_weights_normalize() {
        let d = ExactDenoiser::new(ToySpec::three_modes());
        let mut rng = SeededRng::new(4);
        for _ in 0..10_000 {
            let x = noise(&mut rng, 12);
            let t = rng.uniform();
            let w = d.posterior_weights(&x, t).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_map_identity_and_semigroup() {
        let d = ExactDenoiser::new(ToySpec::default());
        let mut rng = SeededRng::new(5);
        let x = noise(&mut rng, 8);
        assert_eq!(exact_flow_map(&d, &x, 0.3, 0.3, DEFAULT_FINE_STEPS).unwrap(), x);
        for _ in 0..5 {
            let mut ts = [rng.uniform(), rng.uniform(), rng.uniform()];
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let [s, u, t] = ts;
            let x = noise(&mut rng, 8);
            let direct = exact_flow_map(&d, &x, s, t, DEFAULT_FINE_STEPS).unwrap();
            let mid = exact_flow_map(&d, &x, s, u, DEFAULT_FINE_STEPS).unwrap();
            let two = exact_flow_map(&d, &mid, u, t, DEFAULT_FINE_STEPS).unwrap();
            let gap = direct.iter().zip(&two).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap <= 1e-5, "gap {gap} for {s} {u} {t}");
        }
        assert!(exact_flow_map(&d, &x, 0.0, 0.5, 16).is_err());
    }

    #[test]
    fn oracle_delta_is_on_the_simplex_and_matches_flow() {
        let d = ExactDenoiser::new(ToySpec::skewed());
        let mut rng = SeededRng::new(6);
        for _ in 0..50 {
            let mut s = rng.uniform();
            let mut t = rng.uniform();
            if s > t {
                std::mem::swap(&mut s, &mut t);
            }
            let x = noise(&mut rng, 8);
            let delta = oracle_two_time_denoiser(&d, &x, s, t, DEFAULT_FINE_STEPS).unwrap();
            for row in delta.chunks(4) {
                assert!(row.iter().all(|&v| v >= -1e-8));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
            }
            let flow = exact_flow_map(&d, &x, s, t, DEFAULT_FINE_STEPS).unwrap();
            let from_flow = delta_from_flow(&x, &flow, s, t);
            let gap = delta.iter().zip(&from_flow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap <= 1e-5, "gap {gap} at s={s} t={t}");
        }
    }

    #[test]
    fn kernel_weights_sum_to_one() {
        let nodes: Vec<f64> = (0..100).map(|i| 0.1 * i as f64).collect();
        let w = kernel_weights(&nodes);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn delta_flow_round_trip() {
        let mut rng = SeededRng::new(7);
        let x = noise(&mut rng, 6);
        let delta = noise(&mut rng, 6);
        let f = flow_from_delta(&x, &delta, 0.2, 0.7);
        let back = delta_from_flow(&x, &f, 0.2, 0.7);
        for (a, b) in delta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(flow_from_delta(&x, &delta, 0.3, 1.0), delta);
    }

    #[test]
    fn factorized_baseline_contrast() {
        let spec = ToySpec::default();
        let mut rng = SeededRng::new(8);
        let one: Vec<TokenSequence> = (0..10_000).map(|_| factorized_baseline_sample(&spec, 1, &mut rng).unwrap()).collect();
        let j = enumerate_joint(&one, 4, 2).unwrap();
        for y in [[0, 2], [0, 3], [1, 2], [1, 3]] {
            let p = j.probability(&TokenSequence(y.to_vec()));
            assert!((p - 0.25).abs() <= 0.013, "{y:?}: {p}");
        }
        assert!(j.total_variation(&spec) >= 0.45);
        let two: Vec<TokenSequence> = (0..10_000).map(|_| factorized_baseline_sample(&spec, 2, &mut rng).unwrap()).collect();
        let j = enumerate_joint(&two, 4, 2).unwrap();
        assert_eq!(j.counts.len(), 2);
        assert!(j.total_variation(&spec) <= 0.02);
    }

    #[test]
    fn revealed_token_conditioning() {
        let spec = ToySpec::default();
        let c = conditional_marginals(&spec, &[Some(0), None]);
        assert_eq!(&c[4..8], &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn enumerate_joint_contract() {
        let s = vec![TokenSequence(vec![0, 1]), TokenSequence(vec![0, 1]), TokenSequence(vec![1, 1])];
        let j = enumerate_joint(&s, 2, 2).unwrap();
        assert_eq!(j, enumerate_joint(&s, 2, 2).unwrap());
        assert!((j.probabilities().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(enumerate_joint(&s, 256, 3).is_err());
    }
}
