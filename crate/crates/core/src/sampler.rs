//! Generation: Euler integration of the probability-flow ODE with a
//! denoiser, flow-map jumps, and autoguidance.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::denoiser_net::{Denoiser, DenoiserNet, NetDenoiser, Parameterization};
use crate::error::{Error, Result};
use crate::flowmap::{euler_step, FlowMap};
use crate::lang_repr::{decode_batch, TokenSequence};
use crate::numerics::{standard_normal, Precision, SeededRng, Tensor};
use crate::time_warp::{sampling_grid, TimeWarp};

/// Chains integrated together in one batched model call.
pub const CHAIN_CHUNK: usize = 64;
/// Dropout rate of the weak autoguidance model.
pub const WEAK_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Euler,
    Flowmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRun {
    pub steps: usize,
    /// Blend between the decoding-error warp (1) and uniform time (0).
    pub alpha: f64,
    /// Autoguidance scale; 1 disables guidance.
    pub eta: f64,
    pub seed: u64,
    pub mode: SampleMode,
    pub record_trajectory: bool,
}

impl Default for SampleRun {
    fn default() -> Self {
        SampleRun {
            steps: 64,
            alpha: 1.0,
            eta: 1.0,
            seed: 0,
            mode: SampleMode::Euler,
            record_trajectory: false,
        }
    }
}

impl SampleRun {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta {} must be finite and nonnegative", self.eta)));
        }
        Ok(())
    }

    /// Time grid `t_n = t(n/N)` under `warp` blended by `alpha`.
    pub fn grid(&self, warp: &TimeWarp) -> Result<Vec<f64>> {
        let w = if self.alpha == 1.0 { warp.clone() } else { warp.blend(self.alpha)? };
        sampling_grid(&w, self.steps)
    }
}

/// Decoded states along one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub decoded: Vec<TokenSequence>,
    /// Fraction of positions whose decode differs from the final one.
    pub decoding_error: Vec<f64>,
}

impl Trajectory {
    fn from_states(times: &[f64], decoded: Vec<TokenSequence>) -> Self {
        let last = decoded.last().cloned().unwrap_or_default();
        let decoding_error = decoded
            .iter()
            .map(|d| {
                let diff = d.0.iter().zip(&last.0).filter(|(a, b)| a != b).count();
                diff as f64 / last.len().max(1) as f64
            })
            .collect();
        Trajectory {
            times: times.to_vec(),
            decoded,
            decoding_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub sequences: Vec<TokenSequence>,
    pub trajectories: Option<Vec<Trajectory>>,
}

/// Starting noise for chain `chain`; depends only on the seed and the chain
/// index, so runs with different step counts start from the same point.
pub fn initial_noise(seed: u64, chain: usize, seq_len: usize, vocab: usize) -> Tensor {
    let mut rng = SeededRng::new(seed).fork(chain as u64);
    standard_normal(&mut rng, &[seq_len, vocab]).expect("noise shape")
}

fn check_state(x: &Tensor, t: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::Numerical(format!("non-finite sampler state at t={t}")));
    }
    Ok(())
}

/// Forward Euler on `grid` for a batch of chains. The last step onto
/// `t = 1` returns the denoiser output, which is what the Euler step equals
/// there.
pub fn euler_integrate(den: &dyn Denoiser, x0: &Tensor, grid: &[f64], mut record: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
    let chains = x0.rows() / den.seq_len();
    let mut x = x0.clone();
    if let Some(r) = record.as_deref_mut() {
        r.push(x.clone());
    }
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let s = vec![a; chains];
        let d = den.denoise(&x, &s)?;
        x = if b >= 1.0 {
            d
        } else {
            euler_step(&x, &d, &s, &vec![b; chains], den.seq_len())
        };
        check_state(&x, b)?;
        if let Some(r) = record.as_deref_mut() {
            r.push(x.clone());
        }
    }
    Ok(x)
}

/// `x_{n+1} = X_{t_n, t_{n+1}}(x_n)` for a batch of chains.
pub fn flowmap_integrate(map: &dyn FlowMap, x0: &Tensor, grid: &[f64], mut record: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
    let chains = x0.rows() / map.seq_len();
    let mut x = x0.clone();
    if let Some(r) = record.as_deref_mut() {
        r.push(x.clone());
    }
    for w in grid.windows(2) {
        x = map.apply(&x, &vec![w[0]; chains], &vec![w[1]; chains])?;
        check_state(&x, w[1])?;
        if let Some(r) = record.as_deref_mut() {
            r.push(x.clone());
        }
    }
    Ok(x)
}

/// What a sampling run integrates.
#[derive(Clone, Copy)]
pub enum SampleModel<'a> {
    Denoiser(&'a dyn Denoiser),
    FlowMap(&'a dyn FlowMap),
}

impl SampleModel<'_> {
    fn shape(&self) -> (usize, usize) {
        match self {
            SampleModel::Denoiser(d) => (d.seq_len(), d.vocab_size()),
            SampleModel::FlowMap(m) => (m.seq_len(), m.vocab_size()),
        }
    }
}

/// Draws `count` chains. Chains are integrated in fixed-size batches; each
/// chain's noise comes from its own stream.
pub fn sample(model: SampleModel<'_>, run: &SampleRun, warp: &TimeWarp, count: usize) -> Result<SampleSet> {
    run.validate()?;
    match (model, run.mode) {
        (SampleModel::Denoiser(_), SampleMode::Euler) | (SampleModel::FlowMap(_), SampleMode::Flowmap) => {}
        _ => return Err(Error::Config("sample mode does not match the model".into())),
    }
    let grid = run.grid(warp)?;
    let (l, v) = model.shape();
    let mut sequences = Vec::with_capacity(count);
    let mut trajectories = run.record_trajectory.then(Vec::new);
    let mut start = 0;
    while start < count {
        let end = (start + CHAIN_CHUNK).min(count);
        let mut data = Vec::with_capacity((end - start) * l * v);
        for c in start..end {
            data.extend(initial_noise(run.seed, c, l, v).into_data());
        }
        let x0 = Tensor::new(vec![(end - start) * l, v], data)?;
        let mut states = Vec::new();
        let rec = trajectories.is_some().then_some(&mut states);
        let x = match model {
            SampleModel::Denoiser(d) => euler_integrate(d, &x0, &grid, rec)?,
            SampleModel::FlowMap(m) => flowmap_integrate(m, &x0, &grid, rec)?,
        };
        sequences.extend(decode_batch(&x, l));
        if let Some(trajs) = trajectories.as_mut() {
            let per_state: Vec<Vec<TokenSequence>> = states.iter().map(|s| decode_batch(s, l)).collect();
            for c in 0..end - start {
                let decoded = per_state.iter().map(|d| d[c].clone()).collect();
                trajs.push(Trajectory::from_states(&grid, decoded));
            }
        }
        start = end;
    }
    Ok(SampleSet { sequences, trajectories })
}

/// `eta D_strong + (1 - eta) D_weak`, written so that `eta = 1` and
/// `eta = 0` reproduce the two models exactly. Outputs may leave the simplex.
pub struct Autoguided<'a> {
    pub strong: &'a dyn Denoiser,
    pub weak: &'a dyn Denoiser,
    pub eta: f64,
}

impl Denoiser for Autoguided<'_> {
    fn vocab_size(&self) -> usize {
        self.strong.vocab_size()
    }

    fn seq_len(&self) -> usize {
        self.strong.seq_len()
    }

    fn denoise(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        if self.eta == 1.0 {
            return self.strong.denoise(x, t);
        }
        if self.eta == 0.0 {
            return self.weak.denoise(x, t);
        }
        let d = self.strong.denoise(x, t)?;
        let w = self.weak.denoise(x, t)?;
        Ok(guide(&d, &w, self.eta))
    }
}

/// Elementwise `eta d + (1 - eta) w`.
pub fn guide(strong: &Tensor, weak: &Tensor, eta: f64) -> Tensor {
    strong.zip_map(weak, |d, w| eta * d + (1.0 - eta) * w)
}

/// The same network evaluated with dropout on: the weak model for
/// autoguidance. Each call draws fresh masks from an internal stream.
pub struct DropoutDenoiser {
    net: DenoiserNet,
    parameterization: Parameterization,
    precision: Precision,
    rng: Mutex<SeededRng>,
}

impl DropoutDenoiser {
    pub fn new(model: &NetDenoiser, rate: f64, seed: u64) -> Result<Self> {
        let mut cfg = model.net.config().clone();
        cfg.dropout = rate;
        let net = DenoiserNet::from_parameters(cfg, model.net.params().clone())?;
        Ok(DropoutDenoiser {
            net,
            parameterization: model.parameterization,
            precision: model.precision,
            rng: Mutex::new(SeededRng::new(seed)),
        })
    }
}

impl Denoiser for DropoutDenoiser {
    fn vocab_size(&self) -> usize {
        self.net.config().vocab_size
    }

    fn seq_len(&self) -> usize {
        self.net.config().max_len
    }

    fn denoise(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let mut rng = self.rng.lock().expect("dropout stream");
        let out = self.net.forward_with(x, t, None, self.precision, Some(&mut rng))?;
        match self.parameterization {
            Parameterization::Denoiser => Ok(out.softmax_rows()),
            Parameterization::Velocity => {
                let block = self.seq_len() * self.vocab_size();
                let mut d = out;
                for ((chunk, xc), &tt) in d.data_mut().chunks_mut(block).zip(x.data().chunks(block)).zip(t) {
                    for (o, xv) in chunk.iter_mut().zip(xc) {
                        *o = xv + (1.0 - tt) * *o;
                    }
                }
                Ok(d)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser_net::NetworkConfig;
    use crate::toy_oracle::{enumerate_joint, ExactDenoiser, ToySpec};

    #[test]
    fn guide_example_leaves_simplex() {
        let d = Tensor::new(vec![1, 2], vec![0.8, 0.2]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let g = guide(&d, &w, 2.0);
        assert!((g.data()[0] - 1.1).abs() < 1e-15 && (g.data()[1] + 0.1).abs() < 1e-15);
        assert_eq!(guide(&d, &w, 1.0), d);
        assert_eq!(guide(&d, &w, 0.0), w);
    }

    #[test]
    fn one_step_euler_returns_marginals() {
        let den = ExactDenoiser::new(ToySpec::default());
        let x0 = initial_noise(3, 0, 2, den.vocab_size());
        let x = euler_integrate(&den, &x0, &[0.0, 1.0], None).unwrap();
        assert_eq!(x, den.denoise(&x0, &[0.0]).unwrap());
        let m = den.spec().marginals();
        assert!(x.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn noise_is_shared_across_step_counts_and_runs_repeat() {
        let den = ExactDenoiser::new(ToySpec::default());
        let warp = TimeWarp::identity();
        let mut run = SampleRun {
            steps: 4,
            record_trajectory: true,
            seed: 9,
            ..SampleRun::default()
        };
        let a = sample(SampleModel::Denoiser(&den), &run, &warp, 5).unwrap();
        let b = sample(SampleModel::Denoiser(&den), &run, &warp, 5).unwrap();
        assert_eq!(a, b);
        run.steps = 16;
        let c = sample(SampleModel::Denoiser(&den), &run, &warp, 5).unwrap();
        let ta = &a.trajectories.unwrap()[2];
        let tc = &c.trajectories.unwrap()[2];
        assert_eq!(ta.decoded[0], tc.decoded[0]);
        assert_eq!(*tc.decoding_error.last().unwrap(), 0.0);
        assert_eq!(tc.times.len(), 17);
    }

    #[test]
    fn exact_euler_avoids_spurious_pairs() {
        let spec = ToySpec::default();
        let den = ExactDenoiser::new(spec.clone());
        let run = SampleRun {
            steps: 256,
            seed: 4,
            ..SampleRun::default()
        };
        let set = sample(SampleModel::Denoiser(&den), &run, &TimeWarp::identity(), 500).unwrap();
        let valid = set.sequences.iter().filter(|s| spec.probability(s) > 0.0).count();
        assert!(valid >= 495, "{valid}");
        let joint = enumerate_joint(&set.sequences, spec.vocab_size(), 2).unwrap();
        assert!(joint.total_variation(&spec) < 0.1);
    }

    #[test]
    fn mode_mismatch_and_bad_runs_are_rejected() {
        let den = ExactDenoiser::new(ToySpec::default());
        let run = SampleRun {
            mode: SampleMode::Flowmap,
            ..SampleRun::default()
        };
        assert!(sample(SampleModel::Denoiser(&den), &run, &TimeWarp::identity(), 1).is_err());
        assert!(SampleRun { steps: 0, ..SampleRun::default() }.validate().is_err());
        assert!(SampleRun { eta: -1.0, ..SampleRun::default() }.validate().is_err());
    }

    #[test]
    fn autoguidance_identities_are_exact() {
        let cfg = NetworkConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_len: 2,
            vocab_size: 4,
            time_embed_dim: 8,
            ..NetworkConfig::default()
        };
        let net = DenoiserNet::init(&mut SeededRng::new(1), cfg).unwrap();
        let strong = NetDenoiser::new(net, Parameterization::Denoiser);
        let x = initial_noise(1, 0, 2, 4);
        let w1 = DropoutDenoiser::new(&strong, WEAK_DROPOUT, 5).unwrap();
        let w2 = DropoutDenoiser::new(&strong, WEAK_DROPOUT, 5).unwrap();
        let g1 = Autoguided {
            strong: &strong,
            weak: &w1,
            eta: 1.0,
        };
        assert_eq!(g1.denoise(&x, &[0.3]).unwrap(), strong.denoise(&x, &[0.3]).unwrap());
        let g0 = Autoguided {
            strong: &strong,
            weak: &w1,
            eta: 0.0,
        };
        assert_eq!(g0.denoise(&x, &[0.3]).unwrap(), w2.denoise(&x, &[0.3]).unwrap());
        assert_ne!(w2.denoise(&x, &[0.3]).unwrap(), strong.denoise(&x, &[0.3]).unwrap());
    }
}
