//! Denoiser training: Adam with linear warmup, warped time sampling and the
//! cross-entropy objective (or the squared-error alternatives used in
//! ablations).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoiser_net::{DenoiserNet, NetDenoiser, NetworkConfig, OutputMode, Parameterization};
use crate::error::{Error, Result};
use crate::interpolant::{ce_loss, interpolate_batch};
use crate::lang_repr::{encode_batch, TokenSequence};
use crate::numerics::{standard_normal, Precision, SeededRng, Tape, Tensor, Var};
use crate::time_warp::{sample_training_time, TimeWarp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross entropy of the softmax denoiser against the clean tokens.
    #[default]
    Ce,
    /// Squared error of the softmax denoiser against the one-hot rows.
    MseDenoiser,
    /// Squared error of a raw velocity output against `x1 - x0`.
    MseVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step for a single coordinate. Updates the
/// moments in place and returns the parameter delta.
pub fn adam_update(m: &mut f64, v: &mut f64, grad: f64, lr: f64, beta1: f64, beta2: f64, eps: f64, step: u64) -> f64 {
    debug_assert!(step >= 1);
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let mhat = *m / (1.0 - beta1.powi(step as i32));
    let vhat = *v / (1.0 - beta2.powi(step as i32));
    -lr * mhat / (vhat.sqrt() + eps)
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, constant after.
pub fn lr_schedule(step: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let c = self.config;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *pv += adam_update(mv, vv, gv, lr, c.beta1, c.beta2, c.eps, self.step);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub precision: Precision,
    /// Sample training times so that `tau(t)` is uniform; otherwise `t` is.
    pub use_time_warp: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 5000,
            learning_rate: 3e-4,
            warmup_steps: 250,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            loss_mode: LossMode::Ce,
            precision: Precision::F32,
            use_time_warp: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{n} = {b} not in (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        match self.loss_mode {
            LossMode::MseVelocity => Parameterization::Velocity,
            _ => Parameterization::Denoiser,
        }
    }

    /// Network output mode implied by the loss.
    pub fn output_mode(&self) -> OutputMode {
        match self.loss_mode {
            LossMode::MseVelocity => OutputMode::Unconstrained,
            _ => OutputMode::Logits,
        }
    }
}

/// One minibatch of interpolant samples.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub targets: Vec<usize>,
    pub x0: Tensor,
    pub x1: Tensor,
    pub it: Tensor,
    pub times: Vec<f64>,
    pub seq_len: usize,
}

/// Draws one time per example through `warp`, fresh noise, and forms `I_t`.
pub fn sample_training_batch(rng: &mut SeededRng, batch: &[TokenSequence], vocab: usize, warp: &TimeWarp) -> Result<TrainingBatch> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let seq_len = batch[0].len();
    let x1 = encode_batch(batch, vocab)?;
    let times: Vec<f64> = batch.iter().map(|_| sample_training_time(rng, warp)).collect();
    let x0 = standard_normal(rng, x1.shape())?;
    let it = interpolate_batch(&x0, &x1, &times, seq_len);
    Ok(TrainingBatch {
        targets: batch.iter().flat_map(|s| s.0.iter().copied()).collect(),
        x0,
        x1,
        it,
        times,
        seq_len,
    })
}

/// Builds the scalar training loss on `tape`; `vars` are the model's
/// parameter leaves.
pub fn training_loss_on_tape(
    net: &DenoiserNet,
    tape: &mut Tape,
    vars: &crate::denoiser_net::ParamVars,
    batch: &TrainingBatch,
    mode: LossMode,
) -> Result<Var> {
    let x = tape.constant(batch.it.clone());
    let out = net.forward_on(tape, vars, x, &batch.times, None, None)?;
    Ok(match mode {
        LossMode::Ce => ce_loss(tape, out, &batch.targets),
        LossMode::MseDenoiser => {
            let p = tape.softmax(out);
            let t = tape.constant(batch.x1.clone());
            let d = tape.sub(p, t);
            let sq = tape.mul(d, d);
            tape.mean(sq)
        }
        LossMode::MseVelocity => {
            let target = batch.x1.zip_map(&batch.x0, |a, b| a - b);
            let t = tape.constant(target);
            let d = tape.sub(out, t);
            let sq = tape.mul(d, d);
            tape.mean(sq)
        }
    })
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: DenoiserNet,
    pub adam: Adam,
    pub step: usize,
    pub rng: SeededRng,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Counts of training times in ten equal bins of `[0, 1]`.
    pub time_histogram: [usize; 10],
}

impl TrainState {
    pub fn new(net_config: NetworkConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut net_config = net_config;
        net_config.output_mode = config.output_mode();
        let mut rng = SeededRng::new(config.seed);
        let mut init_rng = rng.fork(1);
        let mut net = DenoiserNet::init(&mut init_rng, net_config)?;
        net.params_mut().round_to(config.precision);
        rng = rng.fork(2);
        let adam = Adam::new(config.adam(), net.params().tensors());
        Ok(TrainState {
            net,
            adam,
            step: 0,
            rng,
            config,
        })
    }

    pub fn denoiser(&self) -> NetDenoiser {
        NetDenoiser::new(self.net.clone(), self.config.parameterization())
    }
}

/// One optimization step on `batch`.
pub fn flm_training_step(state: &mut TrainState, batch: &[TokenSequence], warp: &TimeWarp) -> Result<StepMetrics> {
    let vocab = state.net.config().vocab_size;
    let tb = sample_training_batch(&mut state.rng, batch, vocab, warp)?;
    let mut tape = Tape::new(state.config.precision);
    let vars = state.net.param_vars(&mut tape);
    let loss = training_loss_on_tape(&state.net, &mut tape, &vars, &tb, state.config.loss_mode)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        let op = tape.check_finite().err().map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::Numerical(format!(
            "non-finite loss at step {} ({op}); times {:?}",
            state.step + 1,
            tb.times
        )));
    }
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .0
        .iter()
        .zip(state.net.params().tensors())
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    let grad_norm = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient norm at step {}", state.step + 1)));
    }
    state.step += 1;
    let lr = lr_schedule(state.step, state.config.warmup_steps, state.config.learning_rate);
    state.adam.step(state.net.params_mut().tensors_mut(), &grads, lr);
    let precision = state.config.precision;
    state.net.params_mut().round_to(precision);
    if !state.net.params().is_finite() {
        return Err(Error::Numerical(format!("non-finite parameters after step {}", state.step)));
    }
    let mut time_histogram = [0usize; 10];
    for &t in &tb.times {
        time_histogram[((t * 10.0) as usize).min(9)] += 1;
    }
    Ok(StepMetrics {
        step: state.step,
        loss: loss_value,
        grad_norm,
        lr,
        time_histogram,
    })
}

/// Uniformly resampled minibatch (with replacement).
pub fn draw_batch(rng: &mut SeededRng, corpus: &[TokenSequence], size: usize) -> Vec<TokenSequence> {
    (0..size).map(|_| corpus[rng.below(corpus.len())].clone()).collect()
}

/// Runs `config.steps` steps, writing one JSON record every `log_every`
/// steps to `metrics` when given. Returns the loss trace.
pub fn train(state: &mut TrainState, corpus: &[TokenSequence], warp: &TimeWarp, mut metrics: Option<&mut dyn Write>) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut batch_rng = state.rng.fork(3);
    let mut trace = Vec::with_capacity(state.config.steps);
    let mut hist = [0usize; 10];
    for _ in 0..state.config.steps {
        let batch = draw_batch(&mut batch_rng, corpus, state.config.batch_size);
        let m = flm_training_step(state, &batch, warp)?;
        for (h, c) in hist.iter_mut().zip(m.time_histogram) {
            *h += c;
        }
        trace.push(m.loss);
        let every = state.config.log_every.max(1);
        if m.step % every == 0 || m.step == state.config.steps {
            log::info!("step {} loss {:.5} grad_norm {:.4}", m.step, m.loss, m.grad_norm);
            if let Some(w) = metrics.as_deref_mut() {
                let rec = StepMetrics {
                    time_histogram: hist,
                    ..m
                };
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w)?;
                hist = [0; 10];
            }
        }
    }
    Ok(trace)
}

/// The warp used for training-time sampling under `config`.
pub fn training_warp(config: &TrainConfig, vocab: usize) -> Result<TimeWarp> {
    if config.use_time_warp {
        crate::time_warp::build_time_warp(vocab)
    } else {
        Ok(TimeWarp::identity())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use crate::time_warp::build_time_warp;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 3e-4), 0.0);
        assert_eq!(lr_schedule(100, 100, 3e-4), 3e-4);
        assert_eq!(lr_schedule(200, 100, 3e-4), 3e-4);
        assert_eq!(lr_schedule(50, 100, 2.0), 1.0);
        assert_eq!(lr_schedule(0, 0, 2.0), 2.0);
    }

    #[test]
    fn adam_constant_gradient_approaches_sign_step() {
        let (mut m, mut v) = (0.0, 0.0);
        let mut last = 0.0;
        for step in 1..=5000 {
            last = adam_update(&mut m, &mut v, -3.0, 0.01, 0.9, 0.999, 1e-8, step);
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
        let (mut m, mut v) = (0.0, 0.0);
        assert_eq!(adam_update(&mut m, &mut v, 0.0, 0.1, 0.9, 0.999, 1e-8, 1), 0.0);
    }

    #[test]
    fn adam_matches_hand_recurrence_on_quadratic() {
        // f(p) = sum a_i p_i^2 / 2, gradient a_i p_i
        let a = [1.0, 4.0, 0.5];
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            std::slice::from_ref(&p),
        );
        let mut hp = [1.0f64, -2.0, 3.0];
        let mut hm = [0.0f64; 3];
        let mut hv = [0.0f64; 3];
        for step in 1..=20 {
            let g: Vec<f64> = (0..3).map(|i| a[i] * p.data()[i]).collect();
            adam.step(std::slice::from_mut(&mut p), &[Tensor::new(vec![3], g).unwrap()], 0.1);
            for i in 0..3 {
                let g = a[i] * hp[i];
                hm[i] = 0.9 * hm[i] + 0.1 * g;
                hv[i] = 0.999 * hv[i] + 0.001 * g * g;
                let mh = hm[i] / (1.0 - 0.9f64.powi(step));
                let vh = hv[i] / (1.0 - 0.999f64.powi(step));
                hp[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            for i in 0..3 {
                assert!((p.data()[i] - hp[i]).abs() <= 1e-14, "{} vs {}", p.data()[i], hp[i]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            adam_beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_len: 4,
            vocab_size: 6,
            time_embed_dim: 8,
            ..NetworkConfig::default()
        }
    }

    fn corpus() -> Vec<TokenSequence> {
        vec![TokenSequence(vec![0, 1, 2, 3]), TokenSequence(vec![5, 4, 3, 2])]
    }

    #[test]
    fn first_loss_is_near_log_vocab_and_runs_repeat() {
        let cfg = TrainConfig {
            batch_size: 16,
            steps: 30,
            warmup_steps: 5,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let warp = build_time_warp(6).unwrap();
        let mut a = TrainState::new(tiny(), cfg.clone()).unwrap();
        let ta = train(&mut a, &corpus(), &warp, None).unwrap();
        assert!((ta[0] / 6f64.ln() - 1.0).abs() < 0.05, "{}", ta[0]);
        let mut b = TrainState::new(tiny(), cfg).unwrap();
        let tb = train(&mut b, &corpus(), &warp, None).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.net.params(), b.net.params());
    }

    #[test]
    fn loss_trend_decreases() {
        let cfg = TrainConfig {
            batch_size: 16,
            steps: 200,
            warmup_steps: 20,
            learning_rate: 3e-3,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let warp = build_time_warp(6).unwrap();
        let mut s = TrainState::new(tiny(), cfg).unwrap();
        let trace = train(&mut s, &corpus(), &warp, None).unwrap();
        let median = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(median(&trace[100..]) <= median(&trace[..100]));
    }

    #[test]
    fn metrics_are_json_lines() {
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 10,
            log_every: 5,
            ..TrainConfig::default()
        };
        let warp = build_time_warp(6).unwrap();
        let mut s = TrainState::new(tiny(), cfg).unwrap();
        let mut buf = Vec::new();
        train(&mut s, &corpus(), &warp, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let recs: Vec<StepMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].step, 10);
        assert_eq!(recs[0].time_histogram.iter().sum::<usize>(), 20);
    }

    #[test]
    fn full_training_step_gradient_matches_finite_differences() {
        for mode in [LossMode::Ce, LossMode::MseDenoiser, LossMode::MseVelocity] {
            let cfg = TrainConfig {
                loss_mode: mode,
                precision: Precision::F64,
                ..TrainConfig::default()
            };
            let mut state = TrainState::new(tiny(), cfg).unwrap();
            let mut rng = SeededRng::new(5);
            for t in state.net.params_mut().tensors_mut() {
                for v in t.data_mut() {
                    *v += 0.05 * rng.normal();
                }
            }
            let warp = build_time_warp(6).unwrap();
            let tb = sample_training_batch(&mut rng, &corpus(), 6, &warp).unwrap();
            let net = state.net.clone();
            let inputs = net.params().tensors().to_vec();
            let f = |tape: &mut Tape, v: &[Var]| {
                let vars = crate::denoiser_net::ParamVars(v.to_vec());
                training_loss_on_tape(&net, tape, &vars, &tb, mode).unwrap()
            };
            let r = finite_difference_check(f, &inputs, 1e-5, 1e-4);
            assert!(r.passed, "{mode:?}: {}", r.max_relative_error);
        }
    }
}
