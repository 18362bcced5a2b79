use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{gamma_weight, per_example_rows, FlowMap, FlowMapKind, FlowMapModel};
use crate::denoiser_net::{sinusoidal_features, ParamVars};
use crate::error::{Error, Result};
use crate::flm_train::{draw_batch, lr_schedule, Adam, AdamConfig};
use crate::interpolant::{interpolate_batch, mse_per_example, soft_ce_per_example};
use crate::lang_repr::{encode_batch, TokenSequence};
use crate::numerics::{standard_normal, Precision, SeededRng, Tape, Tensor, Var};
use crate::time_warp::{sample_time_triplet, StepSizeWarmup, TimeWarp, DEFAULT_BOUNDARY_PROB};

/// Largest `s` handed to a flow map during distillation.
const S_MAX: f64 = 1.0 - 1e-5;
/// Below this gap `t - s` the bootstrapped target falls back to the diagonal.
const DIAGONAL_GAP: f64 = 1e-6;
const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Loss {
    /// Squared error against the bootstrapped endpoint.
    #[default]
    Mse,
    /// Soft-label cross entropy against the convex two-hop teacher.
    Ce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub boundary_prob: f64,
    /// Initial cap on `tau_t - tau_s`; doubles every `h_max_doubling` steps.
    pub h_max_initial: f64,
    pub h_max_doubling: usize,
    pub learned_weighting: bool,
    /// Features per time fed to the loss-weight head.
    pub weight_features: usize,
    pub stage1_loss: Stage1Loss,
    /// Keep the `(t-s)^2/(1-s)^2` factor on the stage-1 squared error.
    pub mse_scale: bool,
    pub precision: Precision,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 2000,
            batch_size: 64,
            learning_rate: 3e-4,
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            boundary_prob: DEFAULT_BOUNDARY_PROB,
            h_max_initial: 1.0 / 64.0,
            h_max_doubling: 200,
            learned_weighting: true,
            weight_features: 16,
            stage1_loss: Stage1Loss::Mse,
            mse_scale: false,
            precision: Precision::F32,
            log_every: 50,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.boundary_prob) {
            return Err(Error::Config(format!("boundary_prob {} not in [0, 1]", self.boundary_prob)));
        }
        if !(self.h_max_initial > 0.0 && self.h_max_initial <= 1.0) {
            return Err(Error::Config(format!("h_max_initial {} not in (0, 1]", self.h_max_initial)));
        }
        if self.weight_features == 0 || !self.weight_features.is_multiple_of(2) {
            return Err(Error::Config("weight_features must be positive and even".into()));
        }
        for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{n} = {b} not in (0, 1)")));
            }
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

    pub fn warmup(&self) -> StepSizeWarmup {
        StepSizeWarmup {
            initial: self.h_max_initial,
            doubling_interval: self.h_max_doubling,
        }
    }
}

/// Learned per-time-pair loss weight `w(s, t)`: a linear head over
/// sinusoidal features of `s` and `t`. The weighted loss is
/// `mean_i(L_i exp(-w_i) + w_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeight {
    pub enabled: bool,
    pub features: usize,
    pub params: Vec<Tensor>,
}

impl LossWeight {
    pub fn new(enabled: bool, features: usize) -> Self {
        LossWeight {
            enabled,
            features,
            params: vec![Tensor::zeros(&[2 * features, 1]), Tensor::zeros(&[1, 1])],
        }
    }

    fn inputs(&self, s: &[f64], t: &[f64]) -> Tensor {
        let fs = sinusoidal_features(s, self.features);
        let ft = sinusoidal_features(t, self.features);
        let mut data = Vec::with_capacity(s.len() * 2 * self.features);
        for i in 0..s.len() {
            data.extend_from_slice(fs.row(i));
            data.extend_from_slice(ft.row(i));
        }
        Tensor::new(vec![s.len(), 2 * self.features], data).expect("feature shape")
    }

    /// `w(s_i, t_i)` for each pair.
    pub fn values(&self, s: &[f64], t: &[f64]) -> Vec<f64> {
        if !self.enabled {
            return vec![0.0; s.len()];
        }
        let f = self.inputs(s, t);
        let (w, b) = (&self.params[0], &self.params[1]);
        (0..s.len())
            .map(|i| f.row(i).iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>() + b.data()[0])
            .collect()
    }

    /// Weighted scalar loss from per-example losses `raw: B x 1`. Returns the
    /// loss and the parameter leaves (empty when disabled).
    pub fn apply(&self, tape: &mut Tape, raw: Var, s: &[f64], t: &[f64]) -> (Var, Vec<Var>) {
        if !self.enabled {
            return (tape.mean(raw), Vec::new());
        }
        let f = tape.constant(self.inputs(s, t));
        let w = tape.param(self.params[0].clone());
        let b = tape.param(self.params[1].clone());
        let lin = tape.matmul(f, w);
        let wv = tape.add_row(lin, b);
        let neg = tape.scale(wv, -1.0);
        let e = tape.exp(neg);
        let scaled = tape.mul(raw, e);
        let total = tape.add(scaled, wv);
        (tape.mean(total), vec![w, b])
    }
}

/// One sampled distillation minibatch.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub x1: Tensor,
    pub x0: Tensor,
    /// `I_s`.
    pub xs: Tensor,
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub t: Vec<f64>,
    pub seq_len: usize,
}

/// Triplets from the warped sampler, noise and `I_s` for a batch of clean
/// sequences.
pub fn sample_distill_batch(
    rng: &mut SeededRng,
    batch: &[TokenSequence],
    vocab: usize,
    warp: &TimeWarp,
    boundary_prob: f64,
    h_max: f64,
) -> Result<DistillBatch> {
    if batch.is_empty() {
        return Err(Error::Config("empty distillation batch".into()));
    }
    let seq_len = batch[0].len();
    let x1 = encode_batch(batch, vocab)?;
    let (mut s, mut u, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for _ in batch {
        let tr = sample_time_triplet(rng, warp, boundary_prob, h_max);
        let ss = tr.s.min(S_MAX);
        let uu = tr.u.clamp(ss, S_MAX);
        s.push(ss);
        u.push(uu);
        t.push(tr.t.max(uu));
    }
    let x0 = standard_normal(rng, x1.shape())?;
    let xs = interpolate_batch(&x0, &x1, &s, seq_len);
    Ok(DistillBatch {
        x1,
        x0,
        xs,
        s,
        u,
        t,
        seq_len,
    })
}

fn scale_blocks(x: &mut Tensor, factors: &[f64], seq_len: usize) {
    let block = seq_len * x.cols();
    for (chunk, &f) in x.data_mut().chunks_mut(block).zip(factors) {
        for v in chunk.iter_mut() {
            *v *= f;
        }
    }
}

/// Endpoint `e` with `X_{s,t}(x) = x + (t-s)/(1-s) (e - x)`, built on the
/// tape from the trainable network.
fn endpoint_on_tape(model: &FlowMapModel, tape: &mut Tape, vars: &ParamVars, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let raw = model.net().forward_on(tape, vars, xv, s, Some(t), None)?;
    let (l, v) = (model.seq_len(), model.vocab_size());
    Ok(match model.kind() {
        FlowMapKind::EulerCorrection => {
            let d = model.teacher().expect("correction").denoise(x, s)?;
            let c: Vec<f64> = s.iter().zip(t).map(|(a, b)| 0.5 * (b - a) * (1.0 - a)).collect();
            let cv = tape.constant(per_example_rows(&c, l, v));
            let corr = tape.mul(raw, cv);
            let dv = tape.constant(d);
            tape.add(dv, corr)
        }
        FlowMapKind::LogitCorrection => {
            let z = model.teacher().expect("correction").logits(x, s)?;
            let h: Vec<f64> = s.iter().zip(t).map(|(a, b)| b - a).collect();
            let hv = tape.constant(per_example_rows(&h, l, v));
            let corr = tape.mul(raw, hv);
            let zv = tape.constant(z);
            let logits = tape.add(zv, corr);
            tape.softmax(logits)
        }
        FlowMapKind::SingleModel => raw,
    })
}

/// Logits of `delta_{s,t}` on the tape (logit correction only).
fn delta_logits_on_tape(model: &FlowMapModel, tape: &mut Tape, vars: &ParamVars, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let raw = model.net().forward_on(tape, vars, xv, s, Some(t), None)?;
    let z = model.teacher().expect("correction").logits(x, s)?;
    let h: Vec<f64> = s.iter().zip(t).map(|(a, b)| b - a).collect();
    let hv = tape.constant(per_example_rows(&h, model.seq_len(), model.vocab_size()));
    let corr = tape.mul(raw, hv);
    let zv = tape.constant(z);
    Ok(tape.add(zv, corr))
}

fn endpoint_value(model: &FlowMapModel, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::inference(model.precision);
    let vars = model.net().param_vars(&mut tape);
    let e = endpoint_on_tape(model, &mut tape, &vars, x, s, t)?;
    Ok(tape.value(e).clone())
}

/// Bootstrapped stage-1 regression target `I_s + (1-s) v`, with `v` the
/// average velocity of the current model's two hops `s -> u -> t`. Pairs
/// with `t = s` use the diagonal endpoint (`D_s` for corrections).
pub fn bootstrap_target(model: &FlowMapModel, xs: &Tensor, s: &[f64], u: &[f64], t: &[f64]) -> Result<Tensor> {
    let mid = model.apply(xs, s, u)?;
    let two = model.apply(&mid, u, t)?;
    let diag = endpoint_value(model, xs, s, s)?;
    let block = model.seq_len() * model.vocab_size();
    let mut out = two;
    for (i, chunk) in out.data_mut().chunks_mut(block).enumerate() {
        let (a, b) = (s[i], t[i]);
        let base = &xs.data()[i * block..(i + 1) * block];
        if b - a < DIAGONAL_GAP {
            chunk.copy_from_slice(&diag.data()[i * block..(i + 1) * block]);
            continue;
        }
        let k = (1.0 - a) / (b - a);
        for (o, xv) in chunk.iter_mut().zip(base) {
            *o = xv + k * (*o - xv);
        }
    }
    Ok(out)
}

/// Convex two-hop teacher `gamma delta_{s,u}(x) + (1-gamma) delta_{u,t}(X_{s,u}(x))`
/// for the logit correction, checked to lie on the simplex.
pub fn ce_teacher(model: &FlowMapModel, xs: &Tensor, s: &[f64], u: &[f64], t: &[f64]) -> Result<Tensor> {
    let first = model.two_time_denoiser(xs, s, u)?;
    let mid = model.apply(xs, s, u)?;
    let second = model.two_time_denoiser(&mid, u, t)?;
    let diag = model.two_time_denoiser(xs, s, s)?;
    let block = model.seq_len() * model.vocab_size();
    let mut out = second;
    for (i, chunk) in out.data_mut().chunks_mut(block).enumerate() {
        let (a, m, b) = (s[i], u[i], t[i]);
        let range = i * block..(i + 1) * block;
        if b - a < DIAGONAL_GAP {
            chunk.copy_from_slice(&diag.data()[range]);
            continue;
        }
        let g = if m >= 1.0 { 0.0 } else { gamma_weight(a, m, b)? };
        for (o, f) in chunk.iter_mut().zip(&first.data()[range]) {
            *o = g * f + (1.0 - g) * *o;
        }
    }
    for r in 0..out.rows() {
        let row = out.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&p| p < -1e-6) {
            return Err(Error::Numerical(format!("teacher row {r} off the simplex (sum {sum})")));
        }
    }
    Ok(out)
}

/// Per-example stage-1 losses (`B x 1`) on `tape`.
fn stage1_raw_on_tape(
    model: &FlowMapModel,
    tape: &mut Tape,
    vars: &ParamVars,
    batch: &DistillBatch,
    loss: Stage1Loss,
    mse_scale: bool,
) -> Result<Var> {
    let l = batch.seq_len;
    match loss {
        Stage1Loss::Mse => {
            let target = bootstrap_target(model, &batch.xs, &batch.s, &batch.u, &batch.t)?;
            let e = endpoint_on_tape(model, tape, vars, &batch.xs, &batch.s, &batch.t)?;
            let per = mse_per_example(tape, e, &target, l);
            if !mse_scale {
                return Ok(per);
            }
            let f: Vec<f64> = batch
                .s
                .iter()
                .zip(&batch.t)
                .map(|(a, b)| ((b - a) / (1.0 - a)).powi(2))
                .collect();
            let fv = tape.constant(Tensor::new(vec![f.len(), 1], f)?);
            Ok(tape.mul(per, fv))
        }
        Stage1Loss::Ce => {
            if model.kind() != FlowMapKind::LogitCorrection {
                return Err(Error::Config("cross-entropy stage 1 needs the logit correction".into()));
            }
            let teacher = ce_teacher(model, &batch.xs, &batch.s, &batch.u, &batch.t)?;
            let logits = delta_logits_on_tape(model, tape, vars, &batch.xs, &batch.s, &batch.t)?;
            Ok(soft_ce_per_example(tape, logits, &teacher, l))
        }
    }
}

/// Per-example stage-1 losses without weighting, evaluated forward only.
pub fn stage1_losses(model: &FlowMapModel, batch: &DistillBatch, loss: Stage1Loss, mse_scale: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::inference(model.precision);
    let vars = model.net().param_vars(&mut tape);
    let v = stage1_raw_on_tape(model, &mut tape, &vars, batch, loss, mse_scale)?;
    Ok(tape.value(v).data().to_vec())
}

fn stage2_raw_on_tape(student: &FlowMapModel, tape: &mut Tape, vars: &ParamVars, batch: &DistillBatch, target: &Tensor) -> Result<Var> {
    let l = batch.seq_len;
    let v = student.vocab_size();
    let r: Vec<f64> = batch.s.iter().zip(&batch.t).map(|(a, b)| (b - a) / (1.0 - a)).collect();
    let keep: Vec<f64> = r.iter().map(|x| 1.0 - x).collect();
    let mut base = batch.xs.clone();
    scale_blocks(&mut base, &keep, l);
    let xv = tape.constant(batch.xs.clone());
    let raw = student.net().forward_on(tape, vars, xv, &batch.s, Some(&batch.t), None)?;
    let rv = tape.constant(per_example_rows(&r, l, v));
    let moved = tape.mul(raw, rv);
    let bv = tape.constant(base);
    let y = tape.add(bv, moved);
    Ok(mse_per_example(tape, y, target, l))
}

/// Per-example stage-2 losses `mean (Y_{s,t}(I_s) - X_{s,t}(I_s))^2`.
pub fn stage2_losses(student: &FlowMapModel, teacher: &dyn FlowMap, batch: &DistillBatch) -> Result<Vec<f64>> {
    let target = teacher.apply(&batch.xs, &batch.s, &batch.t)?;
    let mut tape = Tape::inference(student.precision);
    let vars = student.net().param_vars(&mut tape);
    let v = stage2_raw_on_tape(student, &mut tape, &vars, batch, &target)?;
    Ok(tape.value(v).data().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub step: usize,
    /// Unweighted mean loss.
    pub loss: f64,
    pub weighted_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub h_max: f64,
}

/// Trainable student plus its optimizer and loss weight.
#[derive(Debug, Clone)]
struct Learner {
    adam: Adam,
    weight: LossWeight,
    weight_adam: Adam,
}

impl Learner {
    fn new(model: &FlowMapModel, config: &DistillConfig) -> Self {
        let weight = LossWeight::new(config.learned_weighting, config.weight_features);
        Learner {
            adam: Adam::new(config.adam(), model.net().params().tensors()),
            weight_adam: Adam::new(config.adam(), &weight.params),
            weight,
        }
    }
}

/// Records `raw` through the loss weight, backpropagates and applies one
/// Adam step to the network and the weight head.
fn optimize(
    model: &mut FlowMapModel,
    learner: &mut Learner,
    tape: Tape,
    vars: ParamVars,
    raw: Var,
    batch: &DistillBatch,
    step: usize,
    config: &DistillConfig,
) -> Result<DistillMetrics> {
    let mut tape = tape;
    let (loss, wvars) = learner.weight.apply(&mut tape, raw, &batch.s, &batch.t);
    let raw_mean = tape.value(raw).data().iter().sum::<f64>() / batch.s.len() as f64;
    let weighted = tape.value(loss).data()[0];
    if !weighted.is_finite() || !raw_mean.is_finite() {
        let op = tape.check_finite().err().map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::Numerical(format!("non-finite distillation loss at step {step} ({op})")));
    }
    let grads = tape.backward(loss)?;
    let net_grads: Vec<Tensor> = vars
        .0
        .iter()
        .zip(model.net().params().tensors())
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    let w_grads: Vec<Tensor> = wvars
        .iter()
        .zip(&learner.weight.params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    let grad_norm = net_grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient norm at step {step}")));
    }
    let lr = lr_schedule(step, config.warmup_steps, config.learning_rate);
    learner.adam.step(model.net_mut().params_mut().tensors_mut(), &net_grads, lr);
    model.net_mut().params_mut().round_to(config.precision);
    if !w_grads.is_empty() {
        learner.weight_adam.step(&mut learner.weight.params, &w_grads, lr);
    }
    if !model.net().params().is_finite() {
        return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
    }
    Ok(DistillMetrics {
        step,
        loss: raw_mean,
        weighted_loss: weighted,
        grad_norm,
        lr,
        h_max: config.warmup().h_max(step),
    })
}

/// Stage 1: the correction (or single) model trained on its own semigroup.
#[derive(Debug, Clone)]
pub struct Stage1State {
    pub model: FlowMapModel,
    pub step: usize,
    pub rng: SeededRng,
    pub config: DistillConfig,
    learner: Learner,
    frozen: String,
}

impl Stage1State {
    pub fn new(model: FlowMapModel, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        if config.stage1_loss == Stage1Loss::Ce && model.kind() != FlowMapKind::LogitCorrection {
            return Err(Error::Config("cross-entropy stage 1 needs the logit correction".into()));
        }
        let mut model = model;
        model.net_mut().params_mut().round_to(config.precision);
        let learner = Learner::new(&model, &config);
        Ok(Stage1State {
            frozen: model.frozen_fingerprint(),
            rng: SeededRng::new(config.seed).fork(11),
            model,
            step: 0,
            config,
            learner,
        })
    }

    pub fn loss_weight(&self) -> &LossWeight {
        &self.learner.weight
    }

    fn check_frozen(&self) -> Result<()> {
        let now = self.model.frozen_fingerprint();
        if now != self.frozen {
            return Err(Error::FrozenMutated(format!("denoiser digest {} became {}", self.frozen, now)));
        }
        Ok(())
    }
}

/// One stage-1 step on a given sampled batch.
pub fn stage1_step_on(state: &mut Stage1State, batch: &DistillBatch) -> Result<DistillMetrics> {
    state.check_frozen()?;
    let mut tape = Tape::new(state.config.precision);
    let vars = state.model.net().param_vars(&mut tape);
    let raw = stage1_raw_on_tape(&state.model, &mut tape, &vars, batch, state.config.stage1_loss, state.config.mse_scale)?;
    state.step += 1;
    optimize(&mut state.model, &mut state.learner, tape, vars, raw, batch, state.step, &state.config)
}

/// Samples triplets for `batch` and takes one stage-1 step.
pub fn stage1_step(state: &mut Stage1State, batch: &[TokenSequence], warp: &TimeWarp) -> Result<DistillMetrics> {
    let h_max = state.config.warmup().h_max(state.step);
    let db = sample_distill_batch(&mut state.rng, batch, state.model.vocab_size(), warp, state.config.boundary_prob, h_max)?;
    stage1_step_on(state, &db)
}

/// Stage 2: a single model regressed onto a frozen flow map.
pub struct Stage2State {
    pub student: FlowMapModel,
    pub teacher: FlowMapModel,
    pub step: usize,
    pub rng: SeededRng,
    pub config: DistillConfig,
    learner: Learner,
    frozen: String,
}

impl std::fmt::Debug for Stage2State {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stage2State")
            .field("student", &self.student)
            .field("teacher", &self.teacher)
            .field("step", &self.step)
            .finish()
    }
}

impl Stage2State {
    pub fn new(student: FlowMapModel, teacher: FlowMapModel, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        if student.kind() != FlowMapKind::SingleModel {
            return Err(Error::Config("stage-2 student must be a single model".into()));
        }
        if student.vocab_size() != teacher.vocab_size() || student.seq_len() != teacher.seq_len() {
            return Err(Error::Shape("student and teacher disagree on shape".into()));
        }
        let mut student = student;
        student.net_mut().params_mut().round_to(config.precision);
        let learner = Learner::new(&student, &config);
        Ok(Stage2State {
            frozen: teacher.fingerprint(),
            rng: SeededRng::new(config.seed).fork(12),
            student,
            teacher,
            step: 0,
            config,
            learner,
        })
    }

    pub fn loss_weight(&self) -> &LossWeight {
        &self.learner.weight
    }

    fn check_frozen(&self) -> Result<()> {
        let now = self.teacher.fingerprint();
        if now != self.frozen {
            return Err(Error::FrozenMutated(format!("teacher digest {} became {}", self.frozen, now)));
        }
        Ok(())
    }
}

pub fn stage2_step_on(state: &mut Stage2State, batch: &DistillBatch) -> Result<DistillMetrics> {
    state.check_frozen()?;
    let target = state.teacher.apply(&batch.xs, &batch.s, &batch.t)?;
    let mut tape = Tape::new(state.config.precision);
    let vars = state.student.net().param_vars(&mut tape);
    let raw = stage2_raw_on_tape(&state.student, &mut tape, &vars, batch, &target)?;
    state.step += 1;
    optimize(&mut state.student, &mut state.learner, tape, vars, raw, batch, state.step, &state.config)
}

/// Samples `(s, t)` pairs for `batch` (the midpoint is ignored) and takes
/// one stage-2 step.
pub fn stage2_step(state: &mut Stage2State, batch: &[TokenSequence], warp: &TimeWarp) -> Result<DistillMetrics> {
    let h_max = state.config.warmup().h_max(state.step);
    let db = sample_distill_batch(&mut state.rng, batch, state.student.vocab_size(), warp, state.config.boundary_prob, h_max)?;
    stage2_step_on(state, &db)
}

fn run_loop(
    steps: usize,
    log_every: usize,
    batch_size: usize,
    rng: &mut SeededRng,
    corpus: &[TokenSequence],
    mut step: impl FnMut(&[TokenSequence]) -> Result<DistillMetrics>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = draw_batch(rng, corpus, batch_size);
        let m = step(&batch)?;
        trace.push(m.loss);
        if m.step % log_every.max(1) == 0 || m.step == steps {
            log::info!("step {} loss {:.6} weighted {:.5} h_max {:.4}", m.step, m.loss, m.weighted_loss, m.h_max);
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                writeln!(w)?;
            }
        }
    }
    Ok(trace)
}

/// Runs `config.steps` stage-1 steps. Returns the unweighted loss trace.
pub fn run_stage1(state: &mut Stage1State, corpus: &[TokenSequence], warp: &TimeWarp, metrics: Option<&mut dyn Write>) -> Result<Vec<f64>> {
    let mut rng = state.rng.fork(3);
    let (steps, every, bs) = (state.config.steps, state.config.log_every, state.config.batch_size);
    run_loop(steps, every, bs, &mut rng, corpus, |b| stage1_step(state, b, warp), metrics)
}

pub fn run_stage2(state: &mut Stage2State, corpus: &[TokenSequence], warp: &TimeWarp, metrics: Option<&mut dyn Write>) -> Result<Vec<f64>> {
    let mut rng = state.rng.fork(3);
    let (steps, every, bs) = (state.config.steps, state.config.log_every, state.config.batch_size);
    run_loop(steps, every, bs, &mut rng, corpus, |b| stage2_step(state, b, warp), metrics)
}
