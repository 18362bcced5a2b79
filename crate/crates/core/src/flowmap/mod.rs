//! Flow maps `X_{s,t}` that jump along the probability-flow ODE, and the
//! two stages that distill them from a trained denoiser.
//!
//! Three parameterizations are provided:
//!
//! - Euler correction: `X = x + (t-s) b_s(x) + (t-s)^2/2 psi_{s,t}(x)` with a
//!   frozen denoiser giving `b_s = (D_s - x)/(1-s)` and a trainable `psi`.
//! - Logit correction: `delta_{s,t} = softmax(logits D_s + (t-s) phi_{s,t})`
//!   and `X = (1-t)/(1-s) x + (t-s)/(1-s) delta`.
//! - Single model: `Y = x + (t-s) u_{s,t}(x)` with `u = (U - x)/(1-s)` for a
//!   raw network output `U`, so that `Y_{s,1} = U`.
//!
//! All functions take a batch `(B*L) x |V|` with one `(s, t)` pair per example.

mod distill;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser_net::{Denoiser, DenoiserNet, NetDenoiser, NetworkConfig, OutputMode, Parameterization};
use crate::error::{Error, Result};
use crate::interpolant::SINGULARITY_EPS;
use crate::numerics::{Precision, SeededRng, Tensor};
use crate::toy_oracle::{exact_flow_map, ExactDenoiser};

pub use distill::{
    bootstrap_target, ce_teacher, run_stage1, run_stage2, sample_distill_batch, stage1_losses, stage1_step,
    stage1_step_on, stage2_losses, stage2_step, stage2_step_on, DistillBatch, DistillConfig, DistillMetrics,
    LossWeight, Stage1Loss, Stage1State, Stage2State,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMapKind {
    EulerCorrection,
    LogitCorrection,
    SingleModel,
}

impl FlowMapKind {
    pub fn name(self) -> &'static str {
        match self {
            FlowMapKind::EulerCorrection => "euler_correction",
            FlowMapKind::LogitCorrection => "logit_correction",
            FlowMapKind::SingleModel => "single_model",
        }
    }
}

/// Something that maps `(x, s, t)` to `X_{s,t}(x)`.
pub trait FlowMap {
    fn vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn apply(&self, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor>;
}

/// `(1-t)(u-s) / ((1-u)(t-s))`, the weight of the first hop in the
/// two-hop two-time denoiser.
pub fn gamma_weight(s: f64, u: f64, t: f64) -> Result<f64> {
    if !(s < t) || !(s..=t).contains(&u) {
        return Err(Error::OutOfRange(format!("need s < t and u in [s, t], got ({s}, {u}, {t})")));
    }
    if u >= 1.0 {
        return Err(Error::OutOfRange("gamma undefined at u = 1".into()));
    }
    Ok((1.0 - t) * (u - s) / ((1.0 - u) * (t - s)))
}

/// `gamma` at the midpoint `u = (s+t)/2`: `(1-t)/(2-s-t)`.
pub fn gamma_midpoint(s: f64, t: f64) -> f64 {
    (1.0 - t) / (2.0 - s - t)
}

/// Broadcasts one value per example to a `(B*L) x V` tensor.
pub fn per_example_rows(values: &[f64], seq_len: usize, vocab: usize) -> Tensor {
    let block = seq_len * vocab;
    let mut data = Vec::with_capacity(values.len() * block);
    for &v in values {
        data.extend(std::iter::repeat_n(v, block));
    }
    Tensor::new(vec![values.len() * seq_len, vocab], data).expect("broadcast shape")
}

fn check_pairs(s: &[f64], t: &[f64], batch: usize) -> Result<()> {
    if s.len() != batch || t.len() != batch {
        return Err(Error::Shape(format!("{} / {} times for batch {batch}", s.len(), t.len())));
    }
    for (&a, &b) in s.iter().zip(t) {
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
            return Err(Error::OutOfRange(format!("need 0 <= s <= t <= 1, got s={a}, t={b}")));
        }
    }
    Ok(())
}

/// One Euler step of `dx/dt = (D - x)/(1-t)` from `s` to `t`, per example.
/// The samplers and the Euler-correction flow map share this arithmetic.
pub fn euler_step(x: &Tensor, d: &Tensor, s: &[f64], t: &[f64], seq_len: usize) -> Tensor {
    let block = seq_len * x.cols();
    let mut out = x.clone();
    for (((o, dc), &a), &b) in out.data_mut().chunks_mut(block).zip(d.data().chunks(block)).zip(s).zip(t) {
        let h = b - a;
        let inv = 1.0 / (1.0 - a);
        for (ov, dv) in o.iter_mut().zip(dc) {
            *ov += h * ((dv - *ov) * inv);
        }
    }
    out
}

/// Convex form `(1-t)/(1-s) x + (t-s)/(1-s) delta` per example. At
/// `s = 1` the map is the identity.
pub fn convex_flow(x: &Tensor, delta: &Tensor, s: &[f64], t: &[f64], seq_len: usize) -> Tensor {
    let block = seq_len * x.cols();
    let mut out = x.clone();
    for (((o, dc), &a), &b) in out.data_mut().chunks_mut(block).zip(delta.data().chunks(block)).zip(s).zip(t) {
        let r = if a >= 1.0 { 0.0 } else { (b - a) / (1.0 - a) };
        for (ov, dv) in o.iter_mut().zip(dc) {
            *ov = (1.0 - r) * *ov + r * dv;
        }
    }
    out
}

/// A parameterized flow map. The frozen denoiser is shared read-only.
#[derive(Clone)]
pub struct FlowMapModel {
    kind: FlowMapKind,
    teacher: Option<Arc<dyn Denoiser + Send + Sync>>,
    net: DenoiserNet,
    pub precision: Precision,
}

impl std::fmt::Debug for FlowMapModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowMapModel")
            .field("kind", &self.kind)
            .field("has_teacher", &self.teacher.is_some())
            .field("net", &self.net.config())
            .finish()
    }
}

fn two_time_config(base: &NetworkConfig) -> NetworkConfig {
    NetworkConfig {
        two_time_conditioning: true,
        output_mode: OutputMode::Unconstrained,
        dropout: 0.0,
        ..base.clone()
    }
}

impl FlowMapModel {
    /// Correction model around a frozen denoiser. `net` must be two-time
    /// conditioned with an unconstrained head.
    pub fn correction(kind: FlowMapKind, teacher: Arc<dyn Denoiser + Send + Sync>, net: DenoiserNet) -> Result<Self> {
        if kind == FlowMapKind::SingleModel {
            return Err(Error::Config("single_model has no frozen denoiser".into()));
        }
        let c = net.config();
        if !c.two_time_conditioning || c.output_mode != OutputMode::Unconstrained {
            return Err(Error::Config("correction network must be two-time with an unconstrained head".into()));
        }
        if c.vocab_size != teacher.vocab_size() || c.max_len != teacher.seq_len() {
            return Err(Error::Shape("correction network and denoiser disagree on shape".into()));
        }
        Ok(FlowMapModel {
            kind,
            teacher: Some(teacher),
            net,
            precision: Precision::F64,
        })
    }

    /// Correction model whose network is cloned from the FLM with a zero
    /// output layer, so the correction vanishes at initialization.
    pub fn correction_from_flm(kind: FlowMapKind, flm: &NetDenoiser) -> Result<Self> {
        if flm.parameterization != Parameterization::Denoiser {
            return Err(Error::Config("corrections need a softmax denoiser".into()));
        }
        let net = flm.net.clone_for_distillation(two_time_config(flm.net.config()), true)?;
        FlowMapModel::correction(kind, Arc::new(flm.clone()), net)
    }

    /// Single-model flow map cloned from the FLM with the head kept, so the
    /// raw output starts at the FLM logits.
    pub fn single_from_flm(flm: &NetDenoiser) -> Result<Self> {
        let net = flm.net.clone_for_distillation(two_time_config(flm.net.config()), false)?;
        FlowMapModel::single(net)
    }

    pub fn single(net: DenoiserNet) -> Result<Self> {
        let c = net.config();
        if !c.two_time_conditioning || c.output_mode != OutputMode::Unconstrained {
            return Err(Error::Config("single-model network must be two-time with an unconstrained head".into()));
        }
        Ok(FlowMapModel {
            kind: FlowMapKind::SingleModel,
            teacher: None,
            net,
            precision: Precision::F64,
        })
    }

    /// Fresh two-time network with a zero head around an arbitrary frozen
    /// denoiser (for example the exact toy denoiser).
    pub fn correction_fresh(
        kind: FlowMapKind,
        teacher: Arc<dyn Denoiser + Send + Sync>,
        base: &NetworkConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let net = DenoiserNet::init(rng, two_time_config(base))?;
        FlowMapModel::correction(kind, teacher, net)
    }

    pub fn kind(&self) -> FlowMapKind {
        self.kind
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenoiserNet {
        &mut self.net
    }

    pub fn teacher(&self) -> Option<&Arc<dyn Denoiser + Send + Sync>> {
        self.teacher.as_ref()
    }

    fn teacher_ref(&self) -> &(dyn Denoiser + Send + Sync) {
        self.teacher.as_deref().expect("correction models carry a denoiser")
    }

    /// Digest of the frozen part (empty for single models).
    pub fn frozen_fingerprint(&self) -> String {
        self.teacher.as_ref().map(|t| t.fingerprint()).unwrap_or_default()
    }

    /// Digest of frozen and trainable parts.
    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.frozen_fingerprint(), self.net.params().fingerprint())
    }

    fn raw(&self, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
        self.net.forward_with(x, s, Some(t), self.precision, None)
    }

    /// `delta_{s,t}` of the logit-correction model.
    pub fn two_time_denoiser(&self, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
        if self.kind != FlowMapKind::LogitCorrection {
            return Err(Error::Config(format!("{} has no softmax two-time denoiser", self.kind.name())));
        }
        let l = self.seq_len();
        check_pairs(s, t, x.rows() / l)?;
        let logits = self.teacher_ref().logits(x, s)?;
        let phi = self.raw(x, s, t)?;
        let h: Vec<f64> = s.iter().zip(t).map(|(a, b)| b - a).collect();
        let scale = per_example_rows(&h, l, self.vocab_size());
        let z = logits.zip_map(&phi.zip_map(&scale, |p, c| p * c), |a, b| a + b);
        Ok(z.softmax_rows())
    }

    /// Velocity `b_s(x)` of the frozen denoiser.
    pub fn teacher_velocity(&self, x: &Tensor, s: &[f64]) -> Result<Tensor> {
        let d = self.teacher_ref().denoise(x, s)?;
        let block = self.seq_len() * x.cols();
        let mut out = d.zip_map(x, |a, b| a - b);
        for (chunk, &a) in out.data_mut().chunks_mut(block).zip(s) {
            let inv = 1.0 / (1.0 - a);
            for v in chunk.iter_mut() {
                *v *= inv;
            }
        }
        Ok(out)
    }
}

impl FlowMap for FlowMapModel {
    fn vocab_size(&self) -> usize {
        self.net.config().vocab_size
    }

    fn seq_len(&self) -> usize {
        self.net.config().max_len
    }

    fn apply(&self, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
        let l = self.seq_len();
        if x.cols() != self.vocab_size() || !x.rows().is_multiple_of(l) {
            return Err(Error::Shape(format!("state {:?} for L={l}, V={}", x.shape(), self.vocab_size())));
        }
        check_pairs(s, t, x.rows() / l)?;
        match self.kind {
            FlowMapKind::EulerCorrection => {
                if let Some(a) = s.iter().find(|&&a| a >= 1.0 - SINGULARITY_EPS) {
                    return Err(Error::OutOfRange(format!("euler correction needs s < 1, got {a}")));
                }
                let d = self.teacher_ref().denoise(x, s)?;
                let euler = euler_step(x, &d, s, t, l);
                let psi = self.raw(x, s, t)?;
                let half_h2: Vec<f64> = s.iter().zip(t).map(|(a, b)| 0.5 * (b - a) * (b - a)).collect();
                let c = per_example_rows(&half_h2, l, self.vocab_size());
                Ok(euler.zip_map(&psi.zip_map(&c, |p, k| p * k), |e, q| e + q))
            }
            FlowMapKind::LogitCorrection => {
                let safe_s: Vec<f64> = s.iter().map(|&a| a.min(1.0 - SINGULARITY_EPS)).collect();
                let safe_t: Vec<f64> = t.iter().zip(&safe_s).map(|(&b, &a)| b.max(a)).collect();
                let delta = self.two_time_denoiser(x, &safe_s, &safe_t)?;
                Ok(convex_flow(x, &delta, s, t, l))
            }
            FlowMapKind::SingleModel => {
                let safe_s: Vec<f64> = s.iter().map(|&a| a.min(1.0 - SINGULARITY_EPS)).collect();
                let safe_t: Vec<f64> = t.iter().zip(&safe_s).map(|(&b, &a)| b.max(a)).collect();
                let u = self.raw(x, &safe_s, &safe_t)?;
                Ok(convex_flow(x, &u, s, t, l))
            }
        }
    }
}

/// The exact flow map of a toy problem, one fine integration per example.
#[derive(Debug, Clone)]
pub struct ExactFlowMap {
    pub denoiser: ExactDenoiser,
    pub fine_steps: usize,
}

impl FlowMap for ExactFlowMap {
    fn vocab_size(&self) -> usize {
        self.denoiser.vocab_size()
    }

    fn seq_len(&self) -> usize {
        self.denoiser.seq_len()
    }

    fn apply(&self, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
        let block = self.seq_len() * self.vocab_size();
        check_pairs(s, t, x.len() / block)?;
        let mut out = Vec::with_capacity(x.len());
        for ((xc, &a), &b) in x.data().chunks(block).zip(s).zip(t) {
            out.extend(exact_flow_map(&self.denoiser, xc, a, b, self.fine_steps)?);
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// Mean over entries of `(X_{s,t}(x) - X_{u,t}(X_{s,u}(x)))^2`.
pub fn semigroup_residual(map: &dyn FlowMap, x: &Tensor, s: &[f64], u: &[f64], t: &[f64]) -> Result<f64> {
    for ((a, b), c) in s.iter().zip(u).zip(t) {
        if !(a <= b && b <= c) {
            return Err(Error::OutOfRange(format!("need s <= u <= t, got ({a}, {b}, {c})")));
        }
    }
    let direct = map.apply(x, s, t)?;
    let mid = map.apply(x, s, u)?;
    let two = map.apply(&mid, u, t)?;
    Ok(direct.mean_sq_diff(&two))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::standard_normal;
    use crate::toy_oracle::{ToySpec, DEFAULT_FINE_STEPS};

    fn toy_net() -> NetworkConfig {
        NetworkConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_len: 2,
            vocab_size: 4,
            time_embed_dim: 8,
            ..NetworkConfig::default()
        }
    }

    fn flm() -> NetDenoiser {
        let net = DenoiserNet::init(&mut SeededRng::new(1), toy_net()).unwrap();
        NetDenoiser::new(net, Parameterization::Denoiser)
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_weight(0.2, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(gamma_weight(0.2, 0.2, 0.7).unwrap(), 0.0);
        assert!((gamma_weight(0.2, 0.7, 0.7).unwrap() - 1.0).abs() < 1e-15);
        assert!((gamma_weight(0.0, 0.25, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(gamma_weight(0.5, 0.5, 0.5).is_err());
        assert!(gamma_weight(0.5, 1.0, 1.0).is_err());
        let mut rng = SeededRng::new(2);
        for _ in 0..100_000 {
            let mut v = [rng.uniform(), rng.uniform(), rng.uniform()];
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if v[0] == v[2] {
                continue;
            }
            let g = gamma_weight(v[0], v[1], v[2]).unwrap();
            assert!((0.0..=1.0).contains(&g));
            let mid = 0.5 * (v[0] + v[2]);
            let gm = gamma_weight(v[0], mid, v[2]).unwrap();
            assert!((gm - gamma_midpoint(v[0], v[2])).abs() <= 1e-12);
        }
    }

    #[test]
    fn euler_correction_boundary_and_zero_psi() {
        let f = flm();
        let map = FlowMapModel::correction_from_flm(FlowMapKind::EulerCorrection, &f).unwrap();
        let x = standard_normal(&mut SeededRng::new(3), &[4, 4]).unwrap();
        assert_eq!(map.apply(&x, &[0.3, 0.6], &[0.3, 0.6]).unwrap(), x);
        let out = map.apply(&x, &[0.2, 0.5], &[0.6, 0.9]).unwrap();
        let d = f.denoise(&x, &[0.2, 0.5]).unwrap();
        assert_eq!(out, euler_step(&x, &d, &[0.2, 0.5], &[0.6, 0.9], 2));
        assert!(map.apply(&x, &[1.0, 0.5], &[1.0, 0.6]).is_err());
    }

    #[test]
    fn euler_correction_tangent_condition_first_order() {
        let f = flm();
        let mut map = FlowMapModel::correction_from_flm(FlowMapKind::EulerCorrection, &f).unwrap();
        let mut rng = SeededRng::new(4);
        for t in map.net_mut().params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        let x = standard_normal(&mut rng, &[2, 4]).unwrap();
        let s = 0.4;
        let b = map.teacher_velocity(&x, &[s]).unwrap();
        let mut gaps = Vec::new();
        for h in [1e-2, 1e-3, 1e-4] {
            let xh = map.apply(&x, &[s], &[s + h]).unwrap();
            let fd = xh.zip_map(&x, |a, c| (a - c) / h);
            gaps.push(fd.max_abs_diff(&b));
        }
        assert!(gaps[0] > 0.0);
        for w in gaps.windows(2) {
            let ratio = w[0] / w[1];
            assert!((5.0..20.0).contains(&ratio), "{gaps:?}");
        }
    }

    #[test]
    fn logit_correction_diagonal_and_endpoint() {
        let f = flm();
        let mut map = FlowMapModel::correction_from_flm(FlowMapKind::LogitCorrection, &f).unwrap();
        let mut rng = SeededRng::new(5);
        for t in map.net_mut().params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        let x = standard_normal(&mut rng, &[2, 4]).unwrap();
        let diag = map.two_time_denoiser(&x, &[0.3], &[0.3]).unwrap();
        assert!(diag.max_abs_diff(&f.denoise(&x, &[0.3]).unwrap()) < 1e-15);
        let delta = map.two_time_denoiser(&x, &[0.3], &[1.0]).unwrap();
        for r in 0..delta.rows() {
            assert!((delta.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let jump = map.apply(&x, &[0.3], &[1.0]).unwrap();
        assert!(jump.max_abs_diff(&delta) < 1e-15);
        assert_eq!(map.apply(&x, &[0.3], &[0.3]).unwrap(), x);
    }

    #[test]
    fn single_model_starts_at_flm_logits() {
        let f = flm();
        let map = FlowMapModel::single_from_flm(&f).unwrap();
        let x = standard_normal(&mut SeededRng::new(6), &[2, 4]).unwrap();
        let y = map.apply(&x, &[0.2], &[1.0]).unwrap();
        assert_eq!(y, f.logits(&x, &[0.2]).unwrap());
        assert_eq!(map.apply(&x, &[0.2], &[0.2]).unwrap(), x);
    }

    #[test]
    fn exact_flow_map_semigroup_and_curvature() {
        let den = ExactDenoiser::new(ToySpec::default());
        let exact = ExactFlowMap {
            denoiser: den.clone(),
            fine_steps: DEFAULT_FINE_STEPS,
        };
        let mut rng = SeededRng::new(7);
        let x = standard_normal(&mut rng, &[2, 4]).unwrap();
        let r = semigroup_residual(&exact, &x, &[0.1], &[0.4], &[0.8]).unwrap();
        assert!(r <= 1e-8, "{r}");

        let map = FlowMapModel::correction_fresh(FlowMapKind::EulerCorrection, Arc::new(den), &toy_net(), &mut rng).unwrap();
        let r = semigroup_residual(&map, &x, &[0.1], &[0.4], &[0.8]).unwrap();
        assert!(r > 0.0);
    }
}
