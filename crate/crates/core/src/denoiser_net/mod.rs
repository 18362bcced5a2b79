//! Time-conditioned denoisers.
//!
//! [`DenoiserNet`] is a small bidirectional transformer: one-hot rows are
//! projected to width `d`, learned absolute positions are added, and each
//! block applies attention and a GELU MLP behind layer norms whose shift and
//! scale come from a time embedding (AdaLN). With two-time conditioning the
//! second time enters through its own first-layer projection, which starts at
//! zero when a model is cloned from a one-time teacher.
//!
//! [`TabularDenoiser`] stores free logits per probe state and is used to test
//! convergence against the exact posterior.

mod tabular;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interpolant::SINGULARITY_EPS;
use crate::numerics::{Precision, SeededRng, Tape, Tensor, Var};
use crate::time_warp::{build_time_warp, TimeWarp};

pub use tabular::TabularDenoiser;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Per-token logits; the denoiser is their row softmax.
    #[default]
    Logits,
    /// Raw real field (correction terms, average velocities, velocities).
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub time_embed_dim: usize,
    pub two_time_conditioning: bool,
    pub output_mode: OutputMode,
    /// Feed `tau(t)` rather than `t` to the time embedding.
    pub warp_time_features: bool,
    /// Dropout rate used only when a forward pass is given a dropout stream.
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            embed_dim: 128,
            num_layers: 4,
            num_heads: 4,
            max_len: 64,
            vocab_size: 256,
            time_embed_dim: 32,
            two_time_conditioning: false,
            output_mode: OutputMode::Logits,
            warp_time_features: true,
            dropout: 0.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim {} must be even and >= 2", self.time_embed_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Number of scalar parameters:
    ///
    /// `V d + d + L d` (input, positions)
    /// `+ F d [+ F d] + d + d^2 + d` (time MLP, second-time projection if two-time)
    /// `+ layers * (4 d^2 + 4 d + 4 d^2 + 4 d + 8 d^2 + 5 d)` (AdaLN, attention, MLP)
    /// `+ 2 d^2 + 2 d + d V + V` (final AdaLN and head).
    pub fn parameter_count(&self) -> usize {
        let (d, v, l, f) = (self.embed_dim, self.vocab_size, self.max_len, self.time_embed_dim);
        let second = if self.two_time_conditioning { f * d } else { 0 };
        let block = 16 * d * d + 13 * d;
        v * d + d + l * d + f * d + second + d + d * d + d + self.num_layers * block + 2 * d * d + 2 * d + d * v + v
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, l, f) = (self.embed_dim, self.vocab_size, self.max_len, self.time_embed_dim);
        let mut s = vec![
            ("in.w".to_string(), vec![v, d]),
            ("in.b".into(), vec![d]),
            ("pos".into(), vec![l, d]),
            ("time.w1".into(), vec![f, d]),
        ];
        if self.two_time_conditioning {
            s.push(("time.w1_second".into(), vec![f, d]));
        }
        s.push(("time.b1".into(), vec![d]));
        s.push(("time.w2".into(), vec![d, d]));
        s.push(("time.b2".into(), vec![d]));
        for i in 0..self.num_layers {
            for m in ["shift1", "scale1", "shift2", "scale2"] {
                s.push((format!("block{i}.ada.{m}.w"), vec![d, d]));
                s.push((format!("block{i}.ada.{m}.b"), vec![d]));
            }
            for m in ["q", "k", "v", "o"] {
                s.push((format!("block{i}.attn.{m}.w"), vec![d, d]));
                s.push((format!("block{i}.attn.{m}.b"), vec![d]));
            }
            s.push((format!("block{i}.mlp.w1"), vec![d, 4 * d]));
            s.push((format!("block{i}.mlp.b1"), vec![4 * d]));
            s.push((format!("block{i}.mlp.w2"), vec![4 * d, d]));
            s.push((format!("block{i}.mlp.b2"), vec![d]));
        }
        for m in ["shift", "scale"] {
            s.push((format!("final.ada.{m}.w"), vec![d, d]));
            s.push((format!("final.ada.{m}.b"), vec![d]));
        }
        s.push(("out.w".into(), vec![d, v]));
        s.push(("out.b".into(), vec![v]));
        s
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParameters {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (i, (n, t)) in entries.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(ModelParameters { names, tensors, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn round_to(&mut self, precision: Precision) {
        for t in &mut self.tensors {
            precision.round_slice(t.data_mut());
        }
    }

    /// SHA-256 over names, shapes and the exact bits of every entry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Anything that maps a noisy batch and per-example times to clean-data
/// predictions. Inputs are `(B*L) x |V|` with one time per example.
pub trait Denoiser {
    fn vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;

    /// Row-stochastic prediction `D(x, t)`.
    fn denoise(&self, x: &Tensor, t: &[f64]) -> Result<Tensor>;

    /// Logits whose row softmax is `denoise`.
    fn logits(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(self.denoise(x, t)?.map(|p| p.max(1e-300).ln()))
    }

    /// Digest of whatever state determines the outputs; used to detect
    /// mutation of frozen teachers. Stateless denoisers return "".
    fn fingerprint(&self) -> String {
        String::new()
    }
}

/// `[sin(w_k v), cos(w_k v)]` for each value, `w_k` geometric from 1 to 1000.
pub fn sinusoidal_features(values: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| if half == 1 { 1.0 } else { 1000f64.powf(k as f64 / (half - 1) as f64) })
        .collect();
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        data.extend(freqs.iter().map(|w| (w * v).sin()));
        data.extend(freqs.iter().map(|w| (w * v).cos()));
    }
    Tensor::new(vec![values.len(), dim], data).expect("feature shape")
}

fn check_times(times: &[f64], batch: usize, what: &str) -> Result<()> {
    if times.len() != batch {
        return Err(Error::Shape(format!("{} {what} times for batch {batch}", times.len())));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::OutOfRange(format!("{what} time {t} not in [0, 1]")));
    }
    Ok(())
}

/// The transformer denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    config: NetworkConfig,
    params: ModelParameters,
    warp: TimeWarp,
}

/// Parameter leaves of one forward pass, aligned with [`ModelParameters`].
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl DenoiserNet {
    /// Scaled-normal weights and positions (`N(0, 1/fan_in)`), zero biases,
    /// an `N(0, 0.02^2)` output head, and zero AdaLN projections. With
    /// [`OutputMode::Unconstrained`] the output head starts at zero.
    pub fn init(rng: &mut SeededRng, config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        for (name, shape) in config.shapes() {
            let n: usize = shape.iter().product();
            let zero = name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.contains(".ada.")
                || name == "time.w1_second"
                || (config.output_mode == OutputMode::Unconstrained && name.starts_with("out."));
            let data = if zero {
                vec![0.0; n]
            } else if name == "out.w" {
                (0..n).map(|_| 0.02 * rng.normal()).collect()
            } else {
                let scale = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| scale * rng.normal()).collect()
            };
            entries.push((name, Tensor::new(shape, data)?));
        }
        let params = ModelParameters::new(entries)?;
        DenoiserNet::from_parameters(config, params)
    }

    pub fn from_parameters(config: NetworkConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "config expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in shapes.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::Shape(format!(
                    "parameter {pn} {:?} does not match {name} {shape:?}",
                    pt.shape()
                )));
            }
        }
        let warp = if config.warp_time_features {
            build_time_warp(config.vocab_size)?
        } else {
            TimeWarp::identity()
        };
        Ok(DenoiserNet { config, params, warp })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    /// Copy of this model for a two-time (or re-headed) student. Shared
    /// tensors are copied; the second-time projection is zero so the new
    /// model ignores its second time until trained. When only the output
    /// mode changes to unconstrained and `zero_head` is false the head keeps
    /// the teacher's values, so raw outputs equal the teacher's logits.
    pub fn clone_for_distillation(&self, target: NetworkConfig, zero_head: bool) -> Result<DenoiserNet> {
        target.validate()?;
        let same = |a: &NetworkConfig, b: &NetworkConfig| {
            a.embed_dim == b.embed_dim
                && a.num_layers == b.num_layers
                && a.num_heads == b.num_heads
                && a.max_len == b.max_len
                && a.vocab_size == b.vocab_size
                && a.time_embed_dim == b.time_embed_dim
                && a.warp_time_features == b.warp_time_features
        };
        if !same(&self.config, &target) {
            return Err(Error::Shape("architectures differ beyond head and time conditioning".into()));
        }
        let mut entries = Vec::new();
        for (name, shape) in target.shapes() {
            let t = match self.params.get(&name) {
                Some(t) => t.clone(),
                None => Tensor::zeros(&shape),
            };
            let t = if zero_head && name.starts_with("out.") {
                Tensor::zeros(&shape)
            } else {
                t
            };
            entries.push((name, t));
        }
        DenoiserNet::from_parameters(target, ModelParameters::new(entries)?)
    }

    /// Sinusoidal features of `tau(t)`.
    pub fn time_features(&self, times: &[f64]) -> Result<Tensor> {
        let taus = times.iter().map(|&t| self.warp.tau_forward(t)).collect::<Result<Vec<_>>>()?;
        Ok(sinusoidal_features(&taus, self.config.time_embed_dim))
    }

    pub fn warp(&self) -> &TimeWarp {
        &self.warp
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn param_vars(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.tensors().iter().map(|t| tape.param(t.clone())).collect())
    }

    fn p(&self, vars: &ParamVars, name: &str) -> Var {
        vars.0[self.params.position(name).expect("parameter layout is fixed by config")]
    }

    /// Forward pass on `tape` for `x: (B*L) x |V|`. `t` must be given exactly
    /// when the model is two-time conditioned. A dropout stream enables
    /// dropout at the configured rate.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        s: &[f64],
        t: Option<&[f64]>,
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let c = &self.config;
        let (rows, cols) = {
            let v = tape.value(x);
            (v.rows(), v.cols())
        };
        if cols != c.vocab_size {
            return Err(Error::Shape(format!("input has {cols} columns, vocabulary is {}", c.vocab_size)));
        }
        let l = c.max_len;
        if rows == 0 || rows % l != 0 {
            return Err(Error::Shape(format!("{rows} rows is not a multiple of sequence length {l}")));
        }
        let batch = rows / l;
        check_times(s, batch, "first")?;
        match (t, c.two_time_conditioning) {
            (Some(t), true) => check_times(t, batch, "second")?,
            (None, false) => {}
            (Some(_), false) => return Err(Error::Config("second time given to a one-time model".into())),
            (None, true) => return Err(Error::Config("two-time model needs a second time".into())),
        }
        let rate = c.dropout;
        let mut drop = |tape: &mut Tape, v: Var| -> Var {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let shape = tape.value(v).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
                    let m = tape.constant(Tensor::new(shape, mask).expect("mask matches shape"));
                    tape.mul(v, m)
                }
                _ => v,
            }
        };

        // time embedding
        let fs = tape.constant(self.time_features(s)?);
        let mut e = tape.matmul(fs, self.p(vars, "time.w1"));
        if let Some(t) = t {
            let ft = tape.constant(self.time_features(t)?);
            let e2 = tape.matmul(ft, self.p(vars, "time.w1_second"));
            e = tape.add(e, e2);
        }
        let e = tape.add_row(e, self.p(vars, "time.b1"));
        let e = tape.silu(e);
        let e = tape.matmul(e, self.p(vars, "time.w2"));
        let e = tape.add_row(e, self.p(vars, "time.b2"));
        let cond = tape.silu(e);

        let modulation = |tape: &mut Tape, prefix: &str| -> Var {
            let m = tape.matmul(cond, self.p(vars, &format!("{prefix}.w")));
            let m = tape.add_row(m, self.p(vars, &format!("{prefix}.b")));
            tape.repeat_rows(m, l)
        };
        let ada_norm = |tape: &mut Tape, h: Var, shift: Var, scale: Var| -> Var {
            let n = tape.layer_norm(h);
            let g = tape.add_scalar(scale, 1.0);
            let n = tape.mul(n, g);
            tape.add(n, shift)
        };
        let linear = |tape: &mut Tape, h: Var, prefix: &str| -> Var {
            let y = tape.matmul(h, self.p(vars, &format!("{prefix}.w")));
            tape.add_row(y, self.p(vars, &format!("{prefix}.b")))
        };

        let h = tape.matmul(x, self.p(vars, "in.w"));
        let h = tape.add_row(h, self.p(vars, "in.b"));
        let pos = tape.tile_rows(self.p(vars, "pos"), batch);
        let mut h = tape.add(h, pos);

        for i in 0..c.num_layers {
            let shift1 = modulation(tape, &format!("block{i}.ada.shift1"));
            let scale1 = modulation(tape, &format!("block{i}.ada.scale1"));
            let shift2 = modulation(tape, &format!("block{i}.ada.shift2"));
            let scale2 = modulation(tape, &format!("block{i}.ada.scale2"));

            let a = ada_norm(tape, h, shift1, scale1);
            let q = linear(tape, a, &format!("block{i}.attn.q"));
            let k = linear(tape, a, &format!("block{i}.attn.k"));
            let v = linear(tape, a, &format!("block{i}.attn.v"));
            let att = tape.attention(q, k, v, batch, l, c.num_heads);
            let o = linear(tape, att, &format!("block{i}.attn.o"));
            let o = drop(tape, o);
            h = tape.add(h, o);

            let a = ada_norm(tape, h, shift2, scale2);
            let m = tape.matmul(a, self.p(vars, &format!("block{i}.mlp.w1")));
            let m = tape.add_row(m, self.p(vars, &format!("block{i}.mlp.b1")));
            let m = tape.gelu(m);
            let m = drop(tape, m);
            let m = tape.matmul(m, self.p(vars, &format!("block{i}.mlp.w2")));
            let m = tape.add_row(m, self.p(vars, &format!("block{i}.mlp.b2")));
            h = tape.add(h, m);
        }
        let shift = modulation(tape, "final.ada.shift");
        let scale = modulation(tape, "final.ada.scale");
        let h = ada_norm(tape, h, shift, scale);
        Ok(linear(tape, h, "out"))
    }

    /// Inference forward pass in the given precision.
    pub fn forward_with(
        &self,
        x: &Tensor,
        s: &[f64],
        t: Option<&[f64]>,
        precision: Precision,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Tensor> {
        let mut tape = Tape::inference(precision);
        let vars = self.param_vars(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &vars, xv, s, t, dropout)?;
        tape.check_finite()?;
        Ok(tape.value(out).clone())
    }

    /// Inference forward pass at 64-bit precision.
    pub fn forward(&self, x: &Tensor, s: &[f64], t: Option<&[f64]>) -> Result<Tensor> {
        self.forward_with(x, s, t, Precision::F64, None)
    }
}

/// How a one-time network's output becomes a denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Output is logits; `D = softmax(logits)`.
    #[default]
    Denoiser,
    /// Output is the velocity `b`; `D = x + (1-t) b`.
    Velocity,
}

/// A trained one-time network viewed as a denoiser.
#[derive(Debug, Clone)]
pub struct NetDenoiser {
    pub net: DenoiserNet,
    pub parameterization: Parameterization,
    pub precision: Precision,
}

impl NetDenoiser {
    pub fn new(net: DenoiserNet, parameterization: Parameterization) -> Self {
        NetDenoiser {
            net,
            parameterization,
            precision: Precision::F64,
        }
    }

    fn raw(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.net.forward_with(x, t, None, self.precision, None)
    }
}

impl Denoiser for NetDenoiser {
    fn vocab_size(&self) -> usize {
        self.net.config.vocab_size
    }

    fn seq_len(&self) -> usize {
        self.net.config.max_len
    }

    fn denoise(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let out = self.raw(x, t)?;
        match self.parameterization {
            Parameterization::Denoiser => Ok(out.softmax_rows()),
            Parameterization::Velocity => {
                let block = self.seq_len() * self.vocab_size();
                let mut d = out;
                for ((chunk, xc), &tt) in d.data_mut().chunks_mut(block).zip(x.data().chunks(block)).zip(t) {
                    let w = (1.0 - tt).max(SINGULARITY_EPS);
                    for (o, xv) in chunk.iter_mut().zip(xc) {
                        *o = xv + w * *o;
                    }
                }
                Ok(d)
            }
        }
    }

    fn logits(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        match self.parameterization {
            Parameterization::Denoiser => self.raw(x, t),
            Parameterization::Velocity => Ok(self.denoise(x, t)?.map(|p| p.max(1e-300).ln())),
        }
    }

    fn fingerprint(&self) -> String {
        self.net.params.fingerprint()
    }
}
