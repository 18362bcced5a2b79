//! Linear interpolant `I_t = (1-t) x0 + t x1`, conversion between the
//! denoiser and the velocity, and the denoiser training losses.
//!
//! Losses are averaged over positions (rows) and batch. Only the linear
//! schedule is provided.

use crate::error::{Error, Result};
use crate::lang_repr::TokenSequence;
use crate::numerics::{standard_normal, SeededRng, Tape, Tensor, Var};

/// Velocity evaluations at `t > 1 - SINGULARITY_EPS` are refused.
pub const SINGULARITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct InterpolantSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub it: Tensor,
}

/// Row softmax of a denoiser's logits.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl DenoiserOutput {
    pub fn from_logits(logits: Tensor) -> Self {
        let probabilities = logits.softmax_rows();
        DenoiserOutput { logits, probabilities }
    }
}

fn check_unit(t: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::OutOfRange(format!("{what} = {t} not in [0, 1]")));
    }
    Ok(())
}

/// `(1-t) x0 + t x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Tensor {
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// Batched interpolant with one time per group of `seq_len` rows.
pub fn interpolate_batch(x0: &Tensor, x1: &Tensor, times: &[f64], seq_len: usize) -> Tensor {
    assert_eq!(x0.shape(), x1.shape());
    let c = x0.cols();
    let block = seq_len * c;
    assert_eq!(times.len() * block, x0.len(), "one time per example");
    let mut out = x0.clone();
    for ((chunk, x1c), &t) in out.data_mut().chunks_mut(block).zip(x1.data().chunks(block)).zip(times) {
        for (o, b) in chunk.iter_mut().zip(x1c) {
            *o = (1.0 - t) * *o + t * b;
        }
    }
    out
}

/// Draws fresh noise and forms the interpolant at `t`.
pub fn sample_interpolant(rng: &mut SeededRng, x1: &Tensor, t: f64) -> Result<InterpolantSample> {
    check_unit(t, "t")?;
    let x0 = standard_normal(rng, x1.shape())?;
    let it = interpolate(&x0, x1, t);
    Ok(InterpolantSample {
        x0,
        x1: x1.clone(),
        t,
        it,
    })
}

/// `b = (D - x) / (1 - t)`.
pub fn denoiser_to_velocity(d: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
    if t >= 1.0 - SINGULARITY_EPS {
        return Err(Error::OutOfRange(format!("velocity undefined at t = {t}")));
    }
    Ok(d.zip_map(x, |dv, xv| (dv - xv) / (1.0 - t)))
}

/// `D = x + (1 - t) b`.
pub fn velocity_to_denoiser(b: &Tensor, x: &Tensor, t: f64) -> Tensor {
    x.zip_map(b, |xv, bv| xv + (1.0 - t) * bv)
}

/// Mean over positions of `-log softmax(logits)[y]`.
pub fn denoiser_ce_loss(logits: &Tensor, y: &TokenSequence) -> Result<f64> {
    if logits.rows() != y.len() {
        return Err(Error::Shape(format!("{} logit rows for {} tokens", logits.rows(), y.len())));
    }
    y.validate(logits.cols())?;
    let mut tape = Tape::inference(crate::numerics::Precision::F64);
    let l = tape.constant(logits.clone());
    let loss = ce_loss(&mut tape, l, y.tokens());
    Ok(tape.value(loss).data()[0])
}

/// Mean squared error of a probability prediction against one-hot targets.
pub fn denoiser_mse_loss(pred: &Tensor, x1: &Tensor) -> Result<f64> {
    if pred.shape() != x1.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), x1.shape())));
    }
    Ok(pred.mean_sq_diff(x1))
}

/// Mean squared error of a velocity prediction against `x1 - x0`.
pub fn velocity_mse_loss(pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64> {
    if pred.shape() != x0.shape() || x0.shape() != x1.shape() {
        return Err(Error::Shape("velocity loss shapes differ".into()));
    }
    let target = x1.zip_map(x0, |a, b| a - b);
    Ok(pred.mean_sq_diff(&target))
}

// ---- tape versions used by the training loops ----

/// Token cross entropy on the tape, averaged over rows.
pub fn ce_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, targets.to_vec());
    let m = tape.mean(picked);
    tape.scale(m, -1.0)
}

/// Per-example cross entropy `(B x 1)`, each averaged over its `seq_len` rows.
pub fn ce_loss_per_example(tape: &mut Tape, logits: Var, targets: &[usize], seq_len: usize) -> Var {
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, targets.to_vec());
    let m = tape.group_mean(picked, seq_len);
    tape.scale(m, -1.0)
}

/// Soft-label cross entropy `-sum_v q_v log p_v` per row, averaged per
/// example: `(B x 1)`. `teacher` rows are constants.
pub fn soft_ce_per_example(tape: &mut Tape, logits: Var, teacher: &Tensor, seq_len: usize) -> Var {
    let lp = tape.log_softmax(logits);
    let q = tape.constant(teacher.clone());
    let prod = tape.mul(lp, q);
    let cols = teacher.cols() as f64;
    // group_mean divides by seq_len * cols; undo the column average.
    let m = tape.group_mean(prod, seq_len);
    tape.scale(m, -cols)
}

/// Mean over each example's entries of `(pred - target)^2`: `(B x 1)`.
pub fn mse_per_example(tape: &mut Tape, pred: Var, target: &Tensor, seq_len: usize) -> Var {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t);
    let sq = tape.mul(d, d);
    tape.group_mean(sq, seq_len)
}
