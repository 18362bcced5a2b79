use crate::error::{Error, Result};
use crate::flm_train::{Adam, AdamConfig, LossMode};
use crate::lang_repr::TokenSequence;
use crate::numerics::{Precision, Tape, Tensor};

/// Free logits `(S*L) x |V|`, one `L x |V|` block per probe state `(x_j, t_j)`.
///
/// Trained on the population loss: for each state, the expectation over
/// clean sequences is an explicit sum over the data support weighted by the
/// posterior `p(y_k | x_j, t_j)`. The minimizer of either the cross entropy
/// or the squared error is the posterior marginal at every position.
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    seq_len: usize,
    vocab_size: usize,
    logits: Tensor,
}

impl TabularDenoiser {
    pub fn new(states: usize, seq_len: usize, vocab_size: usize) -> Self {
        TabularDenoiser {
            seq_len,
            vocab_size,
            logits: Tensor::zeros(&[states * seq_len, vocab_size]),
        }
    }

    pub fn states(&self) -> usize {
        self.logits.rows() / self.seq_len
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// `L x |V|` prediction for state `j`.
    pub fn probabilities(&self, j: usize) -> Tensor {
        let block = self.seq_len * self.vocab_size;
        Tensor::new(
            vec![self.seq_len, self.vocab_size],
            self.logits.data()[j * block..(j + 1) * block].to_vec(),
        )
        .expect("block shape")
        .softmax_rows()
    }

    pub fn all_probabilities(&self) -> Tensor {
        self.logits.softmax_rows()
    }

    fn check(&self, weights: &Tensor, support: &[TokenSequence]) -> Result<()> {
        if weights.shape() != [self.states(), support.len()] {
            return Err(Error::Shape(format!(
                "weights {:?} for {} states and {} support sequences",
                weights.shape(),
                self.states(),
                support.len()
            )));
        }
        for y in support {
            if y.len() != self.seq_len {
                return Err(Error::Shape(format!("support sequence of length {}", y.len())));
            }
            y.validate(self.vocab_size)?;
        }
        Ok(())
    }

    /// Population loss (mean over states and positions) and its gradient
    /// with respect to the logits.
    pub fn population_loss(
        &self,
        weights: &Tensor,
        support: &[TokenSequence],
        mode: LossMode,
        record: bool,
    ) -> Result<(f64, Option<Tensor>)> {
        self.check(weights, support)?;
        let states = self.states();
        let rows = states * self.seq_len;
        let mut tape = if record {
            Tape::new(Precision::F64)
        } else {
            Tape::inference(Precision::F64)
        };
        let theta = tape.param(self.logits.clone());
        let row_weight = |k: usize| -> Tensor {
            let data = (0..rows).map(|r| weights.data()[(r / self.seq_len) * support.len() + k]).collect();
            Tensor::new(vec![rows, 1], data).expect("row weights")
        };
        let mut total = None;
        match mode {
            LossMode::Ce => {
                let lp = tape.log_softmax(theta);
                for (k, y) in support.iter().enumerate() {
                    let idx: Vec<usize> = (0..rows).map(|r| y.0[r % self.seq_len]).collect();
                    let picked = tape.pick(lp, idx);
                    let w = tape.constant(row_weight(k));
                    let term = tape.mul(picked, w);
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term),
                    });
                }
                let acc = total.ok_or_else(|| Error::Shape("empty support".into()))?;
                let m = tape.mean(acc);
                total = Some(tape.scale(m, -1.0));
            }
            LossMode::MseDenoiser => {
                let p = tape.softmax(theta);
                for (k, y) in support.iter().enumerate() {
                    let mut onehot = vec![0.0; rows * self.vocab_size];
                    for r in 0..rows {
                        onehot[r * self.vocab_size + y.0[r % self.seq_len]] = 1.0;
                    }
                    let target = tape.constant(Tensor::new(vec![rows, self.vocab_size], onehot)?);
                    let d = tape.sub(p, target);
                    let sq = tape.mul(d, d);
                    let w = tape.constant(row_weight(k));
                    let ones = tape.constant(Tensor::full(&[1, self.vocab_size], 1.0));
                    let wide = tape.matmul(w, ones);
                    let term = tape.mul(sq, wide);
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term),
                    });
                }
                let acc = total.ok_or_else(|| Error::Shape("empty support".into()))?;
                total = Some(tape.mean(acc));
            }
            LossMode::MseVelocity => {
                return Err(Error::Config("tabular denoiser supports ce and mse_denoiser".into()));
            }
        }
        let loss = total.expect("loss built above");
        tape.check_finite()?;
        let value = tape.value(loss).data()[0];
        let grad = if record {
            Some(tape.backward(loss)?.get_or_zeros(theta, self.logits.shape()))
        } else {
            None
        };
        Ok((value, grad))
    }

    /// Full-batch Adam on the population loss. Returns the loss trace.
    pub fn fit(
        &mut self,
        weights: &Tensor,
        support: &[TokenSequence],
        mode: LossMode,
        steps: usize,
        learning_rate: f64,
    ) -> Result<Vec<f64>> {
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate,
                ..AdamConfig::default()
            },
            std::slice::from_ref(&self.logits),
        );
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (loss, grad) = self.population_loss(weights, support, mode, true)?;
            trace.push(loss);
            let grad = grad.expect("recorded tape yields a gradient");
            adam.step(std::slice::from_mut(&mut self.logits), &[grad], learning_rate);
        }
        Ok(trace)
    }
}
