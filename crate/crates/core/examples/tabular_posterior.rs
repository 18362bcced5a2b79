//! Free logits per probe state, fitted on the population loss, land on the
//! Bayes posterior whether the loss is cross entropy or squared error.
//!
//!     cargo run --release --example tabular_posterior

use flowlm::denoiser_net::TabularDenoiser;
use flowlm::flm_train::LossMode;
use flowlm::lang_repr::encode_onehot;
use flowlm::numerics::{SeededRng, Tensor};
use flowlm::toy_oracle::{ExactDenoiser, ToySpec};

fn main() -> flowlm::Result<()> {
    let spec = ToySpec::three_modes();
    let exact = ExactDenoiser::new(spec.clone());
    let (l, v) = (spec.seq_len, spec.vocab_size());
    let support: Vec<_> = spec.support.iter().map(|(y, _)| y.clone()).collect();
    let mut rng = SeededRng::new(0);
    let states = 16;
    let (mut weights, mut truth) = (Vec::new(), Vec::new());
    for _ in 0..states {
        let t = rng.uniform_range(0.05, 0.9);
        let y = &spec.sample(&mut rng, 1)[0];
        let x: Vec<f64> = encode_onehot(y, v)?.data().iter().map(|&c| (1.0 - t) * rng.normal() + t * c).collect();
        weights.extend(exact.posterior_weights(&x, t)?);
        truth.extend(exact.denoise_one(&x, t)?);
    }
    let weights = Tensor::new(vec![states, support.len()], weights)?;
    let truth = Tensor::new(vec![states * l, v], truth)?;
    for mode in [LossMode::Ce, LossMode::MseDenoiser] {
        let mut tab = TabularDenoiser::new(states, l, v);
        let mut last = 0.0;
        for lr in [0.1, 0.01, 0.001] {
            last = *tab.fit(&weights, &support, mode, 2000, lr)?.last().unwrap();
        }
        println!("{mode:?}: final loss {last:.5}, max |p - posterior| {:.2e}", tab.all_probabilities().max_abs_diff(&truth));
    }
    Ok(())
}
