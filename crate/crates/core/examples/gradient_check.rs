//! Finite differences against the tape for a small transformer's loss.
//!
//!     cargo run --release --example gradient_check

use flowlm::corpus::CorpusSpec;
use flowlm::denoiser_net::{NetworkConfig, ParamVars};
use flowlm::flm_train::{sample_training_batch, training_loss_on_tape, LossMode, TrainConfig, TrainState};
use flowlm::numerics::{finite_difference_check, Precision, SeededRng, Tape, Var};
use flowlm::time_warp::build_time_warp;

fn main() -> flowlm::Result<()> {
    let corpus = CorpusSpec::default().generate(&mut SeededRng::new(0), 16)?.sequences;
    let net = NetworkConfig { embed_dim: 8, num_layers: 1, num_heads: 2, max_len: 2, vocab_size: 4, time_embed_dim: 4, ..NetworkConfig::default() };
    let warp = build_time_warp(4)?;
    for mode in [LossMode::Ce, LossMode::MseDenoiser, LossMode::MseVelocity] {
        let cfg = TrainConfig { precision: Precision::F64, loss_mode: mode, ..TrainConfig::default() };
        let state = TrainState::new(net.clone(), cfg)?;
        let batch = sample_training_batch(&mut SeededRng::new(1), &corpus[..4], 4, &warp)?;
        let f = |tape: &mut Tape, v: &[Var]| training_loss_on_tape(&state.net, tape, &ParamVars(v.to_vec()), &batch, mode).unwrap();
        let report = finite_difference_check(f, state.net.params().tensors(), 1e-5, 1e-4);
        println!(
            "{mode:?}: {} coordinates, max relative error {:.2e}, {}",
            report.coordinates.len(),
            report.max_relative_error,
            if report.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
