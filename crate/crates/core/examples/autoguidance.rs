//! Guidance by a dropout copy of the same network, swept over eta.
//!
//!     cargo run --release --example autoguidance

use flowlm::corpus::CorpusSpec;
use flowlm::denoiser_net::NetworkConfig;
use flowlm::eval::{tv_to_truth, valid_rate};
use flowlm::flm_train::{train, training_warp, TrainConfig, TrainState};
use flowlm::numerics::{Precision, SeededRng};
use flowlm::sampler::{sample, Autoguided, DropoutDenoiser, SampleModel, SampleRun, WEAK_DROPOUT};

fn main() -> flowlm::Result<()> {
    let spec = CorpusSpec::ToyModes { preset: flowlm::corpus::ToyPreset::ThreeModes, vocab_size: 6, seq_len: 2, modes: 3, seed: 0 };
    let toy = spec.toy_spec()?;
    let corpus = spec.generate(&mut SeededRng::new(0), 2000)?.sequences;
    let net = NetworkConfig { embed_dim: 16, num_layers: 1, num_heads: 2, max_len: 2, vocab_size: 6, time_embed_dim: 8, ..NetworkConfig::default() };
    let cfg = TrainConfig { batch_size: 32, steps: 150, learning_rate: 3e-3, warmup_steps: 20, precision: Precision::F64, ..TrainConfig::default() };
    let warp = training_warp(&cfg, 6)?;
    let mut state = TrainState::new(net, cfg)?;
    train(&mut state, &corpus, &warp, None)?;
    let strong = state.denoiser();

    for eta in [0.0, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0] {
        let weak = DropoutDenoiser::new(&strong, WEAK_DROPOUT, 7)?;
        let guided = Autoguided { strong: &strong, weak: &weak, eta };
        let run = SampleRun { steps: 16, seed: 3, eta, ..SampleRun::default() };
        let s = sample(SampleModel::Denoiser(&guided), &run, &warp, 2000)?;
        println!("eta {eta:>4}: TV {:.3}  valid {:.3}", tv_to_truth(&s.sequences, &toy)?, valid_rate(&s.sequences, &toy));
    }
    Ok(())
}
