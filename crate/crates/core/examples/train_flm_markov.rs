//! Trains a small denoiser on a Markov grammar and compares its samples with
//! the exact forward-backward denoiser of the same chain.
//!
//!     cargo run --release --example train_flm_markov [steps]

use flowlm::corpus::{CorpusSpec, MarkovDenoiser};
use flowlm::denoiser_net::NetworkConfig;
use flowlm::eval::bigram_tv;
use flowlm::flm_train::{train, training_warp, TrainConfig, TrainState};
use flowlm::numerics::{Precision, SeededRng};
use flowlm::sampler::{sample, SampleModel, SampleRun};

fn main() -> flowlm::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let (v, l) = (16, 16);
    let spec = CorpusSpec::MarkovGrammar { vocab_size: v, seq_len: l, branching: 3, seed: 1 };
    let chain = spec.markov_chain()?;
    let truth = chain.bigram_truth(l)?;
    let corpus = spec.generate(&mut SeededRng::new(1), 20_000)?.sequences;

    let net = NetworkConfig { embed_dim: 32, num_layers: 2, num_heads: 4, max_len: l, vocab_size: v, time_embed_dim: 32, ..NetworkConfig::default() };
    let cfg = TrainConfig { batch_size: 32, steps, learning_rate: 3e-3, warmup_steps: 50, precision: Precision::F64, log_every: 100, ..TrainConfig::default() };
    let warp = training_warp(&cfg, v)?;
    let mut state = TrainState::new(net, cfg)?;
    let mut log = std::io::stdout();
    train(&mut state, &corpus, &warp, Some(&mut log))?;
    let model = state.denoiser();
    let exact = MarkovDenoiser::new(chain, l)?;

    println!("data floor: bigram TV {:.3}", bigram_tv(&corpus[..1000], &truth)?);
    for n in [1, 8, 64] {
        let run = SampleRun { steps: n, seed: 5, ..SampleRun::default() };
        let trained = sample(SampleModel::Denoiser(&model), &run, &warp, 1000)?;
        let oracle = sample(SampleModel::Denoiser(&exact), &run, &warp, 1000)?;
        println!(
            "N={n:>2}: trained {:.3}  exact {:.3}",
            bigram_tv(&trained.sequences, &truth)?,
            bigram_tv(&oracle.sequences, &truth)?
        );
    }
    Ok(())
}
