//! Toy pipeline: denoiser, then a correction flow map, then a single
//! network regressed onto it. Prints how one-step samples improve.
//!
//!     cargo run --release --example distill_flow_map

use flowlm::corpus::CorpusSpec;
use flowlm::denoiser_net::NetworkConfig;
use flowlm::eval::tv_to_truth;
use flowlm::flm_train::{train, training_warp, TrainConfig, TrainState};
use flowlm::flowmap::{run_stage1, run_stage2, DistillConfig, FlowMapKind, FlowMapModel, Stage1State, Stage2State};
use flowlm::numerics::{Precision, SeededRng};
use flowlm::sampler::{sample, SampleMode, SampleModel, SampleRun};

fn main() -> flowlm::Result<()> {
    let spec = CorpusSpec::default();
    let toy = spec.toy_spec()?;
    let corpus = spec.generate(&mut SeededRng::new(1), 4000)?.sequences;
    let net = NetworkConfig { embed_dim: 32, num_layers: 1, num_heads: 4, max_len: 2, vocab_size: 4, time_embed_dim: 16, ..NetworkConfig::default() };
    let cfg = TrainConfig { batch_size: 64, steps: 500, learning_rate: 3e-3, warmup_steps: 50, precision: Precision::F64, ..TrainConfig::default() };
    let warp = training_warp(&cfg, 4)?;
    let mut state = TrainState::new(net, cfg)?;
    train(&mut state, &corpus, &warp, None)?;
    let flm = state.denoiser();

    let dc = DistillConfig { steps: 500, batch_size: 64, learning_rate: 1e-3, h_max_doubling: 60, precision: Precision::F64, ..DistillConfig::default() };
    let mut s1 = Stage1State::new(FlowMapModel::correction_from_flm(FlowMapKind::EulerCorrection, &flm)?, dc.clone())?;
    let trace = run_stage1(&mut s1, &corpus, &warp, None)?;
    println!("stage 1 loss {:.4} -> {:.4}", trace[0], trace[trace.len() - 1]);

    let dc2 = DistillConfig { steps: 1000, h_max_initial: 1.0, h_max_doubling: 0, ..dc };
    let mut s2 = Stage2State::new(FlowMapModel::single_from_flm(&flm)?, s1.model.clone(), dc2)?;
    let trace = run_stage2(&mut s2, &corpus, &warp, None)?;
    println!("stage 2 loss {:.4} -> {:.6}", trace[0], trace[trace.len() - 1]);

    println!("TV to truth at N steps:");
    for n in [1, 2, 4] {
        let euler = SampleRun { steps: n, seed: 9, ..SampleRun::default() };
        let map = SampleRun { mode: SampleMode::Flowmap, ..euler.clone() };
        let a = sample(SampleModel::Denoiser(&flm), &euler, &warp, 4000)?;
        let b = sample(SampleModel::FlowMap(&s1.model), &map, &warp, 4000)?;
        let c = sample(SampleModel::FlowMap(&s2.student), &map, &warp, 4000)?;
        println!(
            "  N={n}: denoiser {:.3}  correction map {:.3}  single map {:.3}",
            tv_to_truth(&a.sequences, &toy)?,
            tv_to_truth(&b.sequences, &toy)?,
            tv_to_truth(&c.sequences, &toy)?
        );
    }
    Ok(())
}
