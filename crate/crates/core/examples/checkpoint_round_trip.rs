//! Saves a denoiser, reloads it, and checks the outputs agree bit for bit.
//!
//!     cargo run --release --example checkpoint_round_trip

use flowlm::checkpoint::{load_flm, save_flm, Manifest};
use flowlm::denoiser_net::{Denoiser, DenoiserNet, NetDenoiser, NetworkConfig, Parameterization};
use flowlm::numerics::{standard_normal, Precision, SeededRng};

fn main() -> flowlm::Result<()> {
    let cfg = NetworkConfig { embed_dim: 16, num_layers: 2, num_heads: 2, max_len: 8, vocab_size: 10, time_embed_dim: 8, ..NetworkConfig::default() };
    let model = NetDenoiser::new(DenoiserNet::init(&mut SeededRng::new(0), cfg)?, Parameterization::Denoiser);
    let dir = std::env::temp_dir().join("flowlm-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("flm.ckpt");
    save_flm(&path, &model, &Manifest::flm(&model, Precision::F64))?;
    let (back, manifest) = load_flm(&path)?;
    let x = standard_normal(&mut SeededRng::new(1), &[8, 10])?;
    let same = model.denoise(&x, &[0.4])? == back.denoise(&x, &[0.4])?;
    println!("{} bytes, {} tensors, dtype {}, outputs identical: {same}", std::fs::metadata(&path)?.len(), manifest.tensors.len(), manifest.dtype.name());
    Ok(())
}
