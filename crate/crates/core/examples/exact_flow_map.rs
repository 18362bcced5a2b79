//! The exact flow of a toy problem: composition, the two-time denoiser, and
//! how far a single Euler step is from the true map.
//!
//!     cargo run --release --example exact_flow_map

use flowlm::flowmap::{euler_step, ExactFlowMap, FlowMap, semigroup_residual};
use flowlm::numerics::{standard_normal, SeededRng, Tensor};
use flowlm::toy_oracle::{exact_flow_map, oracle_two_time_denoiser, ExactDenoiser, ToySpec, DEFAULT_FINE_STEPS};

fn main() -> flowlm::Result<()> {
    let den = ExactDenoiser::new(ToySpec::skewed());
    let mut rng = SeededRng::new(3);
    let x = standard_normal(&mut rng, &[2, 4])?;
    let (s, u, t) = (0.2, 0.5, 0.8);

    let delta = oracle_two_time_denoiser(&den, x.data(), s, t, DEFAULT_FINE_STEPS)?;
    println!("delta_(s,t) rows:");
    for row in delta.chunks(4) {
        println!("  {:?} (sum {:.12})", row.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>(), row.iter().sum::<f64>());
    }

    let map = ExactFlowMap { denoiser: den.clone(), fine_steps: DEFAULT_FINE_STEPS };
    println!("semigroup residual {:.2e}", semigroup_residual(&map, &x, &[s], &[u], &[t])?);

    let exact = Tensor::new(vec![2, 4], exact_flow_map(&den, x.data(), s, t, DEFAULT_FINE_STEPS)?)?;
    assert_eq!(exact, map.apply(&x, &[s], &[t])?);
    let d = Tensor::new(vec![2, 4], den.denoise_one(x.data(), s)?)?;
    let euler = euler_step(&x, &d, &[s], &[t], 2);
    println!("one Euler step misses the flow by {:.3}", euler.max_abs_diff(&exact));
    Ok(())
}
