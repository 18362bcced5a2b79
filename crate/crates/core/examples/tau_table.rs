//! Decoding error rate and the warp it induces, for a few vocabulary sizes.
//!
//!     cargo run --release --example tau_table

use flowlm::time_warp::{build_time_warp, decoding_error_rate, sampling_grid};

fn main() -> flowlm::Result<()> {
    let sizes = [2usize, 16, 1024, 30522];
    println!("{:>5} {}", "t", sizes.map(|v| format!("{:>14}", format!("P_e/tau V={v}"))).join(""));
    let warps = sizes.iter().map(|&v| build_time_warp(v)).collect::<flowlm::Result<Vec<_>>>()?;
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let mut line = format!("{t:>5.2}");
        for (&v, w) in sizes.iter().zip(&warps) {
            line += &format!("   {:.3}/{:.3}", decoding_error_rate(t, v)?, w.tau_forward(t)?);
        }
        println!("{line}");
    }
    for (&v, w) in sizes.iter().zip(&warps) {
        let grid: Vec<String> = sampling_grid(w, 8)?.iter().map(|t| format!("{t:.3}")).collect();
        println!("V={v:>5}: 8-step grid {}", grid.join(" "));
    }
    Ok(())
}
