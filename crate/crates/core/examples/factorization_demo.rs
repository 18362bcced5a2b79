//! Two cities, two tokens each: a sampler that fills positions
//! independently mixes them up; the exact flow does not.
//!
//!     cargo run --release --example factorization_demo

use flowlm::toy_oracle::{factorization_table, ToySpec};

fn main() -> flowlm::Result<()> {
    let spec = ToySpec::default();
    let rows = factorization_table(&spec, 10_000, 1024, 2, 0)?;
    println!("{:<12} {:>8} {:>10} {:>10}", "outcome", "flow", "1-step", "2-step");
    for r in rows {
        println!(
            "{:<12} {:>8.4} {:>10.4} {:>10.4}",
            spec.vocab.render(&r.outcome),
            r.flow,
            r.baseline_one_step,
            r.baseline_many_step
        );
    }
    Ok(())
}
