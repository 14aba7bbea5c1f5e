//! Prints tollbooth batch statistics for every method.
//!
//! `cargo run --release -p klgame --example tollbooth -- [trials] [seed] [two-mode]`

use klgame::sim::{run_batch, Method, ScenarioSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let trials: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let two_mode = args.next().is_some_and(|s| s == "two-mode");
    let spec = if two_mode { ScenarioSpec::tollbooth_two_mode() } else { ScenarioSpec::tollbooth() };
    println!("{:<10} {:>6} {:>6} {:>8} {:>9} {:>9} {:>5}", "method", "CR", "SR", "prog", "cost", "min_d", "fail");
    for method in Method::ALL {
        let start = std::time::Instant::now();
        let b = run_batch(&spec, method, trials, seed)?;
        let s = &b.stats;
        println!(
            "{:<10} {:>6.2} {:>6.2} {:>8.2} {:>9.3} {:>9.2} {:>5}  ({:.1}s)",
            method.name(),
            s.coordination_rate.mean,
            s.safety_rate.mean,
            s.progress.mean,
            s.cost.mean,
            s.min_distance.mean,
            s.failures,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
