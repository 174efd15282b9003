//! Trains the toy DPN on the fine/coarse mixture and prints accuracy,
//! routing statistics and the FLOPs ratio.
//!
//! `cargo run --release --example train_toy -- [config.json] [out_dir]`

use dpn::harness::{train, ExperimentConfig};

fn main() -> dpn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(1) {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    cfg.output_dir = args.get(2).map_or_else(|| std::env::temp_dir().join("dpn-toy"), Into::into);
    let start = std::time::Instant::now();
    let (out, files) = train(&cfg)?;
    let r = &out.final_eval;
    println!("trained {} steps in {:.1}s", cfg.optimizer.steps, start.elapsed().as_secs_f64());
    for (tag, (c, t)) in &r.accuracy.per_tag {
        println!(
            "{:<7} accuracy {c}/{t}  expected compression {:.3}",
            tag.as_str(),
            r.mean_expected_compression[tag]
        );
    }
    println!("mean FLOPs ratio {:.4}", r.flops.mean_ratio);
    print!("{}", r.routing.table());
    println!("metrics in {}", files.metrics.display());
    Ok(())
}
