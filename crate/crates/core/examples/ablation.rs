//! Trains each requested variant over several seeds on in-memory phantoms
//! and prints sensitivity at 4 FPs/image, overall and per size bucket.
//!
//! ```text
//! cargo run --release -p msb-core --example ablation -- configs/desk_ablation.toml fpn,fpn+msb 0,1,2,3,4
//! ```

use std::path::Path;
use std::time::Instant;

use msb_core::config::{ModelVariant, RunConfig};
use msb_core::experiment::{evaluate_detector, synthesize_split, train_detector};
use msb_core::synth::Split;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map(String::as_str).unwrap_or("configs/desk_ablation.toml");
    let base = RunConfig::load(Path::new(path))?;
    let variants: Vec<ModelVariant> = match args.get(1) {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![ModelVariant::Fpn, ModelVariant::FpnMsb],
    };
    let seeds: Vec<u64> = match args.get(2) {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![0],
    };

    let t = Instant::now();
    let train = synthesize_split(&base, Split::Train)?;
    let test = synthesize_split(&base, Split::Test)?;
    eprintln!(
        "data: {} train / {} test images, {:.1}s",
        train.samples.len(),
        test.samples.len(),
        t.elapsed().as_secs_f64()
    );

    for variant in &variants {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.model.variant = *variant;
            cfg.seed = seed;
            let t = Instant::now();
            let mut last_epoch = usize::MAX;
            let (det, log) = train_detector(&cfg, &train, |r| {
                if r.epoch != last_epoch {
                    last_epoch = r.epoch;
                    eprintln!("  epoch {} iter {} loss {:.4}", r.epoch, r.iteration, r.loss);
                }
            })?;
            let train_s = t.elapsed().as_secs_f64();
            let (_, report) = evaluate_detector(&cfg, &det, &test)?;
            let at4 = report
                .fp_rates
                .iter()
                .position(|&r| r == 4.0)
                .map_or(f64::NAN, |i| report.sensitivities[i]);
            let buckets: Vec<String> = report
                .size_buckets
                .buckets
                .iter()
                .map(|b| format!("{}:{}/{}", b.label, b.matched, b.total))
                .collect();
            println!(
                "{variant} seed {seed}: final loss {:.4}, sens@4 {at4:.3}, sens {:?}, buckets [{}], train {train_s:.0}s",
                log.last().map_or(f64::NAN, |r| r.loss),
                report.sensitivities,
                buckets.join(" ")
            );
        }
    }
    Ok(())
}
