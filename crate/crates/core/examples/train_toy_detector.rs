//! Retrains the bundled toy detector and writes it to
//! `assets/toy_detector.weights`.
//!
//! cargo run --release -p advpatch-core --example train_toy_detector [steps]

use std::path::PathBuf;
use std::time::Instant;

use advpatch_core::detector::{darknet, toy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = toy::ToyTrainConfig::default();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.steps = steps.parse()?;
    }
    let start = Instant::now();
    let mut window = 0.0;
    let net = toy::train(&cfg, |step, loss| {
        window += loss;
        if (step + 1) % 50 == 0 {
            println!(
                "step {:>5}  loss {:>9.4}  {:>6.0}s",
                step + 1,
                window / 50.0,
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    })?;
    let out = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/toy_detector.weights");
    std::fs::write(&out, darknet::save_to_bytes(&net))?;
    println!("wrote {}", out.display());
    Ok(())
}
