//! Checks the exact reverse-mode gradient against central differences on a
//! three-block model, then reports how far the layerwise analytic engine drifts
//! from it below the top block.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use ntklab::data_synth::{generate_dataset, NoiseModel, TeacherSpec};
use ntklab::grad::{fd_battery, fd_max_error, grad_divergence_report, grad_exact, FdSettings};
use ntklab::model::{forward, init_model, ModelConfig};

fn main() -> ntklab::Result<()> {
    let cfg = ModelConfig::new(3, 32, 4, 4).with_omega(1.0).with_seed(11);
    let state = init_model(&cfg);
    let teacher = TeacherSpec::new(ModelConfig::new(1, 16, 4, 4).with_omega(1.0), 3);
    let ds = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.1), 4, 4, 4, 5)?;

    let trace = forward(&state, &ds)?;
    let g = grad_exact(&state, &trace, &ds)?;
    let records = fd_battery(&state, &ds, &g, &FdSettings { seed: 1, ..FdSettings::default() })?;
    let kinks = records.iter().filter(|r| r.near_kink).count();
    println!(
        "{} coordinates checked, {kinks} skipped near a ReLU kink, max relative error {:.3e}",
        records.len(),
        fd_max_error(&records)
    );

    println!("\nanalytic engine vs exact, per block:");
    print!("{}", grad_divergence_report(&state, &trace, &ds)?.to_text());
    Ok(())
}
