//! Compares a trained finite-width student with the infinite-width
//! kernel-regression predictor on held-out inputs, over growing width.
//!
//! ```text
//! cargo run --release --example ntk_regression
//! ```

use ntklab::data_synth::{generate_dataset, NoiseModel, TeacherSpec};
use ntklab::model::{init_model, ModelConfig};
use ntklab::ntk_regression::{centred_targets, fit_targets, student_discrepancy, Layout};
use ntklab::training::{suggest_eta, train, TrainConfig};

fn main() -> ntklab::Result<()> {
    let (l, d, n) = (2, 8, 8);
    let teacher = TeacherSpec::new(ModelConfig::new(1, 32, d, l).with_omega(1.0), 5);
    let ds = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.1), n, l, d, 6)?;
    let held = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.0), 16, l, d, 7)?;

    for m in [256, 1024, 4096] {
        let init = init_model(&ModelConfig::new(1, m, d, l).with_omega(1.0).with_seed(1));
        let eta = suggest_eta(&init, &ds)?;
        let (student, log) = train(&init, &ds, &TrainConfig::new(eta, 1000.0 * eta))?;
        let p = fit_targets(ds.inputs(), &centred_targets(&init, &ds)?, init.config.epsilon, Layout::Pooled)?;
        println!(
            "m = {m:>5}: train loss {:.2e}, gram condition {:.1}, discrepancy {:.4}",
            log.final_loss().unwrap(),
            p.grams[0].condition,
            student_discrepancy(&student, &init, &p, held.inputs())?
        );
    }
    Ok(())
}
