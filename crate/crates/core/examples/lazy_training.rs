//! Trains one-block students of increasing width on the same data and prints
//! how far weights and kernels move, the convergence rate against its kernel
//! prediction, and the Weyl-bound audit of the tangent kernel.
//!
//! ```text
//! cargo run --release --example lazy_training
//! ```

use ntklab::data_synth::{generate_dataset, NoiseModel, TeacherSpec};
use ntklab::kernel::KernelKind;
use ntklab::model::{init_model, ModelConfig};
use ntklab::training::{fit_convergence, predicted_rate, suggest_eta, train, TrainConfig};

fn main() -> ntklab::Result<()> {
    let (l, d, n) = (2, 8, 8);
    let teacher = TeacherSpec::new(ModelConfig::new(1, 32, d, l).with_omega(1.0), 5);
    let ds = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.1), n, l, d, 6)?;

    println!("{:>6} {:>10} {:>10} {:>11} {:>10} {:>10} {:>8}", "m", "loss T/0", "w radius", "kern drift", "rate", "predicted", "weyl");
    for m in [64, 256, 1024] {
        let init = init_model(&ModelConfig::new(1, m, d, l).with_omega(1.0).with_seed(1));
        let eta = suggest_eta(&init, &ds)?;
        let mut tc = TrainConfig::new(eta, 400.0 * eta);
        tc.probe_every = 20;
        tc.audit_kernel = Some(KernelKind::Full);
        let (_, log) = train(&init, &ds, &tc)?;

        let last = log.probes.last().expect("at least one probe");
        let fit = fit_convergence(&log, None)?;
        let weyl = log.probes.iter().flat_map(|p| &p.audits).all(|a| a.weyl_ok);
        println!(
            "{m:>6} {:>10.3e} {:>10.4} {:>11.4e} {:>10.4e} {:>10.4e} {:>8}",
            log.final_loss().unwrap() / log.initial_loss().unwrap(),
            log.max_w_radius(),
            last.audits[0].frob_drift,
            fit.alpha_hat,
            predicted_rate(&init, &ds)?,
            weyl
        );
    }
    Ok(())
}
