//! Runs the helpful-bounds audit on a fresh Good-Properties initialization and
//! again on a deliberately broken copy.

use ntklab::data_synth::{generate_dataset, NoiseModel, TeacherSpec};
use ntklab::diagnostics::{audit, AuditContext, DiagnosticsConfig};
use ntklab::model::{forward, init_model, ModelConfig};

fn main() -> ntklab::Result<()> {
    let cfg = ModelConfig::new(2, 128, 3, 3).with_seed(4);
    let state = init_model(&cfg);
    let teacher = TeacherSpec::new(ModelConfig::new(1, 32, 3, 3).with_omega(1.0), 8);
    let ds = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.1), 6, 3, 3, 9)?;

    let trace = forward(&state, &ds)?;
    let report = audit(&state, &trace, &ds, AuditContext::default(), &DiagnosticsConfig::default())?;
    print!("{}", report.to_text());

    let mut broken = state.clone();
    broken.layers[0].w *= 50.0;
    let trace = forward(&broken, &ds)?;
    let ctx = AuditContext { initial: Some(&state), log: None };
    let report = audit(&broken, &trace, &ds, ctx, &DiagnosticsConfig::default())?;
    println!("\nafter inflating W of block 1: failing checks {:?}", report.failures());
    Ok(())
}
