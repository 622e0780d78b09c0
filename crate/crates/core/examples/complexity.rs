//! Compares operation counts of the forward pass with measured wall time.

use std::time::Instant;

use ntklab::data_synth::{generate_dataset, NoiseModel, TeacherSpec};
use ntklab::model::{forward, init_model, ModelConfig};
use ntklab::scaling_law::compute_cost;

fn main() -> ntklab::Result<()> {
    let teacher = TeacherSpec::new(ModelConfig::new(1, 8, 4, 8).with_omega(1.0), 1);
    let ds = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.0), 16, 8, 4, 2)?;
    for (n_layers, m) in [(1, 64), (2, 128), (4, 256)] {
        let state = init_model(&ModelConfig::new(n_layers, m, 4, 8).with_seed(3));
        let cost = compute_cost(n_layers, m, 4, 8, ds.n());
        let start = Instant::now();
        for _ in 0..20 {
            forward(&state, &ds)?;
        }
        let per = start.elapsed() / 20;
        println!("N = {n_layers}, m = {m:>3}: N L m d n = {:>8.0}, total ops {:>9.0}, forward {per:?}", cost.leading, cost.total);
    }
    Ok(())
}
