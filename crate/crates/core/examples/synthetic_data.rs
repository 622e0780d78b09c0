//! Draws a teacher-labelled dataset and shows the flat `(sample, position)`
//! indexing the kernels use.

use ntklab::data_synth::{generate_dataset, rearrange, NoiseModel, TeacherSpec};
use ntklab::model::ModelConfig;

fn main() -> ntklab::Result<()> {
    let teacher = TeacherSpec::new(ModelConfig::new(1, 32, 3, 4).with_omega(1.0), 7);
    let ds = generate_dataset(&teacher, &NoiseModel::uniform(0.05), 3, 4, 3, 42)?;
    println!("n = {}, L = {}, d = {}", ds.n(), ds.seq_len(), ds.dim());

    let x = ds.input(0).as_matrix();
    for (l, row) in x.row_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:+.4}")).collect();
        println!("X[0][{l}] = [{}]  norm {:.6}", vals.join(", "), row.norm());
    }

    // The first k samples of a larger draw with the same seed are the k-sample draw.
    let bigger = generate_dataset(&teacher, &NoiseModel::uniform(0.05), 6, 4, 3, 42)?;
    assert_eq!(bigger.input(2), ds.input(2));
    println!("datasets drawn from one seed are nested");

    let view = rearrange(&ds);
    // Positions are one-based, as are the (sample, token) pairs they map to.
    for p in [1, 6, view.len()] {
        let (i, l) = view.locate(p);
        let e = view.entry(p);
        println!("flat position {p} is sample {i}, token {l}; the model sees {} tokens", e.prefix.nrows());
    }
    Ok(())
}
