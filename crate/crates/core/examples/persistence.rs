//! Saves a model and its dataset to the binary snapshot format and reloads them.

use ntklab::data_synth::{generate_dataset, NoiseModel, TeacherSpec};
use ntklab::model::{forward, init_model, loss, ModelConfig};
use ntklab::persist::{load_dataset, load_model, save_dataset, save_model};

fn main() -> ntklab::Result<()> {
    let dir = std::env::temp_dir().join(format!("ntklab-persist-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let state = init_model(&ModelConfig::new(2, 16, 3, 4).with_seed(1));
    let teacher = TeacherSpec::new(ModelConfig::new(1, 8, 3, 4), 2);
    let ds = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.2), 5, 4, 3, 3)?;

    save_model(&state, &dir.join("model.bin"))?;
    save_dataset(&ds, &dir.join("dataset.bin"))?;
    let state2 = load_model(&dir.join("model.bin"))?;
    let ds2 = load_dataset(&dir.join("dataset.bin"))?;

    assert_eq!(state2.checksum(), state.checksum());
    let (a, b) = (loss(&forward(&state, &ds)?, &ds), loss(&forward(&state2, &ds2)?, &ds2));
    println!("loss before save {a:?}, after reload {b:?}, identical: {}", a.to_bits() == b.to_bits());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
