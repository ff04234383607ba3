//! Generates the 10-class synthetic task and reloads it from disk.

use odimo::data::{gen_synthetic, load_dataset, Split, SyntheticSpec};

fn main() -> odimo::Result<()> {
    let spec = SyntheticSpec::new(10, 2000, 7);
    let data = gen_synthetic(&spec)?;
    let dir = std::env::temp_dir().join("odimo_example_data");
    data.save(&dir)?;
    let back = load_dataset(&dir)?;
    println!(
        "{} samples of shape {:?}, {} classes, {} train / {} val",
        back.len(),
        back.shape,
        back.classes(),
        back.indices(Split::Train).len(),
        back.indices(Split::Val).len()
    );
    println!("written to {}", dir.display());
    Ok(())
}
