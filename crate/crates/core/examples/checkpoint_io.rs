//! Write a checkpoint, read one tensor lazily, and compare two layouts.
//!
//! ```bash
//! cargo run --example checkpoint_io
//! ```

use eigenmerge::ckptio::{diff_schemas, CheckpointReader, Tensor};
use eigenmerge::{write_checkpoint, Checkpoint};

pub fn run() -> eigenmerge::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut ckpt = Checkpoint::new();
    ckpt.insert(
        "decoder.weight",
        Tensor::from_f32(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25])?,
    )?;
    ckpt.insert(
        "decoder.bias",
        Tensor::from_f64(vec![3], vec![0.1, 0.2, 0.3])?,
    )?;
    ckpt.metadata.insert("origin".into(), "example".into());

    let path = dir.path().join("model.evc");
    write_checkpoint(&ckpt, &path)?;
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0)
    );

    let reader = CheckpointReader::open(&path)?;
    for (name, info) in reader.infos() {
        println!("  {name}: {} {:?}", info.dtype, info.shape);
    }
    let bias = reader.read_tensor("decoder.bias")?;
    println!("decoder.bias = {:?}", bias.to_f64_vec());

    let mut other = reader.read_all()?;
    other.tensors.remove("decoder.bias");
    other.insert("decoder.bias", Tensor::from_f64(vec![1, 3], vec![0.0; 3])?)?;
    let report = diff_schemas(&ckpt, &other);
    for m in &report.mismatches {
        println!(
            "layout change in {}: {:?} -> {:?}",
            m.name, m.a.shape, m.b.shape
        );
    }
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
