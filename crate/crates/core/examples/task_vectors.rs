//! Extract a task vector over a filtered subset and apply it at several strengths.
//!
//! ```bash
//! cargo run --example task_vectors
//! ```

use eigenmerge::ckptio::Tensor;
use eigenmerge::taskvec::{apply_task_vector, derive_schema, extract_task_vector, ParamFilter};
use eigenmerge::Checkpoint;

fn model(weight: [f64; 4], embed: f64) -> eigenmerge::Result<Checkpoint> {
    Checkpoint::from_entries([
        (
            "decoder.weight".to_string(),
            Tensor::from_f64(vec![2, 2], weight.to_vec())?,
        ),
        (
            "encoder.embed".to_string(),
            Tensor::from_f64(vec![2], vec![embed; 2])?,
        ),
    ])
}

pub fn run() -> eigenmerge::Result<()> {
    let pre = model([1.0, 0.0, 0.0, 1.0], 0.5)?;
    let tuned = model([1.5, 0.25, -0.5, 1.0], 0.5)?;

    let filter = ParamFilter::new(["decoder.*"], ["*.bias"]);
    let schema = derive_schema(&pre, &filter)?;
    println!(
        "schema: {} scalars, fingerprint {:016x}",
        schema.total_dim(),
        schema.fingerprint()
    );

    let tau = extract_task_vector(&tuned, &pre, &schema)?;
    println!("tau = {:?}", tau.values);

    for alpha in [0.0, 0.5, 1.0, 2.0] {
        let edited = apply_task_vector(&pre, &tau, alpha, &schema)?;
        let w = edited
            .get("decoder.weight")
            .map(|t| t.to_f64_vec())
            .unwrap_or_default();
        println!("alpha {alpha:>3}: decoder.weight = {w:?}");
    }
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
