//! Blend two fine-tuned models and watch the distance to each endpoint.
//!
//! ```bash
//! cargo run --release --example interpolate_models
//! ```

use eigenmerge::editor::interpolate_models;
use eigenmerge::synthgen::{pretrained, task_vectors, CorpusSpec};
use eigenmerge::taskvec::{apply_task_vector, derive_schema, extract_task_vector, FlatVector};

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn run() -> eigenmerge::Result<()> {
    let spec = CorpusSpec::with_param_count(3, 10_000);
    let pre = pretrained(&spec)?;
    let schema = derive_schema(&pre, &spec.trainable_filter())?;
    let taus = task_vectors(&spec)?;
    let a = apply_task_vector(
        &pre,
        &FlatVector::new(taus[0].clone(), schema.fingerprint()),
        1.0,
        &schema,
    )?;
    let b = apply_task_vector(
        &pre,
        &FlatVector::new(taus[9].clone(), schema.fingerprint()),
        1.0,
        &schema,
    )?;
    let ta = extract_task_vector(&a, &pre, &schema)?;
    let tb = extract_task_vector(&b, &pre, &schema)?;

    println!("alpha   |θ-θA|   |θ-θB|");
    for alpha in [-0.5, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5] {
        let mixed = interpolate_models(&a, &b, &pre, alpha, &schema)?;
        let t = extract_task_vector(&mixed, &pre, &schema)?;
        println!(
            "{alpha:>5}  {:>7.4}  {:>7.4}",
            distance(&t.values, &ta.values),
            distance(&t.values, &tb.values)
        );
    }
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
