//! Compare sampled speakers with their nearest base speaker by cosine similarity.
//!
//! ```bash
//! cargo run --release --example similarity_report
//! ```

use eigenmerge::analysis::{max_similarity_report, NamedVector};
use eigenmerge::eigenspace::{fit_basis, reconstruct, sample_coeff, FitOptions};
use eigenmerge::synthgen::{task_vectors, CorpusSpec};
use eigenmerge::taskvec::FlatVector;

pub fn run() -> eigenmerge::Result<()> {
    let spec = CorpusSpec::with_param_count(4, 20_000);
    let vectors: Vec<FlatVector> = task_vectors(&spec)?
        .into_iter()
        .map(|v| FlatVector::new(v, 1))
        .collect();
    let labels: Vec<String> = (0..spec.n_speakers).map(|i| spec.label(i)).collect();
    let basis = fit_basis(&vectors, &labels, &FitOptions::default())?;

    let generated = sample_coeff(42, &basis, 20)
        .into_iter()
        .map(|w| {
            let tau = basis.destandardize(&reconstruct(&basis, &w)?)?;
            Ok(NamedVector::new(w.label.unwrap_or_default(), tau.values))
        })
        .collect::<eigenmerge::Result<Vec<_>>>()?;
    let bases: Vec<NamedVector> = labels
        .iter()
        .zip(vectors)
        .map(|(l, v)| NamedVector::new(l.clone(), v.values))
        .collect();

    let report = max_similarity_report(&generated, &bases)?;
    let s = &report.summary;
    println!(
        "nearest-base similarity: min {:.3} mean {:.3} max {:.3}",
        s.min, s.mean, s.max
    );
    for line in report.to_csv()?.lines().take(4) {
        println!("{}", line.chars().take(100).collect::<String>());
    }
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
