//! Draw new speakers from the fitted space and write them as checkpoints.
//!
//! ```bash
//! cargo run --release --example sample_speakers
//! ```

use eigenmerge::ckptio::CheckpointReader;
use eigenmerge::editor::{synthesize_to_file, SynthesisRecipe};
use eigenmerge::eigenspace::{fit_basis, sample_coeff, FitOptions};
use eigenmerge::synthgen::{pretrained, task_vectors, CorpusSpec};
use eigenmerge::taskvec::{derive_schema, FlatVector};
use eigenmerge::PROVENANCE_KEY;

pub fn run() -> eigenmerge::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = CorpusSpec::with_param_count(5, 20_000);
    let pre = pretrained(&spec)?;
    let schema = derive_schema(&pre, &spec.trainable_filter())?;
    let vectors: Vec<FlatVector> = task_vectors(&spec)?
        .into_iter()
        .map(|v| FlatVector::new(v, schema.fingerprint()))
        .collect();
    let labels: Vec<String> = (0..spec.n_speakers).map(|i| spec.label(i)).collect();
    let basis = fit_basis(&vectors, &labels, &FitOptions::default())?;

    for w in sample_coeff(42, &basis, 3) {
        let recipe = SynthesisRecipe::new(&basis, w, Some(42))?;
        let label = recipe.coeff.label.clone().unwrap_or_default();
        let path = dir.path().join(format!("{label}.evc"));
        synthesize_to_file(&basis, &recipe, &pre, &schema, &path)?;
        let reader = CheckpointReader::open(&path)?;
        println!("{label}: |w| = {:.3}", recipe.coeff.norm());
        println!("  provenance {}", reader.metadata()[PROVENANCE_KEY]);
    }
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
