//! Fit a speaker space from a synthetic corpus and inspect its spectrum.
//!
//! ```bash
//! cargo run --release --example fit_speaker_space
//! ```

use eigenmerge::ckptio::CheckpointReader;
use eigenmerge::eigenspace::{fit_basis, FitOptions, SpeakerBasis};
use eigenmerge::synthgen::{generate_corpus, CorpusSpec};
use eigenmerge::taskvec::{derive_schema_from_infos, extract_task_vector};

pub fn run() -> eigenmerge::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = generate_corpus(&CorpusSpec::with_param_count(11, 20_000), dir.path())?;
    let pre = CheckpointReader::open(dir.path().join(&manifest.pre))?;
    let schema = derive_schema_from_infos(&pre.infos(), &manifest.filter)?;

    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for speaker in &manifest.speakers {
        let ft = CheckpointReader::open(dir.path().join(&speaker.path))?;
        vectors.push(extract_task_vector(&ft, &pre, &schema)?);
        labels.push(speaker.label.clone());
    }

    let options = FitOptions {
        chunk_size: 1 << 14,
        ..FitOptions::default()
    };
    let basis = fit_basis(&vectors, &labels, &options)?;
    println!(
        "rank {} from {} speakers of dimension {}",
        basis.rank(),
        basis.n_speakers(),
        basis.dim()
    );
    for (j, s) in basis.sigma().iter().enumerate() {
        println!("  sigma[{j}] = {s:.4}");
    }
    println!("orthonormality error {:.2e}", basis.orthonormality_error());

    let out = dir.path().join("basis");
    basis.save(&out)?;
    let reloaded = SpeakerBasis::load(&out)?;
    println!("reloaded basis {:016x}", reloaded.basis_id());
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
