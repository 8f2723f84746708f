//! Negate the first coefficient of a base speaker and read the planted attribute back.
//!
//! ```bash
//! cargo run --release --example flip_dominant_axis
//! ```

use eigenmerge::editor::{flip_axis, synthesize_checkpoint};
use eigenmerge::eigenspace::{fit_basis, FitOptions, SpeakerCoeff};
use eigenmerge::synthgen::{planted_direction, pretrained, task_vectors, CorpusSpec};
use eigenmerge::taskvec::{derive_schema, extract_task_vector, FlatVector};

pub fn run() -> eigenmerge::Result<()> {
    let spec = CorpusSpec::with_param_count(2, 20_000);
    let pre = pretrained(&spec)?;
    let schema = derive_schema(&pre, &spec.trainable_filter())?;
    let vectors: Vec<FlatVector> = task_vectors(&spec)?
        .into_iter()
        .map(|v| FlatVector::new(v, schema.fingerprint()))
        .collect();
    let labels: Vec<String> = (0..spec.n_speakers).map(|i| spec.label(i)).collect();
    let basis = fit_basis(&vectors, &labels, &FitOptions::default())?;
    let planted = planted_direction(&spec);

    let readout = |w: &SpeakerCoeff| -> eigenmerge::Result<f64> {
        let ckpt = synthesize_checkpoint(&basis, w, &pre, &schema, None)?;
        let tau = extract_task_vector(&ckpt, &pre, &schema)?;
        Ok(tau.values.iter().zip(&planted).map(|(a, b)| a * b).sum())
    };

    for (i, w) in basis.coeffs().iter().enumerate().step_by(3) {
        let flipped = flip_axis(w, 0)?;
        println!(
            "{} (group {}): w0 {:+.3} readout {:+.3} | flipped readout {:+.3}",
            labels[i],
            if spec.group_sign(i) > 0.0 { "A" } else { "B" },
            w.values[0],
            readout(w)?,
            readout(&flipped)?
        );
    }
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
