//! The command-line pipeline, driven in-process.
//!
//! ```bash
//! cargo run --release --example end_to_end
//! ```

use eigenmerge::cli;

pub fn run() -> eigenmerge::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path().to_string_lossy().into_owned();
    let corpus = format!("{root}/corpus");
    let manifest = format!("{corpus}/manifest.json");
    let ws = format!("{root}/ws");

    let steps: Vec<Vec<&str>> = vec![
        vec![
            "synthgen",
            "--out",
            &corpus,
            "--seed",
            "7",
            "--param-count",
            "20000",
        ],
        vec!["--workspace", &ws, "extract", "--manifest", &manifest],
        vec!["--workspace", &ws, "fit"],
        vec!["--workspace", &ws, "sample", "--count", "5", "--seed", "42"],
        vec!["--workspace", &ws, "synth", "--manifest", &manifest],
        vec![
            "--workspace",
            &ws,
            "report",
            "similarity",
            "--manifest",
            &manifest,
        ],
        vec!["--workspace", &ws, "report", "scatter"],
    ];
    for step in steps {
        println!("$ eigenmerge {}", step.join(" "));
        let code = cli::run(std::iter::once("eigenmerge").chain(step.iter().copied()));
        if code != 0 {
            return Err(eigenmerge::Error::Invalid(format!(
                "step exited with {code}"
            )));
        }
    }
    let csv = std::fs::read_to_string(format!("{ws}/reports/similarity.csv"))
        .map_err(|e| eigenmerge::Error::Invalid(e.to_string()))?;
    println!("{} similarity rows", csv.lines().count() - 1);
    Ok(())
}

fn main() -> eigenmerge::Result<()> {
    run()
}
