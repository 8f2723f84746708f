#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eigenmerge::ckptio::{CheckpointReader, DType, Tensor};
use eigenmerge::synthgen::{generate_corpus, CorpusSpec, Manifest};
use eigenmerge::taskvec::{
    derive_schema_from_infos, extract_task_vector, FlatVector, FlattenSchema,
};
use eigenmerge::Checkpoint;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eigenmerge"))
}

/// Runs the CLI inside `cwd` and returns its output.
pub fn run_cli(cwd: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn eigenmerge")
}

pub fn run_ok(cwd: &Path, args: &[&str]) -> Output {
    let out = run_cli(cwd, args);
    assert!(
        out.status.success(),
        "eigenmerge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha20Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random checkpoint with up to `max_tensors` tensors of rank 0..=4 and at most 1000 elements each.
pub fn random_checkpoint(rng: &mut ChaCha20Rng, max_tensors: usize) -> Checkpoint {
    let count = rng.random_range(1..=max_tensors);
    let mut ckpt = Checkpoint::new();
    while ckpt.tensors.len() < count {
        let rank = rng.random_range(0..=4usize);
        let max_dim = [1u64, 1000, 31, 10, 5][rank];
        let shape: Vec<u64> = (0..rank).map(|_| rng.random_range(0..=max_dim)).collect();
        let n: usize = shape.iter().product::<u64>() as usize;
        let name = format!(
            "t{}.{}",
            rng.random_range(0..1000u32),
            ["w", "b", "g"][rng.random_range(0..3)]
        );
        let tensor = if rng.random_bool(0.5) {
            Tensor::from_f32(
                shape,
                (0..n).map(|_| f32::from_bits(rng.random())).collect(),
            )
            .unwrap()
        } else {
            Tensor::from_f64(
                shape,
                (0..n).map(|_| f64::from_bits(rng.random())).collect(),
            )
            .unwrap()
        };
        if !ckpt.tensors.contains_key(&name) {
            ckpt.insert(name, tensor).unwrap();
        }
    }
    for i in 0..rng.random_range(0..3) {
        ckpt.metadata
            .insert(format!("key{i}"), format!("value {}", rng.random::<u32>()));
    }
    ckpt
}

/// Singular values of the `M × N` matrix whose columns are `columns`, via a dense SVD, descending.
pub fn dense_singular_values(columns: &[Vec<f64>]) -> Vec<f64> {
    let m = columns[0].len();
    let a = DMatrix::from_fn(m, columns.len(), |r, c| columns[c][r]);
    let mut s: Vec<f64> = a
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got
        .iter()
        .zip(want)
        .map(|(g, w)| (g - w).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub schema: FlattenSchema,
    pub labels: Vec<String>,
    pub vectors: Vec<FlatVector>,
}

impl Corpus {
    pub fn pre(&self) -> CheckpointReader {
        CheckpointReader::open(self.dir.join(&self.manifest.pre)).unwrap()
    }

    pub fn speaker(&self, i: usize) -> CheckpointReader {
        CheckpointReader::open(self.dir.join(&self.manifest.speakers[i].path)).unwrap()
    }
}

/// Writes a synthetic corpus into `dir` and extracts its task vectors.
pub fn build_corpus(spec: &CorpusSpec, dir: &Path) -> Corpus {
    let manifest = generate_corpus(spec, dir).unwrap();
    let pre = CheckpointReader::open(dir.join(&manifest.pre)).unwrap();
    let schema = derive_schema_from_infos(&pre.infos(), &manifest.filter).unwrap();
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for s in &manifest.speakers {
        let ft = CheckpointReader::open(dir.join(&s.path)).unwrap();
        vectors.push(extract_task_vector(&ft, &pre, &schema).unwrap());
        labels.push(s.label.clone());
    }
    Corpus {
        dir: dir.to_path_buf(),
        manifest,
        schema,
        labels,
        vectors,
    }
}

/// Small corpus layout for fast tests.
pub fn small_spec(seed: u64, dtype: DType) -> CorpusSpec {
    let mut spec = CorpusSpec::with_param_count(seed, 2_000);
    spec.dtype = dtype;
    spec
}
