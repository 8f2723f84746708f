//! Synthetic checkpoint corpora with a planted binary factor.
//!
//! Speaker `i` gets the task vector
//!
//! ```text
//! τ_i = s_i g u_g + Σ_k z_ik u_k + ε_i
//! ```
//!
//! where `u_g` and `u_k` are fixed random unit vectors, `s_i = +1` for group A and `-1` for
//! group B, `z_ik ~ N(0, 1)` and `ε_i ~ N(0, noise²/M)` per component. With a strong factor the
//! first axis of the fitted speaker space separates the two groups, which makes the dominant-axis
//! behaviour checkable against ground truth.
//!
//! All randomness comes from `ChaCha20Rng::seed_from_u64(seed)` with one stream per role (see the
//! `STREAM_*` constants), so each ingredient can be regenerated independently.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ckptio::{element_count, write_checkpoint, Checkpoint, DType, Tensor};
use crate::eigenspace::SpeakerBasis;
use crate::error::{Error, Result};
use crate::taskvec::{derive_schema_from_infos, ParamFilter};

pub const STREAM_PRETRAINED: u64 = 0;
pub const STREAM_PLANTED: u64 = 1;
pub const STREAM_LATENT: u64 = 2;
/// Speaker `i` draws from stream `STREAM_SPEAKER_BASE + i`.
pub const STREAM_SPEAKER_BASE: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Trainable parameter count M; must equal the element total of `tensor_layout`.
    pub param_count: usize,
    pub n_speakers: usize,
    pub group_split: (usize, usize),
    pub factor_strength: f64,
    pub latent_dims: usize,
    pub noise_scale: f64,
    /// Trainable tensors realizing M.
    pub tensor_layout: Vec<(String, Vec<u64>)>,
    /// Extra tensors shared verbatim by every checkpoint.
    #[serde(default)]
    pub frozen_layout: Vec<(String, Vec<u64>)>,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

fn default_dtype() -> DType {
    DType::F64
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            param_count: 100_000,
            n_speakers: 10,
            group_split: (5, 5),
            factor_strength: 3.0,
            latent_dims: 4,
            noise_scale: 0.1,
            tensor_layout: vec![
                ("dec.layer0.bias".into(), vec![400]),
                ("dec.layer0.weight".into(), vec![100, 400]),
                ("dec.layer1.weight".into(), vec![400, 100]),
                ("va.proj.bias".into(), vec![100]),
                ("va.proj.weight".into(), vec![100, 195]),
            ],
            frozen_layout: vec![("enc.embed.weight".into(), vec![64, 32])],
            dtype: DType::F64,
        }
    }
}

impl CorpusSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// A spec with `m` trainable parameters split over two decoder tensors.
    pub fn with_param_count(seed: u64, m: usize) -> Self {
        let quarter = m / 4;
        let mut layout = vec![("dec.out.weight".to_string(), vec![(m - quarter) as u64])];
        if quarter > 0 {
            layout.push(("va.proj.weight".into(), vec![quarter as u64]));
        }
        Self {
            seed,
            param_count: m,
            tensor_layout: layout,
            ..Self::default()
        }
    }

    /// No latent factors and no noise: each task vector is `±g u_g`.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            seed,
            latent_dims: 0,
            noise_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        if self.n_speakers < 2 {
            return invalid(format!("need at least 2 speakers, got {}", self.n_speakers));
        }
        if self.group_split.0 + self.group_split.1 != self.n_speakers {
            return invalid(format!(
                "group split {:?} does not sum to {} speakers",
                self.group_split, self.n_speakers
            ));
        }
        if self.latent_dims >= self.n_speakers {
            return invalid(format!(
                "latent_dims {} must be below the speaker count {}",
                self.latent_dims, self.n_speakers
            ));
        }
        if !(self.factor_strength.is_finite()
            && self.noise_scale.is_finite()
            && self.noise_scale >= 0.0)
        {
            return invalid(
                "factor_strength and noise_scale must be finite, noise non-negative".into(),
            );
        }
        let mut names: Vec<&str> = self
            .tensor_layout
            .iter()
            .chain(&self.frozen_layout)
            .map(|(n, _)| n.as_str())
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty()) {
            return invalid("tensor names must be unique and non-empty".into());
        }
        let total: Option<usize> = self
            .tensor_layout
            .iter()
            .try_fold(0usize, |acc, (_, s)| acc.checked_add(element_count(s)?));
        if total != Some(self.param_count) || self.param_count == 0 {
            return invalid(format!(
                "tensor layout holds {total:?} elements but param_count is {}",
                self.param_count
            ));
        }
        Ok(())
    }

    /// Trainable tensors in flattening order (lexicographic by name).
    fn sorted_layout(&self) -> Vec<(String, Vec<u64>)> {
        let mut layout = self.tensor_layout.clone();
        layout.sort_by(|a, b| a.0.cmp(&b.0));
        layout
    }

    /// Filter selecting exactly the trainable tensors.
    pub fn trainable_filter(&self) -> ParamFilter {
        ParamFilter::new(
            self.sorted_layout()
                .into_iter()
                .map(|(n, _)| glob::Pattern::escape(&n)),
            Vec::<String>::new(),
        )
    }

    pub fn label(&self, i: usize) -> String {
        let width = (self.n_speakers - 1).to_string().len().max(2);
        format!("spk{i:0width$}")
    }

    /// +1 for group A, -1 for group B.
    pub fn group_sign(&self, i: usize) -> f64 {
        if i < self.group_split.0 {
            1.0
        } else {
            -1.0
        }
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normals(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// The planted unit direction `u_g`, in flattening order.
pub fn planted_direction(spec: &CorpusSpec) -> Vec<f64> {
    unit(normals(
        &mut rng(spec.seed, STREAM_PLANTED),
        spec.param_count,
    ))
}

/// Ground-truth task vectors `τ_i`, in flattening order.
pub fn task_vectors(spec: &CorpusSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let m = spec.param_count;
    let planted = planted_direction(spec);
    let mut latent_rng = rng(spec.seed, STREAM_LATENT);
    let latents: Vec<Vec<f64>> = (0..spec.latent_dims)
        .map(|_| unit(normals(&mut latent_rng, m)))
        .collect();
    let noise = spec.noise_scale / (m as f64).sqrt();
    Ok((0..spec.n_speakers)
        .map(|i| {
            let mut r = rng(spec.seed, STREAM_SPEAKER_BASE + i as u64);
            let z = normals(&mut r, spec.latent_dims);
            let eps = normals(&mut r, m);
            let g = spec.group_sign(i) * spec.factor_strength;
            (0..m)
                .map(|k| {
                    let latent: f64 = z.iter().zip(&latents).map(|(zk, u)| zk * u[k]).sum();
                    g * planted[k] + latent + noise * eps[k]
                })
                .collect()
        })
        .collect())
}

/// The pre-trained checkpoint `θ_pre` (standard normal values).
pub fn pretrained(spec: &CorpusSpec) -> Result<Checkpoint> {
    spec.validate()?;
    let mut r = rng(spec.seed, STREAM_PRETRAINED);
    let mut layout = spec.sorted_layout();
    let mut frozen = spec.frozen_layout.clone();
    frozen.sort_by(|a, b| a.0.cmp(&b.0));
    layout.extend(frozen);
    let mut ckpt = Checkpoint::new();
    for (name, shape) in layout {
        let n = element_count(&shape).unwrap_or(0);
        ckpt.insert(
            name,
            Tensor::from_f64_as(spec.dtype, shape, normals(&mut r, n))?,
        )?;
    }
    ckpt.metadata.insert("role".into(), "pretrained".into());
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSpeaker {
    pub path: PathBuf,
    pub label: String,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInfo {
    pub seed: u64,
    pub stream: u64,
}

/// `manifest.json`; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pre: PathBuf,
    pub speakers: Vec<ManifestSpeaker>,
    pub spec: CorpusSpec,
    pub planted: PlantedInfo,
    pub filter: ParamFilter,
    pub schema_fingerprint: String,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((manifest, root))
    }

    pub fn fingerprint(&self) -> Result<u64> {
        u64::from_str_radix(&self.schema_fingerprint, 16)
            .map_err(|e| Error::Format(format!("bad manifest fingerprint: {e}")))
    }

    /// Group sign per speaker label.
    pub fn group_signs(&self) -> BTreeMap<&str, f64> {
        self.speakers
            .iter()
            .map(|s| (s.label.as_str(), if s.group == "A" { 1.0 } else { -1.0 }))
            .collect()
    }
}

/// Writes `pre.evc`, `speakers/<label>.evc` and `manifest.json` under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let speakers_dir = out_dir.join("speakers");
    std::fs::create_dir_all(&speakers_dir).map_err(|e| Error::io(&speakers_dir, e))?;

    let pre = pretrained(spec)?;
    let schema = derive_schema_from_infos(&pre.infos(), &spec.trainable_filter())?;
    write_checkpoint(&pre, out_dir.join("pre.evc"))?;

    let taus = task_vectors(spec)?;
    let mut speakers = Vec::with_capacity(spec.n_speakers);
    for (i, tau) in taus.iter().enumerate() {
        let label = spec.label(i);
        let group = if spec.group_sign(i) > 0.0 { "A" } else { "B" };
        let mut ft = Checkpoint::new();
        for (name, tensor) in &pre.tensors {
            let out = match schema.entry(name) {
                Some(entry) => {
                    let values = tensor
                        .to_f64_vec()
                        .iter()
                        .zip(&tau[entry.range()])
                        .map(|(p, t)| p + t)
                        .collect();
                    Tensor::from_f64_as(spec.dtype, tensor.shape().to_vec(), values)?
                }
                None => tensor.clone(),
            };
            ft.insert(name.clone(), out)?;
        }
        ft.metadata.insert("speaker_id".into(), label.clone());
        ft.metadata.insert("group".into(), group.into());
        let rel = PathBuf::from("speakers").join(format!("{label}.evc"));
        write_checkpoint(&ft, out_dir.join(&rel))?;
        speakers.push(ManifestSpeaker {
            path: rel,
            label,
            group: group.into(),
        });
    }

    let manifest = Manifest {
        pre: PathBuf::from("pre.evc"),
        speakers,
        spec: spec.clone(),
        planted: PlantedInfo {
            seed: spec.seed,
            stream: STREAM_PLANTED,
        },
        filter: spec.trainable_filter(),
        schema_fingerprint: format!("{:016x}", schema.fingerprint()),
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisRecoveryReport {
    /// Speakers whose `sign(w_i[0])` matches their group, under the better global sign.
    pub agreement: usize,
    pub total: usize,
    /// +1 if group A maps to positive `w[0]`, -1 otherwise.
    pub global_sign: i8,
    /// Cosine between the de-standardized first basis column (`std ⊙ U₁`) and `u_g`.
    pub axis_cosine: f64,
}

/// Compares the basis's first axis with the corpus's planted factor.
pub fn verify_axis_recovery(
    manifest: &Manifest,
    basis: &SpeakerBasis,
) -> Result<AxisRecoveryReport> {
    let expected = manifest.fingerprint()?;
    if basis.schema_fingerprint() != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: basis.schema_fingerprint(),
        });
    }
    let signs = manifest.group_signs();
    let mut positive = 0;
    let mut negative = 0;
    for c in basis.coeffs() {
        let label = c.label.as_deref().unwrap_or_default();
        let group = *signs.get(label).ok_or_else(|| {
            Error::InvalidArgument(format!("basis speaker {label:?} not in manifest"))
        })?;
        let w0 = c.values[0];
        if w0 * group > 0.0 {
            positive += 1;
        } else if w0 * group < 0.0 {
            negative += 1;
        }
    }
    let (agreement, global_sign) = if positive >= negative {
        (positive, 1)
    } else {
        (negative, -1)
    };

    let planted = planted_direction(&manifest.spec);
    let axis: Vec<f64> = basis
        .u_column(0)
        .iter()
        .zip(basis.std())
        .map(|(u, s)| u * s)
        .collect();
    let axis_cosine = crate::analysis::cosine_similarity(&axis, &planted)?;
    Ok(AxisRecoveryReport {
        agreement,
        total: basis.coeffs().len(),
        global_sign,
        axis_cosine,
    })
}
