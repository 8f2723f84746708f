//! The `eigenmerge` command-line driver.
//!
//! Every command works inside a workspace directory:
//!
//! ```text
//! <workspace>/schema.json              flatten schema written by `extract`
//! <workspace>/vectors/<label>.evv      task vectors, plus vectors/index.json (speaker order)
//! <workspace>/basis/                   fitted speaker space
//! <workspace>/coeffs/<label>.evv       coefficient vectors (sampled or flipped), samples.json
//! <workspace>/synth/<label>.evc        synthesized checkpoints
//! <workspace>/interp/                  interpolated checkpoints
//! <workspace>/reports/*.csv            similarity and scatter tables
//! ```
//!
//! Settings come from an optional JSON config (`--config`, paths relative to the config file)
//! overridden by flags. Exit codes: 0 ok, 2 usage, 3 data/format error, 4 numeric error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{coeff_scatter_export, max_similarity_report, NamedVector};
use crate::ckptio::CheckpointReader;
use crate::editor::{flip_axis, interpolate_to_file, synthesize_to_file, SynthesisRecipe};
use crate::eigenspace::{fit_basis, sample_coeff, FitOptions, SpeakerBasis, SpeakerCoeff};
use crate::error::{Error, Result};
use crate::synthgen::{generate_corpus, CorpusSpec, Manifest};
use crate::taskvec::{
    derive_schema_from_infos, extract_task_vector, extract_task_vector_into, FlattenSchema,
    ParamFilter, VectorReader, VectorSource, VectorWriter,
};

#[derive(Debug, Parser)]
#[command(
    name = "eigenmerge",
    version,
    about = "Speaker eigen-spaces over fine-tuned checkpoints"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    workspace: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, value_name = "K")]
    threads: Option<usize>,
    #[arg(long, global = true, value_name = "F")]
    rank_tol: Option<f64>,
    /// Scalars per streaming block.
    #[arg(long, global = true, value_name = "K")]
    chunk_size: Option<usize>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Machine-readable output (errors as JSON on stderr).
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Debug, Args, Default)]
struct InputArgs {
    /// Pre-trained checkpoint.
    #[arg(long, value_name = "PATH")]
    pre: Option<PathBuf>,
    /// Fine-tuned checkpoints (paths or glob patterns).
    #[arg(long, value_name = "PATH", num_args = 1..)]
    finetuned: Vec<String>,
    /// Synthetic-corpus manifest supplying `pre`, `finetuned` and the filter.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Tensor-name glob selecting trainable tensors (repeatable).
    #[arg(long, value_name = "GLOB")]
    include: Vec<String>,
    #[arg(long, value_name = "GLOB")]
    exclude: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one task vector per fine-tuned checkpoint.
    Extract(InputArgs),
    /// Fit the speaker space from the extracted task vectors.
    Fit {
        /// Skip per-parameter standardization.
        #[arg(long)]
        no_standardize: bool,
    },
    /// Draw coefficient vectors from Normal(0, I/N).
    Sample {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Turn coefficient vectors into checkpoints (default: every file in coeffs/).
    Synth {
        #[command(flatten)]
        input: InputArgs,
        /// Coefficient files (EVV1).
        #[arg(long, value_name = "PATH", num_args = 1..)]
        coeff: Vec<PathBuf>,
        /// Stored base-speaker coefficients by label.
        #[arg(long, value_name = "LABEL", num_args = 1..)]
        base: Vec<String>,
        /// Draw one coefficient from the seed instead of reading coefficient files.
        #[arg(long, conflicts_with_all = ["coeff", "base"])]
        sample: bool,
        /// Output path (single input only).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Interpolate two fine-tuned checkpoints.
    Interp {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_name = "PATH")]
        model_a: PathBuf,
        #[arg(long, value_name = "PATH")]
        model_b: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Negate one component of a coefficient vector.
    Flip {
        #[arg(long, value_name = "PATH", conflicts_with = "base")]
        coeff: Option<PathBuf>,
        #[arg(long, value_name = "LABEL")]
        base: Option<String>,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Write a CSV report.
    Report {
        kind: ReportKind,
        #[command(flatten)]
        input: InputArgs,
        /// Generated items: EVC1 checkpoints or EVV1 vectors (default: synth/*.evc).
        #[arg(long, value_name = "PATH", num_args = 1..)]
        generated: Vec<String>,
        /// Reference items: EVC1 checkpoints or EVV1 vectors (default: extracted task vectors).
        #[arg(long, value_name = "PATH", num_args = 1..)]
        bases: Vec<String>,
        /// Coefficient components for the scatter table, as `i,j`.
        #[arg(long, value_name = "I,J", default_value = "0,1")]
        components: String,
    },
    /// Generate a synthetic corpus with a planted factor.
    Synthgen {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// JSON corpus spec (defaults otherwise).
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        #[arg(long)]
        param_count: Option<usize>,
        /// Drop latent factors and noise.
        #[arg(long)]
        noiseless: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportKind {
    Similarity,
    Scatter,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pre: Option<PathBuf>,
    #[serde(default)]
    pub finetuned: Vec<String>,
    pub manifest: Option<PathBuf>,
    pub workspace: Option<PathBuf>,
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
    pub rank_tol: Option<f64>,
    pub chunk_size: Option<usize>,
    pub seed: Option<u64>,
    pub standardize: Option<bool>,
    pub threads: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("bad config {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                root.join(p)
            }
        };
        cfg.pre = cfg.pre.as_deref().map(rebase);
        cfg.manifest = cfg.manifest.as_deref().map(rebase);
        cfg.workspace = cfg.workspace.as_deref().map(rebase);
        cfg.finetuned = cfg
            .finetuned
            .iter()
            .map(|p| rebase(Path::new(p)).to_string_lossy().into_owned())
            .collect();
        Ok(cfg)
    }
}

/// Resolved settings shared by all commands.
struct Context {
    cfg: PipelineConfig,
    workspace: PathBuf,
    overwrite: bool,
    json: bool,
}

struct Inputs {
    pre: PathBuf,
    finetuned: Vec<PathBuf>,
    filter: ParamFilter,
}

impl Context {
    fn new(global: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &global.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if global.workspace.is_some() {
            cfg.workspace = global.workspace.clone();
        }
        cfg.seed = global.seed.or(cfg.seed);
        cfg.threads = global.threads.or(cfg.threads);
        cfg.rank_tol = global.rank_tol.or(cfg.rank_tol);
        cfg.chunk_size = global.chunk_size.or(cfg.chunk_size);
        let workspace = cfg.workspace.clone().unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            cfg,
            workspace,
            overwrite: global.overwrite,
            json: global.json,
        })
    }

    fn path(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.workspace.clone(), |p, s| p.join(s))
    }

    fn ensure_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    fn claim(&self, out: &Path) -> Result<()> {
        if out.exists() && !self.overwrite {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.ensure_dir(parent)?;
        }
        Ok(())
    }

    fn fit_options(&self, no_standardize: bool) -> FitOptions {
        let mut o = FitOptions::default();
        if let Some(t) = self.cfg.rank_tol {
            o.rank_tol = t;
        }
        if let Some(c) = self.cfg.chunk_size {
            o.chunk_size = c;
        }
        o.standardize = !no_standardize && self.cfg.standardize.unwrap_or(true);
        o
    }

    fn inputs(&self, args: &InputArgs, need_finetuned: bool) -> Result<Inputs> {
        let manifest_path = args.manifest.clone().or_else(|| self.cfg.manifest.clone());
        let manifest = manifest_path.map(|p| Manifest::load(&p)).transpose()?;

        let mut include = if args.include.is_empty() {
            self.cfg.include.clone()
        } else {
            args.include.clone()
        };
        let mut exclude = if args.exclude.is_empty() {
            self.cfg.exclude.clone()
        } else {
            args.exclude.clone()
        };
        if include.is_empty() && exclude.is_empty() {
            if let Some((m, _)) = &manifest {
                include = m.filter.include.clone();
                exclude = m.filter.exclude.clone();
            }
        }

        let pre = args
            .pre
            .clone()
            .or_else(|| self.cfg.pre.clone())
            .or_else(|| manifest.as_ref().map(|(m, root)| root.join(&m.pre)))
            .ok_or_else(|| {
                Error::InvalidArgument(
                    "no pre-trained checkpoint given (--pre, config or --manifest)".into(),
                )
            })?;

        let patterns = if args.finetuned.is_empty() {
            &self.cfg.finetuned
        } else {
            &args.finetuned
        };
        let mut finetuned = expand_paths(patterns)?;
        if finetuned.is_empty() {
            if let Some((m, root)) = &manifest {
                finetuned = m.speakers.iter().map(|s| root.join(&s.path)).collect();
            }
        }
        if need_finetuned && finetuned.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 fine-tuned checkpoints, got {}",
                finetuned.len()
            )));
        }
        Ok(Inputs {
            pre,
            finetuned,
            filter: ParamFilter { include, exclude },
        })
    }

    fn load_basis(&self) -> Result<SpeakerBasis> {
        SpeakerBasis::load(self.path(&["basis"]))
    }

    fn load_schema(&self) -> Result<FlattenSchema> {
        FlattenSchema::load(self.path(&["schema.json"]))
    }
}

fn has_glob_chars(s: &str) -> bool {
    s.contains(['*', '?', '['])
}

fn expand_paths(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        if has_glob_chars(p) {
            let mut hits: Vec<PathBuf> = glob::glob(p)
                .map_err(|e| Error::Pattern {
                    pattern: p.clone(),
                    message: e.msg.to_string(),
                })?
                .filter_map(std::result::Result::ok)
                .collect();
            hits.sort();
            out.extend(hits);
        } else {
            out.push(PathBuf::from(p));
        }
    }
    Ok(out)
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| {
            Error::InvalidArgument(format!("cannot derive a label from {}", path.display()))
        })
}

fn unique_labels(paths: &[PathBuf]) -> Result<Vec<String>> {
    let labels = paths.iter().map(|p| stem(p)).collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for l in &labels {
        if !seen.insert(l) {
            return Err(Error::InvalidArgument(format!(
                "duplicate speaker label {l:?}"
            )));
        }
    }
    Ok(labels)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("bad JSON in {}: {e}", path.display())))
}

/// Summary of a finished command.
#[derive(Debug, Default, Serialize)]
struct Outcome {
    command: &'static str,
    outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    info: BTreeMap<String, serde_json::Value>,
}

impl Outcome {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            ..Self::default()
        }
    }

    fn info(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.info.insert(key.to_string(), value.into());
        self
    }
}

fn cmd_extract(ctx: &Context, args: &InputArgs) -> Result<Outcome> {
    let inputs = ctx.inputs(args, true)?;
    let labels = unique_labels(&inputs.finetuned)?;
    let pre = CheckpointReader::open(&inputs.pre)?;
    let schema = derive_schema_from_infos(&pre.infos(), &inputs.filter)?;

    let schema_path = ctx.path(&["schema.json"]);
    let vec_dir = ctx.path(&["vectors"]);
    let index_path = vec_dir.join("index.json");
    let outs: Vec<PathBuf> = labels
        .iter()
        .map(|l| vec_dir.join(format!("{l}.evv")))
        .collect();
    for p in outs.iter().chain([&schema_path, &index_path]) {
        ctx.claim(p)?;
    }

    inputs
        .finetuned
        .par_iter()
        .zip(&outs)
        .map(|(ft_path, out)| {
            let ft = CheckpointReader::open(ft_path)?;
            let mut w = VectorWriter::create(out, schema.total_dim(), schema.fingerprint())?;
            extract_task_vector_into(&ft, &pre, &schema, &mut w)?;
            w.finish()
        })
        .collect::<Result<Vec<()>>>()?;

    schema.save(&schema_path)?;
    write_text(
        &index_path,
        &(serde_json::to_string_pretty(&labels).expect("labels serialize") + "\n"),
    )?;
    let mut outcome = Outcome::new("extract")
        .info("dim", schema.total_dim())
        .info("speakers", labels.len())
        .info(
            "schema_fingerprint",
            format!("{:016x}", schema.fingerprint()),
        );
    outcome.outputs = outs;
    outcome.outputs.push(schema_path);
    Ok(outcome)
}

fn load_vector_index(ctx: &Context) -> Result<(Vec<String>, Vec<VectorReader>)> {
    let labels: Vec<String> = read_json(&ctx.path(&["vectors", "index.json"]))?;
    let readers = labels
        .iter()
        .map(|l| VectorReader::open(ctx.path(&["vectors", &format!("{l}.evv")])))
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, readers))
}

fn cmd_fit(ctx: &Context, no_standardize: bool) -> Result<Outcome> {
    let (labels, readers) = load_vector_index(ctx)?;
    let schema = ctx.load_schema()?;
    if let Some(r) = readers
        .iter()
        .find(|r| r.fingerprint() != schema.fingerprint())
    {
        return Err(Error::FingerprintMismatch {
            expected: schema.fingerprint(),
            found: r.fingerprint(),
        });
    }
    let out = ctx.path(&["basis"]);
    ctx.claim(&out.join("meta.json"))?;
    let basis = fit_basis(&readers, &labels, &ctx.fit_options(no_standardize))?;
    basis.save(&out)?;
    Ok(Outcome {
        command: "fit",
        outputs: vec![out],
        info: BTreeMap::new(),
    }
    .info("rank", basis.rank())
    .info("sigma", basis.sigma().to_vec())
    .info("flagged_dims", basis.flagged().len())
    .info("basis_id", format!("{:016x}", basis.basis_id())))
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SampleIndex {
    seeds: BTreeMap<String, u64>,
}

fn cmd_sample(ctx: &Context, count: usize) -> Result<Outcome> {
    if count == 0 {
        return Err(Error::InvalidArgument("--count must be at least 1".into()));
    }
    let basis = ctx.load_basis()?;
    let seed = ctx.cfg.seed.unwrap_or(0);
    let dir = ctx.path(&["coeffs"]);
    let draws = sample_coeff(seed, &basis, count);
    let outs: Vec<PathBuf> = draws
        .iter()
        .map(|w| dir.join(format!("{}.evv", w.label.as_deref().unwrap_or("sample"))))
        .collect();
    for p in &outs {
        ctx.claim(p)?;
    }
    for (w, p) in draws.iter().zip(&outs) {
        w.save(p, basis.schema_fingerprint())?;
    }
    let index_path = dir.join("samples.json");
    let mut index: SampleIndex = if index_path.exists() {
        read_json(&index_path)?
    } else {
        SampleIndex::default()
    };
    for w in &draws {
        index
            .seeds
            .insert(w.label.clone().unwrap_or_default(), seed);
    }
    write_text(
        &index_path,
        &(serde_json::to_string_pretty(&index).expect("index serializes") + "\n"),
    )?;
    let mut outcome = Outcome::new("sample")
        .info("count", count)
        .info("seed", seed);
    outcome.outputs = outs;
    Ok(outcome)
}

fn cmd_synth(
    ctx: &Context,
    input: &InputArgs,
    coeff: &[PathBuf],
    base: &[String],
    sample: bool,
    out: Option<&Path>,
) -> Result<Outcome> {
    let basis = ctx.load_basis()?;
    let schema = ctx.load_schema()?;
    let inputs = ctx.inputs(input, false)?;
    let pre = CheckpointReader::open(&inputs.pre)?;

    let seeds: SampleIndex = {
        let p = ctx.path(&["coeffs", "samples.json"]);
        if p.exists() {
            read_json(&p)?
        } else {
            SampleIndex::default()
        }
    };
    let load = |path: &Path| -> Result<SynthesisRecipe> {
        let (w, fp) = SpeakerCoeff::load(path)?;
        if fp != basis.schema_fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: basis.schema_fingerprint(),
                found: fp,
            });
        }
        let seed = w.label.as_ref().and_then(|l| seeds.seeds.get(l)).copied();
        SynthesisRecipe::new(&basis, w, seed)
    };
    let mut recipes = coeff.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    for label in base {
        let w = basis
            .coeff(label)
            .ok_or_else(|| Error::InvalidArgument(format!("no base speaker {label:?} in basis")))?;
        recipes.push(SynthesisRecipe::new(&basis, w.clone(), None)?);
    }
    if sample {
        let seed = ctx.cfg.seed.unwrap_or(0);
        let mut w = sample_coeff(seed, &basis, 1).remove(0);
        w.label = Some(format!("seed_{seed}"));
        recipes.push(SynthesisRecipe::new(&basis, w, Some(seed))?);
    } else if recipes.is_empty() {
        let pattern = ctx
            .path(&["coeffs", "*.evv"])
            .to_string_lossy()
            .into_owned();
        for path in expand_paths(&[pattern])? {
            recipes.push(load(&path)?);
        }
    }
    if recipes.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to synthesize (give --coeff, --base or --sample, or run `sample` first)"
                .into(),
        ));
    }
    if out.is_some() && recipes.len() != 1 {
        return Err(Error::InvalidArgument(
            "--out needs exactly one coefficient".into(),
        ));
    }

    let outs: Vec<PathBuf> = match out {
        Some(p) => vec![p.to_path_buf()],
        None => recipes
            .iter()
            .map(|r| {
                ctx.path(&[
                    "synth",
                    &format!("{}.evc", r.coeff.label.as_deref().unwrap_or("synth")),
                ])
            })
            .collect(),
    };
    for p in &outs {
        ctx.claim(p)?;
    }
    recipes
        .par_iter()
        .zip(&outs)
        .map(|(r, p)| synthesize_to_file(&basis, r, &pre, &schema, p))
        .collect::<Result<Vec<()>>>()?;
    let extrapolated = recipes.iter().filter(|r| r.extrapolated()).count();
    let mut outcome = Outcome::new("synth").info("extrapolated", extrapolated);
    outcome.outputs = outs;
    Ok(outcome)
}

fn cmd_interp(
    ctx: &Context,
    input: &InputArgs,
    a: &Path,
    b: &Path,
    alpha: f64,
    out: Option<&Path>,
) -> Result<Outcome> {
    let inputs = ctx.inputs(input, false)?;
    let pre = CheckpointReader::open(&inputs.pre)?;
    let ra = CheckpointReader::open(a)?;
    let rb = CheckpointReader::open(b)?;
    let schema = derive_schema_from_infos(&pre.infos(), &inputs.filter)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => ctx.path(&["interp", &format!("{}_{}_{alpha}.evc", stem(a)?, stem(b)?)]),
    };
    ctx.claim(&out)?;
    interpolate_to_file(&ra, &rb, &pre, alpha, &schema, &out)?;
    let mut outcome = Outcome::new("interp")
        .info("alpha", alpha)
        .info("extrapolated", !(0.0..=1.0).contains(&alpha));
    outcome.outputs = vec![out];
    Ok(outcome)
}

fn cmd_flip(
    ctx: &Context,
    coeff: Option<&Path>,
    base: Option<&str>,
    axis: usize,
    out: Option<&Path>,
) -> Result<Outcome> {
    let (w, fp) = match (coeff, base) {
        (Some(p), None) => SpeakerCoeff::load(p)?,
        (None, Some(label)) => {
            let basis = ctx.load_basis()?;
            let w = basis
                .coeff(label)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no base speaker {label:?} in basis"))
                })?
                .clone();
            (w, basis.schema_fingerprint())
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give exactly one of --coeff or --base".into(),
            ))
        }
    };
    let flipped = flip_axis(&w, axis)?;
    let label = format!("{}_flip{axis}", w.label.as_deref().unwrap_or("coeff"));
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path(&["coeffs", &format!("{label}.evv")]));
    ctx.claim(&out)?;
    flipped.save(&out, fp)?;
    let mut outcome = Outcome::new("flip").info("axis", axis);
    outcome.outputs = vec![out];
    Ok(outcome)
}

/// Loads report inputs: EVC1 checkpoints become task vectors against `pre`, EVV1 files are read
/// as-is.
fn load_report_vectors(
    paths: &[PathBuf],
    pre: Option<&(CheckpointReader, FlattenSchema)>,
) -> Result<Vec<(NamedVector, u64)>> {
    paths
        .par_iter()
        .map(|p| {
            let label = stem(p)?;
            let mut magic = [0u8; 4];
            {
                use std::io::Read;
                let mut f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
                f.read_exact(&mut magic).map_err(|e| Error::io(p, e))?;
            }
            if &magic == crate::ckptio::CHECKPOINT_MAGIC {
                let (pre, schema) = pre.ok_or_else(|| {
                    Error::InvalidArgument(
                        "checkpoint inputs need a pre-trained checkpoint and schema.json".into(),
                    )
                })?;
                let ft = CheckpointReader::open(p)?;
                let tau = extract_task_vector(&ft, pre, schema)?;
                Ok((NamedVector::new(label, tau.values), tau.fingerprint))
            } else {
                let v = VectorReader::open(p)?.read_all()?;
                Ok((NamedVector::new(label, v.values), v.fingerprint))
            }
        })
        .collect()
}

fn cmd_report(
    ctx: &Context,
    kind: ReportKind,
    input: &InputArgs,
    generated: &[String],
    bases: &[String],
    components: &str,
) -> Result<Outcome> {
    let reports = ctx.path(&["reports"]);
    match kind {
        ReportKind::Scatter => {
            let basis = ctx.load_basis()?;
            let parse = |s: &str| s.trim().parse::<usize>().ok();
            let comps = match components.split_once(',') {
                Some((i, j)) => parse(i).zip(parse(j)),
                None => None,
            }
            .ok_or_else(|| {
                Error::InvalidArgument(format!("bad --components {components:?}, expected I,J"))
            })?;
            let table = coeff_scatter_export(&basis, comps)?;
            let out = reports.join("scatter.csv");
            ctx.claim(&out)?;
            write_text(&out, &table.to_csv()?)?;
            let mut outcome = Outcome::new("report")
                .info("kind", "scatter")
                .info("rows", table.rows.len());
            outcome.outputs = vec![out];
            Ok(outcome)
        }
        ReportKind::Similarity => {
            let gen_paths = if generated.is_empty() {
                expand_paths(&[ctx.path(&["synth", "*.evc"]).to_string_lossy().into_owned()])?
            } else {
                expand_paths(generated)?
            };
            let base_paths = if bases.is_empty() {
                let labels: Vec<String> = read_json(&ctx.path(&["vectors", "index.json"]))?;
                labels
                    .iter()
                    .map(|l| ctx.path(&["vectors", &format!("{l}.evv")]))
                    .collect()
            } else {
                expand_paths(bases)?
            };
            let pre = match ctx.inputs(input, false) {
                Ok(inputs) => Some((CheckpointReader::open(&inputs.pre)?, ctx.load_schema()?)),
                Err(Error::InvalidArgument(_)) => None,
                Err(e) => return Err(e),
            };
            let gen = load_report_vectors(&gen_paths, pre.as_ref())?;
            let base = load_report_vectors(&base_paths, pre.as_ref())?;
            if let Some(fp) = gen.first().map(|g| g.1) {
                if let Some((_, other)) = gen.iter().chain(&base).find(|(_, f)| *f != fp) {
                    return Err(Error::FingerprintMismatch {
                        expected: fp,
                        found: *other,
                    });
                }
            }
            let gen: Vec<NamedVector> = gen.into_iter().map(|g| g.0).collect();
            let base: Vec<NamedVector> = base.into_iter().map(|b| b.0).collect();
            let report = max_similarity_report(&gen, &base)?;
            let out = reports.join("similarity.csv");
            let hist = reports.join("similarity_histogram.csv");
            ctx.claim(&out)?;
            ctx.claim(&hist)?;
            write_text(&out, &report.to_csv()?)?;
            write_text(&hist, &report.histogram_csv()?)?;
            let mut outcome = Outcome::new("report")
                .info("kind", "similarity")
                .info("rows", report.rows.len())
                .info("min", report.summary.min)
                .info("max", report.summary.max)
                .info("mean", report.summary.mean);
            outcome.outputs = vec![out, hist];
            Ok(outcome)
        }
    }
}

fn cmd_synthgen(
    ctx: &Context,
    out: &Path,
    spec_path: Option<&Path>,
    param_count: Option<usize>,
    noiseless: bool,
) -> Result<Outcome> {
    let mut spec = match spec_path {
        Some(p) => read_json::<CorpusSpec>(p)?,
        None => CorpusSpec::default(),
    };
    if let Some(m) = param_count {
        let seed = spec.seed;
        spec = CorpusSpec {
            n_speakers: spec.n_speakers,
            group_split: spec.group_split,
            factor_strength: spec.factor_strength,
            latent_dims: spec.latent_dims,
            noise_scale: spec.noise_scale,
            dtype: spec.dtype,
            ..CorpusSpec::with_param_count(seed, m)
        };
    }
    if let Some(seed) = ctx.cfg.seed {
        spec.seed = seed;
    }
    if noiseless {
        spec.latent_dims = 0;
        spec.noise_scale = 0.0;
    }
    spec.validate()?;
    let manifest_path = out.join("manifest.json");
    ctx.claim(&manifest_path)?;
    let manifest = generate_corpus(&spec, out)?;
    let mut outcome = Outcome::new("synthgen")
        .info("speakers", manifest.speakers.len())
        .info("param_count", spec.param_count)
        .info("seed", spec.seed);
    outcome.outputs = vec![manifest_path];
    Ok(outcome)
}

fn dispatch(ctx: &Context, command: &Command) -> Result<Outcome> {
    match command {
        Command::Extract(args) => cmd_extract(ctx, args),
        Command::Fit { no_standardize } => cmd_fit(ctx, *no_standardize),
        Command::Sample { count } => cmd_sample(ctx, *count),
        Command::Synth {
            input,
            coeff,
            base,
            sample,
            out,
        } => cmd_synth(ctx, input, coeff, base, *sample, out.as_deref()),
        Command::Interp {
            input,
            model_a,
            model_b,
            alpha,
            out,
        } => cmd_interp(ctx, input, model_a, model_b, *alpha, out.as_deref()),
        Command::Flip {
            coeff,
            base,
            axis,
            out,
        } => cmd_flip(
            ctx,
            coeff.as_deref(),
            base.as_deref(),
            *axis,
            out.as_deref(),
        ),
        Command::Report {
            kind,
            input,
            generated,
            bases,
            components,
        } => cmd_report(ctx, *kind, input, generated, bases, components),
        Command::Synthgen {
            out,
            spec,
            param_count,
            noiseless,
        } => cmd_synthgen(ctx, out, spec.as_deref(), *param_count, *noiseless),
    }
}

fn report_error(err: &Error, json: bool) {
    if json {
        let payload = serde_json::json!({
            "error": {
                "kind": err.kind(),
                "message": err.to_string(),
                "exit_code": err.exit_code(),
            }
        });
        eprintln!("{payload}");
    } else {
        eprintln!("error: {err}");
    }
}

fn print_outcome(outcome: &Outcome, json: bool) {
    if json {
        println!(
            "{}",
            serde_json::to_string(outcome).expect("outcome serializes")
        );
        return;
    }
    for (k, v) in &outcome.info {
        println!("{}: {k} = {v}", outcome.command);
    }
    for p in &outcome.outputs {
        println!("{}: wrote {}", outcome.command, p.display());
    }
}

/// Runs the CLI on `args` (including the program name) and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json = args.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if json {
                let payload = serde_json::json!({
                    "error": { "kind": "usage", "message": e.to_string(), "exit_code": 2 }
                });
                eprintln!("{payload}");
            } else {
                eprint!("{e}");
            }
            return 2;
        }
    };

    let result = Context::new(&cli.global).and_then(|ctx| {
        let threads = ctx.cfg.threads.unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start thread pool: {e}")))?;
        pool.install(|| dispatch(&ctx, &cli.command))
            .map(|o| (o, ctx.json))
    });
    match result {
        Ok((outcome, json)) => {
            print_outcome(&outcome, json);
            0
        }
        Err(err) => {
            report_error(&err, cli.global.json);
            err.exit_code()
        }
    }
}

pub fn main() -> ! {
    std::process::exit(run(std::env::args_os()))
}
