//! Checkpoint editing in the speaker space: synthesis from coefficients, two-model interpolation
//! and axis flipping.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::ckptio::{Checkpoint, CheckpointWriter};
use crate::eigenspace::{SpeakerBasis, SpeakerCoeff};
use crate::error::{Error, Result};
use crate::taskvec::{
    provenance_metadata, rewrite_checkpoint, CheckpointSink, FlattenSchema, TensorSource,
};

/// Components beyond this many standard deviations (of the Normal(0, 1/N) prior) mark a
/// coefficient vector as extrapolating.
pub const EXTRAPOLATION_SIGMAS: f64 = 4.0;

/// Everything needed to turn a coefficient vector into a checkpoint, plus its provenance record.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRecipe {
    pub basis_id: u64,
    pub coeff: SpeakerCoeff,
    pub seed: Option<u64>,
    pub provenance: Map<String, Value>,
}

impl SynthesisRecipe {
    pub fn new(basis: &SpeakerBasis, coeff: SpeakerCoeff, seed: Option<u64>) -> Result<Self> {
        basis.check_coeff(&coeff)?;
        let limit = EXTRAPOLATION_SIGMAS / (basis.n_speakers() as f64).sqrt();
        let extrapolated = coeff.values.iter().any(|v| v.abs() > limit);

        let mut provenance = Map::new();
        provenance.insert("op".into(), "synthesize".into());
        provenance.insert(
            "basis_id".into(),
            format!("{:016x}", basis.basis_id()).into(),
        );
        provenance.insert(
            "schema_fingerprint".into(),
            format!("{:016x}", basis.schema_fingerprint()).into(),
        );
        provenance.insert("coeff".into(), coeff.values.clone().into());
        if let Some(label) = &coeff.label {
            provenance.insert("label".into(), label.clone().into());
        }
        provenance.insert("seed".into(), seed.map_or(Value::Null, Value::from));
        provenance.insert("extrapolated".into(), extrapolated.into());
        Ok(Self {
            basis_id: basis.basis_id(),
            coeff,
            seed,
            provenance,
        })
    }

    pub fn extrapolated(&self) -> bool {
        self.provenance.get("extrapolated") == Some(&Value::Bool(true))
    }
}

fn check_schema(basis: &SpeakerBasis, schema: &FlattenSchema) -> Result<()> {
    if schema.fingerprint() != basis.schema_fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: basis.schema_fingerprint(),
            found: schema.fingerprint(),
        });
    }
    if schema.total_dim() != basis.dim() {
        return Err(Error::DimMismatch {
            expected: basis.dim(),
            found: schema.total_dim(),
        });
    }
    Ok(())
}

fn synthesize_into<P: TensorSource, K: CheckpointSink>(
    basis: &SpeakerBasis,
    coeff: &SpeakerCoeff,
    pre: &P,
    schema: &FlattenSchema,
    sink: &mut K,
) -> Result<()> {
    let (mean, std) = (basis.mean(), basis.std());
    rewrite_checkpoint(pre, schema, sink, |entry, mut values| {
        let range = entry.range();
        let mut delta = vec![0.0; values.len()];
        basis.reconstruct_range(coeff, range.start, &mut delta)?;
        for ((v, d), (m, s)) in values
            .iter_mut()
            .zip(&delta)
            .zip(mean[range.clone()].iter().zip(&std[range]))
        {
            *v += d * s + m;
        }
        Ok(values)
    })
}

/// Builds the checkpoint `θ_pre + destandardize(U Σ w)` over the schema subset.
///
/// `w = 0` yields the centroid of the base speakers, not `θ_pre`.
pub fn synthesize_recipe<P: TensorSource>(
    basis: &SpeakerBasis,
    recipe: &SynthesisRecipe,
    pre: &P,
    schema: &FlattenSchema,
) -> Result<Checkpoint> {
    check_schema(basis, schema)?;
    let mut out = Checkpoint::new();
    synthesize_into(basis, &recipe.coeff, pre, schema, &mut out)?;
    out.metadata = provenance_metadata(pre.source_metadata(), recipe.provenance.clone());
    Ok(out)
}

pub fn synthesize_checkpoint<P: TensorSource>(
    basis: &SpeakerBasis,
    w: &SpeakerCoeff,
    pre: &P,
    schema: &FlattenSchema,
    seed: Option<u64>,
) -> Result<Checkpoint> {
    let recipe = SynthesisRecipe::new(basis, w.clone(), seed)?;
    synthesize_recipe(basis, &recipe, pre, schema)
}

/// Streaming form of [`synthesize_checkpoint`] writing straight to an EVC1 file.
pub fn synthesize_to_file<P: TensorSource>(
    basis: &SpeakerBasis,
    recipe: &SynthesisRecipe,
    pre: &P,
    schema: &FlattenSchema,
    path: impl AsRef<Path>,
) -> Result<()> {
    check_schema(basis, schema)?;
    let metadata = provenance_metadata(pre.source_metadata(), recipe.provenance.clone());
    let mut writer = CheckpointWriter::create(path, &pre.tensor_infos(), &metadata)?;
    synthesize_into(basis, &recipe.coeff, pre, schema, &mut writer)?;
    writer.finish()
}

fn interpolation_metadata<P: TensorSource>(
    pre: &P,
    alpha: f64,
    schema: &FlattenSchema,
) -> BTreeMap<String, String> {
    let mut record = Map::new();
    record.insert("op".into(), "interpolate".into());
    record.insert("alpha".into(), alpha.into());
    record.insert(
        "schema_fingerprint".into(),
        format!("{:016x}", schema.fingerprint()).into(),
    );
    record.insert(
        "extrapolated".into(),
        (!(0.0..=1.0).contains(&alpha)).into(),
    );
    provenance_metadata(pre.source_metadata(), record)
}

fn interpolate_into<A, B, P, K>(
    a: &A,
    b: &B,
    pre: &P,
    alpha: f64,
    schema: &FlattenSchema,
    sink: &mut K,
) -> Result<()>
where
    A: TensorSource,
    B: TensorSource,
    P: TensorSource,
    K: CheckpointSink,
{
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha must be finite, got {alpha}"
        )));
    }
    for src in [a.tensor_infos(), b.tensor_infos()] {
        for entry in schema.entries() {
            match src.get(&entry.name) {
                None => return Err(Error::MissingTensor(entry.name.clone())),
                Some(info) if info.shape != entry.shape => {
                    return Err(Error::ShapeMismatch {
                        name: entry.name.clone(),
                        expected: entry.shape.clone(),
                        found: info.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
    }
    let keep = 1.0 - alpha;
    rewrite_checkpoint(pre, schema, sink, |entry, _pre_values| {
        let va = a.tensor(&entry.name)?.to_f64_vec();
        let vb = b.tensor(&entry.name)?.to_f64_vec();
        Ok(va
            .iter()
            .zip(&vb)
            .map(|(x, y)| keep * x + alpha * y)
            .collect())
    })
}

/// `(1 - α) θ_A + α θ_B` over the schema subset (equivalently `θ_pre + (1 - α) τ_A + α τ_B`);
/// tensors outside the schema come from `pre`. α outside `[0, 1]` extrapolates and is flagged.
pub fn interpolate_models<A, B, P>(
    a: &A,
    b: &B,
    pre: &P,
    alpha: f64,
    schema: &FlattenSchema,
) -> Result<Checkpoint>
where
    A: TensorSource,
    B: TensorSource,
    P: TensorSource,
{
    let mut out = Checkpoint::new();
    interpolate_into(a, b, pre, alpha, schema, &mut out)?;
    out.metadata = interpolation_metadata(pre, alpha, schema);
    Ok(out)
}

pub fn interpolate_to_file<A, B, P>(
    a: &A,
    b: &B,
    pre: &P,
    alpha: f64,
    schema: &FlattenSchema,
    path: impl AsRef<Path>,
) -> Result<()>
where
    A: TensorSource,
    B: TensorSource,
    P: TensorSource,
{
    let metadata = interpolation_metadata(pre, alpha, schema);
    let mut writer = CheckpointWriter::create(path, &pre.tensor_infos(), &metadata)?;
    interpolate_into(a, b, pre, alpha, schema, &mut writer)?;
    writer.finish()
}

/// Copy of `w` with component `k` negated.
pub fn flip_axis(w: &SpeakerCoeff, k: usize) -> Result<SpeakerCoeff> {
    if k >= w.dim() {
        return Err(Error::InvalidArgument(format!(
            "axis {k} out of range for a {}-dimensional coefficient",
            w.dim()
        )));
    }
    let mut out = w.clone();
    out.values[k] = -out.values[k];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckptio::Tensor;
    use crate::eigenspace::{fit_basis, FitOptions};
    use crate::taskvec::{derive_schema, extract_task_vector, ParamFilter};
    use crate::PROVENANCE_KEY;

    fn single(name: &str, values: Vec<f64>) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            name,
            Tensor::from_f64(vec![values.len() as u64], values).unwrap(),
        )
        .unwrap();
        c
    }

    #[test]
    fn flip_examples() {
        let w = SpeakerCoeff::new(vec![0.3, -0.1]);
        assert_eq!(flip_axis(&w, 0).unwrap().values, vec![-0.3, -0.1]);
        assert_eq!(flip_axis(&flip_axis(&w, 1).unwrap(), 1).unwrap(), w);
        let z = SpeakerCoeff::new(vec![0.0, 1.0]);
        assert_eq!(flip_axis(&z, 0).unwrap().values, vec![0.0, 1.0]);
        assert!(flip_axis(&w, 2).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let pre = single("w", vec![0.0]);
        let a = single("w", vec![2.0]);
        let b = single("w", vec![4.0]);
        let s = derive_schema(&pre, &ParamFilter::all()).unwrap();
        let at = |alpha| {
            interpolate_models(&a, &b, &pre, alpha, &s)
                .unwrap()
                .get("w")
                .unwrap()
                .to_f64_vec()
        };
        assert_eq!(at(0.0), vec![2.0]);
        assert_eq!(at(1.0), vec![4.0]);
        assert_eq!(at(0.5), vec![3.0]);
        assert_eq!(at(2.0), vec![6.0]);

        let out = interpolate_models(&a, &b, &pre, 1.5, &s).unwrap();
        assert!(out.metadata[PROVENANCE_KEY].contains("\"extrapolated\":true"));

        let missing = single("v", vec![1.0]);
        assert!(interpolate_models(&a, &missing, &pre, 0.5, &s).is_err());
    }

    #[test]
    fn synthesis_round_trip_and_centroid() {
        let pre = single("w", vec![1.0, 2.0, 3.0, 4.0]);
        let fts = [
            single("w", vec![1.5, 2.0, 2.0, 4.0]),
            single("w", vec![0.0, 2.5, 3.0, 4.0]),
            single("w", vec![1.0, 1.0, 4.5, 4.0]),
        ];
        let s = derive_schema(&pre, &ParamFilter::all()).unwrap();
        let taus: Vec<_> = fts
            .iter()
            .map(|f| extract_task_vector(f, &pre, &s).unwrap())
            .collect();
        let labels: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let basis = fit_basis(&taus, &labels, &FitOptions::default()).unwrap();
        assert_eq!(basis.rank(), 2);

        for (ft, w) in fts.iter().zip(basis.coeffs()) {
            let out = synthesize_checkpoint(&basis, w, &pre, &s, None).unwrap();
            for (x, y) in out
                .get("w")
                .unwrap()
                .to_f64_vec()
                .iter()
                .zip(ft.get("w").unwrap().to_f64_vec())
            {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }

        let centroid =
            synthesize_checkpoint(&basis, &SpeakerCoeff::zeros(2), &pre, &s, Some(3)).unwrap();
        let expected: Vec<f64> = (0..4)
            .map(|k| 1.0 + k as f64 + taus.iter().map(|t| t.values[k]).sum::<f64>() / 3.0)
            .collect();
        for (x, y) in centroid
            .get("w")
            .unwrap()
            .to_f64_vec()
            .iter()
            .zip(&expected)
        {
            assert!((x - y).abs() < 1e-12);
        }
        let prov: Value = serde_json::from_str(&centroid.metadata[PROVENANCE_KEY]).unwrap();
        assert_eq!(prov["seed"], Value::from(3u64));
        assert_eq!(prov["extrapolated"], Value::Bool(false));

        let far = SpeakerCoeff::new(vec![10.0, 0.0]);
        assert!(SynthesisRecipe::new(&basis, far, None)
            .unwrap()
            .extrapolated());
        assert!(synthesize_checkpoint(&basis, &SpeakerCoeff::zeros(3), &pre, &s, None).is_err());

        let other = derive_schema(&single("v", vec![0.0; 4]), &ParamFilter::all()).unwrap();
        assert!(matches!(
            synthesize_checkpoint(&basis, &SpeakerCoeff::zeros(2), &pre, &other, None),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
