//! Similarity and coefficient reports.
//!
//! [`max_similarity_report`] scores each generated vector against every base vector and keeps the
//! nearest base; the max-similarity column summarizes how far generated speakers stray from the
//! bases. The vectors can be task vectors or any externally computed embeddings.

use rayon::prelude::*;

use crate::eigenspace::SpeakerBasis;
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 20;

/// A vector with a display label.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedVector {
    pub label: String,
    pub values: Vec<f64>,
}

impl NamedVector {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub label: String,
    pub similarities: Vec<f64>,
    pub max: f64,
    pub argmax: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `HISTOGRAM_BINS + 1` edges, equal width over the observed range.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width histogram over `[min, max]` of `values`; the last bin is closed.
    pub fn equal_width(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[idx] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub base_labels: Vec<String>,
    pub rows: Vec<SimilarityRow>,
    pub summary: SimilaritySummary,
}

/// For each generated vector: cosine similarity to every base, the maximum, and which base
/// attains it (first on ties).
pub fn max_similarity_report(
    generated: &[NamedVector],
    bases: &[NamedVector],
) -> Result<SimilarityReport> {
    if generated.is_empty() || bases.is_empty() {
        return Err(Error::InvalidArgument(
            "similarity report needs at least one generated and one base vector".into(),
        ));
    }
    let rows = generated
        .par_iter()
        .map(|g| {
            let similarities = bases
                .iter()
                .map(|b| cosine_similarity(&g.values, &b.values))
                .collect::<Result<Vec<_>>>()?;
            let (argmax, max) = similarities.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, s)| if s > best.1 { (i, s) } else { best },
            );
            Ok(SimilarityRow {
                label: g.label.clone(),
                similarities,
                max,
                argmax,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let maxima: Vec<f64> = rows.iter().map(|r| r.max).collect();
    let summary = SimilaritySummary {
        min: maxima.iter().copied().fold(f64::INFINITY, f64::min),
        max: maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: maxima.iter().sum::<f64>() / maxima.len() as f64,
        histogram: Histogram::equal_width(&maxima, HISTOGRAM_BINS),
    };
    Ok(SimilarityReport {
        base_labels: bases.iter().map(|b| b.label.clone()).collect(),
        rows,
        summary,
    })
}

/// Shortest decimal form that parses back to the same f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_string(records: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for record in records {
        w.write_record(&record)
            .map_err(|e| Error::Format(format!("CSV encoding failed: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("CSV encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields is UTF-8"))
}

impl SimilarityReport {
    /// One row per generated vector: label, max similarity, nearest base, then one column per base.
    pub fn to_csv(&self) -> Result<String> {
        let mut header = vec![
            "label".to_string(),
            "max_similarity".into(),
            "nearest_base".into(),
        ];
        header.extend(self.base_labels.iter().map(|l| format!("sim_{l}")));
        let rows = self.rows.iter().map(|r| {
            let mut rec = vec![
                r.label.clone(),
                format_f64(r.max),
                self.base_labels[r.argmax].clone(),
            ];
            rec.extend(r.similarities.iter().map(|&s| format_f64(s)));
            rec
        });
        csv_string(std::iter::once(header).chain(rows))
    }

    pub fn histogram_csv(&self) -> Result<String> {
        let h = &self.summary.histogram;
        let header = vec![
            "bin".to_string(),
            "lower".into(),
            "upper".into(),
            "count".into(),
        ];
        let rows = h.counts.iter().enumerate().map(|(i, c)| {
            vec![
                i.to_string(),
                format_f64(h.edges[i]),
                format_f64(h.edges[i + 1]),
                c.to_string(),
            ]
        });
        csv_string(std::iter::once(header).chain(rows))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub label: String,
    pub x: f64,
    pub y: f64,
    /// Sign of the first coefficient component: -1, 0 or 1.
    pub sign_w0: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterTable {
    pub components: (usize, usize),
    pub rows: Vec<ScatterRow>,
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Components `(i, j)` of every stored base coefficient vector.
pub fn coeff_scatter_export(
    basis: &SpeakerBasis,
    components: (usize, usize),
) -> Result<ScatterTable> {
    let (i, j) = components;
    let r = basis.rank();
    if i >= r || j >= r {
        return Err(Error::InvalidArgument(format!(
            "components ({i}, {j}) out of range for rank {r}"
        )));
    }
    let rows = basis
        .coeffs()
        .iter()
        .map(|c| ScatterRow {
            label: c.label.clone().unwrap_or_default(),
            x: c.values[i],
            y: c.values[j],
            sign_w0: sign(c.values[0]),
        })
        .collect();
    Ok(ScatterTable { components, rows })
}

impl ScatterTable {
    pub fn to_csv(&self) -> Result<String> {
        let (i, j) = self.components;
        let header = vec![
            "label".to_string(),
            format!("w{i}"),
            format!("w{j}"),
            "sign_w0".into(),
        ];
        let rows = self.rows.iter().map(|r| {
            vec![
                r.label.clone(),
                format_f64(r.x),
                format_f64(r.y),
                r.sign_w0.to_string(),
            ]
        });
        csv_string(std::iter::once(header).chain(rows))
    }
}
