//! Automatic summary metrics: ROUGE-N, ROUGE-L, embedding relevance
//! (average, extrema, greedy) and image/summary similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, Tensor};

/// Precision, recall and their harmonic mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Builds the triple from an overlap count; an empty side gives 0.
    pub fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(overlap, hyp_total);
        let recall = ratio(overlap, ref_total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<String> = w.iter().map(|t| t.as_ref().to_lowercase()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

fn check_reference<S>(reference: &[S]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::invalid("reference summary is empty"));
    }
    Ok(())
}

/// Clipped n-gram overlap. A hypothesis shorter than `n` has precision 0.
pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    check_reference(reference)?;
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(Prf::from_counts(
        overlap,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    ))
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        let x = x.as_ref().to_lowercase();
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y.as_ref().to_lowercase() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence precision and recall.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Result<Prf> {
    check_reference(reference)?;
    Ok(Prf::from_counts(
        lcs_len(hyp, reference),
        hyp.len(),
        reference.len(),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

fn rows_of(table: &Tensor, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (v, _) = table.dims2();
    ids.iter()
        .map(|&id| {
            if id >= v {
                Err(Error::OutOfVocabulary { id, vocab_size: v })
            } else {
                Ok(table.row(id).to_vec())
            }
        })
        .collect()
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

/// Per dimension, the value of largest magnitude with its sign; the first
/// token wins ties.
fn extrema_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = rows[0].clone();
    for r in &rows[1..] {
        for (o, &v) in out.iter_mut().zip(r) {
            if v.abs() > o.abs() {
                *o = v;
            }
        }
    }
    out
}

fn greedy_one_way(from: &[Vec<f64>], to: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for a in from {
        let mut best = f64::NEG_INFINITY;
        for b in to {
            best = best.max(cosine(a, b)?);
        }
        total += best;
    }
    Ok(total / from.len() as f64)
}

/// Relevance scores of token id lists under an embedding table whose rows
/// are indexed by token id.
pub fn embedding_relevance(
    hyp: &[usize],
    reference: &[usize],
    table: &Tensor,
) -> Result<Relevance> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(Error::invalid(
            "relevance needs nonempty hypothesis and reference",
        ));
    }
    let h = rows_of(table, hyp)?;
    let r = rows_of(table, reference)?;
    Ok(Relevance {
        average: cosine(&mean_vector(&h), &mean_vector(&r))?,
        extrema: cosine(&extrema_vector(&h), &extrema_vector(&r))?,
        greedy: 0.5 * (greedy_one_way(&h, &r)? + greedy_one_way(&r, &h)?),
    })
}

/// Highest cosine between the mean of the unmasked image fragment rows and
/// any hypothesis token embedding.
pub fn m_sim(image_rows: &Tensor, mask: &[bool], hyp: &[usize], table: &Tensor) -> Result<f64> {
    if hyp.is_empty() {
        return Err(Error::invalid("m_sim needs a nonempty hypothesis"));
    }
    if mask.len() != image_rows.rows() {
        return Err(Error::shape("image mask length differs from row count"));
    }
    let kept: Vec<Vec<f64>> = (0..image_rows.rows())
        .filter(|&i| mask[i])
        .map(|i| image_rows.row(i).to_vec())
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("every image fragment is masked"));
    }
    let pooled = mean_vector(&kept);
    let mut best = f64::NEG_INFINITY;
    for t in rows_of(table, hyp)? {
        best = best.max(cosine(&pooled, &t)?);
    }
    Ok(best)
}

/// Scores of one hypothesis against its reference.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub relevance: Option<Relevance>,
    pub m_sim: Option<f64>,
}

/// Corpus means of per-example scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub relevance_average: Option<f64>,
    pub relevance_extrema: Option<f64>,
    pub relevance_greedy: Option<f64>,
    pub m_sim: Option<f64>,
    pub examples: usize,
}

pub fn score_example<S: AsRef<str>>(id: &str, hyp: &[S], reference: &[S]) -> Result<ExampleScores> {
    Ok(ExampleScores {
        id: id.to_string(),
        rouge1: rouge_n(hyp, reference, 1)?,
        rouge2: rouge_n(hyp, reference, 2)?,
        rouge_l: rouge_l(hyp, reference)?,
        relevance: None,
        m_sim: None,
    })
}

fn mean_prf(items: &[Prf]) -> Prf {
    let n = items.len() as f64;
    Prf {
        precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

fn mean_opt(items: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Option<Vec<f64>> = items.collect();
    vals.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages per-example scores in order. Optional metrics are reported only
/// when every example has them.
pub fn corpus_report(scores: &[ExampleScores]) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot report on zero examples"));
    }
    let pick = |f: fn(&ExampleScores) -> Prf| mean_prf(&scores.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        rouge1: pick(|s| s.rouge1),
        rouge2: pick(|s| s.rouge2),
        rouge_l: pick(|s| s.rouge_l),
        relevance_average: mean_opt(scores.iter().map(|s| s.relevance.map(|r| r.average))),
        relevance_extrema: mean_opt(scores.iter().map(|s| s.relevance.map(|r| r.extrema))),
        relevance_greedy: mean_opt(scores.iter().map(|s| s.relevance.map(|r| r.greedy))),
        m_sim: mean_opt(scores.iter().map(|s| s.m_sim)),
        examples: scores.len(),
    })
}
