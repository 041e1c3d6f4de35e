//! Evaluation metrics: ROUGE-L, BLEU, name recall (REC), likelihood-scored
//! multiple choice accuracy, and the coherence proxy.
//!
//! The coherence proxy stands in for an external gibberish classifier: it is
//! the mean per-token log-probability of a generation under the origin model
//! (the model before benchmark fine-tuning). It is always reported alongside
//! ROUGE/BLEU, never in place of them.

use std::collections::HashMap;

use crate::data::McItem;
use crate::error::{Error, Result};
use crate::model::{answer_log_prob_for, forward_token_dist, ImageFeature, ModelParams, TokenId};

/// ROUGE-L: LCS-based F-measure. P = LCS/|generated|, R = LCS/|reference|,
/// F = 2PR/(P+R), or 0 when the LCS is empty.
pub fn rouge_l(generated: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Validation("rouge_l requires non-empty sequences".into()));
    }
    let lcs = lcs_len(generated, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / generated.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// BLEU with clipped n-gram precisions for n = 1..=max_n, geometric mean,
/// and brevity penalty `min(1, exp(1 - |ref|/|gen|))`. No smoothing: any
/// zero precision yields a zero score.
pub fn bleu(generated: &[TokenId], reference: &[TokenId], max_n: usize) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Validation("bleu requires non-empty sequences".into()));
    }
    if max_n == 0 {
        return Err(Error::Config("bleu requires max_n >= 1".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = clipped_precision(generated, reference, n);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / generated.len() as f64).exp().min(1.0);
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn clipped_precision(generated: &[TokenId], reference: &[TokenId], n: usize) -> f64 {
    if generated.len() < n {
        return 0.0;
    }
    let mut ref_counts: HashMap<&[TokenId], usize> = HashMap::new();
    if reference.len() >= n {
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_insert(0) += 1;
        }
    }
    let mut gen_counts: HashMap<&[TokenId], usize> = HashMap::new();
    for g in generated.windows(n) {
        *gen_counts.entry(g).or_insert(0) += 1;
    }
    let total: usize = generated.len() - n + 1;
    let mut matched = 0usize;
    for (gram, &count) in &gen_counts {
        let cap = ref_counts.get(gram).copied().unwrap_or(0);
        matched += count.min(cap);
    }
    matched as f64 / total as f64
}

/// True iff `name` occurs as a contiguous subsequence of `generated`.
pub fn rec(generated: &[TokenId], name: &[TokenId]) -> bool {
    if name.is_empty() || generated.len() < name.len() {
        return false;
    }
    generated.windows(name.len()).any(|w| w == name)
}

/// Fraction of items where the true answer has the highest log-likelihood
/// under the model; ties break toward the lowest candidate index.
pub fn mc_accuracy(params: &ModelParams, items: &[McItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for item in items {
        if item.candidates.is_empty() {
            return Err(Error::Validation(format!(
                "mc item for triple {} has no candidates",
                item.triple_id
            )));
        }
        let mut best = 0usize;
        let mut best_lp = f64::NEG_INFINITY;
        for (idx, cand) in item.candidates.iter().enumerate() {
            let lp = answer_log_prob_for(params, &item.image, &item.question, cand)?;
            if lp > best_lp {
                best_lp = lp;
                best = idx;
            }
        }
        if best == item.true_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Mean per-token log-probability of `generated` under the origin model,
/// teacher forced on the generation's own prefixes. Higher values mean the
/// generation looks more template-like to the origin model.
pub fn coherence_proxy(
    params_origin: &ModelParams,
    image: &ImageFeature,
    question: &[TokenId],
    generated: &[TokenId],
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Validation("coherence proxy requires a non-empty generation".into()));
    }
    let mut total = 0.0;
    for (i, &tok) in generated.iter().enumerate() {
        let d = forward_token_dist(params_origin, image, question, &generated[..i], i + 1)?;
        total += d.log_probs[tok];
    }
    Ok(total / generated.len() as f64)
}

/// One metric's aggregate over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-split metric aggregates plus a pointer to the generation dump they
/// were computed from. All values lie in [0, 1]; the coherence proxy is
/// reported as `exp(mean log-prob)`, its geometric-mean token probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub n_items: usize,
    pub rows: Vec<MetricRow>,
    pub decode_dump: String,
}

/// Sample mean and standard deviation (n-1 denominator; 0 when n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
