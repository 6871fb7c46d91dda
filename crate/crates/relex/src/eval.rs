//! Held-out evaluation: ranked candidate predictions, precision-recall
//! statistics, AUC, P@N, top-N relation distribution, and attention
//! inspection.

use std::collections::BTreeSet;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RelationVocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::structinput::{StructuredInput, SubwordTokenizer};

/// One scored (bag, candidate relation) pair. NA is never a candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pair_key: String,
    pub relation: usize,
    pub score: f64,
    pub correct: bool,
}

/// A test bag ready for scoring.
#[derive(Debug, Clone)]
pub struct EvalBag {
    pub pair_key: String,
    pub inputs: Vec<StructuredInput>,
    pub gold: BTreeSet<usize>,
}

/// Scores every test bag and emits one prediction per non-NA relation.
pub fn predict_all(model: &Model, bags: &[EvalBag], na_index: usize) -> Result<Vec<Prediction>> {
    let nested: Vec<Vec<Prediction>> = bags
        .par_iter()
        .map(|bag| -> Result<Vec<Prediction>> {
            let fwd = model.forward_bag(&bag.inputs, None)?;
            Ok((0..model.num_relations)
                .filter(|&r| r != na_index)
                .map(|r| Prediction {
                    pair_key: bag.pair_key.clone(),
                    relation: r,
                    score: fwd.probs[r],
                    correct: bag.gold.contains(&r),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Number of positives for the recall denominator: every non-NA gold label
/// of every test bag counts once.
pub fn total_positives(bags: &[EvalBag], na_index: usize) -> usize {
    bags.iter().map(|b| b.gold.iter().filter(|&&g| g != na_index).count()).sum()
}

/// Deterministic ranking: score descending, ties by pair key then relation.
pub fn sort_predictions(predictions: &mut [Prediction]) {
    predictions.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.pair_key.cmp(&b.pair_key))
            .then_with(|| a.relation.cmp(&b.relation))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub auc: f64,
    pub total_positives: usize,
}

/// Walks the ranking and accumulates the stepwise precision-recall curve.
/// The area adds precision_k over each recall increment.
pub fn pr_curve(predictions: &[Prediction], total_positives: usize) -> Result<PRCurve> {
    if total_positives == 0 {
        return Err(Error::Eval("no positive test instances".into()));
    }
    let mut ranked = predictions.to_vec();
    sort_predictions(&mut ranked);
    let mut points = Vec::with_capacity(ranked.len());
    let mut correct = 0usize;
    let mut prev_recall = 0.0;
    let mut auc = 0.0;
    for (k, p) in ranked.iter().enumerate() {
        if p.correct {
            correct += 1;
        }
        let precision = correct as f64 / (k + 1) as f64;
        let recall = correct as f64 / total_positives as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PRPoint { recall, precision });
    }
    Ok(PRCurve { points, auc, total_positives })
}

/// Fraction correct among the top n of the ranking.
pub fn precision_at(predictions: &[Prediction], n: usize) -> Result<f64> {
    if n == 0 || n > predictions.len() {
        return Err(Error::Eval(format!(
            "P@{n} undefined over {} predictions",
            predictions.len()
        )));
    }
    let mut ranked = predictions.to_vec();
    sort_predictions(&mut ranked);
    let correct = ranked[..n].iter().filter(|p| p.correct).count();
    Ok(correct as f64 / n as f64)
}

/// Counts predicted relations among the top n, most frequent first.
pub fn top_n_distribution(
    predictions: &[Prediction],
    n: usize,
    vocab: &RelationVocab,
) -> Result<Vec<(String, usize)>> {
    if n == 0 || n > predictions.len() {
        return Err(Error::Eval(format!(
            "top-{n} distribution undefined over {} predictions",
            predictions.len()
        )));
    }
    let mut ranked = predictions.to_vec();
    sort_predictions(&mut ranked);
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for p in &ranked[..n] {
        *counts.entry(p.relation).or_insert(0) += 1;
    }
    let mut rows: Vec<(String, usize)> =
        counts.into_iter().map(|(r, c)| (vocab.label(r).to_string(), c)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

/// One input token with its relation-attention weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionRow {
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

/// Relation-attention weights over one structured input's tokens. Variants
/// without relation attention have nothing to show and fail.
pub fn inspect_attention(
    model: &Model,
    tokenizer: &SubwordTokenizer,
    input: &StructuredInput,
) -> Result<Vec<AttentionRow>> {
    let (_, alpha) = model.sentence_forward(input)?;
    let alpha = alpha.ok_or_else(|| {
        Error::Eval(format!(
            "variant {} has no relation attention to inspect",
            model.ablation.flag()
        ))
    })?;
    Ok((0..input.effective_len)
        .map(|t| AttentionRow {
            position: t,
            token: tokenizer.token(input.token_ids[t]).to_string(),
            weight: alpha[t],
        })
        .collect())
}

/// Fraction of inputs whose maximum attention lands on the expected token.
pub fn attention_argmax_hit_rate(
    model: &Model,
    tokenizer: &SubwordTokenizer,
    cases: &[(StructuredInput, String)],
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Eval("no attention cases to score".into()));
    }
    let mut hits = 0usize;
    for (input, expected) in cases {
        let rows = inspect_attention(model, tokenizer, input)?;
        let best = rows
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight).then_with(|| b.position.cmp(&a.position)))
            .expect("non-empty input");
        if best.token == *expected {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

/// Scores [`pr_curve`] plus the P@N family in one pass.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub auc: f64,
    pub total_positives: usize,
    pub predictions: usize,
    pub p_at: Vec<(usize, f64)>,
}

pub const P_AT_NS: [usize; 3] = [100, 300, 500];

/// P@N at the standard cutoffs, skipping cutoffs beyond the ranking.
pub fn metrics(predictions: &[Prediction], total_positives: usize) -> Result<Metrics> {
    let curve = pr_curve(predictions, total_positives)?;
    let mut p_at = Vec::new();
    for n in P_AT_NS {
        if n <= predictions.len() {
            p_at.push((n, precision_at(predictions, n)?));
        }
    }
    Ok(Metrics { auc: curve.auc, total_positives, predictions: predictions.len(), p_at })
}

/// Convenience for scoring a one-off probability vector in tests and tools.
pub fn probs_to_predictions(
    probs: &Array1<f64>,
    pair_key: &str,
    gold: &BTreeSet<usize>,
    na_index: usize,
) -> Vec<Prediction> {
    (0..probs.len())
        .filter(|&r| r != na_index)
        .map(|r| Prediction {
            pair_key: pair_key.to_string(),
            relation: r,
            score: probs[r],
            correct: gold.contains(&r),
        })
        .collect()
}
