//! AUC, F1 and per-variant evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BrandTable, EncodedInstance};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::train::Checkpoint;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NumericDomain("NaN score".into()));
    }
    Ok(())
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Sorts once, O(n log n).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // count, in exact integer halves, pairs won by positives
    let mut twice_wins: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// F1 of the rule "predict 1 iff score >= threshold"; 0 when precision and
/// recall are both 0.
pub fn f1_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Contract("F1 of an empty set".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// One-sided sign test: probability of at least `wins` successes in `trials`
/// fair coin flips.
pub fn sign_test_p_value(wins: u64, trials: u64) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    if wins > trials {
        return 0.0;
    }
    let n = trials as f64;
    let ln_half_n = -n * std::f64::consts::LN_2;
    // log C(n, k) built incrementally from k = wins
    let mut ln_choose = ln_factorial(trials) - ln_factorial(wins) - ln_factorial(trials - wins);
    let mut total = 0.0;
    for k in wins..=trials {
        total += (ln_choose + ln_half_n).exp();
        if k < trials {
            ln_choose += ((trials - k) as f64).ln() - ((k + 1) as f64).ln();
        }
    }
    total.min(1.0)
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub auc: f64,
    pub f1: f64,
    pub n: usize,
    pub n_pos: usize,
    pub threshold: f64,
    pub config_hash: String,
}

/// First 16 hex digits of the SHA-256 of the checkpoint's config block.
pub fn config_fingerprint(ckpt: &Checkpoint) -> Result<String> {
    let text = serde_json::to_string(&(&ckpt.model_config, &ckpt.train_config))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Scores every instance; `threads > 1` splits the set into contiguous chunks.
pub fn score_all(
    model: &Model,
    instances: &[EncodedInstance],
    table: &BrandTable,
    threads: usize,
) -> Result<Vec<f64>> {
    let threads = threads.max(1);
    if threads == 1 || instances.len() < 2 * threads {
        return instances.iter().map(|inst| model.predict(inst, table)).collect();
    }
    let chunk = instances.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|i| model.predict(i, table)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(instances.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn report_from_scores(
    variant: &str,
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    config_hash: String,
) -> Result<EvalReport> {
    Ok(EvalReport {
        variant: variant.to_string(),
        auc: auc(scores, labels)?,
        f1: f1_at_threshold(scores, labels, threshold)?,
        n: labels.len(),
        n_pos: labels.iter().filter(|&&l| l == 1).count(),
        threshold,
        config_hash,
    })
}

/// Scores `test` with the checkpoint's model. The table's vocabulary must be
/// the one the checkpoint was trained on.
pub fn evaluate(
    variant: &str,
    ckpt: &Checkpoint,
    test: &[EncodedInstance],
    table: &BrandTable,
    threshold: f64,
    threads: usize,
) -> Result<EvalReport> {
    if let Some(msg) = ckpt.vocab_warning(&table.vocab) {
        return Err(Error::Contract(msg));
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set".into()));
    }
    let scores = score_all(&ckpt.model(), test, table, threads)?;
    let labels: Vec<u8> = test.iter().map(|i| i.label).collect();
    report_from_scores(variant, &scores, &labels, threshold, config_fingerprint(ckpt)?)
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{other:?}")),
    })?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = vec![];
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Pairs each positive with the negatives that directly follow it and counts
/// pairs the positive wins (ties are dropped). Returns `(wins, decided pairs)`.
pub fn matched_pair_wins(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let (mut wins, mut trials) = (0, 0);
    let mut current_pos: Option<f64> = None;
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            current_pos = Some(s);
        } else if let Some(p) = current_pos {
            if p != s {
                trials += 1;
                if p > s {
                    wins += 1;
                }
            }
        }
    }
    (wins, trials)
}
