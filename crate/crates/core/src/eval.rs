//! BIO span decoding and exact-match chunk scoring.

use crate::data::Label;
use crate::error::{Error, Result};

/// Inclusive token interval of one aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkSpan {
    pub start: usize,
    pub end: usize,
}

impl ChunkSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        ChunkSpan { start, end }
    }
}

/// Spans encoded by a label sequence. An `I` that follows `O` or opens the
/// sentence starts a new span, as conlleval does.
pub fn decode_bio(labels: &[Label]) -> Vec<ChunkSpan> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &l) in labels.iter().enumerate() {
        match l {
            Label::B => {
                if let Some(s) = open.take() {
                    spans.push(ChunkSpan::new(s, t - 1));
                }
                open = Some(t);
            }
            Label::I => {
                open.get_or_insert(t);
            }
            Label::O => {
                if let Some(s) = open.take() {
                    spans.push(ChunkSpan::new(s, t - 1));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push(ChunkSpan::new(s, labels.len() - 1));
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
}

impl Prf {
    pub fn from_counts(n_gold: usize, n_pred: usize, n_correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(n_correct, n_pred);
        let recall = ratio(n_correct, n_gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            n_gold,
            n_pred,
            n_correct,
        }
    }
}

/// Micro-averaged precision, recall and F1 over exact span matches.
pub fn chunk_prf(gold: &[Vec<ChunkSpan>], pred: &[Vec<ChunkSpan>]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::Config(format!(
            "gold has {} sentences but predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    let (mut n_gold, mut n_pred, mut n_correct) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        n_gold += g.len();
        n_pred += p.len();
        // both lists are sorted and disjoint; merge-walk them
        let (mut i, mut j) = (0, 0);
        while i < g.len() && j < p.len() {
            match g[i].cmp(&p[j]) {
                std::cmp::Ordering::Equal => {
                    n_correct += 1;
                    i += 1;
                    j += 1;
                }
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
    }
    Ok(Prf::from_counts(n_gold, n_pred, n_correct))
}

/// Convenience: decode both label sequences and score them.
pub fn label_prf(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<Prf> {
    let g: Vec<_> = gold.iter().map(|l| decode_bio(l)).collect();
    let p: Vec<_> = pred.iter().map(|l| decode_bio(l)).collect();
    chunk_prf(&g, &p)
}

/// Mean and sample standard deviation. A single run has deviation 0.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Degenerate("no runs to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
