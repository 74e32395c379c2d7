//! Perplexity, BLEU and the report table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionedExample, EncodedSentence};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const MAX_BLEU_ORDER: usize = 4;

/// `2^(−mean log2 P)` from per-prediction natural-log probabilities.
pub fn perplexity_from_ln_probs(ln_probs: &[f64]) -> Result<f64> {
    if ln_probs.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let mean_ln = ln_probs.iter().sum::<f64>() / ln_probs.len() as f64;
    Ok((-mean_ln / std::f64::consts::LN_2).exp2())
}

/// Word perplexity over `(features, sentence)` pairs, resetting the state
/// for every sentence and counting the `<eos>` predictions.
pub fn perplexity<'a>(
    params: &ModelParams,
    items: impl IntoIterator<Item = (&'a [f64], &'a EncodedSentence)>,
) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for (v, sent) in items {
        nll += params.sentence_loss(v, sent, 0.0)?.0.word_nll;
        count += sent.len();
    }
    if count == 0 {
        return Err(Error::InvalidInput("no sentences to score".into()));
    }
    Ok((nll / count as f64 / std::f64::consts::LN_2).exp2())
}

/// Perplexity over every caption of every example.
pub fn perplexity_of(params: &ModelParams, examples: &[&CaptionedExample]) -> Result<f64> {
    perplexity(
        params,
        examples
            .iter()
            .flat_map(|e| e.captions.iter().map(move |c| (e.features.values(), c))),
    )
}

/// Sufficient statistics for BLEU; sums across sentences give corpus BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_BLEU_ORDER],
    pub totals: [u64; MAX_BLEU_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_BLEU_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.candidate_len == 0 {
            0.0
        } else if self.candidate_len > self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp()
        }
    }

    /// BLEU-`order`: brevity penalty times the geometric mean of the clipped
    /// precisions up to `order`, unsmoothed.
    pub fn score(&self, order: usize) -> f64 {
        assert!(
            (1..=MAX_BLEU_ORDER).contains(&order),
            "BLEU order must be 1..=4"
        );
        let mut log_sum = 0.0;
        for n in 0..order {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        self.brevity_penalty() * (log_sum / order as f64).exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU statistics of one candidate against its references. The reference
/// length is the one closest to the candidate's, the shorter on ties.
pub fn bleu_stats<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>]) -> Result<BleuStats> {
    if references.is_empty() {
        return Err(Error::InvalidInput(
            "BLEU needs at least one reference".into(),
        ));
    }
    let mut stats = BleuStats {
        candidate_len: candidate.len() as u64,
        ..BleuStats::default()
    };
    for n in 1..=MAX_BLEU_ORDER {
        let cand = ngram_counts(candidate, n);
        let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let mut matched = 0;
        for (g, &c) in &cand {
            let max_ref = refs
                .iter()
                .map(|r| r.get(g).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += c.min(max_ref);
        }
        stats.matches[n - 1] = matched;
        stats.totals[n - 1] = candidate.len().saturating_sub(n - 1) as u64;
    }
    let c = candidate.len() as i64;
    stats.reference_len = references
        .iter()
        .map(|r| r.len() as i64)
        .min_by_key(|&r| ((r - c).abs(), r))
        .unwrap() as u64;
    Ok(stats)
}

pub fn bleu<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], order: usize) -> Result<f64> {
    Ok(bleu_stats(candidate, references)?.score(order))
}

/// BLEU-1..4 from statistics pooled over all candidates.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<Vec<T>>)]) -> Result<[f64; MAX_BLEU_ORDER]> {
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        total.add(&bleu_stats(cand, refs)?);
    }
    Ok(std::array::from_fn(|n| total.score(n + 1)))
}

/// Scores each human caption against the remaining captions of its image.
pub fn human_consistency<T: Eq + Hash + Clone>(
    caption_sets: &[Vec<Vec<T>>],
) -> Result<[f64; MAX_BLEU_ORDER]> {
    let mut pairs = Vec::new();
    for set in caption_sets {
        if set.len() < 2 {
            return Err(Error::InvalidInput(
                "each image needs at least two captions".into(),
            ));
        }
        for i in 0..set.len() {
            let refs: Vec<Vec<T>> = set
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, c)| c.clone())
                .collect();
            pairs.push((set[i].clone(), refs));
        }
    }
    corpus_bleu(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub perplexity: Option<f64>,
    pub bleu: [f64; MAX_BLEU_ORDER],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    fn cells(row: &MetricRow) -> Vec<String> {
        let mut cells = vec![
            row.model.clone(),
            row.perplexity
                .map_or("-".to_string(), |p| format!("{p:.3}")),
        ];
        cells.extend(row.bleu.iter().map(|b| format!("{:.2}", b * 100.0)));
        cells.push("n/a".to_string());
        cells
    }

    const HEADER: [&'static str; 7] =
        ["model", "ppl", "bleu1", "bleu2", "bleu3", "bleu4", "meteor"];

    pub fn to_tsv(&self) -> String {
        let mut out = Self::HEADER.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::cells(r).join("\t"));
            out.push('\n');
        }
        out
    }

    /// Fixed-width table; BLEU in percent.
    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> =
            std::iter::once(Self::HEADER.iter().map(|s| s.to_string()).collect())
                .chain(self.rows.iter().map(Self::cells))
                .collect();
        let widths: Vec<usize> = (0..Self::HEADER.len())
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}
