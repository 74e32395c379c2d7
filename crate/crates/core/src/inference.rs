//! Sample-and-rescore generation, bi-directional retrieval scoring and
//! hidden-activation traces.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionedExample, ClassedVocabulary, EncodedSentence, EOS_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numkit::{derive_seed, log_sum_exp, sample_unchecked, SeededRng};

/// Empirical distribution of caption lengths (words, excluding `<eos>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    lengths: Vec<usize>,
    counts: Vec<u64>,
    total: u64,
}

impl LengthHistogram {
    pub fn from_counts(counts: &[(usize, u64)]) -> Result<Self> {
        let kept: Vec<(usize, u64)> = counts
            .iter()
            .copied()
            .filter(|&(l, c)| c > 0 && l > 0)
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidInput("length histogram is empty".into()));
        }
        Ok(Self {
            lengths: kept.iter().map(|p| p.0).collect(),
            counts: kept.iter().map(|p| p.1).collect(),
            total: kept.iter().map(|p| p.1).sum(),
        })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn probability(&self, length: usize) -> f64 {
        self.lengths
            .iter()
            .position(|&l| l == length)
            .map_or(0.0, |i| self.counts[i] as f64 / self.total as f64)
    }
}

pub fn sample_length(hist: &LengthHistogram, rng: &mut SeededRng) -> usize {
    let mut r = (rng.next_u64() % hist.total) as u128;
    for (&l, &c) in hist.lengths.iter().zip(&hist.counts) {
        if r < c as u128 {
            return l;
        }
        r -= c as u128;
    }
    unreachable!("histogram counts sum to total")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub candidate_count: usize,
    /// Weight of the reconstruction term when rescoring candidates.
    pub lambda_recon: f64,
    /// Set from the run seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            candidate_count: 100,
            lambda_recon: 0.5,
            seed: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_count == 0 {
            return Err(Error::InvalidInput(
                "candidate_count must be at least 1".into(),
            ));
        }
        if self.lambda_recon < 0.0 {
            return Err(Error::InvalidInput(
                "lambda_recon must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Draws `length` tokens from the model with `<eos>` and `<unk>` masked,
/// then appends `<eos>`.
pub fn sample_sentence(
    params: &ModelParams,
    vocab: &ClassedVocabulary,
    v: &[f64],
    length: usize,
    rng: &mut SeededRng,
) -> Result<EncodedSentence> {
    if length == 0 {
        return Err(Error::InvalidInput(
            "sentence length must be at least 1".into(),
        ));
    }
    if vocab.len() != params.dims().vocab_size {
        return Err(Error::Shape("vocabulary does not match the model".into()));
    }
    if vocab.len() <= 2 {
        return Err(Error::InvalidInput("vocabulary has no real words".into()));
    }
    let mut state = params.reset_state();
    let mut prev = EOS_ID;
    let mut ids = Vec::with_capacity(length + 1);
    for _ in 0..length {
        let (next, out) = params.step(&state, prev, v)?;
        let mut p = out.word_dist;
        p[EOS_ID] = 0.0;
        p[UNK_ID] = 0.0;
        let mass: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= mass);
        prev = sample_unchecked(&p, rng);
        ids.push(prev);
        state = next;
    }
    ids.push(EOS_ID);
    EncodedSentence::from_ids(ids, vocab)
}

/// Joint loss used for rescoring: word NLL plus weighted reconstruction error.
pub fn score_candidate(
    params: &ModelParams,
    v: &[f64],
    sent: &EncodedSentence,
    lambda_recon: f64,
) -> Result<f64> {
    Ok(params.sentence_loss(v, sent, lambda_recon)?.0.joint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub sentence: EncodedSentence,
    pub score: f64,
    pub length: usize,
}

/// One shared length, `candidate_count` samples of it, lowest score wins
/// (earliest candidate on ties).
pub fn generate(
    params: &ModelParams,
    vocab: &ClassedVocabulary,
    v: &[f64],
    hist: &LengthHistogram,
    cfg: &GenConfig,
    rng: &mut SeededRng,
) -> Result<Generated> {
    cfg.validate()?;
    let length = sample_length(hist, rng);
    let mut best: Option<Generated> = None;
    for _ in 0..cfg.candidate_count {
        let sentence = sample_sentence(params, vocab, v, length, rng)?;
        let score = score_candidate(params, v, &sentence, cfg.lambda_recon)?;
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(Generated {
                sentence,
                score,
                length,
            });
        }
    }
    Ok(best.expect("candidate_count >= 1"))
}

/// Generates for every feature vector; example `i` draws from its own stream
/// derived from `cfg.seed` and `i`, so output is independent of thread count.
pub fn generate_all(
    params: &ModelParams,
    vocab: &ClassedVocabulary,
    features: &[&[f64]],
    hist: &LengthHistogram,
    cfg: &GenConfig,
) -> Result<Vec<Generated>> {
    cfg.validate()?;
    features
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = SeededRng::new(derive_seed(cfg.seed, i as u64));
            generate(params, vocab, v, hist, cfg, &mut rng)
        })
        .collect()
}

/// `ln P(sent | v)`.
pub fn log_likelihood(params: &ModelParams, v: &[f64], sent: &EncodedSentence) -> Result<f64> {
    Ok(-params.sentence_loss(v, sent, 0.0)?.0.word_nll)
}

/// Negated mean reconstruction error over the steps of `sent`.
pub fn recon_score(params: &ModelParams, v: &[f64], sent: &EncodedSentence) -> Result<f64> {
    recon_score_group(params, v, &[sent])
}

fn recon_score_group(params: &ModelParams, v: &[f64], sents: &[&EncodedSentence]) -> Result<f64> {
    if !params.dims().has_memory() {
        return Err(Error::InvalidInput(format!(
            "variant {} has no visual memory to score with",
            params.dims().variant
        )));
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    for s in sents {
        let (loss, per_step) = params.sentence_loss(v, s, 1.0)?;
        total += loss.recon_loss;
        steps += per_step.len();
    }
    Ok(-total / steps as f64)
}

/// T score of `(image, text)` normalized in probability space over a
/// gallery of log-likelihoods that includes the pairing itself.
pub fn text_score(ln_p: f64, gallery_ln_p: &[f64]) -> Result<f64> {
    if gallery_ln_p.is_empty() {
        return Err(Error::InvalidInput("empty gallery".into()));
    }
    Ok((ln_p - log_sum_exp(gallery_ln_p)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Text,
    Recon,
    Combined,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "text" => Ok(ScoreMode::Text),
            "i" | "recon" => Ok(ScoreMode::Recon),
            "t+i" | "ti" | "combined" => Ok(ScoreMode::Combined),
            other => Err(Error::InvalidInput(format!("unknown score mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::Text => "T",
            ScoreMode::Recon => "I",
            ScoreMode::Combined => "T+I",
        })
    }
}

/// How T and I are merged for [`ScoreMode::Combined`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// Sum of per-gallery z-scores of `T` and `I`.
    #[default]
    ZScore,
    /// Sum of per-gallery z-scores of `ln T` and `I`.
    LogZScore,
    /// Negated mean of the two rank positions.
    RankAverage,
}

/// What the T score is normalized over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextNorm {
    /// `P(s|v) / Σ_{v'} P(s|v')` in both directions.
    #[default]
    OverImages,
    /// Over whatever the gallery holds: images for image retrieval,
    /// sentences for sentence retrieval.
    OverGallery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Every caption is its own text item.
    PerSentence,
    /// All captions of an image form one text item.
    Concatenated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Text queries, image gallery.
    Image,
    /// Image queries, text gallery.
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Gallery indices per query, best first.
    pub rankings: Vec<Vec<usize>>,
    /// 1-based rank of the first ground-truth item per query.
    pub ranks: Vec<usize>,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
}

impl RetrievalResult {
    pub fn from_rankings(rankings: Vec<Vec<usize>>, ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidInput("no queries".into()));
        }
        let n = ranks.len() as f64;
        let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        let m = sorted.len();
        let median_rank = if m % 2 == 1 {
            sorted[m / 2] as f64
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
        };
        Ok(Self {
            recall_at_1: recall(1),
            recall_at_5: recall(5),
            recall_at_10: recall(10),
            median_rank,
            mean_rank: ranks.iter().sum::<usize>() as f64 / n,
            rankings,
            ranks,
        })
    }
}

/// Gallery order by descending score, earliest index first on ties, and the
/// 1-based rank of the first item for which `is_truth` holds.
pub fn rank_by_scores(
    scores: &[f64],
    is_truth: impl Fn(usize) -> bool,
) -> Result<(Vec<usize>, usize)> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN retrieval score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let rank = order
        .iter()
        .position(|&i| is_truth(i))
        .ok_or_else(|| Error::InvalidInput("query has no ground truth in the gallery".into()))?;
    Ok((order, rank + 1))
}

/// Image-by-text score tables for a retrieval gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTables {
    /// Image index each text item belongs to.
    pub text_image: Vec<usize>,
    /// `ln P(text_k | image_i)` at `[i][k]`.
    pub log_lik: Vec<Vec<f64>>,
    /// I score at `[i][k]`; absent for variants without memory.
    pub recon: Option<Vec<Vec<f64>>>,
}

impl ScoreTables {
    pub fn compute(
        params: &ModelParams,
        images: &[&CaptionedExample],
        protocol: Protocol,
    ) -> Result<Self> {
        let mut items: Vec<(usize, Vec<&EncodedSentence>)> = Vec::new();
        for (i, e) in images.iter().enumerate() {
            if e.captions.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "example {} has no captions",
                    e.id
                )));
            }
            match protocol {
                Protocol::PerSentence => items.extend(e.captions.iter().map(|c| (i, vec![c]))),
                Protocol::Concatenated => items.push((i, e.captions.iter().collect())),
            }
        }
        let memory = params.dims().has_memory();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = images
            .par_iter()
            .map(|img| {
                let v = img.features.values();
                let mut ll = Vec::with_capacity(items.len());
                let mut rc = Vec::with_capacity(items.len());
                for (_, sents) in &items {
                    let mut lp = 0.0;
                    for s in sents {
                        lp += log_likelihood(params, v, s)?;
                    }
                    ll.push(lp);
                    if memory {
                        rc.push(recon_score_group(params, v, sents)?);
                    }
                }
                Ok((ll, rc))
            })
            .collect::<Result<_>>()?;
        let (log_lik, recon): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Ok(Self {
            text_image: items.iter().map(|p| p.0).collect(),
            log_lik,
            recon: memory.then_some(recon),
        })
    }

    pub fn image_count(&self) -> usize {
        self.log_lik.len()
    }

    pub fn text_count(&self) -> usize {
        self.text_image.len()
    }
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        x.iter().map(|a| (a - mean) / sd).collect()
    } else {
        vec![0.0; x.len()]
    }
}

fn rank_positions(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut pos = vec![0.0; x.len()];
    for (r, &i) in order.iter().enumerate() {
        pos[i] = r as f64;
    }
    pos
}

/// Merges per-gallery T (given as `ln T`) and I scores.
pub fn combine_scores(ln_t: &[f64], recon: &[f64], how: Combination) -> Vec<f64> {
    match how {
        Combination::ZScore => {
            let t: Vec<f64> = ln_t.iter().map(|x| x.exp()).collect();
            standardize(&t)
                .iter()
                .zip(standardize(recon))
                .map(|(a, b)| a + b)
                .collect()
        }
        Combination::LogZScore => standardize(ln_t)
            .iter()
            .zip(standardize(recon))
            .map(|(a, b)| a + b)
            .collect(),
        Combination::RankAverage => rank_positions(ln_t)
            .iter()
            .zip(rank_positions(recon))
            .map(|(a, b)| -(a + b) / 2.0)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalOptions {
    pub mode: ScoreMode,
    pub direction: Direction,
    pub combination: Combination,
    pub text_norm: TextNorm,
}

impl RetrievalOptions {
    pub fn new(mode: ScoreMode, direction: Direction) -> Self {
        Self {
            mode,
            direction,
            combination: Combination::default(),
            text_norm: TextNorm::default(),
        }
    }
}

/// Ranks the gallery for every query from precomputed score tables.
pub fn rank_tables(tables: &ScoreTables, opts: &RetrievalOptions) -> Result<RetrievalResult> {
    let n_img = tables.image_count();
    let n_txt = tables.text_count();
    if n_img == 0 || n_txt == 0 {
        return Err(Error::InvalidInput("empty gallery".into()));
    }
    if opts.mode != ScoreMode::Text && tables.recon.is_none() {
        return Err(Error::InvalidInput(format!(
            "{} scoring needs the visual memory",
            opts.mode
        )));
    }
    // ln T over images for every text item
    let ln_t_img: Vec<Vec<f64>> = {
        let mut t = vec![vec![0.0; n_txt]; n_img];
        for k in 0..n_txt {
            let col: Vec<f64> = (0..n_img).map(|i| tables.log_lik[i][k]).collect();
            let z = log_sum_exp(&col);
            for i in 0..n_img {
                t[i][k] = col[i] - z;
            }
        }
        t
    };
    let recon = tables.recon.as_ref();

    let mut rankings = Vec::new();
    let mut ranks = Vec::new();
    match opts.direction {
        Direction::Image => {
            for k in 0..n_txt {
                let ln_t: Vec<f64> = (0..n_img).map(|i| ln_t_img[i][k]).collect();
                let scores = match opts.mode {
                    ScoreMode::Text => ln_t,
                    ScoreMode::Recon => (0..n_img).map(|i| recon.unwrap()[i][k]).collect(),
                    ScoreMode::Combined => {
                        let r: Vec<f64> = (0..n_img).map(|i| recon.unwrap()[i][k]).collect();
                        combine_scores(&ln_t, &r, opts.combination)
                    }
                };
                let truth = tables.text_image[k];
                let (order, rank) = rank_by_scores(&scores, |i| i == truth)?;
                rankings.push(order);
                ranks.push(rank);
            }
        }
        Direction::Sentence => {
            for i in 0..n_img {
                let ln_t: Vec<f64> = match opts.text_norm {
                    TextNorm::OverImages => ln_t_img[i].clone(),
                    TextNorm::OverGallery => {
                        let z = log_sum_exp(&tables.log_lik[i]);
                        tables.log_lik[i].iter().map(|x| x - z).collect()
                    }
                };
                let scores = match opts.mode {
                    ScoreMode::Text => ln_t,
                    ScoreMode::Recon => recon.unwrap()[i].clone(),
                    ScoreMode::Combined => {
                        combine_scores(&ln_t, &recon.unwrap()[i], opts.combination)
                    }
                };
                let (order, rank) = rank_by_scores(&scores, |k| tables.text_image[k] == i)?;
                rankings.push(order);
                ranks.push(rank);
            }
        }
    }
    RetrievalResult::from_rankings(rankings, ranks)
}

pub fn rank_retrieval(
    params: &ModelParams,
    images: &[&CaptionedExample],
    protocol: Protocol,
    opts: &RetrievalOptions,
) -> Result<RetrievalResult> {
    rank_tables(&ScoreTables::compute(params, images, protocol)?, opts)
}

/// Hidden activations after each token of a sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub tokens: Vec<String>,
    pub s: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Per-unit mean absolute change between consecutive rows.
    pub fn stability(rows: &[Vec<f64>]) -> Vec<f64> {
        if rows.len() < 2 {
            return vec![0.0; rows.first().map_or(0, Vec::len)];
        }
        let steps = (rows.len() - 1) as f64;
        (0..rows[0].len())
            .map(|j| {
                rows.windows(2)
                    .map(|w| (w[1][j] - w[0][j]).abs())
                    .sum::<f64>()
                    / steps
            })
            .collect()
    }

    pub fn s_stability(&self) -> Vec<f64> {
        Self::stability(&self.s)
    }

    pub fn u_stability(&self) -> Vec<f64> {
        Self::stability(&self.u)
    }

    /// Tab-separated table: `token`, `s_0..`, `u_0..`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("token");
        for j in 0..self.s.first().map_or(0, Vec::len) {
            let _ = write!(out, "\ts_{j}");
        }
        for j in 0..self.u.first().map_or(0, Vec::len) {
            let _ = write!(out, "\tu_{j}");
        }
        out.push('\n');
        for (t, tok) in self.tokens.iter().enumerate() {
            out.push_str(tok);
            for x in self.s[t].iter().chain(&self.u[t]) {
                let _ = write!(out, "\t{x:.6}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Resets, reads the begin marker, then records the state after reading
/// each token of `sent` (including the final `<eos>`).
pub fn activation_trace(
    params: &ModelParams,
    vocab: &ClassedVocabulary,
    v: &[f64],
    sent: &EncodedSentence,
) -> Result<ActivationTrace> {
    let mut state = params.advance(&params.reset_state(), EOS_ID, v);
    let mut trace = ActivationTrace {
        tokens: Vec::with_capacity(sent.len()),
        s: Vec::with_capacity(sent.len()),
        u: Vec::with_capacity(sent.len()),
    };
    for &id in &sent.ids {
        if id >= params.dims().vocab_size {
            return Err(Error::InvalidInput(format!("token id {id} out of range")));
        }
        state = params.advance(&state, id, v);
        trace.tokens.push(vocab.token(id).to_string());
        trace.s.push(state.s.clone());
        trace.u.push(state.u.clone());
    }
    Ok(trace)
}
