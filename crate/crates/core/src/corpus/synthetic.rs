use super::dataset::{CaptionedExample, Dataset, FeatureVector, Split};
use super::vocab::{build_vocab, encode};
use crate::error::{Error, Result};
use crate::numkit::SeededRng;

const LEXICON: &[&str] = &[
    "dog", "cat", "ball", "tree", "car", "bird", "chair", "table", "kite", "boat", "horse",
    "bench", "lamp", "cup", "book", "clock", "bike", "fence", "flower", "hat", "sun", "cloud",
    "bus", "train", "pizza", "umbrella", "girl", "boy", "sheep", "cow", "plane", "bottle",
];

const INTROS: &[&[&str]] = &[
    &["there", "is"],
    &["we", "can", "see"],
    &["this", "picture", "shows"],
    &["the", "photo", "has"],
    &["look", "at"],
];

const PLACES: &[&[&str]] = &[
    &["on", "the", "left"],
    &["on", "the", "right"],
    &["in", "the", "middle"],
    &["in", "the", "back"],
    &["near", "the", "front"],
];

const CONNECTORS: &[&[&str]] = &[&["and"], &["and", "also"], &["as", "well", "as"], &["plus"]];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub attr_count: usize,
    pub example_count: usize,
    pub captions_per_example: usize,
    pub active_prob: f64,
    /// Probability that a mention is followed by a location phrase.
    pub place_prob: f64,
    /// Fractions of examples assigned to train and valid; the rest is test.
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl SyntheticConfig {
    pub fn new(attr_count: usize, example_count: usize) -> Self {
        Self {
            attr_count,
            example_count,
            captions_per_example: 5,
            active_prob: 0.4,
            place_prob: 0.5,
            train_frac: 0.7,
            valid_frac: 0.1,
        }
    }
}

/// Attribute words in feature-dimension order.
pub fn attribute_names(attr_count: usize) -> Vec<String> {
    (0..attr_count)
        .map(|i| match LEXICON.get(i) {
            Some(w) => w.to_string(),
            None => format!("thing{i}"),
        })
        .collect()
}

pub fn generate_synthetic(
    attr_count: usize,
    example_count: usize,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    generate_synthetic_with(&SyntheticConfig::new(attr_count, example_count), rng)
}

/// Binary attribute scenes with templated captions. Each caption mentions
/// every active attribute exactly once, in random order, separated by filler
/// phrases; attribute words never occur as filler.
pub fn generate_synthetic_with(cfg: &SyntheticConfig, rng: &mut SeededRng) -> Result<Dataset> {
    if cfg.attr_count < 2 {
        return Err(Error::InvalidInput("attr_count must be at least 2".into()));
    }
    if cfg.example_count == 0 || cfg.captions_per_example == 0 {
        return Err(Error::InvalidInput(
            "need at least one example and caption".into(),
        ));
    }
    let names = attribute_names(cfg.attr_count);
    let n_train = ((cfg.example_count as f64) * cfg.train_frac).round() as usize;
    let n_valid = ((cfg.example_count as f64) * cfg.valid_frac).round() as usize;

    let mut raw = Vec::with_capacity(cfg.example_count);
    for idx in 0..cfg.example_count {
        let mut active: Vec<usize> = (0..cfg.attr_count)
            .filter(|_| rng.bernoulli(cfg.active_prob))
            .collect();
        if active.is_empty() {
            active.push(rng.below(cfg.attr_count));
        }
        let mut features = vec![0.0; cfg.attr_count];
        for &a in &active {
            features[a] = 1.0;
        }
        let captions: Vec<Vec<String>> = (0..cfg.captions_per_example)
            .map(|_| caption(&active, &names, cfg.place_prob, rng))
            .collect();
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        raw.push((format!("syn{idx:05}"), split, features, captions));
    }

    let train_sents: Vec<Vec<String>> = raw
        .iter()
        .filter(|r| r.1 == Split::Train)
        .flat_map(|r| r.3.iter().cloned())
        .collect();
    let all_sents: Vec<Vec<String>> = raw.iter().flat_map(|r| r.3.iter().cloned()).collect();
    let vocab = build_vocab(
        if train_sents.is_empty() {
            &all_sents
        } else {
            &train_sents
        },
        None,
        1,
    )?;

    let examples = raw
        .into_iter()
        .map(|(id, split, features, caps)| CaptionedExample {
            id,
            split,
            features: FeatureVector::new(features).expect("binary features"),
            captions: caps.iter().map(|c| encode(c, &vocab)).collect(),
        })
        .collect();
    Ok(Dataset {
        examples,
        vocab,
        feature_dim: cfg.attr_count,
        norm_max: vec![1.0; cfg.attr_count],
    })
}

fn caption(
    active: &[usize],
    names: &[String],
    place_prob: f64,
    rng: &mut SeededRng,
) -> Vec<String> {
    let mut order = active.to_vec();
    rng.shuffle(&mut order);
    let mut words: Vec<String> = Vec::new();
    let push = |words: &mut Vec<String>, phrase: &[&str]| {
        words.extend(phrase.iter().map(|w| w.to_string()))
    };

    push(&mut words, INTROS[rng.below(INTROS.len())]);
    for (i, &a) in order.iter().enumerate() {
        if i > 0 {
            push(&mut words, CONNECTORS[rng.below(CONNECTORS.len())]);
        }
        words.push("a".to_string());
        words.push(names[a].clone());
        if rng.bernoulli(place_prob) {
            push(&mut words, PLACES[rng.below(PLACES.len())]);
        }
    }
    words.push(".".to_string());
    words
}
