use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const EOS_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Assignment of every word id to exactly one frequency class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordClasses {
    class_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl WordClasses {
    /// Builds the class structure from a per-id class label.
    pub fn from_assignment(class_of: Vec<usize>) -> Result<Self> {
        let class_count = class_of.iter().max().map_or(0, |&c| c + 1);
        let mut members = vec![Vec::new(); class_count];
        for (id, &c) in class_of.iter().enumerate() {
            members[c].push(id);
        }
        if members.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput(
                "every class needs at least one word".into(),
            ));
        }
        Ok(Self { class_of, members })
    }

    pub fn vocab_size(&self) -> usize {
        self.class_of.len()
    }

    pub fn class_count(&self) -> usize {
        self.members.len()
    }

    pub fn class_of(&self, id: usize) -> usize {
        self.class_of[id]
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    /// Position of `id` inside its class member list.
    pub fn position_in_class(&self, id: usize) -> usize {
        self.members[self.class_of[id]]
            .iter()
            .position(|&m| m == id)
            .expect("id belongs to its class")
    }

    pub fn assignment(&self) -> &[usize] {
        &self.class_of
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassedVocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    counts: Vec<u64>,
    classes: WordClasses,
}

impl ClassedVocabulary {
    /// Reassembles a vocabulary, e.g. from a checkpoint.
    pub fn from_parts(tokens: Vec<String>, counts: Vec<u64>, class_of: Vec<usize>) -> Result<Self> {
        if tokens.len() != counts.len() || tokens.len() != class_of.len() {
            return Err(Error::InvalidInput(
                "vocabulary parts have different lengths".into(),
            ));
        }
        if tokens.get(EOS_ID).map(String::as_str) != Some(EOS)
            || tokens.get(UNK_ID).map(String::as_str) != Some(UNK)
        {
            return Err(Error::InvalidInput(
                "vocabulary must start with <eos>, <unk>".into(),
            ));
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::InvalidInput("duplicate vocabulary token".into()));
        }
        let classes = WordClasses::from_assignment(class_of)?;
        Ok(Self {
            tokens,
            index,
            counts,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn classes(&self) -> &WordClasses {
        &self.classes
    }

    /// Stable digest over tokens, counts and class labels.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for ((t, c), k) in self
            .tokens
            .iter()
            .zip(&self.counts)
            .zip(self.classes.assignment())
        {
            h.update(t.as_bytes());
            h.update([0u8]);
            h.update(c.to_le_bytes());
            h.update((*k as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSentence {
    /// Token ids; always ends with [`EOS_ID`].
    pub ids: Vec<usize>,
    /// The original tokens, without the terminator.
    pub tokens: Vec<String>,
}

impl EncodedSentence {
    pub fn from_ids(ids: Vec<usize>, vocab: &ClassedVocabulary) -> Result<Self> {
        if ids.last() != Some(&EOS_ID) {
            return Err(Error::InvalidInput("sentence must end with <eos>".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.len()) {
            return Err(Error::InvalidInput(format!("token id {bad} out of range")));
        }
        let tokens = ids[..ids.len() - 1]
            .iter()
            .map(|&i| vocab.token(i).to_string())
            .collect();
        Ok(Self { ids, tokens })
    }

    /// Number of predictions the sentence contributes (words + `<eos>`).
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn words(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }
}

pub fn default_class_count(vocab_size: usize) -> usize {
    ((vocab_size as f64).sqrt().ceil() as usize).max(1)
}

/// Builds the vocabulary. Word ids follow descending frequency (ties broken
/// alphabetically) after the reserved `<eos>` and `<unk>`. Classes are
/// contiguous runs of that frequency order with as equal probability mass as
/// possible (minimum sum of squared class masses).
pub fn build_vocab(
    sentences: &[Vec<String>],
    class_count: Option<usize>,
    min_count: u64,
) -> Result<ClassedVocabulary> {
    if min_count == 0 {
        return Err(Error::InvalidInput("min_count must be at least 1".into()));
    }
    if class_count == Some(0) {
        return Err(Error::InvalidInput("class_count must be at least 1".into()));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for sent in sentences {
        for tok in sent {
            *freq.entry(tok.as_str()).or_default() += 1;
        }
    }
    freq.remove(EOS);
    freq.remove(UNK);
    if freq.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }

    let mut words: Vec<(&str, u64)> = freq.into_iter().collect();
    let unk_count: u64 = words.iter().filter(|w| w.1 < min_count).map(|w| w.1).sum();
    words.retain(|w| w.1 >= min_count);
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens = vec![EOS.to_string(), UNK.to_string()];
    let mut counts = vec![sentences.len() as u64, unk_count];
    for (w, c) in words {
        tokens.push(w.to_string());
        counts.push(c);
    }

    let k = class_count
        .unwrap_or_else(|| default_class_count(tokens.len()))
        .min(tokens.len());
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let sorted_counts: Vec<u64> = order.iter().map(|&i| counts[i]).collect();
    let groups = partition_by_mass(&sorted_counts, k);
    let mut class_of = vec![0; tokens.len()];
    for (pos, &id) in order.iter().enumerate() {
        class_of[id] = groups[pos];
    }
    ClassedVocabulary::from_parts(tokens, counts, class_of)
}

/// Splits `counts` (in the given order) into `k` contiguous nonempty groups
/// minimizing the sum of squared group totals. Returns the group label of
/// each position. `k` is clamped to `counts.len()`.
///
/// Segment cost `(P_j - P_i)^2` is Monge, so the optimal split point is
/// monotone and divide-and-conquer DP applies: O(k n log n).
pub fn partition_by_mass(counts: &[u64], k: usize) -> Vec<usize> {
    let n = counts.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let mut prefix = vec![0u128; n + 1];
    for (i, &c) in counts.iter().enumerate() {
        prefix[i + 1] = prefix[i] + c as u128;
    }
    let cost = |i: usize, j: usize| {
        let m = prefix[j] - prefix[i];
        m * m
    };

    const INF: u128 = u128::MAX;
    // best[j]: minimum cost of splitting the first j items into the current number of groups
    let mut best: Vec<u128> = (0..=n)
        .map(|j| if j == 0 { 0 } else { cost(0, j) })
        .collect();
    best[0] = INF;
    let mut splits: Vec<Vec<usize>> = Vec::with_capacity(k);
    splits.push(vec![0; n + 1]);

    struct Ctx<'a, F: Fn(usize, usize) -> u128> {
        prev: &'a [u128],
        cur: &'a mut [u128],
        arg: &'a mut [usize],
        cost: F,
    }
    fn solve<F: Fn(usize, usize) -> u128>(
        ctx: &mut Ctx<'_, F>,
        lo: usize,
        hi: usize,
        opt_lo: usize,
        opt_hi: usize,
    ) {
        if lo > hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let mut best = INF;
        let mut arg = opt_lo;
        for i in opt_lo..=opt_hi.min(mid - 1) {
            if ctx.prev[i] == INF {
                continue;
            }
            let v = ctx.prev[i] + (ctx.cost)(i, mid);
            if v < best {
                best = v;
                arg = i;
            }
        }
        ctx.cur[mid] = best;
        ctx.arg[mid] = arg;
        if mid > lo {
            solve(ctx, lo, mid - 1, opt_lo, arg);
        }
        solve(ctx, mid + 1, hi, arg, opt_hi);
    }

    for g in 1..k {
        let mut cur = vec![INF; n + 1];
        let mut arg = vec![0; n + 1];
        // g+1 groups need at least g+1 items
        let mut ctx = Ctx {
            prev: &best,
            cur: &mut cur,
            arg: &mut arg,
            cost,
        };
        solve(&mut ctx, g + 1, n, g, n - 1);
        best = cur;
        splits.push(arg);
    }

    let mut labels = vec![0; n];
    let mut end = n;
    for g in (0..k).rev() {
        let start = if g == 0 { 0 } else { splits[g][end] };
        for l in &mut labels[start..end] {
            *l = g;
        }
        end = start;
    }
    labels
}

/// Maps tokens to ids (unknown words become `<unk>`) and appends `<eos>`.
pub fn encode(tokens: &[String], vocab: &ClassedVocabulary) -> EncodedSentence {
    let mut ids: Vec<usize> = tokens
        .iter()
        .map(|t| vocab.id(t).filter(|&i| i != EOS_ID).unwrap_or(UNK_ID))
        .collect();
    ids.push(EOS_ID);
    EncodedSentence {
        ids,
        tokens: tokens.to_vec(),
    }
}

/// Ids back to tokens, stopping at the first `<eos>`.
pub fn decode(ids: &[usize], vocab: &ClassedVocabulary) -> Vec<String> {
    ids.iter()
        .take_while(|&&i| i != EOS_ID)
        .map(|&i| vocab.token(i).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sents(text: &[&str]) -> Vec<Vec<String>> {
        text.iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    /// Enumerates every placement of k-1 cuts; returns the minimum objective.
    fn brute_force_min_cost(counts: &[u64], k: usize) -> u128 {
        fn rec(counts: &[u64], k: usize) -> u128 {
            if k == 1 {
                let m: u128 = counts.iter().map(|&c| c as u128).sum();
                return m * m;
            }
            let mut best = u128::MAX;
            for first in 1..=counts.len() - (k - 1) {
                let m: u128 = counts[..first].iter().map(|&c| c as u128).sum();
                best = best.min(m * m + rec(&counts[first..], k - 1));
            }
            best
        }
        rec(counts, k.min(counts.len()))
    }

    fn cost_of(counts: &[u64], labels: &[usize]) -> u128 {
        let k = labels.iter().max().unwrap() + 1;
        let mut mass = vec![0u128; k];
        for (&c, &l) in counts.iter().zip(labels) {
            mass[l] += c as u128;
        }
        mass.iter().map(|m| m * m).sum()
    }

    #[test]
    fn equal_mass_example() {
        assert_eq!(partition_by_mass(&[8, 4, 2, 2], 2), vec![0, 1, 1, 1]);
    }

    #[test]
    fn vocab_with_example_counts() {
        let corpus = sents(&["a a a a a a a a b b b b c c d d"]);
        let v = build_vocab(&corpus, Some(3), 1).unwrap();
        assert_eq!(v.tokens(), &["<eos>", "<unk>", "a", "b", "c", "d"]);
        assert_eq!(v.counts(), &[1, 0, 8, 4, 2, 2]);
        let c = v.classes();
        // order a(8) b(4) c(2) d(2) eos(1) unk(0); total 17
        assert_eq!(c.class_of(2), 0);
        assert_eq!(c.class_of(3), 1);
        assert_eq!(c.class_of(4), 2);
        assert_eq!(c.class_of(EOS_ID), 2);
    }

    #[test]
    fn minimal_vocab() {
        let v = build_vocab(&sents(&["hello hello"]), None, 1).unwrap();
        assert_eq!(v.tokens(), &["<eos>", "<unk>", "hello"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(build_vocab(&[], None, 1).is_err());
        assert!(build_vocab(&sents(&[""]), None, 1).is_err());
        assert!(build_vocab(&sents(&["x"]), Some(0), 1).is_err());
    }

    #[test]
    fn min_count_maps_rare_words_to_unk() {
        let v = build_vocab(&sents(&["a a b", "a c"]), None, 2).unwrap();
        assert_eq!(v.tokens(), &["<eos>", "<unk>", "a"]);
        assert_eq!(v.counts()[UNK_ID], 2);
        let e = encode(&["b".to_string(), "a".to_string()], &v);
        assert_eq!(e.ids, vec![UNK_ID, 2, EOS_ID]);
    }

    #[test]
    fn encode_contract() {
        let v = build_vocab(&sents(&["the cat sat"]), None, 1).unwrap();
        assert_eq!(encode(&[], &v).ids, vec![EOS_ID]);
        let oov = encode(&["dog".to_string()], &v);
        assert_eq!(oov.ids, vec![UNK_ID, EOS_ID]);
        let toks: Vec<String> = ["the", "sat", "cat"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(decode(&encode(&toks, &v).ids, &v), toks);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = build_vocab(&sents(&["a b c"]), None, 1).unwrap();
        let b = build_vocab(&sents(&["a b c"]), None, 1).unwrap();
        let c = build_vocab(&sents(&["a b d"]), None, 1).unwrap();
        assert_eq!(a.hash_hex(), b.hash_hex());
        assert_ne!(a.hash_hex(), c.hash_hex());
    }

    fn zipf_corpus(distinct: usize, exponent: f64, total: usize) -> Vec<u64> {
        let weights: Vec<f64> = (1..=distinct)
            .map(|r| 1.0 / (r as f64).powf(exponent))
            .collect();
        let z: f64 = weights.iter().sum();
        weights
            .iter()
            .map(|w| ((w / z) * total as f64).round().max(1.0) as u64)
            .collect()
    }

    proptest! {
        #[test]
        fn dp_matches_brute_force(
            counts in prop::collection::vec(0u64..50, 1..9),
            k in 1usize..6,
        ) {
            let labels = partition_by_mass(&counts, k);
            let kk = k.min(counts.len());
            prop_assert_eq!(labels.len(), counts.len());
            prop_assert_eq!(*labels.last().unwrap(), kk - 1);
            prop_assert!(labels.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            prop_assert_eq!(cost_of(&counts, &labels), brute_force_min_cost(&counts, k));
        }

        #[test]
        fn classes_partition_ids(
            words in prop::collection::vec(prop::collection::vec(0u8..30, 0..12), 1..20),
            k in proptest::option::of(1usize..10),
        ) {
            let corpus: Vec<Vec<String>> = words
                .iter()
                .map(|s| s.iter().map(|w| format!("w{w}")).collect())
                .collect();
            prop_assume!(corpus.iter().any(|s| !s.is_empty()));
            let v = build_vocab(&corpus, k, 1).unwrap();
            let c = v.classes();
            let mut seen = vec![0usize; v.len()];
            for class in 0..c.class_count() {
                prop_assert!(!c.members(class).is_empty());
                for &id in c.members(class) {
                    seen[id] += 1;
                    prop_assert_eq!(c.class_of(id), class);
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
        }

        #[test]
        fn zipfian_class_masses_balanced(
            class_count in 2usize..12,
            extra in 0usize..40,
            exponent in 0.0f64..0.5,
            seed in any::<u64>(),
        ) {
            let distinct = 4 * class_count + extra;
            let mut counts = zipf_corpus(distinct, exponent, 20_000);
            // mild random perturbation so ties vary
            let mut rng = crate::numkit::SeededRng::new(seed);
            for c in &mut counts {
                *c += rng.below(3) as u64;
            }
            counts.sort_unstable_by(|a, b| b.cmp(a));
            let labels = partition_by_mass(&counts, class_count);
            let mut mass = vec![0u64; class_count];
            for (&c, &l) in counts.iter().zip(&labels) {
                mass[l] += c;
            }
            let max = *mass.iter().max().unwrap() as f64;
            let min = *mass.iter().min().unwrap() as f64;
            prop_assert!(max <= 2.0 * min, "masses {:?}", mass);
        }
    }
}
