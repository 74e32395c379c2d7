use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::vocab::{build_vocab, encode, ClassedVocabulary, EncodedSentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// A visual observation normalized to `[0, 1]` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "feature values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedExample {
    pub id: String,
    pub split: Split,
    pub features: FeatureVector,
    pub captions: Vec<EncodedSentence>,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub captions: Vec<String>,
    pub split: Split,
}

/// Sidecar written next to a dataset file as `<file>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub feature_dim: usize,
    pub record_count: usize,
    /// Per-dimension maximum of the raw training features.
    pub norm_max: Vec<f64>,
}

impl DatasetManifest {
    pub fn path_for(dataset: &Path) -> PathBuf {
        let mut name = dataset.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<CaptionedExample>,
    pub vocab: ClassedVocabulary,
    pub feature_dim: usize,
    pub norm_max: Vec<f64>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaptionedExample> + '_ {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<&CaptionedExample> {
        self.split(split).collect()
    }

    pub fn example(&self, id: &str) -> Option<&CaptionedExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Histogram of training caption lengths (words, excluding `<eos>`).
    pub fn train_length_counts(&self) -> Vec<(usize, u64)> {
        let mut counts = std::collections::BTreeMap::new();
        for e in self.split(Split::Train) {
            for c in &e.captions {
                *counts.entry(c.words().len()).or_insert(0u64) += 1;
            }
        }
        counts.into_iter().collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            feature_dim: self.feature_dim,
            record_count: self.examples.len(),
            norm_max: self.norm_max.clone(),
        }
    }

    /// Re-encodes every caption with another vocabulary.
    pub fn with_vocab(mut self, vocab: ClassedVocabulary) -> Self {
        for e in &mut self.examples {
            for c in &mut e.captions {
                *c = encode(&c.tokens, &vocab);
            }
        }
        self.vocab = vocab;
        self
    }
}

/// Divides every raw feature by the per-dimension maximum over the rows
/// flagged in `is_train`, then clamps into `[0, 1]`. Dimensions whose training
/// maximum is not positive map to 0.
pub fn normalize_features(raw: &[Vec<f64>], is_train: &[bool]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dim = raw.first().map_or(0, Vec::len);
    let mut max = vec![0.0f64; dim];
    for (row, _) in raw.iter().zip(is_train).filter(|(_, &t)| t) {
        for (m, &x) in max.iter_mut().zip(row) {
            *m = m.max(x);
        }
    }
    let normalized = raw
        .iter()
        .map(|row| {
            row.iter()
                .zip(&max)
                .map(|(&x, &m)| {
                    if m > 0.0 {
                        (x / m).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (normalized, max)
}

pub fn load_dataset(
    path: &Path,
    vocab: Option<ClassedVocabulary>,
    class_count: Option<usize>,
) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if record.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "non-finite feature value".into(),
            });
        }
        if record.captions.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "record has no captions".into(),
            });
        }
        records.push((lineno + 1, record));
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no records",
            path.display()
        )));
    }

    let manifest_path = DatasetManifest::path_for(path);
    let declared_dim = if manifest_path.exists() {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        Some(m.feature_dim)
    } else {
        None
    };
    let dim = declared_dim.unwrap_or(records[0].1.features.len());
    if let Some((line, r)) = records.iter().find(|(_, r)| r.features.len() != dim) {
        return Err(Error::InvalidInput(format!(
            "{}:{line}: record {:?} has feature dim {}, dataset dim is {dim}",
            path.display(),
            r.id,
            r.features.len()
        )));
    }
    let mut ids = std::collections::HashSet::new();
    if let Some((line, r)) = records.iter().find(|(_, r)| !ids.insert(r.id.clone())) {
        return Err(Error::InvalidInput(format!(
            "{}:{line}: duplicate record id {:?}",
            path.display(),
            r.id
        )));
    }

    let raw: Vec<Vec<f64>> = records.iter().map(|(_, r)| r.features.clone()).collect();
    let is_train: Vec<bool> = records
        .iter()
        .map(|(_, r)| r.split == Split::Train)
        .collect();
    let (normalized, norm_max) = normalize_features(&raw, &is_train);

    let tokenized: Vec<Vec<Vec<String>>> = records
        .iter()
        .map(|(_, r)| r.captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let train: Vec<Vec<String>> = tokenized
                .iter()
                .zip(&is_train)
                .filter(|(_, &t)| t)
                .flat_map(|(caps, _)| caps.iter().cloned())
                .collect();
            build_vocab(&train, class_count, 1)?
        }
    };

    let examples = records
        .into_iter()
        .zip(normalized)
        .zip(tokenized)
        .map(|(((_, r), features), caps)| CaptionedExample {
            id: r.id,
            split: r.split,
            features: FeatureVector(features),
            captions: caps.iter().map(|c| encode(c, &vocab)).collect(),
        })
        .collect();
    Ok(Dataset {
        examples,
        vocab,
        feature_dim: dim,
        norm_max,
    })
}

/// Writes the dataset as JSON lines (normalized features, captions joined
/// with single spaces) plus its manifest sidecar.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = Vec::new();
    for e in &dataset.examples {
        let record = RawRecord {
            id: e.id.clone(),
            features: e.features.values().to_vec(),
            captions: e.captions.iter().map(|c| c.tokens.join(" ")).collect(),
            split: e.split,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest())?;
    fs::write(DatasetManifest::path_for(path), manifest + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"id": "img1", "features": [0.0, 2.0, 4.0, 1.0], "captions": ["A dog runs.", "The dog is brown."], "split": "train"}
{"id": "img2", "features": [1.0, 1.0, 2.0, 0.0], "captions": ["A cat sleeps."], "split": "train"}
{"id": "img3", "features": [3.0, 8.0, 1.0, 0.5], "captions": ["A dog and a cat."], "split": "test"}
"#;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_fixture() {
        let f = write_tmp(FIXTURE);
        let d = load_dataset(f.path(), None, None).unwrap();
        assert_eq!(d.examples.len(), 3);
        assert_eq!(d.feature_dim, 4);
        assert_eq!(d.norm_max, vec![1.0, 2.0, 4.0, 1.0]);
        assert_eq!(d.examples[0].features.values(), &[0.0, 1.0, 1.0, 1.0]);
        // test split values beyond the training max are clamped
        assert_eq!(d.examples[2].features.values(), &[1.0, 1.0, 0.25, 0.5]);
        for e in &d.examples {
            assert!(e.features.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(d.split_vec(Split::Train).len(), 2);
        // vocabulary comes from training captions only
        assert!(d.vocab.id("and").is_none());
        assert!(d.vocab.id("dog").is_some());
    }

    #[test]
    fn inconsistent_dim_rejected() {
        let bad = format!(
            "{FIXTURE}{}\n",
            r#"{"id": "img4", "features": [1, 2, 3, 4, 5], "captions": ["x"], "split": "valid"}"#
        );
        let f = write_tmp(&bad);
        let err = load_dataset(f.path(), None, None).unwrap_err();
        assert!(err.to_string().contains(":4:"), "{err}");
    }

    #[test]
    fn malformed_record_names_line() {
        let bad = format!("{FIXTURE}{{\"id\": \"x\", \"features\": [1,2,3,4]}}\n");
        let f = write_tmp(&bad);
        match load_dataset(f.path(), None, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let raw = vec![
            vec![0.0, 3.0, -1.0],
            vec![2.0, 6.0, -2.0],
            vec![5.0, 1.0, 0.5],
        ];
        let train = [true, true, false];
        let (once, _) = normalize_features(&raw, &train);
        let (twice, max) = normalize_features(&once, &train);
        assert_eq!(once, twice);
        assert_eq!(max, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn write_then_load_round_trip() {
        let f = write_tmp(FIXTURE);
        let d = load_dataset(f.path(), None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("copy.jsonl");
        write_dataset(&out, &d).unwrap();
        assert!(DatasetManifest::path_for(&out).exists());
        let d2 = load_dataset(&out, None, None).unwrap();
        assert_eq!(d2.vocab.tokens(), d.vocab.tokens());
        for (a, b) in d.examples.iter().zip(&d2.examples) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.captions, b.captions);
        }
    }
}
