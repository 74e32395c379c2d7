//! Tokenization, vocabulary construction, dataset ingestion and the
//! synthetic captioned-scene generator.

mod dataset;
mod synthetic;
mod tokenize;
mod vocab;

pub use dataset::{
    load_dataset, normalize_features, write_dataset, CaptionedExample, Dataset, DatasetManifest,
    FeatureVector, RawRecord, Split,
};
pub use synthetic::{
    attribute_names, generate_synthetic, generate_synthetic_with, SyntheticConfig,
};
pub use tokenize::tokenize;
pub use vocab::{
    build_vocab, decode, default_class_count, encode, partition_by_mass, ClassedVocabulary,
    EncodedSentence, WordClasses, EOS, EOS_ID, UNK, UNK_ID,
};
