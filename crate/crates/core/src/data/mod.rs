//! Synthetic compositional tasks with ground-truth feature labels.

pub mod features;
pub mod grammar;
pub mod stream;

pub use features::{composition_of, CorpusStats, FeatureComposition, FeatureDef, FeatureSpec, FrequencyBuckets, TokenRecord};
pub use grammar::{generate_task, Grammar, GrammarConfig, Sequence, TaskCorpus, TaskDef};
pub use stream::{
    annotate, content_counts, corpus_stats, read_corpus, read_manifest, reference_buckets, spec_hash, split_corpus,
    task_sequence, write_corpus, Manifest, TaskData, TaskOrder,
};
