//! Corpora, vocabulary, MLM corruption, domain mixing, and the synthetic
//! multi-domain generator.

pub mod corpus;
pub mod io;
pub mod masking;
pub mod synth;
pub mod vocab;

pub use corpus::{batch_documents, mix_domains, split_train_dev, Corpus, DomainCorpus, TextCorpus};
pub use io::{
    read_dataset, read_labeled, read_unlabeled, write_dataset, write_labeled, write_unlabeled,
};
pub use masking::{mask_for_mlm, Corruption, MlmBatch};
pub use synth::{gen_general_corpus, gen_synthetic, DomainSplits, SynthSpec};
pub use vocab::{build_vocab, Vocab, BOS_ID, MASK_ID, N_RESERVED, PAD_ID, UNK_ID};
