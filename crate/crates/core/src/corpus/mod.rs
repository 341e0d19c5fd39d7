//! Synthetic image-caption corpus and the checkpoint container.

mod checkpoint;
mod dataset;
mod grammar;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, StoredTensor, FORMAT_VERSION, MAGIC};
pub use dataset::{derive_seed, generate, Corpus, Manifest, Pair, PairBatch};
pub use grammar::{
    caption, parse_caption, parse_image, render, vocabulary, Scene, BOS, CHANNELS, EOS, GRAMMAR_VERSION, GRID, NUM_SCENES,
    SEQ_LEN, VOCAB_SIZE,
};
