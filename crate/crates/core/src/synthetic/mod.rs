//! Generated data: a small annotated image corpus with captions and encoder
//! outputs, and a block-structured conditional retrieval task.

mod blocks;
mod corpus;

pub use blocks::{block_task, condition_text, BlockTask, BlockTaskConfig};
pub use corpus::{generate_corpus, taxonomy, write_corpus, Corpus, CorpusConfig, SyntheticEncoder, CORPUS_FILES};
