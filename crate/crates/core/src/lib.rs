//! Cover-song detection with a twin convolutional network over constant-Q
//! spectrograms, trained with binary cross-entropy on cover / non-cover pairs
//! and evaluated by Prec@1 retrieval within mini-batches.

pub mod audio;
pub mod cli;
pub mod config;
pub mod cqt;
pub mod dataset;
pub mod eval;
pub mod oracle;
pub mod pipeline;
pub mod seed;
pub mod siamese;
pub mod tensor;
