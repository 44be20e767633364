//! Word-level decoder-only sequence model: vocabulary, transformer with a
//! value head, supervised training, decoding and checkpoints.

pub mod checkpoint;
pub mod decode;
pub mod model;
pub mod optim;
pub mod train;
pub mod vocab;

pub use checkpoint::{Checkpoint, CheckpointError, Stage};
pub use decode::{decode, sample_with, DecodeConfig, DecodeError, DecodeMode, Decoded, StopReason};
pub use model::{ForwardPass, Gradients, InferenceState, ModelConfig, ModelError, PolicyModel};
pub use optim::{Adam, AdamConfig};
pub use train::{train_supervised, SftConfig, SftReport, TrainError};
pub use vocab::{TokenId, TokenSequence, VocabError, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID, SEP, SEP_ID};
