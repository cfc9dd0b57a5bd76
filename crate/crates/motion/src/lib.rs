//! Toy audio-to-motion translator: a table featurizer with contrastive
//! pretraining, an identity embedding and a one-block attention decoder
//! that outputs per-frame head-model parameters.

pub mod adam;
pub mod audio;
pub mod corpus;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod train;

pub use audio::{encode_audio, synthetic_timbre_convert, Featurizer, ToyAudio};
pub use corpus::{generate_corpus, lip_aperture, mean_lip_aperture, Clip};
pub use corpus::{speaker_motion, viseme_table};
pub use model::{decode_motion, MotionDecoder, TranslatorModel};
pub use pretrain::{contrastive_accuracy, pretrain_contrastive, PretrainConfig};
pub use train::{init_translator, train_translator, TrainConfig};
