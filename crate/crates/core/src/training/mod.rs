//! Feature extractor, loss assembly, optimizer, two-phase schedule and
//! checkpoints.

mod adam;
mod checkpoint;
mod config;
mod extractor;
mod fullcheck;
mod model;
mod trainer;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{Checkpoint, MAGIC};
pub use config::{parse_pairs, Batching, Profile, TrainConfig, ENCODER_LAYERS};
pub use fullcheck::{full_loss_gradcheck, FULL_CHECK_STEP, FULL_CHECK_TOL};
pub use extractor::{check_clip, extract, ExtractorParams, ExtractorVars};
pub use model::{
    batch_on_tape, clip_on_tape, embed_clip, representations, total_loss, BatchVars, ClipEmbedding, ClipVars,
    CrcParams, LossBreakdown, ModelVars,
};
pub use trainer::{
    loss_csv, resume, train, training_clips, EpochLog, InvariantMonitor, TrainOutcome, CORRELATION_TOL, LOSS_CSV_HEADER,
    SOFTMAX_TOL, UNIT_NORM_TOL,
};
