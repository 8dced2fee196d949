//! Embedding-space debiasing for vision-language models.
//!
//! The kit works on pre-extracted embeddings. It learns a linear map of the
//! shared image/text space with the latent-space debiasing loss ([`trainer`]),
//! or builds one in closed form by projecting out spurious attribute directions
//! ([`ortho`]), then runs zero-shot classification in the mapped space and
//! reports group-robustness metrics ([`zeroshot`]). [`synthetic`] generates
//! planted-bias datasets with known ground truth.

mod archive;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod loss;
pub mod ortho;
pub mod projection;
pub mod sweep;
pub mod synthetic;
pub mod trainer;
pub mod zeroshot;

pub use embedding::{
    load_embedding_csv, load_embedding_set, normalize, partition_by_group, save_embedding_set,
    EmbeddingRecord, EmbeddingSet, GroupLabel, SetKind,
};
pub use error::{Error, ErrorKind, Result};
pub use loss::{ld_loss, ld_loss_grad, LossBreakdown, LossConfig, Pairing};
pub use ortho::{orthogonal_projection, AttributeMatrix};
pub use projection::{apply_projection, load_projection, save_projection, ProjectionMatrix};
pub use synthetic::{generate, oracle_classify, SynthBundle, SynthConfig};
pub use trainer::{train_projection, Init, TrainConfig, TrainReport};
pub use zeroshot::{classify, group_metrics, GroupMetrics, PredictionSet};
