//! Episodic meta-learners: ProtoNet, first-order MAML and ProtoMAML.
//!
//! All three share the sequence backbone. ProtoNet classifies by distance
//! to support prototypes. fo-MAML adapts a shared linear head with a few
//! SGD steps. ProtoMAML does the same with an episode-local head
//! initialized from the prototypes, so that before adaptation it predicts
//! exactly like ProtoNet.

mod adapt;
pub mod checkpoint;
mod evaluate;
mod learner;
mod optim;
mod train;

pub use adapt::{
    adapted_loss, episode_gradient, inner_adapt, outer_step, Adapted, EpisodeGradient,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use evaluate::{adapt_and_evaluate, predict, shot_split, Evaluation};
pub use learner::{
    compute_prototypes, embed_sequences, init_head, protonet_posterior, InnerLoopConfig,
    LearnerKind, MetaModel, PrototypeSet, EMBED_CHUNK,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use train::{
    batches_per_epoch, meta_train, EpochRecord, OuterLoopConfig, Schedule, TrainConfig,
    TrainHistory,
};
