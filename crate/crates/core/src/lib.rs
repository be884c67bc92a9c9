//! One-shot skill assessment from per-frame feature sequences.
//!
//! The crate covers everything downstream of feature extraction: a
//! differentiable sequence backbone ([`seqnet`]), ProtoNet / first-order MAML
//! / ProtoMAML learners ([`metalearn`]), episodic data handling
//! ([`episodes`]), trust and classification metrics ([`metrics`]) and the
//! round-robin evaluation harness ([`harness`]).

pub mod array;
pub mod diffcore;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod metalearn;
pub mod metrics;
pub mod rng;
pub mod seqnet;

pub use array::Array;
pub use error::{Error, Result};
