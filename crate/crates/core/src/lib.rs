//! Serving, caching and alignment-math core for a dual-AR codec TTS model,
//! driven by a deterministic mock model on a simulated clock.

pub mod align;
pub mod bench;
pub mod config;
pub mod digest;
pub mod mathcheck;
pub mod mock;
pub mod pager;
pub mod radix;
pub mod rollout;
pub mod scalar;
pub mod scheduler;
pub mod time;
pub mod token;
pub mod transcript;
pub mod vocoder;
pub mod wire;

pub use scalar::Scalar;

pub type SlowLogProbs = align::SlowLogProbs<f64>;
pub type FastLogProbs = align::FastLogProbs<f64>;
pub type LogProbGrid = align::LogProbGrid<f64>;
pub type LossWeights = align::LossWeights<f64>;
pub type RewardWeights = align::RewardWeights<f64>;
pub type GroupRollout = align::GroupRollout<f64>;
pub type CandidateLogProbs = align::CandidateLogProbs<f64>;
pub type SttPenalties = align::SttPenalties<f64>;
pub type EmbeddingTables = token::EmbeddingTables<f64>;

pub type SlowLogProbsF32 = align::SlowLogProbs<f32>;
pub type FastLogProbsF32 = align::FastLogProbs<f32>;
pub type EmbeddingTablesF32 = token::EmbeddingTables<f32>;
