//! Uncertainty-aware unlikelihood learning for aspect sentiment quad
//! prediction.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod sampler;
pub mod tape;
pub mod trainer;

pub use codec::{AspectQuad, Sentiment, TargetSequence, TemplateKind, Term};
pub use config::UaulConfig;
pub use corpus::{CorpusSplit, Example, Vocabulary};
pub use eval::{score, ScoreReport};
pub use model::{ModelDims, Seq2Seq, VocabDistribution};
pub use objectives::{LossBundle, MulConfig};
pub use sampler::{acquire_samples, NegativeStrategy, SampleSets, UncertaintyConfig};
pub use trainer::{run_ablation_suite, train, TrainReport};
