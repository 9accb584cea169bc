pub mod attention;
pub mod expert;
pub mod lm;
pub mod moe;

pub use attention::{AttentionBlock, HeadDecomposition};
pub use expert::ExpertMlp;
pub use lm::{argmax, BackboneCache, BlockConfig, LmEval, ModelConfig, ToyLm};
pub use moe::{count_route_space, distinct_tuples, top_k, HeadSelection, MoeBlock, MultiHeadMoe, RoutedBank, StandardMoe, TokenRoute};
