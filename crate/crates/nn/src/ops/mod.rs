mod attention;
mod basic;
pub(crate) use basic::sigmoid;
mod conv;
mod linear;
mod norm;

pub use attention::{attention_score_entries, AttentionWeights};
pub use conv::conv1d_output_len;
