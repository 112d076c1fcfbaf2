//! CTC decoding: best-path, prefix beam search with word-LM shallow fusion,
//! and an exhaustive oracle for tiny instances.

mod beam;
mod exhaustive;
mod greedy;
mod lm;

pub use beam::{beam_search, BeamConfig, BeamResult, DESK_BEAM_WIDTH, PAPER_BEAM_WIDTH};
pub use exhaustive::{exhaustive_decode, EXHAUSTIVE_MAX_FRAMES, EXHAUSTIVE_MAX_GRAPHEMES};
pub use greedy::{greedy_decode, greedy_path, greedy_transcript};
pub use lm::{NGramConfig, NGramLM, DEFAULT_LM_ORDER, END_OF_SENTENCE, START_OF_SENTENCE};
