//! Synthetic two-modality corpus standing in for a pretrained ASR teacher,
//! plus posterior and feature file interchange.

mod generate;
mod io;

pub use generate::{generate_corpus, generate_lexicon, GenConfig, Utterance};
pub use io::{
    read_features, read_posteriors, write_features, write_posteriors, FEATURES_EXTENSION, POSTERIORS_EXTENSION,
};

use crate::alphabet::Alphabet;
use crate::decode::{beam_search, greedy_transcript, BeamConfig, NGramLM};
use crate::error::Result;
use crate::grid::PosteriorGrid;
use crate::scalar::Scalar;

/// How a posterior grid is turned into a transcript.
#[derive(Clone, Copy, Debug)]
pub enum Transcriber<'a> {
    Greedy,
    Beam {
        config: &'a BeamConfig,
        lm: Option<&'a NGramLM>,
    },
}

pub fn teacher_transcribe<S: Scalar>(
    grid: &PosteriorGrid<S>,
    alphabet: &Alphabet,
    how: Transcriber<'_>,
) -> Result<String> {
    match how {
        Transcriber::Greedy => greedy_transcript(grid, alphabet),
        Transcriber::Beam { config, lm } => Ok(beam_search(grid, alphabet, config, lm)?.transcript),
    }
}
