use crate::alphabet::Alphabet;
use crate::ctc::collapse;
use crate::error::Result;
use crate::grid::PosteriorGrid;
use crate::scalar::Scalar;

/// Per-frame argmax; ties go to the lowest symbol id.
pub fn greedy_path<S: Scalar>(grid: &PosteriorGrid<S>) -> Vec<usize> {
    grid.log_probs()
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_decode<S: Scalar>(grid: &PosteriorGrid<S>) -> Vec<usize> {
    collapse(&greedy_path(grid), grid.blank_id())
}

pub fn greedy_transcript<S: Scalar>(grid: &PosteriorGrid<S>, alphabet: &Alphabet) -> Result<String> {
    alphabet.render(&greedy_decode(grid))
}
