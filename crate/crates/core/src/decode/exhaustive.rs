use crate::ctc::ctc_logprob_bruteforce;
use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;
use crate::scalar::Scalar;

pub const EXHAUSTIVE_MAX_FRAMES: usize = 6;
pub const EXHAUSTIVE_MAX_GRAPHEMES: usize = 3;

/// Scores every label sequence of length `<= frames` with the brute-force
/// path sum and returns the most probable one. Candidates are visited by
/// length and then lexicographically; the first maximum wins.
pub fn exhaustive_decode<S: Scalar>(grid: &PosteriorGrid<S>) -> Result<(Vec<usize>, S)> {
    let frames = grid.frames();
    let graphemes = grid.num_symbols() - 1;
    if frames > EXHAUSTIVE_MAX_FRAMES || graphemes > EXHAUSTIVE_MAX_GRAPHEMES {
        return Err(Error::InstanceTooLarge(format!(
            "{frames} frames x {graphemes} graphemes exceeds {EXHAUSTIVE_MAX_FRAMES} x {EXHAUSTIVE_MAX_GRAPHEMES}"
        )));
    }
    let mut best = (Vec::new(), ctc_logprob_bruteforce(grid, &[])?);
    for len in 1..=frames {
        let mut candidate = vec![0usize; len];
        'odometer: loop {
            let lp = ctc_logprob_bruteforce(grid, &candidate)?;
            if lp > best.1 {
                best = (candidate.clone(), lp);
            }
            let mut pos = len;
            loop {
                if pos == 0 {
                    break 'odometer;
                }
                pos -= 1;
                candidate[pos] += 1;
                if candidate[pos] < graphemes {
                    break;
                }
                candidate[pos] = 0;
            }
        }
    }
    Ok(best)
}
