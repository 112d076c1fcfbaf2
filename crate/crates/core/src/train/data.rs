use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alphabet::Alphabet;
use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;
use crate::matrix::Matrix;
use crate::teacher::Utterance;

/// Which transcript supplies the CTC target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSource {
    GroundTruth,
    Teacher,
    /// KD-only training; no CTC target.
    None,
}

/// A training sample borrowed from an [`Utterance`].
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub id: &'a str,
    pub features: &'a Matrix<f32>,
    pub target: Option<Vec<usize>>,
    pub teacher: Option<&'a PosteriorGrid<f64>>,
}

/// Checks every utterance for the fields the objective needs and encodes
/// targets. All offending ids are reported together.
pub fn prepare_examples<'a>(
    utterances: &'a [Utterance],
    alphabet: &Alphabet,
    source: TargetSource,
    need_teacher: bool,
) -> Result<Vec<Example<'a>>> {
    if utterances.is_empty() {
        return Err(Error::Data {
            message: "no training utterances".into(),
            ids: Vec::new(),
        });
    }
    let mut bad = Vec::new();
    let mut reasons = Vec::new();
    let mut out = Vec::with_capacity(utterances.len());
    for u in utterances {
        let text = match source {
            TargetSource::GroundTruth => u.transcript_gt.as_deref(),
            TargetSource::Teacher => u.transcript_asr.as_deref(),
            TargetSource::None => None,
        };
        let problem = if source != TargetSource::None && text.is_none() {
            Some("missing transcript".to_string())
        } else if need_teacher && u.teacher_posteriors.is_none() {
            Some("missing teacher posteriors".to_string())
        } else if u.features.rows() == 0 {
            Some("empty features".to_string())
        } else if let Some(g) = u.teacher_posteriors.as_ref().filter(|_| need_teacher) {
            (g.frames() != 2 * u.features.rows() || g.num_symbols() != alphabet.num_symbols()).then(|| {
                format!(
                    "teacher grid {}x{} does not match {} student frames and {} symbols",
                    g.frames(),
                    g.num_symbols(),
                    u.features.rows(),
                    alphabet.num_symbols()
                )
            })
        } else {
            None
        };
        let target = match (problem, text) {
            (Some(p), _) => Err(p),
            (None, Some(t)) => alphabet.encode(t).map(Some).map_err(|e| e.to_string()),
            (None, None) => Ok(None),
        };
        match target {
            Ok(target) => out.push(Example {
                id: &u.id,
                features: &u.features,
                target,
                teacher: u.teacher_posteriors.as_ref().filter(|_| need_teacher),
            }),
            Err(reason) => {
                if !reasons.contains(&reason) {
                    reasons.push(reason);
                }
                bad.push(u.id.clone());
            }
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::Data {
            message: reasons.join("; "),
            ids: bad,
        })
    }
}

/// Consecutive batches formed inside each pool are length-sorted.
const POOL_BATCHES: usize = 8;

/// Seeded shuffle, then length bucketing within pools of a few batches, then
/// a shuffle of the batch order.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for pool in order.chunks_mut(batch_size * POOL_BATCHES) {
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}
