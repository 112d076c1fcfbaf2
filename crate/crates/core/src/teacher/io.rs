use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;
use crate::matrix::Matrix;
use crate::numeric::log_sum_exp;

pub const POSTERIORS_EXTENSION: &str = "ctcp";
pub const FEATURES_EXTENSION: &str = "feat";

const CTCP_MAGIC: &[u8; 4] = b"CTCP";
const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const VERSION: u32 = 1;
/// Row drift (in log space) that is attributed to `f32` rounding and
/// silently renormalized.
const MAX_ROW_DRIFT: f64 = 1e-4;

fn write_matrix(magic: &[u8; 4], rows: usize, cols: usize, values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    let mut w = Writer::new(magic, VERSION);
    w.u32(rows as u32);
    w.u32(cols as u32);
    w.f32s(values);
    w.finish()
}

fn read_matrix(bytes: &[u8], magic: &[u8; 4]) -> Result<Matrix<f32>> {
    let (mut r, version) = Reader::new(bytes, magic)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f32s(rows.checked_mul(cols).ok_or_else(|| Error::format("shape overflows"))?)?;
    r.finish()?;
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(e.to_string()))
}

/// `CTCP` file: magic, u32 version, u32 frames, u32 symbols, then `f32`
/// log-probabilities row by row.
pub fn posteriors_to_bytes(grid: &PosteriorGrid<f64>) -> Vec<u8> {
    let lp = grid.log_probs();
    write_matrix(
        CTCP_MAGIC,
        lp.rows(),
        lp.cols(),
        lp.as_slice().iter().map(|&v| v as f32),
    )
}

pub fn posteriors_from_bytes(bytes: &[u8]) -> Result<PosteriorGrid<f64>> {
    let raw = read_matrix(bytes, CTCP_MAGIC)?;
    if raw.cols() < 2 {
        return Err(Error::format("posterior grid needs at least two symbols"));
    }
    let mut lp: Matrix<f64> = raw.cast();
    for t in 0..lp.rows() {
        let row = lp.row_mut(t);
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::format(format!("row {t} has non-finite values")));
        }
        let lse = log_sum_exp(row);
        if !(lse.abs() <= MAX_ROW_DRIFT) {
            return Err(Error::format(format!(
                "row {t} is not normalized (total probability {:.6})",
                lse.exp()
            )));
        }
        row.iter_mut().for_each(|v| *v -= lse);
    }
    PosteriorGrid::from_log_probs(lp).map_err(|e| Error::format(e.to_string()))
}

pub fn write_posteriors(grid: &PosteriorGrid<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, posteriors_to_bytes(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_posteriors(path: &Path) -> Result<PosteriorGrid<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    posteriors_from_bytes(&bytes).map_err(|e| e.with_path(path))
}

/// `FEAT` file: same framing as `CTCP` with raw `f32` feature values.
pub fn write_features(features: &Matrix<f32>, path: &Path) -> Result<()> {
    let bytes = write_matrix(
        FEAT_MAGIC,
        features.rows(),
        features.cols(),
        features.as_slice().iter().copied(),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = read_matrix(&bytes, FEAT_MAGIC).map_err(|e| e.with_path(path))?;
    if !m.all_finite() {
        return Err(Error::format("non-finite feature values").with_path(path));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, t: usize, c: usize) -> PosteriorGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Matrix::from_fn(t, c, |_, _| rng.random_range(-4.0..4.0));
        PosteriorGrid::from_logits(&logits).unwrap()
    }

    #[test]
    fn posterior_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ctcp");
        for seed in 0..5 {
            let g = random_grid(seed, 7, 4);
            write_posteriors(&g, &path).unwrap();
            let back = read_posteriors(&path).unwrap();
            let diff = g.probs().max_abs_diff(&back.probs()).unwrap();
            assert!(diff <= 1e-6, "{diff}");
        }
    }

    #[test]
    fn one_hot_rows_survive() {
        let probs = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let g = PosteriorGrid::from_probs(&probs).unwrap();
        let back = posteriors_from_bytes(&posteriors_to_bytes(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn posterior_format_errors() {
        let bytes = posteriors_to_bytes(&random_grid(1, 3, 3));
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(posteriors_from_bytes(truncated), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"FEAT");
        assert!(matches!(posteriors_from_bytes(&magic), Err(Error::Format { .. })));

        let half = Matrix::from_rows(&[[0.25f64.ln(), 0.25f64.ln()], [0.5f64.ln(), 0.5f64.ln()]]).unwrap();
        let bytes = write_matrix(CTCP_MAGIC, 2, 2, half.as_slice().iter().map(|&v| v as f32));
        let err = posteriors_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("not normalized"), "{err}");
    }

    #[test]
    fn small_drift_is_renormalized() {
        let drift = Matrix::from_rows(&[[(0.5f64 + 2e-5).ln(), 0.5f64.ln()]]).unwrap();
        let bytes = write_matrix(CTCP_MAGIC, 1, 2, drift.as_slice().iter().map(|&v| v as f32));
        let g = posteriors_from_bytes(&bytes).unwrap();
        let total: f64 = g.probs().as_slice().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn features_round_trip_and_path_in_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let m = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f32 * 0.5 - 1.0);
        write_features(&m, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), m);
        std::fs::write(&path, b"FEAT\x01\x00\x00\x00").unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("x.feat"), "{err}");
    }
}
