use std::path::Path;

use super::config::ModelConfig;
use super::network::ModelParams;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"JLIP";
const VERSION: u32 = 1;

impl<S: Scalar> ModelParams<S> {
    /// Serializes to `JLIP` bytes: version, the JSON config, then weights and
    /// running statistics as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        let config = serde_json::to_vec(self.config()).expect("config serializes");
        w.bytes(&config);
        w.u64(self.weights().len() as u64);
        w.u64(self.running_stats().len() as u64);
        w.f32s(self.weights().iter().map(|v| v.to_f64_lossy() as f32));
        w.f32s(self.running_stats().iter().map(|v| v.to_f64_lossy() as f32));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::new(bytes, MAGIC)?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_slice(r.bytes()?).map_err(|e| Error::format(format!("bad config: {e}")))?;
        let n_weights = r.u64()? as usize;
        let n_stats = r.u64()? as usize;
        let lift = |v: Vec<f32>| v.into_iter().map(|x| S::from_f64_lossy(x as f64)).collect();
        let weights = lift(r.f32s(n_weights)?);
        let running = lift(r.f32s(n_stats)?);
        r.finish()?;
        ModelParams::from_parts(config, weights, running).map_err(|e| match e {
            Error::ShapeMismatch(m) | Error::Config(m) => Error::format(m),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.with_path(path))
    }
}
