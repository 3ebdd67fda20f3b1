//! Versioned binary checkpoints.
//!
//! ```text
//! "HWMN"  u32 version
//! text    network config (u32 byte length + UTF-8 key = value lines)
//! u32     parameter count, then per parameter:
//!           u32 name length, name, 4 × u32 dims (n, c, h, w), f32 values
//! u8      1 if a training state follows, else 0; when 1:
//!           text train config, u64 seed, u64 iteration,
//!           f64 beta1, f64 beta2, f64 eps, u64 optimizer step,
//!           per parameter: f32 first moments, f32 second moments
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HwmNet, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::train::adam::Adam;
use crate::train::config::TrainConfig;

pub const MAGIC: &[u8; 4] = b"HWMN";
pub const VERSION: u32 = 1;

/// Optimizer and data-stream position needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Data sampling is keyed by `(seed, iteration)`, so these two values are
    /// the whole random state.
    pub seed: u64,
    pub iteration: u64,
    pub optimizer: Adam<f32>,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: ParamStore<f32>,
    pub train: Option<TrainState>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("network", &self.network)
            .field("params", &self.params.num_elements())
            .field("iteration", &self.train.as_ref().map(|t| t.iteration))
            .finish()
    }
}

impl Checkpoint {
    pub fn from_net(net: &HwmNet<f32>) -> Self {
        Checkpoint {
            network: net.config().clone(),
            params: net.params().clone(),
            train: None,
        }
    }

    pub fn into_net(self) -> Result<HwmNet<f32>> {
        HwmNet::from_params(self.network, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.text(&self.network.to_text());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.text(name);
            for d in t.shape().dims() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        match &self.train {
            None => w.0.push(0),
            Some(s) => {
                w.0.push(1);
                w.text(&s.config.to_text());
                w.u64(s.seed);
                w.u64(s.iteration);
                w.f64(s.optimizer.beta1);
                w.f64(s.optimizer.beta2);
                w.f64(s.optimizer.eps);
                w.u64(s.optimizer.step);
                for (m, v) in s.optimizer.m.iter().zip(&s.optimizer.v) {
                    w.f32s(m.data());
                    w.f32s(v.data());
                }
            }
        }
        w.0
    }

    /// Parse a checkpoint. `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, origin };
        let bad = |msg: String| Error::UnsupportedCheckpoint(format!("{}: {msg}", origin.display()));
        if r.take(4)? != MAGIC {
            return Err(bad("missing HWMN magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("format version {version}, this build reads {VERSION}")));
        }
        let network = NetworkConfig::from_text(&r.text()?).map_err(|e| bad(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.text()?;
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            let shape = Shape::from(dims);
            let data = r.f32s(shape.numel())?;
            params
                .insert(name, Tensor::from_vec(shape, data)?)
                .map_err(|e| bad(e.to_string()))?;
        }
        let train = match r.take(1)?[0] {
            0 => None,
            1 => {
                let config = TrainConfig::from_text(&r.text()?).map_err(|e| bad(e.to_string()))?;
                let seed = r.u64()?;
                let iteration = r.u64()?;
                let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
                let step = r.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (_, t) in params.iter() {
                    m.push(Tensor::from_vec(t.shape(), r.f32s(t.numel())?)?);
                    v.push(Tensor::from_vec(t.shape(), r.f32s(t.numel())?)?);
                }
                Some(TrainState {
                    config,
                    seed,
                    iteration,
                    optimizer: Adam {
                        beta1,
                        beta2,
                        eps,
                        step,
                        m,
                        v,
                    },
                })
            }
            flag => return Err(bad(format!("unknown training-state flag {flag}"))),
        };
        if r.at != bytes.len() {
            return Err(bad(format!("{} unexpected trailing bytes", bytes.len() - r.at)));
        }
        // the layout check happens here so a bad file never yields a half-valid net
        HwmNet::from_params(network.clone(), params.clone()).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint { network, params, train })
    }

    /// Write atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, data: &[f32]) {
        self.0.reserve(data.len() * 4);
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::io(
                self.origin,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "checkpoint is truncated"),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn text(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::UnsupportedCheckpoint(format!("{}: text block is not UTF-8", self.origin.display())))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.saturating_mul(4))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HwmNet<f32> {
        HwmNet::build(NetworkConfig::constant(2, 8), 3).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let net = tiny();
        let mut ck = Checkpoint::from_net(&net);
        ck.train = Some(TrainState {
            config: TrainConfig::desk(),
            seed: 11,
            iteration: 7,
            optimizer: Adam::new(net.params(), 0.9, 0.999, 1e-8),
        });
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert!(back.params.bitwise_eq(net.params()));
        assert_eq!(back.train, ck.train);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = Checkpoint::from_net(&tiny()).to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let e = Checkpoint::from_bytes(&wrong, Path::new("m")).err().unwrap();
        assert!(matches!(e, Error::UnsupportedCheckpoint(_)));
        let mut ver = bytes.clone();
        ver[4] = 9;
        let e = Checkpoint::from_bytes(&ver, Path::new("m")).err().unwrap();
        assert!(matches!(e, Error::UnsupportedCheckpoint(_)));
        let e = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("m"))
            .err()
            .unwrap();
        assert!(matches!(e, Error::Io { .. }));
    }
}
