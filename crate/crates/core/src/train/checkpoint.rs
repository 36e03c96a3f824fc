//! Binary checkpoints: magic, version, the full flat config, the iteration
//! count and every named parameter as little-endian f64.

use std::path::Path;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::network::Detector;
use crate::nn::{Param, ParamStore};

const MAGIC: &[u8; 8] = b"FDRNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer steps taken when the file was written.
    pub iteration: usize,
    pub params: Vec<Param>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, iteration: usize, store: &ParamStore) -> Self {
        Self {
            config: config.clone(),
            iteration,
            params: store.iter().cloned().collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_flat_string();
        put_bytes(&mut b, cfg.as_bytes());
        b.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            put_bytes(&mut b, p.name.as_bytes());
            b.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &d in &p.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.value {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = TrainConfig::from_flat_str(&cfg)?;
        let iteration = r.u64()? as usize;
        let n = r.u64()?;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let nd = r.u64()?;
            if nd > 8 {
                return Err(Error::Checkpoint(format!("{name}: {nd} dimensions")));
            }
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len
                .filter(|&l| l.checked_mul(8).is_some_and(|bytes| bytes <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} exceeds the file")))?;
            let value = r.take(len * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Param { name, shape, value });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            iteration,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the detector described by the stored config and fills it
    /// with the stored weights.
    pub fn restore(&self) -> Result<(Detector, ParamStore)> {
        let (det, mut store) = Detector::new(self.config.model.clone(), self.config.seed)?;
        store.load_from(&self.params)?;
        Ok((det, store))
    }
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend_from_slice(&(s.len() as u64).to_le_bytes());
    b.extend_from_slice(s);
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.b.len() - self.at
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| Error::Checkpoint("length overflow".into()))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.model.backbone.stem = 4;
        c.model.backbone.widths = [4, 4, 8, 8];
        c.model.fused_channels = 8;
        c.model.low_level_channels = 4;
        c.model.cla_reduction = 2;
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny();
        let (_, mut store) = Detector::new(cfg.model.clone(), 3).unwrap();
        store.iter_mut().next().unwrap().value[0] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        Checkpoint::new(&cfg, 17, &store).save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.config, cfg);
        let p2 = dir.path().join("b.ckpt");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (_, restored) = back.restore().unwrap();
        assert_eq!(restored, store);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = tiny();
        let (_, store) = Detector::new(cfg.model.clone(), 3).unwrap();
        let bytes = Checkpoint::new(&cfg, 1, &store).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_model_lists_problems() {
        let cfg = tiny();
        let (_, store) = Detector::new(cfg.model.clone(), 3).unwrap();
        let mut ck = Checkpoint::new(&cfg, 0, &store);
        ck.params.pop();
        ck.params[0].shape = vec![1];
        match ck.restore() {
            Err(Error::CheckpointMismatch(v)) => assert!(v.len() >= 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }
}
