//! Versioned named-tensor checkpoints with optimizer state, plus a text
//! manifest next to each file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::{Preset, TrainConfig};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COEVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, optimizer: Option<&Adam>, config: &TrainConfig, step: u64) -> Self {
        Checkpoint {
            step,
            config: config.clone(),
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut b, self.config.render().as_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_bytes(&mut b, name.as_bytes());
            put_tensor(&mut b, t);
        }
        match &self.optimizer {
            None => b.push(0),
            Some(adam) => {
                b.push(1);
                for x in [adam.config.beta1, adam.config.beta2, adam.config.eps] {
                    b.extend_from_slice(&x.to_le_bytes());
                }
                b.extend_from_slice(&adam.step.to_le_bytes());
                for t in adam.first.iter().chain(&adam.second) {
                    put_tensor(&mut b, t);
                }
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let truncated = || Error::Truncated { path: path.into() };
        if bytes.len() < 8 {
            return Err(truncated());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        if bytes.len() < 16 {
            return Err(truncated());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checksum { clip: path.into() });
        }
        let mut r = Cursor { b: body, at: 12, path };
        let step = r.u64()?;
        let text = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| malformed(path, "config is not UTF-8"))?;
        let config = TrainConfig::from_text(&text, Preset::Toy)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| malformed(path, "name is not UTF-8"))?;
            params.push((name, r.tensor()?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let config = AdamConfig {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let step = r.u64()?;
                let first = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let second = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(Adam {
                    config,
                    step,
                    first,
                    second,
                })
            }
            _ => return Err(malformed(path, "bad optimizer flag")),
        };
        if r.at != body.len() {
            return Err(malformed(path, "trailing bytes"));
        }
        Ok(Checkpoint {
            step,
            config,
            params,
            optimizer,
        })
    }

    /// Text listing of what the binary holds.
    pub fn manifest(&self) -> String {
        let mut s = format!(
            "format_version = {CHECKPOINT_VERSION}\nstep = {}\nstage = {}\nparams = {}\noptimizer = {}\n",
            self.step,
            self.config.stage,
            self.params.len(),
            self.optimizer.is_some()
        );
        for (name, t) in &self.params {
            s.push_str(&format!("param = {name} {:?}\n", t.shape()));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode())?;
        fs::write(manifest_path(path), self.manifest())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingCheckpoint(path.display().to_string()));
            }
            Err(e) => return Err(e.into()),
        };
        Self::decode(&bytes, &path.display().to_string())
    }

    /// Copy every stored tensor whose name starts with `prefix` into the
    /// parameter of the same name. Returns how many were copied.
    pub fn restore(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("unknown parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
            copied += 1;
        }
        let wanted = store.iter().filter(|(_, n, _)| n.starts_with(prefix)).count();
        if copied != wanted {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint holds {copied} of the {wanted} parameters under {prefix:?}"
            )));
        }
        Ok(copied)
    }

    /// Optimizer state for `store` in its own parameter order.
    pub fn optimizer_for(&self, store: &ParamStore) -> Result<Option<Adam>> {
        let Some(adam) = &self.optimizer else { return Ok(None) };
        if self.params.len() != store.len() {
            return Err(Error::IncompatibleCheckpoint("optimizer state covers a different model".into()));
        }
        for ((name, t), (_, n, p)) in self.params.iter().zip(store.iter()) {
            if name != n || t.shape() != p.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "optimizer state for {name} does not match {n}"
                )));
            }
        }
        Ok(Some(adam.clone()))
    }
}

fn malformed(path: &str, detail: &str) -> Error {
    Error::Malformed {
        what: "checkpoint",
        detail: format!("{path}: {detail}"),
    }
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s);
}

fn put_tensor(b: &mut Vec<u8>, t: &Tensor) {
    b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in t.data() {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Truncated { path: self.path.into() })?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed(self.path, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn toy() -> (TrainConfig, ParamStore) {
        let cfg = TrainConfig::preset(Preset::Toy);
        let mut store = ParamStore::new();
        Model::new(&mut store, cfg.model(), 3).unwrap();
        store.perturb(4, 0.1);
        (cfg, store)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, store) = toy();
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step = 7;
        adam.first[2] = adam.first[2].map(|_| 0.25);
        let ck = Checkpoint::capture(&store, Some(&adam), &cfg, 42);
        let back = Checkpoint::decode(&ck.encode(), "mem").unwrap();
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ck.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(fs::read_to_string(manifest_path(&path)).unwrap().contains("step = 42"));
    }

    #[test]
    fn restore_by_prefix() {
        let (cfg, store) = toy();
        let ck = Checkpoint::capture(&store, None, &cfg, 0);
        let mut fresh = ParamStore::new();
        Model::new(&mut fresh, cfg.model(), 9).unwrap();
        let n = ck.restore(&mut fresh, "pose.").unwrap();
        assert!(n > 0);
        for (id, name, t) in fresh.iter() {
            let same = store.get(id) == t;
            assert_eq!(same, name.starts_with("pose."), "{name}");
        }
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        assert!(matches!(Checkpoint::load(&missing).unwrap_err(), Error::MissingCheckpoint(_)));

        let (cfg, store) = toy();
        let bytes = Checkpoint::capture(&store, None, &cfg, 1).encode();
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad, "x").unwrap_err(), Error::Checksum { .. }));
        let mut ver = bytes.clone();
        ver[8] = 2;
        assert!(matches!(
            Checkpoint::decode(&ver, "x").unwrap_err(),
            Error::Version { found: 2, .. }
        ));

        let mut other = TrainConfig::preset(Preset::Toy);
        other.pose_dim = 32;
        let mut small = ParamStore::new();
        Model::new(&mut small, other.model(), 0).unwrap();
        let err = Checkpoint::capture(&store, None, &cfg, 0).restore(&mut small, "pose.").unwrap_err();
        assert!(matches!(err, Error::IncompatibleCheckpoint(_)));
    }
}
