//! Versioned binary checkpoints with a SHA-256 trailer.
//!
//! Layout (little-endian): magic `STCK`, version `u16`, kind string, config
//! snapshot string, step `u64`, optimizer step `u64`, parameter count
//! `u32`, then per parameter its name and three tensors (value, first
//! moment, second moment), then an EMA flag `u8` followed by the EMA
//! tensors when set. Strings are `u32` length + UTF-8; tensors are
//! `u32` rows, `u32` cols, then `f32` data. The last 32 bytes are the
//! SHA-256 of everything before them.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, StarError};
use crate::params::ParamStore;
use crate::tensor::Matrix;

use super::optim::{AdamW, Ema, OptimHyper};

pub const MAGIC: [u8; 4] = *b"STCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `pretrain` or `finetune`.
    pub kind: String,
    pub config: String,
    /// Completed optimizer steps; the schedule resumes from here.
    pub step: u64,
    pub params: Vec<(String, Matrix<f32>)>,
    pub moments: Vec<(Matrix<f32>, Matrix<f32>)>,
    pub adam_step: u64,
    pub ema: Option<Vec<Matrix<f32>>>,
}

impl Checkpoint {
    pub fn capture(
        kind: &str,
        config: String,
        step: u64,
        store: &ParamStore<f32>,
        opt: &AdamW<f32>,
        ema: Option<&Ema<f32>>,
    ) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            step,
            params: store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            moments: opt.m.iter().cloned().zip(opt.v.iter().cloned()).collect(),
            adam_step: opt.step,
            ema: ema.map(|e| e.shadow.clone()),
        }
    }

    /// Copies parameters, moments and EMA back into live training state.
    pub fn restore(
        &self,
        store: &mut ParamStore<f32>,
        opt: &mut AdamW<f32>,
        ema: Option<&mut Ema<f32>>,
    ) -> Result<()> {
        store.assign(self.params.clone())?;
        if self.moments.len() != store.len() {
            return Err(StarError::Checkpoint(format!(
                "{} moment pairs for {} parameters",
                self.moments.len(),
                store.len()
            )));
        }
        opt.m = self.moments.iter().map(|(m, _)| m.clone()).collect();
        opt.v = self.moments.iter().map(|(_, v)| v.clone()).collect();
        opt.step = self.adam_step;
        if let Some(ema) = ema {
            match &self.ema {
                Some(s) if s.len() == store.len() => ema.shadow = s.clone(),
                _ => {
                    return Err(StarError::Checkpoint(
                        "checkpoint carries no EMA weights".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// A parameter store holding this checkpoint's weights.
    pub fn store(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (name, v) in &self.params {
            s.add(
                name.clone(),
                v.clone(),
                false,
                crate::params::LayerGroup::Head,
            );
        }
        s
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.kind);
        put_str(&mut b, &self.config);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.adam_step.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, (name, v)) in self.params.iter().enumerate() {
            put_str(&mut b, name);
            put_matrix(&mut b, v);
            let (m, s) = &self.moments[i];
            put_matrix(&mut b, m);
            put_matrix(&mut b, s);
        }
        match &self.ema {
            Some(shadow) => {
                b.push(1);
                for m in shadow {
                    put_matrix(&mut b, m);
                }
            }
            None => b.push(0),
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 32 {
            return Err(StarError::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(StarError::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { b: body, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(StarError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(StarError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let kind = r.string()?;
        let config = r.string()?;
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        let mut moments = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let v = r.matrix()?;
            let m = r.matrix()?;
            let s = r.matrix()?;
            if m.shape() != v.shape() || s.shape() != v.shape() {
                return Err(StarError::Checkpoint(format!(
                    "moment shape mismatch for {name}"
                )));
            }
            params.push((name, v));
            moments.push((m, s));
        }
        let ema = match r.take(1)?[0] {
            0 => None,
            1 => Some((0..n).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?),
            f => return Err(StarError::Checkpoint(format!("bad EMA flag {f}"))),
        };
        if r.at != body.len() {
            return Err(StarError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            config,
            step,
            params,
            moments,
            adam_step,
            ema,
        })
    }

    /// Writes through a temporary file so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| StarError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// Fresh optimizer state matching `store`, for callers restoring weights only.
pub fn fresh_optimizer(store: &ParamStore<f32>) -> AdamW<f32> {
    AdamW::new(store, OptimHyper::default())
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_matrix(b: &mut Vec<u8>, m: &Matrix<f32>) {
    b.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    b.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(StarError::Checkpoint("truncated".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| StarError::Checkpoint("invalid UTF-8".into()))
    }

    fn matrix(&mut self) -> Result<Matrix<f32>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| StarError::Checkpoint("tensor too large".into()))?;
        let data = self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerGroup;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add(
            "a",
            Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f32 * 0.25),
            true,
            LayerGroup::Head,
        );
        store.add(
            "b",
            Matrix::filled(1, 2, -1.5),
            false,
            LayerGroup::Embedding,
        );
        let mut opt = AdamW::new(&store, OptimHyper::default());
        let grads = vec![
            Some(Matrix::filled(2, 3, 0.1)),
            Some(Matrix::filled(1, 2, 0.2)),
        ];
        opt.update(&mut store, &grads, 0.01, None).unwrap();
        let ema = Ema::new(&store, 0.9);
        Checkpoint::capture("pretrain", "seed = 1\n".into(), 7, &store, &opt, Some(&ema))
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        bytes[20] ^= 1;
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
        assert!(Checkpoint::decode(b"short").is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
