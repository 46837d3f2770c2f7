//! Binary training-state checkpoints.
//!
//! Layout (little-endian): magic `SDF3DGAN`, u32 version, u32 layer count,
//! per layer u32 rows and u32 cols, then `rows * (cols + 1)` f32 values per
//! layer (weights row-major followed by biases), then the optimizer payload,
//! then f64 beta, u64 seed, u64 iteration.
//!
//! The optimizer payload is a u32 group count followed, per group, by u64
//! step, f64 lr, beta1, beta2, eps, u64 length and the f64 first and second
//! moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::AdamState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SDF3DGAN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `(rows, cols)` per layer; each owns `rows * (cols + 1)` parameters.
    pub layers: Vec<(u32, u32)>,
    /// Flat parameters. Stored as f32, so values must already be
    /// f32-representable for a bit-exact round trip.
    pub params: Vec<f64>,
    pub optimizer: Vec<AdamState>,
    pub beta: f64,
    pub seed: u64,
    pub iteration: u64,
}

pub fn param_count(layers: &[(u32, u32)]) -> usize {
    layers
        .iter()
        .map(|&(r, c)| r as usize * (c as usize + 1))
        .sum()
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        let expected = param_count(&self.layers);
        if expected != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "layer dimensions declare {expected} parameters but {} are present",
                self.params.len()
            )));
        }
        for (i, g) in self.optimizer.iter().enumerate() {
            if g.m.len() != g.v.len() {
                return Err(Error::Checkpoint(format!("optimizer group {i} has mismatched moments")));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u32(w, self.layers.len() as u32)?;
        for &(r, c) in &self.layers {
            put_u32(w, r)?;
            put_u32(w, c)?;
        }
        for &p in &self.params {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        put_u32(w, self.optimizer.len() as u32)?;
        for g in &self.optimizer {
            put_u64(w, g.step)?;
            for x in [g.lr, g.beta1, g.beta2, g.eps] {
                put_f64(w, x)?;
            }
            put_u64(w, g.m.len() as u64)?;
            for &x in g.m.iter().chain(&g.v) {
                put_f64(w, x)?;
            }
        }
        put_f64(w, self.beta)?;
        put_u64(w, self.seed)?;
        put_u64(w, self.iteration)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_layers = get_u32(r)? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
        for _ in 0..n_layers {
            layers.push((get_u32(r)?, get_u32(r)?));
        }
        let n = param_count(&layers);
        let mut params = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(truncated)?;
            params.push(f32::from_le_bytes(b) as f64);
        }
        let n_groups = get_u32(r)? as usize;
        let mut optimizer = Vec::with_capacity(n_groups.min(64));
        for _ in 0..n_groups {
            let step = get_u64(r)?;
            let (lr, beta1, beta2, eps) = (get_f64(r)?, get_f64(r)?, get_f64(r)?, get_f64(r)?);
            let len = get_u64(r)? as usize;
            let mut read_vec = || -> Result<Vec<f64>> {
                let mut v = Vec::with_capacity(len.min(1 << 24));
                for _ in 0..len {
                    v.push(get_f64(r)?);
                }
                Ok(v)
            };
            let m = read_vec()?;
            let v = read_vec()?;
            optimizer.push(AdamState {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            });
        }
        let beta = get_f64(r)?;
        let seed = get_u64(r)?;
        let iteration = get_u64(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            layers,
            params,
            optimizer,
            beta,
            seed,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_f64(w: &mut impl Write, x: f64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let layers = vec![(3, 2), (1, 3), (1, 0)];
        let params: Vec<f64> = (0..param_count(&layers))
            .map(|i| ((i as f64 * 1.37).sin() * 0.3) as f32 as f64)
            .collect();
        let mut g = AdamState::new(params.len(), 4e-4);
        g.step = 17;
        g.m = (0..params.len()).map(|i| i as f64 * 1e-3 + 1e-17).collect();
        g.v = (0..params.len()).map(|i| (i as f64).sqrt() * 1e-7).collect();
        Checkpoint {
            layers,
            params,
            optimizer: vec![g, AdamState::new(0, 1e-4)],
            beta: 123.456,
            seed: 0xDEAD_BEEF,
            iteration: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_param_count_mismatch() {
        let mut ck = sample();
        ck.params.pop();
        assert!(matches!(ck.write_to(&mut Vec::new()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &cut[..]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::read_from(&mut long.as_slice()), Err(Error::Checkpoint(_))));
    }
}
