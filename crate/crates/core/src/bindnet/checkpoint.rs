//! Binary checkpoint: both projectors, temperatures, optimizer state and stage tag.
//!
//! Layout (little endian): `EBCK`, u16 version, u8 stage, u8 reserved, then the
//! audio and points projectors (u32 dims ×3, f64 tensors w1 b1 w2 b2), the
//! temperature table, both optimizer states, and a trailing SHA-256 of
//! everything before it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BindModel, ProjectorDims, ProjectorParams, TemperatureSet};
use crate::error::{Error, Result};
use crate::train::{OptimizerState, ScalarMoments};
use crate::types::Modality;

const MAGIC: [u8; 4] = *b"EBCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::S1, Stage::S2, Stage::S3];

    pub fn code(self) -> u8 {
        match self {
            Stage::S1 => 1,
            Stage::S2 => 2,
            Stage::S3 => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Stage::S1),
            2 => Ok(Stage::S2),
            3 => Ok(Stage::S3),
            _ => Err(Error::Format(format!("unknown stage code {c}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.code())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Stage::S1),
            "S2" => Ok(Stage::S2),
            "S3" => Ok(Stage::S3),
            _ => Err(Error::InvalidArgument(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: BindModel,
    pub optim_audio: OptimizerState,
    pub optim_points: OptimizerState,
}

impl Checkpoint {
    pub fn fresh(model: BindModel, stage: Stage) -> Self {
        let optim_audio = OptimizerState::new(model.audio.dims());
        let optim_points = OptimizerState::new(model.points.dims());
        Self {
            stage,
            model,
            optim_audio,
            optim_points,
        }
    }

    pub fn optim_mut(&mut self, m: Modality) -> Result<&mut OptimizerState> {
        match m {
            Modality::Audio => Ok(&mut self.optim_audio),
            Modality::Points => Ok(&mut self.optim_points),
            _ => Err(Error::InvalidArgument(format!("{m} has no optimizer"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.push(self.stage.code());
        w.push(0);
        for p in [&self.model.audio, &self.model.points] {
            let d = p.dims();
            for v in [d.input, d.hidden, d.output] {
                w.extend_from_slice(&(v as u32).to_le_bytes());
            }
            put_params(&mut w, p);
        }
        let temps: Vec<_> = self.model.temps.iter().collect();
        w.extend_from_slice(&(temps.len() as u32).to_le_bytes());
        for ((p, f), v) in temps {
            w.push(p.code());
            w.push(f.code());
            w.extend_from_slice(&v.to_le_bytes());
        }
        for o in [&self.optim_audio, &self.optim_points] {
            w.extend_from_slice(&o.step.to_le_bytes());
            put_params(&mut w, &o.m1);
            put_params(&mut w, &o.m2);
            w.extend_from_slice(&(o.tau.len() as u32).to_le_bytes());
            for (&(p, f), m) in &o.tau {
                w.push(p.code());
                w.push(f.code());
                w.extend_from_slice(&m.step.to_le_bytes());
                w.extend_from_slice(&m.m1.to_le_bytes());
                w.extend_from_slice(&m.m2.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if body[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Cursor { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take::<2>()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let stage = Stage::from_code(r.take::<1>()?[0])?;
        r.take::<1>()?;
        let mut projectors = Vec::with_capacity(2);
        for _ in 0..2 {
            let d = ProjectorDims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            projectors.push(r.params(d)?);
        }
        let points = projectors.pop().expect("two projectors");
        let audio = projectors.pop().expect("two projectors");
        let n = r.u32()?;
        let mut log_tau = BTreeMap::new();
        for _ in 0..n {
            let key = r.pair()?;
            log_tau.insert(key, r.f64()?);
        }
        let temps = TemperatureSet::from_map(log_tau)?;
        let mut optims = Vec::with_capacity(2);
        for dims in [audio.dims(), points.dims()] {
            let step = r.u64()?;
            let m1 = r.params(dims)?;
            let m2 = r.params(dims)?;
            let n = r.u32()?;
            let mut tau = BTreeMap::new();
            for _ in 0..n {
                let key = r.pair()?;
                tau.insert(
                    key,
                    ScalarMoments {
                        step: r.u64()?,
                        m1: r.f64()?,
                        m2: r.f64()?,
                    },
                );
            }
            optims.push(OptimizerState { step, m1, m2, tau });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        let optim_points = optims.pop().expect("two states");
        let optim_audio = optims.pop().expect("two states");
        let model = BindModel { audio, points, temps };
        if !model.audio.is_finite() || !model.points.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self {
            stage,
            model,
            optim_audio,
            optim_points,
        })
    }
}

fn put_params(w: &mut Vec<u8>, p: &ProjectorParams) {
    for v in p.w1.iter().chain(&p.b1).chain(&p.w2).chain(&p.b2) {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = self.buf[self.pos..end].try_into().expect("length checked");
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn pair(&mut self) -> Result<(Modality, Modality)> {
        let [p, f] = self.take::<2>()?;
        let code = |c: u8| Modality::from_code(c).ok_or_else(|| Error::Format(format!("unknown modality code {c}")));
        Ok((code(p)?, code(f)?))
    }

    fn params(&mut self, d: ProjectorDims) -> Result<ProjectorParams> {
        if d.param_count() * 8 > self.buf.len() - self.pos {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let mut p = ProjectorParams::zeros(d);
        for v in p
            .w1
            .iter_mut()
            .chain(p.b1.iter_mut())
            .chain(p.w2.iter_mut())
            .chain(p.b2.iter_mut())
        {
            *v = self.f64()?;
        }
        Ok(p)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bindnet::{batch_loss, TrainBatch};
    use crate::train::{adamw_step, AdamConfig};
    use ndarray::Array2;

    fn trained_checkpoint() -> Checkpoint {
        let mut ck = Checkpoint::fresh(
            BindModel::init(ProjectorDims::new(4, 6, 3), ProjectorDims::new(5, 7, 3), 9),
            Stage::S2,
        );
        let mut f = Array2::zeros((3, 3));
        for i in 0..3 {
            f[[i, i]] = 1.0;
        }
        let batch = TrainBatch {
            projected: Modality::Audio,
            a_in: Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3 + 0.1),
            frozen: vec![(Modality::Image, f)],
            p: vec![1.0, 0.5, 0.0],
        };
        let (_, g) = batch_loss(&ck.model.audio, &ck.model.temps, &batch).unwrap();
        let Checkpoint {
            model, optim_audio, ..
        } = &mut ck;
        adamw_step(optim_audio, &AdamConfig::default(), &mut model.audio, &mut model.temps, &g, 1e-3).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = trained_checkpoint();
        assert_eq!(ck.optim_audio.step, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let ck = trained_checkpoint();
        let mut bytes = ck.to_bytes();
        bytes[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"EBEM").is_err());
    }

    #[test]
    fn stage_tags() {
        for s in Stage::ALL {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
            assert_eq!(Stage::from_code(s.code()).unwrap(), s);
        }
        assert!("S4".parse::<Stage>().is_err());
    }
}
