//! Network checkpoints and the optimizer sidecar used to resume training.
//!
//! Checkpoint layout: magic `JPDM`, version `u32`, architecture text as a
//! `u32` byte length plus UTF-8, parameter count `u64`, the parameters as
//! little-endian `f64`, then the normalization `lo` and `hi` as `f64`.
//!
//! Sidecar layout: magic `JPDA`, version `u32`, completed iterations `u64`,
//! Adam step `u64`, length `u64`, then the first and second moments.

use std::path::Path;

use crate::data_io::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::network::{ArchSpec, ScoreNetwork};
use crate::schedule::NoiseSchedule;
use crate::training::{AdamState, ResumePoint};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JPDM";
pub const ADAM_MAGIC: &[u8; 4] = b"JPDA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ScoreNetwork,
    pub normalization: (f64, f64),
}

impl Checkpoint {
    /// Fails unless `schedule` spans the noise range the network was trained on.
    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        let emb = &self.net.spec().embedding;
        if emb.sigma_min != schedule.sigma_min() || emb.sigma_max != schedule.sigma_max() {
            return Err(Error::Mismatch(format!(
                "checkpoint was trained for sigma in [{}, {}], sampler schedule is [{}, {}]",
                emb.sigma_min,
                emb.sigma_max,
                schedule.sigma_min(),
                schedule.sigma_max()
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.bad("length overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bad(&self, reason: &str) -> Error {
        Error::MalformedHeader {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.bytes.len() < 8 {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: 8,
                found: self.bytes.len(),
            });
        }
        if self.take(4)? != magic {
            return Err(self.bad(&format!("missing {} magic", String::from_utf8_lossy(magic))));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.bad(&format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.bad("trailing bytes after payload"));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(net: &ScoreNetwork, normalization: (f64, f64)) -> Vec<u8> {
    let arch = net.spec().to_text();
    let theta = net.parameters();
    let mut out = Vec::with_capacity(32 + arch.len() + 8 * theta.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&normalization.0.to_le_bytes());
    out.extend_from_slice(&normalization.1.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.header(CHECKPOINT_MAGIC)?;
    let arch_len = r.u32()? as usize;
    let arch = std::str::from_utf8(r.take(arch_len)?).map_err(|_| r.bad("architecture text is not UTF-8"))?;
    let spec = ArchSpec::from_text(arch).map_err(|e| r.bad(&format!("architecture: {e}")))?;
    let count = r.u64()? as usize;
    if count != spec.param_count() {
        return Err(r.bad(&format!(
            "architecture needs {} parameters, header declares {count}",
            spec.param_count()
        )));
    }
    let theta = r.f64s(count)?;
    let lo_hi = r.f64s(2)?;
    r.finish()?;
    Ok(Checkpoint {
        net: ScoreNetwork::from_parameters(spec, theta)?,
        normalization: (lo_hi[0], lo_hi[1]),
    })
}

pub fn save_checkpoint(path: &Path, net: &ScoreNetwork, normalization: (f64, f64)) -> Result<()> {
    atomic_write(path, &encode_checkpoint(net, normalization))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?, path)
}

pub fn encode_resume(resume: &ResumePoint) -> Vec<u8> {
    let a = &resume.adam;
    let mut out = Vec::with_capacity(32 + 16 * a.m.len());
    out.extend_from_slice(ADAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(resume.completed_iters as u64).to_le_bytes());
    out.extend_from_slice(&a.step.to_le_bytes());
    out.extend_from_slice(&(a.m.len() as u64).to_le_bytes());
    for v in a.m.iter().chain(&a.v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_resume(bytes: &[u8], path: &Path) -> Result<ResumePoint> {
    let mut r = Reader::new(bytes, path);
    r.header(ADAM_MAGIC)?;
    let completed_iters = r.u64()? as usize;
    let step = r.u64()?;
    let len = r.u64()? as usize;
    let m = r.f64s(len)?;
    let v = r.f64s(len)?;
    r.finish()?;
    Ok(ResumePoint {
        completed_iters,
        adam: AdamState { m, v, step },
    })
}

pub fn save_resume(path: &Path, resume: &ResumePoint) -> Result<()> {
    atomic_write(path, &encode_resume(resume))
}

pub fn load_resume(path: &Path) -> Result<ResumePoint> {
    decode_resume(&read_bytes(path)?, path)
}
