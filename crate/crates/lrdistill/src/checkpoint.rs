//! Binary checkpoint format.
//!
//! Layout (little-endian throughout): magic `LRDC`, format version, a
//! length-prefixed config snapshot, step counter, optimizer scalars,
//! then length-prefixed named tensors (parameters first, momentum buffers
//! after). Round trips are bitwise exact.

use crate::config::ExperimentConfig;
use crate::nn::Param;
use crate::train::Sgd;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LRDC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    /// Which pipeline produced this model: "teacher" or "student".
    pub role: String,
    /// TOML snapshot of the configuration the run was started with.
    pub config_text: String,
    pub step: u64,
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub tensors: Vec<NamedTensor>,
    pub momentum: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(
        role: &str,
        cfg: &ExperimentConfig,
        params: &[Param<f32>],
        opt: Option<&Sgd<f32>>,
        step: u64,
    ) -> Self {
        let tensors = params
            .iter()
            .map(|p| NamedTensor {
                name: p.name(),
                shape: p.shape(),
                data: p.data(),
            })
            .collect();
        let momentum = match opt {
            Some(o) => params
                .iter()
                .zip(o.momentum_buffers())
                .map(|(p, b)| NamedTensor {
                    name: p.name(),
                    shape: vec![b.len()],
                    data: b.clone(),
                })
                .collect(),
            None => Vec::new(),
        };
        Checkpoint {
            version: VERSION,
            role: role.to_string(),
            config_text: cfg.to_toml(),
            step,
            base_lr: opt.map(|o| o.base_lr).unwrap_or(cfg.optim.lr),
            milestones: opt
                .map(|o| o.milestones.iter().map(|&m| m as u64).collect())
                .unwrap_or_default(),
            tensors,
            momentum,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config_text)
    }

    pub fn has_fusion_params(&self) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with("fusion."))
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Load values into parameters, matching by name. Every parameter must
    /// be present with the right shape.
    pub fn apply_to(&self, params: &[Param<f32>]) -> Result<()> {
        for p in params {
            let t = self.tensor(&p.name()).ok_or_else(|| {
                Error::CkptIncompatible(format!("missing tensor `{}`", p.name()))
            })?;
            if t.shape != p.shape() {
                return Err(Error::CkptIncompatible(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name(),
                    t.shape,
                    p.shape()
                )));
            }
            p.set_data(t.data.clone());
        }
        Ok(())
    }

    /// Reject checkpoints whose architecture-determining fields differ from
    /// the active configuration.
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        let saved = self.config()?;
        let mut mismatches = Vec::new();
        if saved.backbone != cfg.backbone {
            mismatches.push("backbone");
        }
        if saved.resolution.k != cfg.resolution.k {
            mismatches.push("resolution.k");
        }
        if saved.head != cfg.head {
            mismatches.push("head");
        }
        if saved.dataset.num_classes != cfg.dataset.num_classes {
            mismatches.push("dataset.num_classes");
        }
        if saved.dataset.image_size != cfg.dataset.image_size {
            mismatches.push("dataset.image_size");
        }
        if mismatches.is_empty() {
            Ok(())
        } else {
            Err(Error::CkptIncompatible(format!(
                "checkpoint config differs in: {}",
                mismatches.join(", ")
            )))
        }
    }
}

// ── Serialization ────────────────────────────────────────────────────

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &NamedTensor) -> Result<()> {
    write_u32(w, t.name.len() as u32)?;
    w.write_all(t.name.as_bytes())?;
    write_u32(w, t.shape.len() as u32)?;
    for &d in &t.shape {
        write_u64(w, d as u64)?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC)?;
    write_u32(&mut buf, ckpt.version)?;
    write_u32(&mut buf, ckpt.role.len() as u32)?;
    buf.write_all(ckpt.role.as_bytes())?;
    write_u32(&mut buf, ckpt.config_text.len() as u32)?;
    buf.write_all(ckpt.config_text.as_bytes())?;
    write_u64(&mut buf, ckpt.step)?;
    buf.write_all(&ckpt.base_lr.to_le_bytes())?;
    write_u32(&mut buf, ckpt.milestones.len() as u32)?;
    for &m in &ckpt.milestones {
        write_u64(&mut buf, m)?;
    }
    write_u32(&mut buf, ckpt.tensors.len() as u32)?;
    for t in &ckpt.tensors {
        write_tensor(&mut buf, t)?;
    }
    write_u32(&mut buf, ckpt.momentum.len() as u32)?;
    for t in &ckpt.momentum {
        write_tensor(&mut buf, t)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CkptTruncated(what));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let name_len = self.u32("tensor name length")? as usize;
        let name = String::from_utf8(self.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::CkptTruncated("tensor name utf-8"))?;
        let rank = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(NamedTensor { name, shape, data })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        data: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CkptBadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CkptBadVersion(version));
    }
    let role_len = r.u32("role length")? as usize;
    let role = String::from_utf8(r.take(role_len, "role")?.to_vec())
        .map_err(|_| Error::CkptTruncated("role utf-8"))?;
    let cfg_len = r.u32("config length")? as usize;
    let config_text = String::from_utf8(r.take(cfg_len, "config text")?.to_vec())
        .map_err(|_| Error::CkptTruncated("config utf-8"))?;
    let step = r.u64("step counter")?;
    let base_lr = r.f64("learning rate")?;
    let n_mile = r.u32("milestone count")? as usize;
    let mut milestones = Vec::with_capacity(n_mile);
    for _ in 0..n_mile {
        milestones.push(r.u64("milestone")?);
    }
    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        tensors.push(r.tensor()?);
    }
    let n_mom = r.u32("momentum count")? as usize;
    let mut momentum = Vec::with_capacity(n_mom);
    for _ in 0..n_mom {
        momentum.push(r.tensor()?);
    }
    Ok(Checkpoint {
        version,
        role,
        config_text,
        step,
        base_lr,
        milestones,
        tensors,
        momentum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_params() -> Vec<Param<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = crate::nn::Linear::<f32>::new("layer", &mut rng, 4, 3);
        l.params()
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = ExperimentConfig::default();
        let params = demo_params();
        let opt = Sgd::new(0.01, 0.9, 1e-4, vec![10, 20], &params);
        let ckpt = Checkpoint::from_params("teacher", &cfg, &params, Some(&opt), 42);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.role, "teacher");
        assert_eq!(loaded.base_lr, 0.01);
        assert_eq!(loaded.milestones, vec![10, 20]);
        assert_eq!(loaded.config_text, cfg.to_toml());
        for (a, b) in ckpt.tensors.iter().zip(loaded.tensors.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "raw bits must survive the round trip");
        }
        // and back into fresh parameters
        let fresh = demo_params();
        fresh[0].set_data(vec![0.0; fresh[0].numel()]);
        loaded.apply_to(&fresh).unwrap();
        assert_eq!(fresh[0].data(), params[0].data());
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let cfg = ExperimentConfig::default();
        let params = demo_params();
        let ckpt = Checkpoint::from_params("teacher", &cfg, &params, None, 0);
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3usize, 9, 40, bytes.len() - 5] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            match load_checkpoint(&path) {
                Err(Error::CkptTruncated(_)) | Err(Error::CkptBadMagic) => {}
                other => panic!("cut at {cut}: expected truncation error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE....rest").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CkptBadMagic)));

        let cfg = ExperimentConfig::default();
        let ckpt = Checkpoint::from_params("teacher", &cfg, &demo_params(), None, 0);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CkptBadVersion(99))
        ));
    }

    #[test]
    fn mismatched_k_is_rejected() {
        let cfg2 = ExperimentConfig::default();
        let ckpt = Checkpoint::from_params("teacher", &cfg2, &demo_params(), None, 0);
        let mut cfg4 = ExperimentConfig::default();
        cfg4.resolution.k = 4;
        cfg4.head.scale_bounds = vec![32.0, 64.0];
        match ckpt.check_compatible(&cfg4) {
            Err(Error::CkptIncompatible(msg)) => {
                assert!(msg.contains("resolution.k"), "{msg}");
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }
}
