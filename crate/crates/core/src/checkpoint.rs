//! Checkpoint directories: `params.bin` (a binary parameter archive),
//! `manifest.txt` (plain `key = value` lines) and `config.toml`.
//!
//! Archive layout, little endian: magic `HNETPRM1`, `u32` parameter count,
//! then per parameter a `u32` name length, the UTF-8 name, a `u32` rank,
//! `u64` dims, and `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{SiameseModel, STRIDE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HNETPRM1";

pub fn encode_params<T: Scalar>(model: &SiameseModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for p in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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
}

/// Loads archived values into `model`; names and shapes must match exactly.
pub fn decode_params<T: Scalar>(model: &mut SiameseModel<T>, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter archive".into()));
    }
    let n = r.u32()? as usize;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!("archive has {n} parameters, model has {}", model.store.len())));
    }
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model.store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if model.store.get(id).value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter {name}: shape {shape:?} does not match the model")));
        }
        let count: usize = shape.iter().product();
        let data = (0..count).map(|_| r.f64().map(T::lit)).collect::<Result<Vec<_>>>()?;
        model.store.set(id, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after archive".into()));
    }
    Ok(())
}

/// Manifest fields written next to the archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub step: usize,
    pub seed: u64,
    pub stride: usize,
    pub channels: usize,
    pub scalar: String,
    /// Normalised fusion weights: score, centerness, regression.
    pub fusion: [[f64; 3]; 3],
}

impl Manifest {
    pub fn render(&self) -> String {
        let w = |v: &[f64; 3]| format!("{:.6}, {:.6}, {:.6}", v[0], v[1], v[2]);
        format!(
            "step = {}\nseed = {}\nstride = {}\nchannels = {}\nscalar = {}\nfusion_score = {}\nfusion_centerness = {}\nfusion_regression = {}\n",
            self.step,
            self.seed,
            self.stride,
            self.channels,
            self.scalar,
            w(&self.fusion[0]),
            w(&self.fusion[1]),
            w(&self.fusion[2])
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim(), v.trim())).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Checkpoint(format!("manifest lacks {k}")));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| Error::Checkpoint(format!("manifest {k} is not a number")));
        let triple = |k: &str| -> Result<[f64; 3]> {
            let v: Vec<f64> = get(k)?.split(',').map(|s| s.trim().parse().map_err(|_| Error::Checkpoint(format!("manifest {k}")))).collect::<Result<_>>()?;
            v.try_into().map_err(|_| Error::Checkpoint(format!("manifest {k} needs three values")))
        };
        Ok(Self {
            step: num("step")? as usize,
            seed: num("seed")?,
            stride: num("stride")? as usize,
            channels: num("channels")? as usize,
            scalar: get("scalar")?.to_string(),
            fusion: [triple("fusion_score")?, triple("fusion_centerness")?, triple("fusion_regression")?],
        })
    }
}

pub fn save<T: Scalar>(dir: &Path, model: &SiameseModel<T>, config: &Config, step: usize) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("params.bin"), encode_params(model))?;
    let manifest = Manifest {
        step,
        seed: config.seed,
        stride: STRIDE,
        channels: model.config.channels,
        scalar: T::NAME.to_string(),
        fusion: model.fusion_values(),
    };
    fs::write(dir.join("manifest.txt"), manifest.render())?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(manifest)
}

/// Rebuilds the model described by `dir/config.toml` and loads its weights.
pub fn load<T: Scalar>(dir: &Path) -> Result<(SiameseModel<T>, Config, Manifest)> {
    let config = Config::load(&dir.join("config.toml"))?;
    let manifest = Manifest::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let mut model = SiameseModel::new(config.model.clone())?;
    decode_params(&mut model, &fs::read(dir.join("params.bin"))?)?;
    Ok((model, config, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut cfg = Config { seed: 4, ..Config::default() };
        cfg.sync();
        let model = SiameseModel::<f32>::new(cfg.model.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save(dir.path(), &model, &cfg, 123).unwrap();
        let (back, c2, m2) = load::<f32>(dir.path()).unwrap();
        assert_eq!(m2, Manifest::parse(&m.render()).unwrap());
        assert_eq!(m2.step, 123);
        assert_eq!(c2, cfg);
        for (a, b) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let bytes = encode_params(&model);
        let mut other = SiameseModel::<f32>::new(cfg.model.clone()).unwrap();
        assert!(decode_params(&mut other, &bytes[..bytes.len() - 3]).is_err());
    }
}
