//! Binary model checkpoints.
//!
//! Layout: an 8-byte magic, a TOML metadata block describing the
//! architecture, the training step and run seed, then each named parameter
//! tensor as raw little-endian f64. Writing is canonical, so saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{FssModel, ModelVariant};
use crate::ode::SolverConfig;

pub const MAGIC: &[u8; 8] = b"RPNODE01";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    variant: ModelVariant,
    encoder: EncoderConfig,
    solver: SolverConfig,
    temperature: f64,
    time_conditioning: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FssModel,
    pub step: u64,
    pub run_seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl Reader<'_> {
    fn fail(&self, message: &str) -> Error {
        Error::Checkpoint(format!("{}: {message} at byte {}", self.path, self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

fn encode(model: &FssModel, step: u64, run_seed: u64) -> Result<Vec<u8>> {
    let time_conditioning = match &model.ode {
        crate::model::OdeBlock::Learned(d) => d.time_conditioning,
        _ => true,
    };
    let meta = Meta {
        variant: model.variant,
        encoder: model.encoder_cfg.clone(),
        solver: model.solver,
        temperature: model.temperature,
        time_conditioning,
    };
    let meta_toml =
        toml::to_string(&meta).map_err(|e| Error::Checkpoint(format!("metadata serialization failed: {e}")))?;

    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.bytes(meta_toml.as_bytes());
    w.u64(step);
    w.u64(run_seed);

    let params = model.named_params();
    w.u64(params.len() as u64);
    for (name, tensor) in params {
        w.bytes(name.as_bytes());
        w.u64(tensor.shape().len() as u64);
        for &d in tensor.shape() {
            w.u64(d as u64);
        }
        for &v in tensor.data() {
            w.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(w.buf)
}

pub fn save(model: &FssModel, step: u64, run_seed: u64, path: &Path) -> Result<()> {
    let buf = encode(model, step, run_seed)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path: path.display().to_string() };

    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic, not a checkpoint", path.display())));
    }
    let meta_bytes = r.bytes()?;
    let meta_toml = String::from_utf8(meta_bytes).map_err(|_| r.fail("metadata is not utf-8"))?;
    let meta: Meta =
        toml::from_str(&meta_toml).map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let step = r.u64()?;
    let run_seed = r.u64()?;

    let mut model = FssModel::new(
        meta.variant,
        &meta.encoder,
        &meta.solver,
        meta.time_conditioning,
        meta.temperature,
        0,
    )?;

    let count = r.u64()? as usize;
    let mut expected = model.named_params_mut();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} parameters for this architecture, file has {count}",
            path.display(),
            expected.len()
        )));
    }
    for (name, slot) in expected.iter_mut() {
        let got_name = String::from_utf8(r.bytes()?).map_err(|_| r.fail("parameter name is not utf-8"))?;
        if got_name != *name {
            return Err(Error::Checkpoint(format!(
                "{}: parameter order mismatch, expected '{name}', found '{got_name}'",
                path.display()
            )));
        }
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter '{name}' has shape {shape:?}, architecture wants {:?}",
                path.display(),
                slot.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        **slot = Tensor::from_vec(&shape, data);
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Checkpoint { model, step, run_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::SolverMethod;

    fn sample_model(variant: ModelVariant) -> FssModel {
        let cfg = EncoderConfig {
            stage_channels: vec![3, 5],
            downsample_factor: 2,
            weight_init: "he_normal".into(),
        };
        let solver = SolverConfig { method: SolverMethod::Rk4Fixed, steps: 3, ..SolverConfig::default() };
        FssModel::new(variant, &cfg, &solver, false, 12.5, 42).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for variant in [ModelVariant::Rpnode, ModelVariant::VanillaCnn, ModelVariant::IdentityOde] {
            let model = sample_model(variant);
            let p1 = dir.path().join(format!("{variant}_a.ckpt"));
            let p2 = dir.path().join(format!("{variant}_b.ckpt"));
            save(&model, 600, 17, &p1).unwrap();
            let loaded = load(&p1).unwrap();
            assert_eq!(loaded.step, 600);
            assert_eq!(loaded.run_seed, 17);
            assert_eq!(loaded.model, model);
            save(&loaded.model, loaded.step, loaded.run_seed, &p2).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn loaded_parameters_match_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_model(ModelVariant::Rpnode);
        let path = dir.path().join("m.ckpt");
        save(&model, 0, 1, &path).unwrap();
        let loaded = load(&path).unwrap().model;
        for ((na, ta), (nb, tb)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        match load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("bad magic"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_model(ModelVariant::VanillaCnn);
        let path = dir.path().join("full.ckpt");
        save(&model, 3, 4, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_model(ModelVariant::VanillaCnn);
        let path = dir.path().join("full.ckpt");
        save(&model, 3, 4, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"extra");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
