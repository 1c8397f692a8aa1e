//! Checkpoint files: named tensors plus a JSON metadata blob.
//!
//! The format is deliberately dumb: a magic string, a version, the metadata
//! as JSON, then a table of named f64 tensors in row-major little-endian
//! order. Every value is widened to f64 on write, so f32 model weights
//! round-trip bit-exactly. Model loading is strict: every parameter the model
//! declares must be present with the right shape, while extra tensors (such
//! as optimizer state) are ignored.

use crate::denoiser::{DenoiserConfig, PointDenoiser};
use crate::error::{Error, Result};
use crate::meshing::{SdfConfig, SdfModel};
use crate::metrics::{ClassifierConfig, ClassifierModel};
use crate::nn::{fl, Adam, ParamFn, Real};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"PLUM";
pub const VERSION: u32 = 1;

/// An in-memory checkpoint: metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(&MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Format(format!("metadata not serializable: {e}")))?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&meta).map_err(io_err)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(nb).map_err(io_err)?;
            w.write_all(&(tensor.ndim() as u32).to_le_bytes())
                .map_err(io_err)?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
            }
            let mut buf = Vec::with_capacity(tensor.len() * 8);
            for &v in tensor.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: file is version {version}, this build reads version {VERSION}",
                path.display()
            )));
        }
        let meta_len = read_u64(&mut r, path)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf).map_err(io_err)?;
        let meta: serde_json::Value =
            serde_json::from_slice(&meta_buf).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: "metadata".into(),
                detail: e.to_string(),
            })?;
        let count = read_u64(&mut r, path)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = read_u64(&mut r, path)? as usize;
            if name_len > 1 << 16 {
                return Err(Error::Format(format!(
                    "{}: tensor {i} name length {name_len} is implausible",
                    path.display()
                )));
            }
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(io_err)?;
            let name = String::from_utf8(name_buf).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: format!("tensor {i} name"),
                detail: e.to_string(),
            })?;
            let ndim = read_u32(&mut r, path)? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!(
                    "{}: tensor {name:?} has {ndim} dimensions",
                    path.display()
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut len = 1usize;
            for _ in 0..ndim {
                let d = read_u64(&mut r, path)? as usize;
                len = len.saturating_mul(d);
                shape.push(d);
            }
            if len > 1 << 30 {
                return Err(Error::Format(format!(
                    "{}: tensor {name:?} with {len} elements is implausible",
                    path.display()
                )));
            }
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf).map_err(io_err)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Format(format!("{}: tensor {name:?}: {e}", path.display())))?;
            tensors.push((name, tensor));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

/// Anything whose named parameters can be snapshotted and restored.
pub trait ParamSource<F: Real> {
    fn visit_params(&mut self, f: &mut ParamFn<'_, F>);
}

impl<F: Real> ParamSource<F> for PointDenoiser<F> {
    fn visit_params(&mut self, f: &mut ParamFn<'_, F>) {
        self.for_each_param(f);
    }
}

impl<F: Real> ParamSource<F> for SdfModel<F> {
    fn visit_params(&mut self, f: &mut ParamFn<'_, F>) {
        self.for_each_param(f);
    }
}

impl<F: Real> ParamSource<F> for ClassifierModel<F> {
    fn visit_params(&mut self, f: &mut ParamFn<'_, F>) {
        self.for_each_param(f);
    }
}

/// Copies every model parameter into `(name, f64 tensor)` pairs.
pub fn snapshot_params<F: Real>(model: &mut impl ParamSource<F>) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p| {
        out.push((name.to_string(), p.v.mapv(|v| v.to_f64().unwrap())));
    });
    out
}

/// Writes a model checkpoint. `extra` lands under `"extra"` in the metadata
/// and comes back from [`load_model`]; the architecture config is stored
/// alongside so loading needs no external knowledge.
pub fn save_model<F: Real>(
    path: &Path,
    model: &mut PointDenoiser<F>,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "model",
        "config": serde_json::to_value(&model.config)
            .map_err(|e| Error::Format(format!("config not serializable: {e}")))?,
        "extra": extra,
    });
    let mut ckpt = Checkpoint::new(meta);
    for (name, tensor) in snapshot_params(model) {
        ckpt.insert(name, tensor)?;
    }
    ckpt.write(path)
}

/// Strictly restores model parameters from a checkpoint: every parameter must
/// be present with a matching shape. Extra tensors are ignored.
pub fn restore_params<F: Real>(model: &mut impl ParamSource<F>, ckpt: &Checkpoint) -> Result<()> {
    let mut failure: Option<Error> = None;
    model.visit_params(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        match ckpt.tensor(name) {
            None => failure = Some(Error::Format(format!("checkpoint lacks tensor {name:?}"))),
            Some(t) if t.shape() != p.v.shape() => {
                failure = Some(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.v.shape()
                )))
            }
            Some(t) => p.v = t.mapv(|v| fl::<F>(v)),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Reads a model checkpoint written by [`save_model`]: reconstructs the
/// architecture from the stored config, fills in the weights, and returns the
/// `"extra"` metadata.
pub fn load_model<F: Real>(path: &Path) -> Result<(PointDenoiser<F>, serde_json::Value)> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("model") {
        return Err(Error::Format(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let config: DenoiserConfig = serde_json::from_value(
        ckpt.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: missing config", path.display())))?,
    )
    .map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: "config".into(),
        detail: e.to_string(),
    })?;
    // Weights are fully overwritten, so the init seed is irrelevant.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = PointDenoiser::new(config, &mut rng)?;
    restore_params(&mut model, &ckpt)?;
    let extra = ckpt
        .meta
        .get("extra")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    Ok((model, extra))
}

/// Writes a signed-distance model checkpoint in the same container format as
/// [`save_model`], tagged so the two model kinds cannot be confused.
pub fn save_sdf_model<F: Real>(
    path: &Path,
    model: &mut SdfModel<F>,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "sdf",
        "config": serde_json::to_value(&model.config)
            .map_err(|e| Error::Format(format!("config not serializable: {e}")))?,
        "extra": extra,
    });
    let mut ckpt = Checkpoint::new(meta);
    for (name, tensor) in snapshot_params(model) {
        ckpt.insert(name, tensor)?;
    }
    ckpt.write(path)
}

/// Reads a checkpoint written by [`save_sdf_model`].
pub fn load_sdf_model<F: Real>(path: &Path) -> Result<(SdfModel<F>, serde_json::Value)> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("sdf") {
        return Err(Error::Format(format!(
            "{}: not a signed-distance model checkpoint",
            path.display()
        )));
    }
    let config: SdfConfig = serde_json::from_value(
        ckpt.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: missing config", path.display())))?,
    )
    .map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: "config".into(),
        detail: e.to_string(),
    })?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = SdfModel::new(config, &mut rng)?;
    restore_params(&mut model, &ckpt)?;
    let extra = ckpt
        .meta
        .get("extra")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    Ok((model, extra))
}

/// Writes a classifier checkpoint in the common container format.
pub fn save_classifier<F: Real>(
    path: &Path,
    model: &mut ClassifierModel<F>,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "classifier",
        "config": serde_json::to_value(&model.config)
            .map_err(|e| Error::Format(format!("config not serializable: {e}")))?,
        "extra": extra,
    });
    let mut ckpt = Checkpoint::new(meta);
    for (name, tensor) in snapshot_params(model) {
        ckpt.insert(name, tensor)?;
    }
    ckpt.write(path)
}

/// Reads a checkpoint written by [`save_classifier`].
pub fn load_classifier<F: Real>(path: &Path) -> Result<(ClassifierModel<F>, serde_json::Value)> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("classifier") {
        return Err(Error::Format(format!(
            "{}: not a classifier checkpoint",
            path.display()
        )));
    }
    let config: ClassifierConfig = serde_json::from_value(
        ckpt.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: missing config", path.display())))?,
    )
    .map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: "config".into(),
        detail: e.to_string(),
    })?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = ClassifierModel::new(config, &mut rng)?;
    restore_params(&mut model, &ckpt)?;
    let extra = ckpt
        .meta
        .get("extra")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    Ok((model, extra))
}

/// Appends optimizer state under reserved names: `opt.step` plus
/// `opt.m.<param>` / `opt.v.<param>` moment pairs.
pub fn append_optimizer<F: Real>(ckpt: &mut Checkpoint, opt: &Adam<F>) -> Result<()> {
    ckpt.insert(
        "opt.step",
        ArrayD::from_elem(IxDyn(&[1]), opt.step as f64),
    )?;
    for (name, m, v) in &opt.moments {
        ckpt.insert(format!("opt.m.{name}"), m.mapv(|x| x.to_f64().unwrap()))?;
        ckpt.insert(format!("opt.v.{name}"), v.mapv(|x| x.to_f64().unwrap()))?;
    }
    Ok(())
}

/// Restores optimizer state written by [`append_optimizer`]. Absence of
/// `opt.step` means the checkpoint carries no optimizer state and is an
/// error; hyperparameters (learning rate, betas) are not stored and keep
/// whatever the caller configured.
pub fn restore_optimizer<F: Real>(opt: &mut Adam<F>, ckpt: &Checkpoint) -> Result<()> {
    let step = ckpt
        .tensor("opt.step")
        .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
    opt.step = step
        .first()
        .copied()
        .ok_or_else(|| Error::Format("opt.step is empty".into()))? as u64;
    opt.moments.clear();
    for (name, tensor) in &ckpt.tensors {
        if let Some(param) = name.strip_prefix("opt.m.") {
            let v_name = format!("opt.v.{param}");
            let v = ckpt.tensor(&v_name).ok_or_else(|| {
                Error::Format(format!("moment pair incomplete: missing {v_name:?}"))
            })?;
            if v.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "moment shapes for {param:?} disagree"
                )));
            }
            opt.moments.push((
                param.to_string(),
                tensor.mapv(|x| fl::<F>(x)),
                v.mapv(|x| fl::<F>(x)),
            ));
        }
    }
    Ok(())
}
