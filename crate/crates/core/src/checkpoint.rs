//! Binary container for models, dictionaries and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PVCK"  u16 version  u8 kind  u8 family  u8 encoder  u8 grad-mode  f64 beta
//! u32 meta-len  meta (UTF-8 JSON)
//! u32 n-tensors  { u16 name-len  name  u64 rows  u64 cols  f64 × rows·cols }*
//! ```
//!
//! Tags that do not apply are written as 255.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{EncoderKind, Family, GradMode, LinearVae, ModelSpec};
use crate::numkit::Matrix;

const MAGIC: &[u8; 4] = b"PVCK";
pub const VERSION: u16 = 1;
const NONE_TAG: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Model = 0,
    Dictionary = 1,
    TrainState = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub spec: Option<ModelSpec>,
    pub meta: Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        let (fam, enc, mode, beta) = match &self.spec {
            None => (NONE_TAG, NONE_TAG, NONE_TAG, 0.0),
            Some(s) => (
                family_tag(s.family),
                encoder_tag(s.encoder),
                mode_tag(s.grad_mode),
                s.beta,
            ),
        };
        out.extend_from_slice(&[fam, enc, mode]);
        out.extend_from_slice(&beta.to_le_bytes());
        let mut meta = self.meta.clone();
        if let Some(spec) = &self.spec {
            if !meta.is_object() {
                meta = Value::Object(Default::default());
            }
            meta["model"] = serde_json::to_value(spec).expect("spec serializes");
        }
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let kind = match r.u8()? {
            0 => ContainerKind::Model,
            1 => ContainerKind::Dictionary,
            2 => ContainerKind::TrainState,
            k => return Err(Error::data(format!("unknown checkpoint kind {k}"))),
        };
        let tags = [r.u8()?, r.u8()?, r.u8()?];
        let beta = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let meta_len = r.u32()? as usize;
        let mut meta: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
        let spec = match meta.as_object_mut().and_then(|m| m.remove("model")) {
            None => None,
            Some(v) => {
                let spec: ModelSpec = serde_json::from_value(v)
                    .map_err(|e| Error::data(format!("checkpoint model spec: {e}")))?;
                let expect = [
                    family_tag(spec.family),
                    encoder_tag(spec.encoder),
                    mode_tag(spec.grad_mode),
                ];
                if tags != expect || beta.to_bits() != spec.beta.to_bits() {
                    return Err(Error::data(
                        "checkpoint header disagrees with its model description",
                    ));
                }
                Some(spec)
            }
        };
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::data("tensor name is not UTF-8"))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let count = rows
                .checked_mul(cols)
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| Error::data(format!("tensor '{name}' size overflows")))?;
            let raw = r.take(count)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::data(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            spec,
            meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                Error::data(format!(
                    "truncated checkpoint: need bytes {}..{}, file has {}",
                    self.pos,
                    self.pos.saturating_add(n),
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn family_tag(f: Family) -> u8 {
    match f {
        Family::Poisson => 0,
        Family::Gaussian => 1,
        Family::Laplace => 2,
    }
}

fn encoder_tag(e: EncoderKind) -> u8 {
    match e {
        EncoderKind::Linear => 0,
        EncoderKind::Mlp1 => 1,
    }
}

fn mode_tag(m: GradMode) -> u8 {
    match m {
        GradMode::Exact => 0,
        GradMode::MonteCarlo => 1,
        GradMode::StraightThrough => 2,
    }
}

/// Container holding every parameter tensor of `model`.
pub fn model_container(model: &LinearVae, meta: Value) -> Container {
    Container {
        kind: ContainerKind::Model,
        spec: Some(model.spec().clone()),
        meta,
        tensors: model
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    }
}

/// Rebuilds a model from the leading tensors of a model or training-state container.
pub fn model_from_container(c: &Container) -> Result<LinearVae> {
    let spec = c
        .spec
        .clone()
        .ok_or_else(|| Error::data("checkpoint does not describe a model"))?;
    let names: Vec<String> = LinearVae::new(spec.clone(), &mut crate::RngStream::new(0, 0))?
        .tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let tensors = names
        .iter()
        .map(|n| {
            c.tensor(n)
                .cloned()
                .ok_or_else(|| Error::data(format!("checkpoint lacks tensor '{n}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    LinearVae::from_tensors(spec, tensors)
}

pub fn save_model(path: &Path, model: &LinearVae) -> Result<()> {
    model_container(model, Value::Object(Default::default())).write(path)
}

pub fn load_model(path: &Path) -> Result<LinearVae> {
    model_from_container(&Container::read(path)?)
}

pub fn save_dictionary(path: &Path, phi: &Matrix, meta: Value) -> Result<()> {
    Container {
        kind: ContainerKind::Dictionary,
        spec: None,
        meta,
        tensors: vec![("dictionary".to_string(), phi.clone())],
    }
    .write(path)
}

/// The dictionary from either a dictionary file or a model checkpoint.
pub fn load_dictionary(path: &Path) -> Result<Matrix> {
    Container::read(path)?
        .tensor("dictionary")
        .cloned()
        .ok_or_else(|| Error::data(format!("{}: no dictionary tensor", path.display())))
}
