//! Model checkpoints.
//!
//! Layout, all little-endian: magic `NGRFCKPT`, `u32` version, `u32` header length,
//! UTF-8 JSON header (renderer tag, model description, array names and shapes,
//! training state), then every array as raw `f64` in header order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::MlpBaseline;
use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::math::Aabb;
use crate::model::{FieldModel, NamedArray, Query, RendererKind};
use crate::renderer::NgrfModel;
use crate::splat::{Cs1Model, Cs2Model};
use crate::trainer::{MetricRow, TrainConfig};

pub const CKPT_MAGIC: &[u8; 8] = b"NGRFCKPT";
pub const CKPT_VERSION: u32 = 1;

/// Any model a checkpoint can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Ngrf(NgrfModel),
    Cs1(Cs1Model),
    Cs2(Cs2Model),
    Mlp(MlpBaseline),
}

impl AnyModel {
    pub fn kind(&self) -> RendererKind {
        match self {
            AnyModel::Ngrf(m) => m.kind(),
            AnyModel::Cs1(m) => m.kind(),
            AnyModel::Cs2(m) => m.kind(),
            AnyModel::Mlp(m) => m.kind(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            AnyModel::Ngrf(m) => m.dims(),
            AnyModel::Cs1(m) => m.dims(),
            AnyModel::Cs2(m) => m.dims(),
            AnyModel::Mlp(m) => m.dims(),
        }
    }

    pub fn predict(&self, queries: &[Query]) -> Result<Vec<ChannelMatrix>> {
        match self {
            AnyModel::Ngrf(m) => m.predict(queries),
            AnyModel::Cs1(m) => m.predict(queries),
            AnyModel::Cs2(m) => m.predict(queries),
            AnyModel::Mlp(m) => m.predict(queries),
        }
    }

    fn export(&self) -> (serde_json::Value, Vec<NamedArray>) {
        match self {
            AnyModel::Ngrf(m) => m.export(),
            AnyModel::Cs1(m) => m.export(),
            AnyModel::Cs2(m) => m.export(),
            AnyModel::Mlp(m) => m.export(),
        }
    }

    fn import(kind: RendererKind, header: &serde_json::Value, arrays: Vec<NamedArray>) -> Result<Self> {
        Ok(match kind {
            RendererKind::Ngrf => AnyModel::Ngrf(NgrfModel::import(header, arrays)?),
            RendererKind::Cs1 => AnyModel::Cs1(Cs1Model::import(header, arrays)?),
            RendererKind::Cs2 => AnyModel::Cs2(Cs2Model::import(header, arrays)?),
            RendererKind::Mlp => AnyModel::Mlp(MlpBaseline::import(header, arrays)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub iteration: usize,
    pub train_config: Option<TrainConfig>,
    pub history: Vec<MetricRow>,
    pub bounds: Option<Aabb>,
    pub carrier_hz: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: AnyModel) -> Self {
        Checkpoint { model, iteration: 0, train_config: None, history: Vec::new(), bounds: None, carrier_hz: None }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    renderer: RendererKind,
    model: serde_json::Value,
    arrays: Vec<ArrayInfo>,
    iteration: usize,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    history: Vec<MetricRow>,
    #[serde(default)]
    bounds: Option<Aabb>,
    #[serde(default)]
    carrier_hz: Option<f64>,
}

pub fn write_checkpoint(ck: &Checkpoint, w: &mut impl Write) -> Result<()> {
    let (model, arrays) = ck.model.export();
    for a in &arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::shape(format!("array `{}` does not match its shape", a.name)));
        }
    }
    let header = Header {
        renderer: ck.model.kind(),
        model,
        arrays: arrays.iter().map(|a| ArrayInfo { name: a.name.clone(), shape: a.shape.clone() }).collect(),
        iteration: ck.iteration,
        train_config: ck.train_config.clone(),
        history: ck.history.clone(),
        bounds: ck.bounds,
        carrier_hz: ck.carrier_hz,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for a in &arrays {
        let mut buf = Vec::with_capacity(8 * a.data.len());
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b4).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let h: Header = serde_json::from_slice(&json)?;
    let mut arrays = Vec::with_capacity(h.arrays.len());
    for info in h.arrays {
        let len: usize = info.shape.iter().product();
        let mut buf = vec![0u8; 8 * len];
        r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated array `{}`", info.name)))?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push(NamedArray { name: info.name, shape: info.shape, data });
    }
    crate::dataset::expect_eof(r, "checkpoint")?;
    let model = AnyModel::import(h.renderer, &h.model, arrays)?;
    Ok(Checkpoint {
        model,
        iteration: h.iteration,
        train_config: h.train_config,
        history: h.history,
        bounds: h.bounds,
        carrier_hz: h.carrier_hz,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(ck, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

pub(crate) type ArrayMap = HashMap<String, NamedArray>;

pub(crate) fn array_map(arrays: Vec<NamedArray>) -> ArrayMap {
    arrays.into_iter().map(|a| (a.name.clone(), a)).collect()
}
