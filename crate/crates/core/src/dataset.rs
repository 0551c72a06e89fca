//! Channel measurements and the binary dataset file.
//!
//! Layout, all little-endian: magic `NGRFDATA`, `u32` version, `u32` header length,
//! UTF-8 JSON header, then per record `p_tx[3]`, `p_rx[3]` and `N_t·N_r`
//! interleaved `(re, im)` pairs, all `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::antenna::ArraySpec;
use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::math::{Aabb, Complex, Vec3};
use crate::model::Query;

pub const DATA_MAGIC: &[u8; 8] = b"NGRFDATA";
pub const DATA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub tx: Vec3,
    pub rx: Vec3,
    pub h: ChannelMatrix,
}

impl Measurement {
    pub fn query(&self) -> Query {
        Query { tx: self.tx, rx: self.rx }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n_t: usize,
    pub n_r: usize,
    pub carrier_hz: f64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_array: Option<ArraySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rx_array: Option<ArraySpec>,
    /// Region the receivers were drawn from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Aabb>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub nt: usize,
    pub nr: usize,
    pub carrier_hz: f64,
    pub tx_array: Option<ArraySpec>,
    pub rx_array: Option<ArraySpec>,
    pub bounds: Option<Aabb>,
    pub records: Vec<Measurement>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stored bounds, or the box around every transmitter and receiver.
    pub fn bounds_or_fit(&self) -> Result<Aabb> {
        if let Some(b) = self.bounds {
            return Ok(b);
        }
        Aabb::from_points(self.records.iter().flat_map(|m| [m.tx, m.rx])).ok_or(Error::EmptyDataset)
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<Measurement> {
        idx.iter().map(|&i| self.records[i].clone()).collect()
    }

    /// Seeded train/test split with `round(train_fraction · n)` training records.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Vec<Measurement>, Vec<Measurement>) {
        let (tr, te) = split_indices(self.len(), train_fraction, seed);
        (self.subset(&tr), self.subset(&te))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for m in &self.records {
            if m.h.dims() != (self.nt, self.nr) {
                return Err(Error::shape("record does not match the dataset antenna counts"));
            }
        }
        let header = DatasetHeader {
            n_t: self.nt,
            n_r: self.nr,
            carrier_hz: self.carrier_hz,
            count: self.records.len(),
            tx_array: self.tx_array,
            rx_array: self.rx_array,
            bounds: self.bounds,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(8 * (6 + 2 * self.nt * self.nr));
        for m in &self.records {
            buf.clear();
            for v in m.tx.to_array().into_iter().chain(m.rx.to_array()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for c in &m.h.data {
                buf.extend_from_slice(&c.re.to_le_bytes());
                buf.extend_from_slice(&c.im.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for a dataset".into()))?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| Error::Format("truncated dataset header".into()))?;
        let h: DatasetHeader = serde_json::from_slice(&json)?;
        let k = h.n_t * h.n_r;
        let mut records = Vec::with_capacity(h.count);
        let mut buf = vec![0u8; 8 * (6 + 2 * k)];
        for i in 0..h.count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated dataset: record {i} of {}", h.count)))?;
            let f: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let data = (0..k).map(|j| Complex::new(f[6 + 2 * j], f[7 + 2 * j])).collect();
            records.push(Measurement {
                tx: Vec3::from_slice(&f[0..3]),
                rx: Vec3::from_slice(&f[3..6]),
                h: ChannelMatrix { nt: h.n_t, nr: h.n_r, data },
            });
        }
        expect_eof(r, "dataset")?;
        Ok(Dataset {
            nt: h.n_t,
            nr: h.n_r,
            carrier_hz: h.carrier_hz,
            tx_array: h.tx_array,
            rx_array: h.rx_array,
            bounds: h.bounds,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let test = idx.split_off(n_train);
    (idx, test)
}

pub(crate) fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("trailing bytes after {what}"))),
    }
}
