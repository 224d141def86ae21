//! Checkpoint container and metric log.
//!
//! Layout (little-endian): magic `MMCK`, `u32` version, `u32` metadata
//! length, UTF-8 `key = value` metadata, `u32` tensor count, then per tensor
//! `u32` name length, name, `u8` dtype length, dtype (`f32`/`f64`), `u32`
//! rank, `u64` dims, row-major payload. Model parameters are stored as
//! `param.<name>`, optimizer moments as `opt.m.<name>` / `opt.v.<name>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AdamState, EpochMetrics, Model, ModelDims, TrainConfig};
use crate::autodiff::ParamSet;
use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: AdamState<T>,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    out.write_u32::<LittleEndian>(name.len() as u32)?;
    out.extend_from_slice(name.as_bytes());
    out.write_u8(T::DTYPE.len() as u8)?;
    out.extend_from_slice(T::DTYPE.as_bytes());
    out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        out.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
}

fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<(String, Tensor<T>)> {
    let nlen = r.read_u32::<LittleEndian>()? as usize;
    let name = read_string(r, nlen)?;
    let dlen = r.read_u8()? as usize;
    let dtype = read_string(r, dlen)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "tensor {name} has dtype {dtype}, expected {}",
            T::DTYPE
        )));
    }
    let rank = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * T::BYTES];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok((name, Tensor::new(shape, data)?))
}

impl<T: Scalar> Checkpoint<T> {
    fn metadata(&self) -> String {
        let dims = self.model.dims();
        let mut s = String::new();
        let _ = writeln!(s, "dtype = {}", T::DTYPE);
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "node_dim = {}", dims.node_dim);
        let _ = writeln!(s, "grid_size = {}", dims.grid_size);
        let _ = writeln!(s, "d = {}", dims.d);
        let _ = writeln!(s, "optimizer.step = {}", self.optimizer.step);
        for (k, v) in self.config.pairs() {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        let _ = writeln!(s, "history.count = {}", self.history.len());
        for (i, m) in self.history.iter().enumerate() {
            let _ = writeln!(
                s,
                "history.{i} = {},{},{},{}",
                m.epoch, m.loss, m.lr, m.top1_retrieval
            );
        }
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let meta = self.metadata();
        out.write_u32::<LittleEndian>(meta.len() as u32)?;
        out.extend_from_slice(meta.as_bytes());
        let params = self.model.flat_params();
        let count = params.len() + self.optimizer.m.len() + self.optimizer.v.len();
        out.write_u32::<LittleEndian>(count as u32)?;
        for (k, t) in &params {
            write_tensor(&mut out, &format!("param.{k}"), t)?;
        }
        for (k, t) in &self.optimizer.m {
            write_tensor(&mut out, &format!("opt.m.{k}"), t)?;
        }
        for (k, t) in &self.optimizer.v {
            write_tensor(&mut out, &format!("opt.v.{k}"), t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mlen = r.read_u32::<LittleEndian>()? as usize;
        let meta: BTreeMap<String, String> = parse_kv(&read_string(&mut r, mlen)?)?.into_iter().collect();
        let get = |k: &str| -> Result<&str> {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{k}`")))
        };
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad metadata value `{v}` for `{k}`")))
        }
        if get("dtype")? != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint dtype {} does not match {}",
                get("dtype")?,
                T::DTYPE
            )));
        }
        let dims = ModelDims {
            node_dim: num("node_dim", get("node_dim")?)?,
            grid_size: num("grid_size", get("grid_size")?)?,
            d: num("d", get("d")?)?,
        };
        let mut config = TrainConfig::default();
        for (k, v) in &meta {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v)?;
            }
        }
        let count: usize = num("history.count", get("history.count")?)?;
        let mut history = Vec::with_capacity(count);
        for i in 0..count {
            let key = format!("history.{i}");
            let row = get(&key)?;
            let f: Vec<&str> = row.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad history row `{row}`")));
            }
            history.push(EpochMetrics {
                epoch: num(&key, f[0])?,
                loss: num(&key, f[1])?,
                lr: num(&key, f[2])?,
                top1_retrieval: num(&key, f[3])?,
            });
        }

        let n = r.read_u32::<LittleEndian>()? as usize;
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for _ in 0..n {
            let (name, t) = read_tensor::<T>(&mut r)?;
            if let Some(k) = name.strip_prefix("param.") {
                params.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("opt.m.") {
                m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("opt.v.") {
                v.insert(k.to_string(), t);
            } else {
                return Err(Error::Format(format!("unexpected tensor `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            config,
            model: Model::from_flat(dims, &params)?,
            optimizer: AdamState {
                step: num("optimizer.step", get("optimizer.step")?)?,
                m,
                v,
            },
            epoch: num("epoch", get("epoch")?)?,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// CSV with columns `epoch,loss,lr,top1_retrieval`.
pub fn write_metrics_csv(w: impl Write, history: &[EpochMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss", "lr", "top1_retrieval"])?;
    for m in history {
        out.write_record([
            m.epoch.to_string(),
            m.loss.to_string(),
            m.lr.to_string(),
            m.top1_retrieval.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(r: impl Read) -> Result<Vec<EpochMetrics>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Format("short metrics row".into()))
        };
        let bad = |e: &dyn std::fmt::Display| Error::Format(format!("metrics: {e}"));
        out.push(EpochMetrics {
            epoch: field(0)?.parse().map_err(|e| bad(&e))?,
            loss: field(1)?.parse().map_err(|e| bad(&e))?,
            lr: field(2)?.parse().map_err(|e| bad(&e))?,
            top1_retrieval: field(3)?.parse().map_err(|e| bad(&e))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Encoder;
    use crate::synthdata::{generate_dataset, GeneratorSpec};
    use crate::trainer::{pretrain, LossKind};

    fn trained<T: Scalar>() -> (Checkpoint<T>, crate::synthdata::Dataset) {
        let spec = GeneratorSpec {
            grid_size: 8,
            tokens: 8,
            ..GeneratorSpec::default()
        };
        let data = generate_dataset(8, 2, &spec).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::Anchored,
            d: 4,
            batch_size: 4,
            epochs: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        (pretrain::<T>(&cfg, &data).unwrap(), data)
    }

    #[test]
    fn bitwise_round_trip() {
        let (ck, data) = trained::<f64>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
        for rec in &data.records {
            let a = ck.model.crystal.encode(rec.crystal().unwrap()).unwrap();
            let b = back.model.crystal.encode(rec.crystal().unwrap()).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.values()), bits(b.values()));
        }
    }

    #[test]
    fn f32_round_trip_and_dtype_check() {
        let (ck, _) = trained::<f32>();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap(), ck);
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_input() {
        let (ck, _) = trained::<f64>();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let (ck, _) = trained::<f64>();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &ck.history).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("epoch,loss,lr,top1_retrieval\n"));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), ck.history);
    }
}
