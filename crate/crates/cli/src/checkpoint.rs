//! Checkpoint files.
//!
//! Layout, little-endian: magic `MSTCNCKP`, `u64` format version, the run
//! config as length-prefixed canonical TOML, `u64` epoch, iteration and Adam
//! step, then three blocks (parameters, first moments, second moments) each
//! holding a `u64` count of `(length-prefixed name, tensor)` entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mstcn::model::{Adam, AdamConfig};
use mstcn::{ParameterStore, Scalar, Tensor};

use crate::config::RunConfig;
use crate::CliError;

pub const MAGIC: &[u8; 8] = b"MSTCNCKP";
pub const FORMAT_VERSION: u64 = 1;

/// Saved training state, held in 64-bit regardless of training precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub iteration: u64,
    pub params: ParameterStore<f64>,
    pub adam: Adam<f64>,
}

impl Checkpoint {
    pub fn new<S: Scalar>(config: &RunConfig, epoch: u64, iteration: u64, params: &ParameterStore<S>, adam: &Adam<S>) -> Self {
        Self {
            config: config.clone(),
            epoch,
            iteration,
            params: params.cast(),
            adam: Adam {
                config: adam.config,
                step: adam.step,
                m: adam.m.cast(),
                v: adam.v.cast(),
            },
        }
    }

    pub fn params<S: Scalar>(&self) -> ParameterStore<S> {
        self.params.cast()
    }

    pub fn adam<S: Scalar>(&self) -> Adam<S> {
        Adam {
            config: self.adam.config,
            step: self.adam.step,
            m: self.adam.m.cast(),
            v: self.adam.v.cast(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CliError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u64(&mut buf, FORMAT_VERSION);
        put_str(&mut buf, &self.config.to_canonical());
        put_u64(&mut buf, self.epoch);
        put_u64(&mut buf, self.iteration);
        put_u64(&mut buf, self.adam.step);
        for store in [&self.params, &self.adam.m, &self.adam.v] {
            put_u64(&mut buf, store.len() as u64);
            for (name, t) in store.iter() {
                put_str(&mut buf, name);
                t.write_to(&mut buf)?;
            }
        }
        w.write_all(&buf).map_err(|e| CliError::Checkpoint(e.to_string()))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Checkpoint(m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = get_u64(r)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config = RunConfig::parse(&get_str(r)?)?;
        let epoch = get_u64(r)?;
        let iteration = get_u64(r)?;
        let step = get_u64(r)?;
        let mut stores = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = get_u64(r)?;
            let mut store = ParameterStore::new();
            for _ in 0..n {
                let name = get_str(r)?;
                store.insert(name, Tensor::read_from(r)?);
            }
            stores.push(store);
        }
        let v = stores.pop().unwrap();
        let m = stores.pop().unwrap();
        let params = stores.pop().unwrap();
        Ok(Self {
            config,
            epoch,
            iteration,
            params,
            adam: Adam {
                config: AdamConfig::default(),
                step,
                m,
                v,
            },
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.write_to(&mut w)?;
            w.flush().map_err(|e| CliError::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64, CliError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String, CliError> {
    let n = get_u64(r)?;
    if n > 1 << 30 {
        return Err(CliError::Checkpoint(format!("string length {n} is implausible")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    String::from_utf8(b).map_err(|e| CliError::Checkpoint(e.to_string()))
}
