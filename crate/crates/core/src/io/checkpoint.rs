//! Binary checkpoint format.
//!
//! ```text
//! "SSGN" | version u32 | count u32 | entry*
//! optimizer flag u8 | [step u64 | beta1 beta2 lr eps f64 | count u32 | entry*]
//! entry = name_len u32 | name utf-8 | dtype u8 (0 = f32) | ndim u32 | dims u32* | f32*
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::SsgNet;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSGN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSection {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub entries: Vec<(String, Tensor<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerSection>,
}

impl Checkpoint {
    pub fn from_model(net: &SsgNet<f32>, adam: Option<&AdamState<f32>>) -> Self {
        let names: Vec<&str> = net.named_params().iter().map(|(n, _)| *n).collect();
        let entries = net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n.to_string(), Tensor::from_vec(t.shape(), t.data().to_vec()).expect("same shape")))
            .collect();
        let optimizer = adam.filter(|a| !a.m.is_empty()).map(|a| {
            let moments = |prefix: &str, ts: &[Tensor<f32>]| {
                names
                    .iter()
                    .zip(ts)
                    .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
                    .collect::<Vec<_>>()
            };
            let mut entries = moments("m", &a.m);
            entries.extend(moments("v", &a.v));
            OptimizerSection {
                step: a.step,
                beta1: a.beta1,
                beta2: a.beta2,
                lr: a.lr,
                eps: a.eps,
                entries,
            }
        });
        Self { entries, optimizer }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_model(&self) -> Result<SsgNet<f32>> {
        SsgNet::from_named(|name| self.get(name).cloned())
    }

    /// Rebuilds the optimizer state, if one was saved.
    pub fn to_adam(&self) -> Result<Option<AdamState<f32>>> {
        let Some(opt) = &self.optimizer else {
            return Ok(None);
        };
        let find = |name: String| {
            opt.entries
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))
        };
        let names: Vec<&str> = crate::model::PARAM_NAMES.to_vec();
        Ok(Some(AdamState {
            step: opt.step,
            m: names.iter().map(|n| find(format!("m.{n}"))).collect::<Result<_>>()?,
            v: names.iter().map(|n| find(format!("v.{n}"))).collect::<Result<_>>()?,
            beta1: opt.beta1,
            beta2: opt.beta2,
            lr: opt.lr,
            eps: opt.eps,
        }))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        write_entries(&mut out, &self.entries)?;
        match &self.optimizer {
            None => out.write_all(&[0])?,
            Some(opt) => {
                out.write_all(&[1])?;
                out.write_all(&opt.step.to_le_bytes())?;
                for v in [opt.beta1, opt.beta2, opt.lr, opt.eps] {
                    out.write_all(&v.to_le_bytes())?;
                }
                write_entries(&mut out, &opt.entries)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let entries = read_entries(&mut input)?;
        let optimizer = match read_u8(&mut input)? {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(read_array(&mut input)?);
                let mut f = [0.0; 4];
                for v in &mut f {
                    *v = f64::from_le_bytes(read_array(&mut input)?);
                }
                Some(OptimizerSection {
                    step,
                    beta1: f[0],
                    beta2: f[1],
                    lr: f[2],
                    eps: f[3],
                    entries: read_entries(&mut input)?,
                })
            }
            flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
        };
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { entries, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_u8<R: Read>(input: &mut R) -> Result<u8> {
    Ok(read_array::<1, _>(input)?[0])
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn write_entries<W: Write>(out: &mut W, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[DTYPE_F32])?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_entries<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = read_u32(input)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = read_u8(input)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype tag {dtype}")));
        }
        let ndim = read_u32(input)? as usize;
        let shape = (0..ndim).map(|_| read_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * numel];
        input.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SsgConfig;

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::read_from(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 2"));
        assert!(Checkpoint::read_from(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn model_and_optimizer_survive() {
        let net = SsgNet::<f32>::new(SsgConfig::default(), 3).unwrap();
        let mut adam = AdamState::new(1e-4);
        adam.step = 7;
        adam.m = net.named_params().iter().map(|(_, t)| Tensor::full(t.shape(), 0.5)).collect();
        adam.v = adam.m.clone();
        let ck = Checkpoint::from_model(&net, Some(&adam));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let net2 = back.to_model().unwrap();
        for ((_, a), (_, b)) in net.named_params().iter().zip(net2.named_params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.to_adam().unwrap().unwrap().step, 7);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn truncation_is_reported() {
        let net = SsgNet::<f32>::new(SsgConfig::default(), 3).unwrap();
        let mut bytes = Vec::new();
        Checkpoint::from_model(&net, None).write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() / 2);
        let err = Checkpoint::read_from(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
