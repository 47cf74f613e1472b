//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SKGCKPT\0"
//! version    u32
//! header     u32 length + JSON {kind, architecture, schedule, metadata}
//! count      u32
//! per parameter, in name order:
//!   name     u32 length + UTF-8
//!   rank     u32
//!   dims     rank x u64
//!   values   f64 x prod(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpsilonNetwork;
use crate::nn::{Architecture, Network};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::sketch::NoisyClassifier;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SKGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Epsilon,
    Classifier,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    architecture: Architecture,
    schedule: ScheduleSpec,
    metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub network: Network,
    pub schedule: ScheduleSpec,
    /// Free-form provenance such as the config hash or iteration count.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn epsilon(model: &EpsilonNetwork, sched: &NoiseSchedule) -> Self {
        Self {
            kind: ModelKind::Epsilon,
            network: model.network().clone(),
            schedule: sched.spec(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn classifier(model: &NoisyClassifier, sched: &NoiseSchedule) -> Self {
        Self {
            kind: ModelKind::Classifier,
            network: model.network().clone(),
            schedule: sched.spec(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_spec(self.schedule)
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn into_epsilon(self) -> Result<EpsilonNetwork> {
        self.expect(ModelKind::Epsilon)?;
        EpsilonNetwork::from_network(self.network)
    }

    pub fn into_classifier(self) -> Result<NoisyClassifier> {
        self.expect(ModelKind::Classifier)?;
        NoisyClassifier::from_network(self.network)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind,
            architecture: self.network.architecture().clone(),
            schedule: self.schedule,
            metadata: self.metadata.clone(),
        })
        .expect("header is plain data");
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.network.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        let params = self.network.params();
        put_u32(&mut out, params.len());
        for (name, t) in params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} overruns the file")))?;
            let data = r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        NoiseSchedule::<f64>::from_spec(header.schedule)?;
        Ok(Self {
            kind: header.kind,
            network: Network::from_parts(header.architecture, params)?,
            schedule: header.schedule,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        // write then rename so readers never see a partial file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub const TENSOR_MAGIC: &[u8; 8] = b"SKGTENS\0";

/// Single-tensor dump: magic, version, a UTF-8 note, rank, `u64` dims and
/// `f64` values, all little-endian.
pub fn tensor_to_bytes(t: &Tensor, note: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + note.len() + 8 * (t.shape().len() + t.len()));
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, note.len());
    out.extend_from_slice(note.as_bytes());
    put_u32(&mut out, t.shape().len());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`tensor_to_bytes`], returning the tensor and its note.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<(Tensor, String)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != TENSOR_MAGIC {
        return Err(Error::Checkpoint("not a tensor dump (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported tensor dump version {version}")));
    }
    let len = r.u32()? as usize;
    let note = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Checkpoint("tensor note is not UTF-8".into()))?;
    let rank = r.u32()? as usize;
    let shape = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if n.checked_mul(8) != Some(r.remaining()) {
        return Err(Error::Checkpoint("tensor dump size does not match its shape".into()));
    }
    let data = r
        .take(8 * n)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((Tensor::new(shape, data)?, note))
}

pub fn write_tensor(path: &Path, t: &Tensor, note: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, tensor_to_bytes(t, note))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, String)> {
    tensor_from_bytes(&fs::read(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let sched = NoiseSchedule::standard();
        let model = EpsilonNetwork::init(true, 7);
        let ck = Checkpoint::epsilon(&model, &sched).with_meta("iteration", 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
        assert_eq!(back.into_epsilon().unwrap(), model);
    }

    #[test]
    fn classifier_round_trip_and_kind_check() {
        let sched = NoiseSchedule::standard();
        let clf = NoisyClassifier::init(1);
        let bytes = Checkpoint::classifier(&clf, &sched).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.clone().into_epsilon().is_err());
        assert_eq!(back.into_classifier().unwrap().fingerprint(), clf.fingerprint());
    }

    #[test]
    fn tensor_dump_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, f64::MIN_POSITIVE, 0.0, 1e300]).unwrap();
        let bytes = tensor_to_bytes(&t, "config abc");
        let (back, note) = tensor_from_bytes(&bytes).unwrap();
        assert_eq!((back.clone(), note.as_str()), (t, "config abc"));
        assert_eq!(tensor_to_bytes(&back, &note), bytes);
        assert!(tensor_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn corrupt_input_rejected() {
        let sched = NoiseSchedule::standard();
        let bytes = Checkpoint::epsilon(&EpsilonNetwork::init(false, 1), &sched).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
