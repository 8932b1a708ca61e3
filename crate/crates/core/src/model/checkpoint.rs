//! Checkpoint files.
//!
//! ```text
//! b"RILCKPT\0" | u32 version | u64 header length | JSON header | raw arrays
//! ```
//!
//! Arrays follow the header in table order (parameters, then buffers) as
//! little-endian values of the header's dtype, so a round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackboneSpec, Discriminator, DiscriminatorSpec, LaneNet};
use crate::nn::ParamSet;
use crate::{Error, Result, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"RILCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"lanenet"` or `"discriminator"`.
    pub kind: String,
    pub dtype: String,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorSpec>,
    /// Free-form metadata (run config, epoch, metrics).
    #[serde(default)]
    pub meta: Value,
    pub params: Vec<ArrayEntry>,
    pub buffers: Vec<ArrayEntry>,
}

fn write_file<T: Scalar>(path: &Path, header: &CheckpointHeader, params: &ParamSet<T>) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(json.len() + 20 + params.count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.params().chain(params.buffers()) {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn entries<'a, T: Scalar + 'a>(it: impl Iterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<ArrayEntry> {
    it.map(|(n, t)| ArrayEntry {
        name: n.to_string(),
        shape: t.shape(),
    })
    .collect()
}

fn split_file(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    Ok((header, &bytes[end..]))
}

fn read_tables<T: Scalar>(header: &CheckpointHeader, mut body: &[u8]) -> Result<ParamSet<T>> {
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut set = ParamSet::new();
    let mut take = |e: &ArrayEntry| -> Result<Tensor<T>> {
        let n: usize = e.shape.iter().product();
        let bytes = n * T::BYTES;
        if body.len() < bytes {
            return Err(Error::Checkpoint(format!("truncated data for `{}`", e.name)));
        }
        let data = body[..bytes].chunks_exact(T::BYTES).map(T::read_le).collect();
        body = &body[bytes..];
        Ok(Tensor::from_vec(e.shape, data))
    };
    for e in &header.params {
        let t = take(e)?;
        set.push(e.name.clone(), t);
    }
    for e in &header.buffers {
        let t = take(e)?;
        set.push_buffer(e.name.clone(), t);
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
    }
    Ok(set)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = read(path)?;
    Ok(split_file(&bytes)?.0)
}

fn check_spec(found: &BackboneSpec, expected: &BackboneSpec) -> Result<()> {
    let mismatch = |field, f: String, e: String| Err(Error::SpecMismatch { field, found: f, expected: e });
    if found.stages != expected.stages {
        return mismatch("stages", found.stages.to_string(), expected.stages.to_string());
    }
    if found.base_channels != expected.base_channels {
        return mismatch(
            "base_channels",
            found.base_channels.to_string(),
            expected.base_channels.to_string(),
        );
    }
    if found.input_dims != expected.input_dims {
        return mismatch(
            "input_dims",
            format!("{:?}", found.input_dims),
            format!("{:?}", expected.input_dims),
        );
    }
    Ok(())
}

pub fn save_lanenet<T: Scalar>(path: &Path, net: &LaneNet<T>, meta: Value) -> Result<()> {
    let p = net.params();
    let header = CheckpointHeader {
        kind: "lanenet".into(),
        dtype: T::DTYPE.into(),
        backbone: net.spec().clone(),
        discriminator: None,
        meta,
        params: entries(p.params()),
        buffers: entries(p.buffers()),
    };
    write_file(path, &header, p)
}

/// Load a segmentation network. With `expected` set, a differing backbone
/// spec is reported field by field.
pub fn load_lanenet<T: Scalar>(path: &Path, expected: Option<&BackboneSpec>) -> Result<(LaneNet<T>, Value)> {
    let bytes = read(path)?;
    let (header, body) = split_file(&bytes)?;
    if header.kind != "lanenet" {
        return Err(Error::Checkpoint(format!("expected a lanenet checkpoint, found `{}`", header.kind)));
    }
    if let Some(e) = expected {
        check_spec(&header.backbone, e)?;
    }
    let set = read_tables::<T>(&header, body)?;
    Ok((LaneNet::from_params(header.backbone, set)?, header.meta))
}

pub fn save_discriminator<T: Scalar>(
    path: &Path,
    d: &Discriminator<T>,
    backbone: &BackboneSpec,
    meta: Value,
) -> Result<()> {
    let p = d.params();
    let header = CheckpointHeader {
        kind: "discriminator".into(),
        dtype: T::DTYPE.into(),
        backbone: backbone.clone(),
        discriminator: Some(d.spec().clone()),
        meta,
        params: entries(p.params()),
        buffers: entries(p.buffers()),
    };
    write_file(path, &header, p)
}

pub fn load_discriminator<T: Scalar>(path: &Path) -> Result<(Discriminator<T>, BackboneSpec, Value)> {
    let bytes = read(path)?;
    let (header, body) = split_file(&bytes)?;
    let Some(spec) = header.discriminator.clone().filter(|_| header.kind == "discriminator") else {
        return Err(Error::Checkpoint(format!("expected a discriminator checkpoint, found `{}`", header.kind)));
    };
    let set = read_tables::<T>(&header, body)?;
    let d = Discriminator::from_params(spec, &header.backbone, set)?;
    Ok((d, header.backbone, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> BackboneSpec {
        BackboneSpec {
            stages: 3,
            base_channels: 3,
            input_dims: (16, 24),
        }
    }

    #[test]
    fn lanenet_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net: LaneNet<f32> = LaneNet::new(spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // awkward values: subnormals, negative zero
        net.params_mut().get_mut(0).data_mut()[0] = f32::from_bits(1);
        net.params_mut().get_mut(0).data_mut()[1] = -0.0;
        let meta = serde_json::json!({"epoch": 3});
        save_lanenet(&path, &net, meta.clone()).unwrap();
        let (back, m) = load_lanenet::<f32>(&path, Some(&spec())).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.checksum(), net.checksum());
        for ((_, a), (_, b)) in back.params().params().zip(net.params().params()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn mismatched_spec_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net: LaneNet<f64> = LaneNet::new(spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        save_lanenet(&path, &net, Value::Null).unwrap();
        let other = BackboneSpec {
            base_channels: 4,
            ..spec()
        };
        match load_lanenet::<f64>(&path, Some(&other)) {
            Err(Error::SpecMismatch { field, .. }) => assert_eq!(field, "base_channels"),
            other => panic!("expected spec mismatch, got {other:?}"),
        }
        assert!(load_lanenet::<f32>(&path, None).is_err());
    }

    #[test]
    fn corrupt_and_wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net: LaneNet<f32> = LaneNet::new(spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        save_lanenet(&path, &net, Value::Null).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_lanenet::<f32>(&path, None), Err(Error::Checkpoint(m)) if m.contains("version")));
        bytes[8] = 1;
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(load_lanenet::<f32>(&path, None).is_err());
        fs::write(&path, b"hello").unwrap();
        assert!(load_lanenet::<f32>(&path, None).is_err());
    }

    #[test]
    fn discriminator_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Discriminator<f32> = Discriminator::new(DiscriminatorSpec::default(), &spec(), &mut rng).unwrap();
        save_discriminator(&path, &d, &spec(), Value::Null).unwrap();
        let (back, bb, _) = load_discriminator::<f32>(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(bb, spec());
        assert!(load_lanenet::<f32>(&path, None).is_err());
    }
}
