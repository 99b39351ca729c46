//! Checkpoint container for network parameters.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic   "OCNN" (4 bytes)
//! version u32 (currently 1)
//! spec    base_width u32, reduced u8, input_extent u32
//! count   u32 number of named tensors
//! entry*  name_len u32, name bytes (UTF-8),
//!         rank u32, extents u32 * rank,
//!         role u8 (0 trainable, 1 running stat),
//!         data f32 * product(extents), little-endian
//! bn      u64 batches_tracked counter
//! ```
//!
//! Loading rebuilds the parameter set for the stored spec and fails if any
//! name or shape disagrees, so a round trip is lossless by construction.

use crate::network::{build, NetworkParams, NetworkSpec, TensorRole};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"OCNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on checkpoint: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes: expected \"OCNN\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint does not match spec: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let spec = params.spec();
    write_u32(&mut w, spec.base_width as u32)?;
    w.write_all(&[spec.reduced as u8])?;
    write_u32(&mut w, spec.input_extent as u32)?;

    let entries = params.named_tensors();
    write_u32(&mut w, entries.len() as u32)?;
    for (name, tensor, role) in &entries {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, tensor.rank() as u32)?;
        for &e in tensor.shape() {
            write_u32(&mut w, e as u32)?;
        }
        w.write_all(&[match role {
            TensorRole::Trainable => 0u8,
            TensorRole::RunningStat => 1u8,
        }])?;
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&params.bn_updates().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkParams, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let base_width = read_u32(&mut r)? as usize;
    let mut reduced = [0u8; 1];
    r.read_exact(&mut reduced)?;
    let input_extent = read_u32(&mut r)? as usize;
    let spec = NetworkSpec::new(base_width, reduced[0] != 0).with_extent(input_extent);

    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Mismatch("non-UTF-8 tensor name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let mut role = [0u8; 1];
        r.read_exact(&mut role)?;
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        entries.push((name, tensor));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let batches_tracked = u64::from_le_bytes(buf8);

    let mut params = build(&spec, 0)?;
    params.load_named_tensors(&entries, batches_tracked).map_err(CheckpointError::Mismatch)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, forward_batch, NetworkSpec};
    use crate::ops::Mode;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_is_lossless_and_eval_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::new(2, true).with_extent(16);
        let mut params = build(&spec, 11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vols = Tensor::from_vec(
            &[4, 1, 16, 16, 16],
            (0..4 * 4096).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        forward(&mut params, &vols, Mode::Train).unwrap();
        let before = forward_batch(&params, &vols).unwrap();

        let path = dir.path().join("model.ckpt");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        for ((n1, t1, _), (n2, t2, _)) in params
            .named_tensors()
            .iter()
            .zip(loaded.named_tensors().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1} not restored exactly");
        }
        let after = forward_batch(&loaded, &vols).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn eval_after_load_without_bn_updates_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::new(2, true).with_extent(16);
        let params = build(&spec, 12).unwrap();
        let path = dir.path().join("fresh.ckpt");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        let vols = Tensor::zeros(&[2, 1, 16, 16, 16]);
        assert!(forward_batch(&loaded, &vols).is_err());
    }
}
