//! Named-tensor checkpoint files.
//!
//! Layout: magic `UAMPCKPT`, u32 version, u32 metadata length + UTF-8
//! metadata (a key=value text block, may be empty), u32 tensor count, then
//! per tensor: u16 name length + name bytes, u8 rank, u32 dims,
//! little-endian f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UAMPCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    tensors: &[(String, &Tensor)],
    metadata: &str,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = metadata.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, Tensor)>, String)> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |detail: &str| Error::Format { path: path.display().to_string(), detail: detail.to_string() };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {}", version)));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((tensors, metadata))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
        let b = Tensor::scalar(42.0);
        save_checkpoint(
            &path,
            &[("layer.w".to_string(), &a), ("bias".to_string(), &b)],
            "hidden = 64\nembed = 32\n",
        )
        .unwrap();
        let (tensors, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, "hidden = 64\nembed = 32\n");
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "layer.w");
        assert_eq!(tensors[0].1, a);
        assert_eq!(tensors[1].1, b);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMAGIC00000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
