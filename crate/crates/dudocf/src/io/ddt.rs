//! DDT1 tensor file format.
//!
//! Layout: magic bytes `DDT1`, u32 rank, rank x u32 extents, then the payload
//! as little-endian f32 in row-major order. Values are rounded to f32 at save
//! time; anything produced for disk is rounded the same way in memory first,
//! so save/load round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DDT1";

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| {
        Error::Integrity(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Integrity(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Integrity(format!("{}: bad magic bytes", path.display())));
    }

    let rank = read_u32(&mut r, path)? as usize;
    if rank > 8 {
        return Err(Error::Integrity(format!("{}: implausible rank {rank}", path.display())));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r, path)? as usize);
    }
    let numel: usize = shape.iter().product();

    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Integrity(format!("{}: truncated payload", path.display())))?;
    let mut data = Vec::with_capacity(numel);
    for c in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    }
    Tensor::from_vec(shape, data)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Integrity(format!("{}: truncated header", path.display())))?;
    Ok(u32::from_le_bytes(b))
}

/// Round every value to f32 precision. Applied before saving whenever the
/// in-memory tensor must stay bit-identical to its file.
pub fn quantize_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ddt");
        let mut t = Tensor::from_vec(
            vec![2, 3],
            vec![0.0, 1.5, -2.25, 1.0 / 3.0, f64::MIN_POSITIVE, 1e30],
        )
        .unwrap();
        quantize_f32(&mut t);
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ddt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match load_tensor(&path) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }
}
