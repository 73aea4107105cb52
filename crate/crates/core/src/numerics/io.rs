//! Flat binary tensor dumps.
//!
//! Layout (little-endian): 8-byte magic `TNSRF64\0`, `u32` rank, `rank`
//! `u32` extents, then the row-major `f64` payload. Several dumps may be
//! concatenated back to back in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"TNSRF64\0";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one dump; `Ok(None)` at a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R, origin: &Path) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 8];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if magic != MAGIC {
        return Err(Error::format(origin, "bad tensor magic"));
    }
    let truncated = |_| Error::format(origin, "truncated tensor dump");
    let rank = read_u32(r).map_err(truncated)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(origin, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(truncated)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
        .map(Some)
        .map_err(|e| Error::format(origin, e.to_string()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    save_tensors(path, [t])
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    read_tensor(&mut r, path)?.ok_or_else(|| Error::format(path, "empty file"))
}

pub fn save_tensors<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = &'a Tensor>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dump_round_trips(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn([rows, cols], 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(buf.len(), 8 + 4 + 8 + rows * cols * 8);
            let back = read_tensor(&mut buf.as_slice(), Path::new("mem")).unwrap().unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..8], b"TNSRF64\0");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..28], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        let bad = b"NOTATENSOR..".to_vec();
        assert!(read_tensor(&mut bad.as_slice(), Path::new("x")).is_err());
        let t = Tensor::zeros([2, 2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice(), Path::new("x")).is_err());
    }
}
