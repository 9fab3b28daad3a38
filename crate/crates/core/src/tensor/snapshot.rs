//! Little-endian tensor snapshots: `b"MSBT"`, four `u32` dims `(N, C, H, W)`,
//! then `N*C*H*W` IEEE-754 `f32` values with `w` fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureMap, Shape};
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 4] = b"MSBT";

pub fn write_snapshot<T: Scalar, W: Write>(out: &mut W, map: &FeatureMap<T>) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for d in map.shape().dims() {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for v in map.as_slice() {
        out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one snapshot. `Ok(None)` signals a clean end of stream before the magic.
pub fn read_snapshot<T: Scalar, R: Read>(input: &mut R) -> Result<Option<FeatureMap<T>>> {
    let mut magic = [0u8; 4];
    match read_full(input, &mut magic)? {
        0 => return Ok(None),
        4 => {}
        _ => return Err(Error::Parse("truncated snapshot header".into())),
    }
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad snapshot magic {magic:?}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        if read_full(input, &mut b)? != 4 {
            return Err(Error::Parse("truncated snapshot dims".into()));
        }
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut bytes = vec![0u8; shape.len() * 4];
    if read_full(input, &mut bytes)? != bytes.len() {
        return Err(Error::Parse(format!("truncated snapshot body for {shape}")));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    FeatureMap::new(shape, data).map(Some)
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<stream>", e)),
        }
    }
    Ok(filled)
}

pub fn save_snapshot<T: Scalar>(path: impl AsRef<Path>, map: &FeatureMap<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_snapshot(&mut w, map)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_snapshot<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    match read_snapshot(&mut r) {
        Ok(Some(m)) => Ok(m),
        Ok(None) => Err(Error::corrupt(path, "empty snapshot file")),
        Err(Error::Parse(msg)) => Err(Error::corrupt(path, msg)),
        Err(e) => Err(e),
    }
}
