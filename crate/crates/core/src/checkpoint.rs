//! Named-tensor checkpoint files: a sequence of records, each a `u32` name
//! length, the UTF-8 name, then one tensor snapshot.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::params::Parameters;
use crate::tensor::snapshot::{read_snapshot, write_snapshot};
use crate::tensor::FeatureMap;
use crate::{Error, Result, Scalar};

pub fn write_checkpoint<T: Scalar, W: Write>(
    out: &mut W,
    tensors: &[(String, FeatureMap<T>)],
) -> std::io::Result<()> {
    for (name, map) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| std::io::Error::other("name too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        write_snapshot(out, map)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: &mut R) -> Result<Vec<(String, FeatureMap<T>)>> {
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        let got = read_up_to(input, &mut len)?;
        if got == 0 {
            return Ok(out);
        }
        if got != 4 {
            return Err(Error::Parse("truncated checkpoint record".into()));
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        if read_up_to(input, &mut name)? != name.len() {
            return Err(Error::Parse("truncated tensor name".into()));
        }
        let name = String::from_utf8(name).map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
        let map = read_snapshot(input)?
            .ok_or_else(|| Error::Parse(format!("tensor `{name}` has no data")))?;
        out.push((name, map));
    }
}

fn read_up_to<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize> {
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

pub fn save_parameters<T: Scalar, P: Parameters<T>>(path: impl AsRef<Path>, params: &P) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, &params.named_tensors(""))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_parameters<T: Scalar, P: Parameters<T>>(path: impl AsRef<Path>, params: &mut P) -> Result<()> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = match read_checkpoint(&mut BufReader::new(file)) {
        Ok(t) => t,
        Err(Error::Parse(msg)) => return Err(Error::corrupt(path, msg)),
        Err(e) => return Err(e),
    };
    params.load_named("", &tensors).map_err(|e| match e {
        Error::Shape(msg) => Error::Shape(format!(
            "checkpoint {} does not fit this model: {msg}",
            path.display()
        )),
        other => other,
    })
}
