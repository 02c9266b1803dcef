//! Parameter checkpoint format.
//!
//! A checkpoint is a text manifest plus a binary payload. The payload starts
//! with the 8-byte magic `TPGCKPT\0` and a little-endian `u32` format
//! version, followed by every tensor as little-endian `f64` values. The
//! manifest's first line repeats the magic and version; then one
//! `step<TAB>n` line; then one `path<TAB>shape<TAB>offset` line per tensor,
//! where `shape` is comma separated and `offset` counts `f64` values from the
//! end of the payload header. Adam moments are stored under
//! `adam.m/<path>` and `adam.v/<path>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TPGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

pub fn write_checkpoint(store: &ParamStore, manifest: &Path, payload: &Path) -> Result<()> {
    let mut bin = BufWriter::new(File::create(payload)?);
    let mut text = BufWriter::new(File::create(manifest)?);
    bin.write_all(MAGIC)?;
    bin.write_all(&FORMAT_VERSION.to_le_bytes())?;
    writeln!(text, "TPGCKPT\t{FORMAT_VERSION}")?;
    writeln!(text, "step\t{}", store.step())?;
    let mut offset = 0usize;
    for (_, p) in store.iter() {
        for (path, t) in [
            (p.name.clone(), &p.value),
            (format!("adam.m/{}", p.name), &p.first_moment),
            (format!("adam.v/{}", p.name), &p.second_moment),
        ] {
            let shape: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
            writeln!(text, "{path}\t{}\t{offset}", shape.join(","))?;
            for v in t.data() {
                bin.write_all(&v.to_le_bytes())?;
            }
            offset += t.len();
        }
    }
    bin.flush()?;
    text.flush()?;
    Ok(())
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Overwrites the values, moments and step counter of `store` from a
/// checkpoint. Every parameter in `store` must be present with a matching
/// shape.
pub fn load_checkpoint(store: &mut ParamStore, manifest: &Path, payload: &Path) -> Result<()> {
    let reader = BufReader::new(
        File::open(manifest).map_err(|e| corrupt(format!("{}: {e}", manifest.display())))?,
    );
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != format!("TPGCKPT\t{FORMAT_VERSION}") {
        return Err(corrupt(format!("unsupported manifest header {header:?}")));
    }
    let step_line = lines.next().transpose()?.unwrap_or_default();
    let step: u64 = step_line
        .strip_prefix("step\t")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("missing step line"))?;
    let mut entries = HashMap::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, shape, offset] = fields[..] else {
            return Err(corrupt(format!("malformed manifest line {line:?}")));
        };
        let shape = shape
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| corrupt(format!("bad shape in {line:?}")))?;
        let offset = offset
            .parse()
            .map_err(|_| corrupt(format!("bad offset in {line:?}")))?;
        entries.insert(path.to_owned(), Entry { shape, offset });
    }

    let mut bytes = Vec::new();
    File::open(payload)
        .map_err(|e| corrupt(format!("{}: {e}", payload.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("payload magic mismatch"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported payload version {version}")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() % 8 != 0 {
        return Err(corrupt("payload length is not a whole number of f64 values"));
    }
    let read = |path: &str, expected: &[usize]| -> Result<Tensor> {
        let e = entries
            .get(path)
            .ok_or_else(|| corrupt(format!("missing tensor {path}")))?;
        if e.shape != expected {
            return Err(corrupt(format!(
                "tensor {path} has shape {:?}, expected {expected:?}",
                e.shape
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > body.len() {
            return Err(corrupt(format!("tensor {path} extends past payload end")));
        }
        let data = body[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(e.shape.clone(), data)
    };

    let mut loaded = Vec::new();
    for (id, p) in store.iter() {
        let shape = p.value.shape().to_vec();
        loaded.push((
            id,
            read(&p.name, &shape)?,
            read(&format!("adam.m/{}", p.name), &shape)?,
            read(&format!("adam.v/{}", p.name), &shape)?,
        ));
    }
    if entries.len() != 3 * store.len() {
        return Err(corrupt(format!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            3 * store.len()
        )));
    }
    for (id, value, m, v) in loaded {
        let p = store.param_mut(id);
        p.value = value;
        p.first_moment = m;
        p.second_moment = v;
        p.grad.fill(0.0);
    }
    store.set_step(step);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.125, 1e-300, -0.0]).unwrap())
            .unwrap();
        s.add("b", Tensor::row(vec![7.0])).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p) = (dir.path().join("manifest.txt"), dir.path().join("params.bin"));
        let mut src = sample_store();
        let id = src.id("b").unwrap();
        src.param_mut(id).first_moment.data_mut()[0] = 0.5;
        src.set_step(17);
        write_checkpoint(&src, &m, &p).unwrap();

        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 12 + 8 * 3 * 7);
        let manifest = std::fs::read_to_string(&m).unwrap();
        assert!(manifest.starts_with("TPGCKPT\t1\nstep\t17\na.w\t2,3\t0\n"));

        let mut dst = sample_store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.value_mut(id).fill(0.0);
        }
        load_checkpoint(&mut dst, &m, &p).unwrap();
        assert_eq!(dst, src);
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p) = (dir.path().join("manifest.txt"), dir.path().join("params.bin"));
        write_checkpoint(&sample_store(), &m, &p).unwrap();

        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[3, 2])).unwrap();
        other.add("b", Tensor::zeros(&[1, 1])).unwrap();
        assert!(matches!(
            load_checkpoint(&mut other, &m, &p),
            Err(Error::Checkpoint(_))
        ));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint(&mut sample_store(), &m, &p).is_err());
        assert!(load_checkpoint(&mut sample_store(), &m, &dir.path().join("missing")).is_err());
    }
}
