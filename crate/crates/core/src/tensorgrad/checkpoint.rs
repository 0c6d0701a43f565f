//! Little-endian tensor container:
//! `"OGRAD1"`, `u32` tensor count, then per tensor `u32` name length, UTF-8
//! name, `u32` rank, `u64` dims, `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"OGRAD1";

pub fn write_checkpoint<S: Scalar, W: Write>(mut w: W, params: &ParamSet<S>) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_checkpoint<S: Scalar>(path: &Path, params: &ParamSet<S>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), params).map_err(|e| Error::io(path, e))
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Parses a checkpoint stream; `origin` labels errors.
pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R, origin: &Path) -> Result<ParamSet<S>> {
    let bad = |reason: &str| Error::format(origin, reason);
    let io = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(origin, "truncated checkpoint")
        } else {
            Error::io(origin, e)
        }
    };
    let magic: [u8; 6] = read_exact(&mut r).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let count = u32::from_le_bytes(read_exact(&mut r).map_err(io)?);
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::from_f64_lossy(f64::from_le_bytes(read_exact(&mut r).map_err(io)?)));
        }
        let t = Tensor::new(shape, data).map_err(|e| bad(&format!("tensor `{name}`: {e}")))?;
        params.insert(name, t);
    }
    Ok(params)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParamSet<S>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("ab", Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ps).unwrap();
        assert_eq!(&buf[..6], b"OGRAD1");
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..14], &2u32.to_le_bytes());
        assert_eq!(&buf[14..16], b"ab");
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..28], &1u64.to_le_bytes());
        assert_eq!(&buf[28..36], &2u64.to_le_bytes());
        assert_eq!(&buf[36..44], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 52);
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("mem");
        assert!(matches!(read_checkpoint::<f64, _>(&b"NOPE00"[..], p), Err(Error::Format { .. })));
        assert!(matches!(read_checkpoint::<f64, _>(&b"OGRAD1\x01\x00"[..], p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..4), seed in 0u64..1000) {
            let mut ps = ParamSet::<f64>::new();
            for (i, s) in shapes.iter().enumerate() {
                let n: usize = s.iter().product();
                let data = (0..n).map(|j| ((seed + j as u64) as f64 * 0.731).sin() * 1e3).collect();
                ps.insert(format!("t{i}.w"), Tensor::new(s.clone(), data).unwrap());
            }
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ps).unwrap();
            let back: ParamSet<f64> = read_checkpoint(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, ps);
        }
    }
}
