//! `.bt` binary tensor files.
//!
//! Layout: `b"BTEN"`, version `0x01`, dtype `0x01` (f64), ndim byte, `ndim`
//! little-endian u64 dims, then the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BTEN";
const VERSION: u8 = 0x01;
const DTYPE_F64: u8 = 0x01;

pub fn write_bt_to(t: &Tensor, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F64, t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn write_bt(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_bt_to(t, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Decodes a tensor; `origin` names the source in error messages.
pub fn read_bt_from(mut r: impl Read, origin: &Path) -> Result<Tensor> {
    let fmt = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let mut header = [0u8; 7];
    r.read_exact(&mut header)
        .map_err(|e| fmt(format!("truncated header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(fmt(format!("bad magic {:?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(fmt(format!("unsupported version {:#04x}", header[4])));
    }
    if header[5] != DTYPE_F64 {
        return Err(fmt(format!("unsupported dtype {:#04x}", header[5])));
    }
    let ndim = header[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut buf = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut buf)
            .map_err(|e| fmt(format!("truncated dims: {e}")))?;
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut buf)
            .map_err(|e| fmt(format!("truncated payload: {e}")))?;
        data.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf).map_err(|e| Error::io(origin, e))? != 0 {
        return Err(fmt("trailing bytes after payload".into()));
    }
    Tensor::new(shape, data).map_err(|e| fmt(e.to_string()))
}

pub fn read_bt(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bt_from(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut bytes = Vec::new();
        write_bt_to(&t, &mut bytes).unwrap();
        assert_eq!(&bytes[..7], b"BTEN\x01\x01\x02");
        assert_eq!(&bytes[7..15], &1u64.to_le_bytes());
        assert_eq!(&bytes[15..23], &2u64.to_le_bytes());
        assert_eq!(&bytes[23..31], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 7 + 16 + 16);
        let back = read_bt_from(bytes.as_slice(), Path::new("mem")).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn corrupt_magic_names_path() {
        let err = read_bt_from(&b"BTEX\x01\x01\x01"[..], Path::new("bad/file.bt")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("bad/file.bt"));
        let err = read_bt_from(&b"BTEN\x02\x01\x01"[..], Path::new("v.bt")).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
