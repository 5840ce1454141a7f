//! The `LYNX` binary tensor format.
//!
//! ```text
//! magic "LYNX" | version u16 | dtype u8 | rank u8 | dims u64 x rank | payload
//! ```
//!
//! All integers and floats are little-endian. Dense payloads are raw `f32`.
//! Packed payloads are `n u8, m u8`, the kept values, then the metadata bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LynxError, Result};
use crate::nm_format::{meta_row_bytes, NMPattern, PackedNM};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"LYNX";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_PACKED_NM: u8 = 1;

/// Anything the format can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Dense(DenseMatrix),
    Packed(PackedNM),
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::Dense(m) => m.shape(),
            Tensor::Packed(p) => (p.rows(), p.cols()),
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: u8, rows: usize, cols: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype, 2])?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_dense<W: Write>(w: &mut W, m: &DenseMatrix) -> Result<()> {
    write_header(w, DTYPE_F32, m.rows(), m.cols())?;
    write_f32s(w, m.data())
}

pub fn write_packed<W: Write>(w: &mut W, p: &PackedNM) -> Result<()> {
    write_header(w, DTYPE_PACKED_NM, p.rows(), p.cols())?;
    w.write_all(&[p.pattern().n() as u8, p.pattern().m() as u8])?;
    write_f32s(w, p.values())?;
    w.write_all(p.meta())?;
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    match t {
        Tensor::Dense(m) => write_dense(w, m),
        Tensor::Packed(p) => write_packed(w, p),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            LynxError::format(format!("truncated file while reading {what}"))
        }
        _ => LynxError::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = len
        .checked_mul(4)
        .ok_or_else(|| LynxError::format("payload size overflows"))?;
    let mut buf = vec![0u8; bytes];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(LynxError::format("bad magic bytes, not a LYNX tensor file"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(LynxError::format(format!(
            "unsupported format version {version}"
        )));
    }
    let (dtype, rank) = (head[6], head[7]);
    let (rows, cols) = match rank {
        1 => (1, read_u64(r, "dims")?),
        2 => (read_u64(r, "dims")?, read_u64(r, "dims")?),
        _ => return Err(LynxError::format(format!("unsupported rank {rank}"))),
    };
    let rows = usize::try_from(rows).map_err(|_| LynxError::format("row count too large"))?;
    let cols = usize::try_from(cols).map_err(|_| LynxError::format("column count too large"))?;
    if rows == 0 || cols == 0 {
        return Err(LynxError::format(format!("empty tensor {rows}x{cols}")));
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| LynxError::format("element count overflows"))?;
    let tensor = match dtype {
        DTYPE_F32 => {
            let data = read_f32s(r, count, "f32 payload")?;
            Tensor::Dense(DenseMatrix::new(rows, cols, data)?)
        }
        DTYPE_PACKED_NM => {
            let mut nm = [0u8; 2];
            read_exact(r, &mut nm, "pattern")?;
            let pattern =
                NMPattern::new(nm[0], nm[1]).map_err(|e| LynxError::format(e.to_string()))?;
            if cols % pattern.m() != 0 {
                return Err(LynxError::format(format!(
                    "packed width {cols} is not a multiple of m={}",
                    pattern.m()
                )));
            }
            let values = read_f32s(
                r,
                rows * (cols / pattern.m()) * pattern.n(),
                "packed values",
            )?;
            let mut meta = vec![0u8; rows * meta_row_bytes(cols, pattern)];
            read_exact(r, &mut meta, "packed metadata")?;
            Tensor::Packed(PackedNM::from_raw_parts(rows, cols, pattern, values, meta))
        }
        other => return Err(LynxError::format(format!("unknown dtype code {other}"))),
    };
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(LynxError::format("trailing bytes after payload"));
    }
    Ok(tensor)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn save_dense(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dense(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn save_packed(path: impl AsRef<Path>, p: &PackedNM) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_packed(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| {
        LynxError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    read_tensor(&mut BufReader::new(f))
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    match load(path.as_ref())? {
        Tensor::Dense(m) => Ok(m),
        Tensor::Packed(_) => Err(LynxError::format(format!(
            "{}: expected a dense f32 tensor, found packed",
            path.as_ref().display()
        ))),
    }
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<PackedNM> {
    match load(path.as_ref())? {
        Tensor::Packed(p) => Ok(p),
        Tensor::Dense(_) => Err(LynxError::format(format!(
            "{}: expected a packed tensor, found dense",
            path.as_ref().display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm_format::pack;

    fn roundtrip(t: &Tensor) -> Tensor {
        let mut buf = Vec::new();
        write_tensor(&mut buf, t).unwrap();
        read_tensor(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn dense_header_layout() {
        let m = DenseMatrix::from_rows(&[[1.0f32, -2.0]]).unwrap();
        let mut buf = Vec::new();
        write_dense(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"LYNX");
        assert_eq!(&buf[4..8], &[1, 0, 0, 2]);
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 32);
    }

    #[test]
    fn roundtrips_are_exact() {
        let m = DenseMatrix::from_fn(3, 8, |i, j| (i as f32 - j as f32) * 0.1 + f32::EPSILON);
        assert_eq!(roundtrip(&Tensor::Dense(m.clone())), Tensor::Dense(m));
        let masked = DenseMatrix::from_rows(&[[0., 5., 0., -7., 1., 2., 0., 0.]]).unwrap();
        let p = pack(&masked, NMPattern::TWO_FOUR).unwrap();
        assert_eq!(roundtrip(&Tensor::Packed(p.clone())), Tensor::Packed(p));
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        let m = DenseMatrix::zeros(2, 2);
        let mut buf = Vec::new();
        write_dense(&mut buf, &m).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_tensor(&mut bad.as_slice()),
            Err(LynxError::Format(_))
        ));

        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(
            read_tensor(&mut &truncated[..]),
            Err(LynxError::Format(_))
        ));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(
            read_tensor(&mut trailing.as_slice()),
            Err(LynxError::Format(_))
        ));

        let mut dtype = buf.clone();
        dtype[6] = 9;
        assert!(matches!(
            read_tensor(&mut dtype.as_slice()),
            Err(LynxError::Format(_))
        ));
    }

    #[test]
    fn rank_one_reads_as_row_vector() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&[DTYPE_F32, 1]);
        buf.extend_from_slice(&3u64.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let t = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t.shape(), (1, 3));
    }
}
