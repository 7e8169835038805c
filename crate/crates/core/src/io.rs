//! On-disk matrix formats.
//!
//! `MVF1` binary layout: the four magic bytes `MVF1`, rows as u32 LE, cols as
//! u32 LE, then rows×cols f64 LE values in row-major order. The part after
//! the magic is the "payload", which checkpoints reuse.
//!
//! CSV: plain numbers, no header, one row per line.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MVF_MAGIC: &[u8; 4] = b"MVF1";

pub fn write_payload<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Format("too many cols".into()))?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 8);
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_payload<R: Read>(r: &mut R) -> Result<Matrix> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("expected {rows}x{cols} values: {e}")))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_mvf<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(MVF_MAGIC)?;
    write_payload(w, m)
}

pub fn read_mvf<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing magic: {e}")))?;
    if &magic != MVF_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected MVF1")));
    }
    read_payload(r)
}

pub fn save_mvf(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_mvf(&mut f, m)?;
    f.flush()?;
    Ok(())
}

pub fn load_mvf(path: &Path) -> Result<Matrix> {
    let f = fs::File::open(path).map_err(|e| Error::Load {
        path: path.into(),
        msg: e.to_string(),
    })?;
    read_mvf(&mut BufReader::new(f)).map_err(|e| Error::Load {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn load_csv(path: &Path) -> Result<Matrix> {
    let f = fs::File::open(path).map_err(|e| Error::Load {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Row {
                path: path.into(),
                row: i,
                msg: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    path: path.into(),
                    row: i,
                    msg: format!("non-finite value {v}"),
                });
            }
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Row {
                    path: path.into(),
                    row: i,
                    msg: format!("{width} fields, expected {c}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

pub fn write_csv<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn save_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_csv(&mut f, m)?;
    f.flush()?;
    Ok(())
}
