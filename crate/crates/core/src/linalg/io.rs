//! Binary matrix dump: magic `EFMM`, u32 rows, u32 cols, then the row-major
//! payload as little-endian f64. Dumps may be concatenated in a single file.

use super::Matrix;
use crate::error::{CoreError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MATRIX_MAGIC: &[u8; 4] = b"EFMM";

pub fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(CoreError::Parse(format!(
            "bad matrix magic {:?}, expected {:?}",
            magic, MATRIX_MAGIC
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut b8 = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    if !path.exists() {
        return Err(CoreError::MissingArtifact(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    read_matrix(&mut r)
}
