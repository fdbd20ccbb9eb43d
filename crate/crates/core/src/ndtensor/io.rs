//! Little-endian tensor dump: `u32 rank`, `u64 dims[rank]`, `f64 data[..]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub fn write_tensor<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut b8 = [0u8; 8];
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(T::lit(f64::from_le_bytes(b8)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(BufReader::new(File::open(path)?))
}
