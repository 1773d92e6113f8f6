//! TTB1 binary format for tensor trains.
//!
//! Layout (little-endian):
//!   magic "TTB1"
//!   u32 D          number of dimensions
//!   u32 L          number of components (1 for a plain train)
//!   u32 block_pos  0-based block core index; equals D for a plain train
//!   per core, in dimension order:
//!     u32 dims: (R_{d-1}, n_d, R_d) for plain cores,
//!               (R_{d-1}, n_d, L, R_d) for the block core
//!     f64 entries in row-major order, leading rank index slowest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tt::{BlockTt, TtTensor};

const MAGIC: &[u8; 4] = b"TTB1";

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_tt<T: Scalar>(w: &mut impl Write, tt: &TtTensor<T>) -> Result<()> {
    let d = tt.ndims();
    w.write_all(MAGIC)?;
    write_u32(w, d as u32)?;
    write_u32(w, 1)?;
    write_u32(w, d as u32)?; // block position = D marks a plain train
    for core in tt.cores() {
        let (a, n, b) = core.dim();
        write_u32(w, a as u32)?;
        write_u32(w, n as u32)?;
        write_u32(w, b as u32)?;
        for &v in core.as_standard_layout().iter() {
            write_f64(w, v.to_f64_lossy())?;
        }
    }
    Ok(())
}

pub fn write_block_tt<T: Scalar>(w: &mut impl Write, b: &BlockTt<T>) -> Result<()> {
    let d = b.ndims();
    let pos = b.block_position();
    w.write_all(MAGIC)?;
    write_u32(w, d as u32)?;
    write_u32(w, b.num_components() as u32)?;
    write_u32(w, pos as u32)?;
    for dim in 0..d {
        if dim == pos {
            let core = b.block_core();
            let (a, n, l, r) = core.dim();
            write_u32(w, a as u32)?;
            write_u32(w, n as u32)?;
            write_u32(w, l as u32)?;
            write_u32(w, r as u32)?;
            for &v in core.as_standard_layout().iter() {
                write_f64(w, v.to_f64_lossy())?;
            }
        } else {
            let core = b.plain_core(dim);
            let (a, n, r) = core.dim();
            write_u32(w, a as u32)?;
            write_u32(w, n as u32)?;
            write_u32(w, r as u32)?;
            for &v in core.as_standard_layout().iter() {
                write_f64(w, v.to_f64_lossy())?;
            }
        }
    }
    Ok(())
}

/// Parsed TTB1 payload: either a plain train or a block train.
pub enum TtFile<T> {
    Plain(TtTensor<T>),
    Block(BlockTt<T>),
}

pub fn read_ttb<T: Scalar>(r: &mut impl Read) -> Result<TtFile<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::TtFile("bad magic, expected TTB1".into()));
    }
    let d = read_u32(r)? as usize;
    let l = read_u32(r)? as usize;
    let pos = read_u32(r)? as usize;
    if d == 0 || d > 16 {
        return Err(Error::TtFile(format!("implausible dimension count {d}")));
    }
    if l == 0 {
        return Err(Error::TtFile("component count must be at least 1".into()));
    }
    let plain_file = pos == d;
    if !plain_file && pos > d {
        return Err(Error::TtFile(format!("block position {pos} out of range for D = {d}")));
    }
    if plain_file && l != 1 {
        return Err(Error::TtFile("plain train must have exactly one component".into()));
    }
    let mut plain: Vec<Array3<T>> = Vec::new();
    let mut block: Option<Array4<T>> = None;
    for dim in 0..d {
        if !plain_file && dim == pos {
            let a = read_u32(r)? as usize;
            let n = read_u32(r)? as usize;
            let lc = read_u32(r)? as usize;
            let b = read_u32(r)? as usize;
            if lc != l {
                return Err(Error::TtFile(format!("block core claims {lc} components, header says {l}")));
            }
            let count = a
                .checked_mul(n)
                .and_then(|v| v.checked_mul(lc))
                .and_then(|v| v.checked_mul(b))
                .ok_or_else(|| Error::TtFile("core size overflow".into()))?;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(T::from_f64_lossy(read_f64(r)?));
            }
            block = Some(
                Array4::from_shape_vec((a, n, lc, b), data)
                    .map_err(|e| Error::TtFile(e.to_string()))?,
            );
        } else {
            let a = read_u32(r)? as usize;
            let n = read_u32(r)? as usize;
            let b = read_u32(r)? as usize;
            let count = a
                .checked_mul(n)
                .and_then(|v| v.checked_mul(b))
                .ok_or_else(|| Error::TtFile("core size overflow".into()))?;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(T::from_f64_lossy(read_f64(r)?));
            }
            plain.push(
                Array3::from_shape_vec((a, n, b), data).map_err(|e| Error::TtFile(e.to_string()))?,
            );
        }
    }
    if plain_file {
        Ok(TtFile::Plain(TtTensor::new(plain).map_err(|e| Error::TtFile(e.to_string()))?))
    } else {
        let block = block.ok_or_else(|| Error::TtFile("missing block core".into()))?;
        Ok(TtFile::Block(
            BlockTt::new(plain, block, pos).map_err(|e| Error::TtFile(e.to_string()))?,
        ))
    }
}

pub fn write_tt_file<T: Scalar>(path: &Path, tt: &TtTensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tt(&mut w, tt)
}

pub fn write_block_tt_file<T: Scalar>(path: &Path, b: &BlockTt<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_block_tt(&mut w, b)
}

pub fn read_ttb_file<T: Scalar>(path: &Path) -> Result<TtFile<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_ttb(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tt(dims: &[usize], ranks: &[usize], seed: u64) -> TtTensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let d = dims.len();
        let mut cores = Vec::new();
        for k in 0..d {
            let a = if k == 0 { 1 } else { ranks[k - 1] };
            let b = if k == d - 1 { 1 } else { ranks[k] };
            cores.push(Array3::from_shape_fn((a, dims[k], b), |_| rng.gen_range(-1.0..1.0)));
        }
        TtTensor::new(cores).unwrap()
    }

    #[test]
    fn tt_roundtrip_bit_exact() {
        let tt = random_tt(&[4, 3, 5], &[3, 2], 1);
        let mut buf = Vec::new();
        write_tt(&mut buf, &tt).unwrap();
        let parsed = read_ttb::<f64>(&mut buf.as_slice()).unwrap();
        match parsed {
            TtFile::Plain(t2) => {
                assert_eq!(tt.dims(), t2.dims());
                for (a, b) in tt.cores().iter().zip(t2.cores()) {
                    assert_eq!(a, b);
                }
            }
            TtFile::Block(_) => panic!("expected plain train"),
        }
    }

    #[test]
    fn block_roundtrip_bit_exact() {
        let base = random_tt(&[4, 3, 5], &[2, 2], 7);
        let b = BlockTt::from_single_component(1, 3, &base)
            .block_core_move(crate::tt::MoveDirection::Right, 0.0)
            .unwrap();
        let mut buf = Vec::new();
        write_block_tt(&mut buf, &b).unwrap();
        let parsed = read_ttb::<f64>(&mut buf.as_slice()).unwrap();
        match parsed {
            TtFile::Block(b2) => {
                assert_eq!(b.block_position(), b2.block_position());
                assert_eq!(b.num_components(), b2.num_components());
                assert_eq!(b.block_core(), b2.block_core());
                for l in 0..3 {
                    let x = b.component(l);
                    let y = b2.component(l);
                    for (ca, cb) in x.cores().iter().zip(y.cores()) {
                        assert_eq!(ca, cb);
                    }
                }
            }
            TtFile::Plain(_) => panic!("expected block train"),
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(read_ttb::<f64>(&mut buf.as_slice()).is_err());
    }
}
