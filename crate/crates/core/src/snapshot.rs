//! Binary snapshots of weights and state.
//!
//! Layout of a matrix snapshot, all integers and floats little-endian:
//!
//! ```text
//! magic "TRPHBSM\0" | u32 version | u64 B | u64 ℓ | u64 c_max | u8 mask_self
//! u64 count × B                  occupied tiles per block row
//! u64 column × Σcount            sorted column indices, row by row
//! f64 × Σcount·ℓ²                tiles, row-major, in storage order
//! ```
//!
//! A state snapshot follows as `x`, `trc`, `a` (each `u64 len` then `f64`s),
//! then `u64 step` and `u64 noise_seed`.

use alloc::vec::Vec;

use crate::blocksparse::{BlockLayout, BlockSparseMatrix};
use crate::dense::Matrix;
use crate::dynamics::NetworkState;
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: [u8; 8] = *b"TRPHBSM\0";
pub const VERSION: u32 = 1;

/// Append-only little-endian encoder.
#[derive(Debug, Default, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    /// Length-prefixed floats.
    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    /// `rows`, `cols`, then the row-major data without a second length.
    pub fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &x in m.as_slice() {
            self.f64(x);
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a snapshot; every read checks the remaining length.
#[derive(Debug, Clone)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Snapshot("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.bytes(N)?);
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Snapshot("length overflows usize"))
    }

    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(unit).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Snapshot("length exceeds data"));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.len(0)?;
        let n = rows.checked_mul(cols).ok_or(Error::Snapshot("matrix too large"))?;
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Snapshot("length exceeds data"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn write_matrix(w: &mut ByteWriter, m: &BlockSparseMatrix) {
    let layout = m.layout();
    w.bytes(&MATRIX_MAGIC);
    w.u32(VERSION);
    w.usize(layout.blocks());
    w.usize(layout.block_size());
    w.usize(layout.max_blocks_per_row());
    w.u8(m.masks_self_connections() as u8);
    for row in 0..layout.blocks() {
        w.usize(m.row_occupancy(row).len());
    }
    for row in 0..layout.blocks() {
        for &c in m.row_occupancy(row) {
            w.usize(c);
        }
    }
    for &v in m.values() {
        w.f64(v);
    }
}

pub fn read_matrix(r: &mut ByteReader<'_>) -> Result<BlockSparseMatrix> {
    if r.bytes(8)? != MATRIX_MAGIC {
        return Err(Error::Snapshot("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(Error::Snapshot("unsupported version"));
    }
    let layout = BlockLayout::new(r.usize()?, r.usize()?, r.usize()?)?;
    let mask_self = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(Error::Snapshot("bad mask flag")),
    };
    let counts = (0..layout.blocks()).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    if counts.iter().any(|&c| c > layout.max_blocks_per_row()) {
        return Err(Error::Snapshot("row count exceeds budget"));
    }
    let occupancy = counts
        .iter()
        .map(|&c| (0..c).map(|_| r.usize()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let total = counts.iter().sum::<usize>() * layout.block_len();
    if total * 8 > r.buf.len() - r.pos {
        return Err(Error::Snapshot("truncated"));
    }
    let values = (0..total).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    BlockSparseMatrix::from_parts(layout, mask_self, occupancy, values)
}

pub fn write_state(w: &mut ByteWriter, s: &NetworkState) {
    w.f64s(&s.x);
    w.f64s(&s.trc);
    w.f64s(&s.a);
    w.u64(s.step);
    w.u64(s.noise_seed);
}

pub fn read_state(r: &mut ByteReader<'_>) -> Result<NetworkState> {
    let x = r.f64s()?;
    let trc = r.f64s()?;
    let a = r.f64s()?;
    if trc.len() != x.len() || a.len() != x.len() {
        return Err(Error::Snapshot("state vectors differ in length"));
    }
    Ok(NetworkState {
        x,
        trc,
        a,
        step: r.u64()?,
        noise_seed: r.u64()?,
    })
}
