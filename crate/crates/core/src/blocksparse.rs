//! Block-sparse square matrices stored as a grid of dense `ℓ×ℓ` tiles.
//!
//! Occupancy is row-compressed: block row `i` owns the column indices
//! `col_idx[row_ptr[i]..row_ptr[i + 1]]`, kept sorted, and the tile for the
//! `k`-th stored block lives at `values[k * ℓ² .. (k + 1) * ℓ²]` in row-major
//! order. Iteration order is therefore fixed by the topology alone, which the
//! deterministic replay of experiments relies on.
//!
//! When used as recurrent weights, entry `(r, c)` is the synapse from neuron
//! `c` (presynaptic) onto neuron `r` (postsynaptic), so the network drive is
//! the ordinary product `W x`.

use alloc::vec;
use alloc::vec::Vec;

use crate::dense::Matrix;
use crate::error::{check_len, Error, Result};
use crate::math;

/// Largest neuron count for which dense copies are allowed.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockLayout {
    blocks: usize,
    block_size: usize,
    max_blocks_per_row: usize,
}

impl BlockLayout {
    pub fn new(blocks: usize, block_size: usize, max_blocks_per_row: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::InvalidLayout("block count must be at least 1"));
        }
        if block_size == 0 {
            return Err(Error::InvalidLayout("block size must be at least 1"));
        }
        if max_blocks_per_row == 0 || max_blocks_per_row > blocks {
            return Err(Error::InvalidLayout(
                "max blocks per row must lie in 1..=blocks",
            ));
        }
        Ok(Self {
            blocks,
            block_size,
            max_blocks_per_row,
        })
    }

    /// Layout with the default row budget of `B / 4` (at least one).
    pub fn with_default_budget(blocks: usize, block_size: usize) -> Result<Self> {
        Self::new(blocks, block_size, (blocks / 4).max(1))
    }

    #[inline]
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn max_blocks_per_row(&self) -> usize {
        self.max_blocks_per_row
    }

    #[inline]
    pub fn neurons(&self) -> usize {
        self.blocks * self.block_size
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.block_size * self.block_size
    }

    /// Block index that neuron `n` belongs to.
    #[inline]
    pub fn block_of(&self, neuron: usize) -> usize {
        neuron / self.block_size
    }

    /// Mean of `v` over each block of neurons.
    pub fn block_means(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("BlockLayout::block_means", self.neurons(), v.len())?;
        Ok(v.chunks(self.block_size)
            .map(|c| c.iter().sum::<f64>() / self.block_size as f64)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseMatrix {
    layout: BlockLayout,
    mask_self: bool,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl BlockSparseMatrix {
    /// Empty matrix whose diagonal tiles never hold self-connections.
    pub fn empty(layout: BlockLayout) -> Self {
        Self {
            layout,
            mask_self: true,
            row_ptr: vec![0; layout.blocks + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Disables self-connection masking. Only meant for fixtures that need
    /// e.g. a scaled identity.
    pub fn without_self_masking(mut self) -> Self {
        self.mask_self = false;
        self
    }

    /// Rebuilds a matrix from its raw parts, validating every invariant.
    pub fn from_parts(
        layout: BlockLayout,
        mask_self: bool,
        occupancy: Vec<Vec<usize>>,
        values: Vec<f64>,
    ) -> Result<Self> {
        check_len("BlockSparseMatrix::from_parts rows", layout.blocks, occupancy.len())?;
        let mut row_ptr = Vec::with_capacity(layout.blocks + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (row, cols) in occupancy.iter().enumerate() {
            if cols.len() > layout.max_blocks_per_row {
                return Err(Error::RowFull {
                    row,
                    max: layout.max_blocks_per_row,
                });
            }
            for (k, &c) in cols.iter().enumerate() {
                if c >= layout.blocks {
                    return Err(Error::BlockOutOfRange {
                        row,
                        col: c,
                        blocks: layout.blocks,
                    });
                }
                if k > 0 && cols[k - 1] >= c {
                    return Err(Error::BlockOccupied { row, col: c });
                }
            }
            col_idx.extend_from_slice(cols);
            row_ptr.push(col_idx.len());
        }
        check_len(
            "BlockSparseMatrix::from_parts values",
            col_idx.len() * layout.block_len(),
            values.len(),
        )?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("block values must be finite"));
        }
        let mut m = Self {
            layout,
            mask_self,
            row_ptr,
            col_idx,
            values,
        };
        m.apply_self_mask();
        Ok(m)
    }

    #[inline]
    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    #[inline]
    pub fn masks_self_connections(&self) -> bool {
        self.mask_self
    }

    /// Sorted occupied column blocks of block row `row`.
    #[inline]
    pub fn row_occupancy(&self, row: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    #[inline]
    pub fn occupied_count(&self) -> usize {
        self.col_idx.len()
    }

    /// Occupied blocks as a fraction of the row budget `B · c_max`.
    pub fn budget_fill(&self) -> f64 {
        self.occupied_count() as f64
            / (self.layout.blocks * self.layout.max_blocks_per_row) as f64
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.position(row, col).is_ok()
    }

    fn check_coords(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.layout.blocks || col >= self.layout.blocks {
            return Err(Error::BlockOutOfRange {
                row,
                col,
                blocks: self.layout.blocks,
            });
        }
        Ok(())
    }

    /// Index into `col_idx` of block `(row, col)`, or the insertion point.
    fn position(&self, row: usize, col: usize) -> core::result::Result<usize, usize> {
        let start = self.row_ptr[row];
        self.row_occupancy(row)
            .binary_search(&col)
            .map(|k| start + k)
            .map_err(|k| start + k)
    }

    pub fn block(&self, row: usize, col: usize) -> Option<&[f64]> {
        if row >= self.layout.blocks {
            return None;
        }
        let len = self.layout.block_len();
        self.position(row, col)
            .ok()
            .map(|k| &self.values[k * len..(k + 1) * len])
    }

    /// Mutable tile access. Callers must call [`apply_self_mask`] afterwards
    /// when writing to a diagonal tile.
    ///
    /// [`apply_self_mask`]: Self::apply_self_mask
    pub fn block_mut(&mut self, row: usize, col: usize) -> Option<&mut [f64]> {
        if row >= self.layout.blocks {
            return None;
        }
        let len = self.layout.block_len();
        match self.position(row, col) {
            Ok(k) => Some(&mut self.values[k * len..(k + 1) * len]),
            Err(_) => None,
        }
    }

    /// Iterates `(row, col, tile)` in storage order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &[f64])> + '_ {
        let len = self.layout.block_len();
        (0..self.layout.blocks).flat_map(move |row| {
            (self.row_ptr[row]..self.row_ptr[row + 1])
                .map(move |k| (row, self.col_idx[k], &self.values[k * len..(k + 1) * len]))
        })
    }

    /// Occupied block coordinates in storage order.
    pub fn coordinates(&self) -> Vec<(usize, usize)> {
        self.blocks().map(|(r, c, _)| (r, c)).collect()
    }

    /// Flat tile storage, parallel to [`coordinates`](Self::coordinates).
    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable flat storage. Re-applies no masking by itself.
    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Matrix with identical topology and all-zero tiles.
    pub fn zeros_like(&self) -> Self {
        Self {
            layout: self.layout,
            mask_self: self.mask_self,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn same_topology(&self, other: &Self) -> bool {
        self.layout == other.layout && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    /// `self += scale * other` for matrices sharing a topology.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_topology(other) {
            return Err(Error::InvalidParameter("add_scaled requires identical topology"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        self.apply_self_mask();
        Ok(())
    }

    /// Zeroes the diagonal entries of diagonal tiles (no-op when masking is off).
    pub fn apply_self_mask(&mut self) {
        if !self.mask_self {
            return;
        }
        let ell = self.layout.block_size;
        let len = self.layout.block_len();
        for row in 0..self.layout.blocks {
            if let Ok(k) = self.position(row, row) {
                let tile = &mut self.values[k * len..(k + 1) * len];
                for d in 0..ell {
                    tile[d * ell + d] = 0.0;
                }
            }
        }
    }

    /// `y = M x`, touching occupied tiles only.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.layout.neurons()];
        self.matvec_into(x, &mut y)?;
        Ok(y)
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        let n = self.layout.neurons();
        check_len("bsr_matvec input", n, x.len())?;
        check_len("bsr_matvec output", n, y.len())?;
        let ell = self.layout.block_size;
        let len = self.layout.block_len();
        for row in 0..self.layout.blocks {
            let out = &mut y[row * ell..(row + 1) * ell];
            out.iter_mut().for_each(|v| *v = 0.0);
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                let col = self.col_idx[k];
                let xs = &x[col * ell..(col + 1) * ell];
                let tile = &self.values[k * len..(k + 1) * len];
                for (r, o) in out.iter_mut().enumerate() {
                    *o += math::dot(&tile[r * ell..(r + 1) * ell], xs);
                }
            }
        }
        Ok(())
    }

    /// B×B matrix of tile Frobenius norms (zero where unoccupied).
    pub fn block_frobenius_norms(&self) -> Matrix {
        let b = self.layout.blocks;
        let mut out = Matrix::zeros(b, b);
        for (row, col, tile) in self.blocks() {
            out[(row, col)] = math::norm(tile);
        }
        out
    }

    /// Inserts a tile at `(row, col)`. The diagonal of a diagonal tile is
    /// zeroed when masking is on.
    pub fn insert_block(&mut self, row: usize, col: usize, init: &[f64]) -> Result<()> {
        self.check_coords(row, col)?;
        check_len("insert_block tile", self.layout.block_len(), init.len())?;
        if init.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("block values must be finite"));
        }
        let k = match self.position(row, col) {
            Ok(_) => return Err(Error::BlockOccupied { row, col }),
            Err(k) => k,
        };
        if self.row_occupancy(row).len() >= self.layout.max_blocks_per_row {
            return Err(Error::RowFull {
                row,
                max: self.layout.max_blocks_per_row,
            });
        }
        let len = self.layout.block_len();
        self.col_idx.insert(k, col);
        self.values.splice(k * len..k * len, init.iter().copied());
        for p in &mut self.row_ptr[row + 1..] {
            *p += 1;
        }
        if row == col && self.mask_self {
            let ell = self.layout.block_size;
            for d in 0..ell {
                self.values[k * len + d * ell + d] = 0.0;
            }
        }
        Ok(())
    }

    /// Removes the tile at `(row, col)` and returns its values.
    pub fn remove_block(&mut self, row: usize, col: usize) -> Result<Vec<f64>> {
        self.check_coords(row, col)?;
        let k = self
            .position(row, col)
            .map_err(|_| Error::BlockVacant { row, col })?;
        let len = self.layout.block_len();
        self.col_idx.remove(k);
        let removed: Vec<f64> = self.values.drain(k * len..(k + 1) * len).collect();
        for p in &mut self.row_ptr[row + 1..] {
            *p -= 1;
        }
        Ok(removed)
    }

    /// Dense `N×N` copy; refused above [`DENSE_LIMIT`] neurons.
    pub fn to_dense(&self) -> Result<Matrix> {
        let n = self.layout.neurons();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge {
                neurons: n,
                limit: DENSE_LIMIT,
            });
        }
        let ell = self.layout.block_size;
        let mut out = Matrix::zeros(n, n);
        for (row, col, tile) in self.blocks() {
            for r in 0..ell {
                for c in 0..ell {
                    out[(row * ell + r, col * ell + c)] = tile[r * ell + c];
                }
            }
        }
        Ok(out)
    }

    /// Every trainable synapse as `(post, pre)` neuron indices, in storage
    /// order. Masked self-connections are skipped.
    pub fn synapses(&self) -> Vec<(usize, usize)> {
        let ell = self.layout.block_size;
        let mut out = Vec::with_capacity(self.values.len());
        for (row, col, _) in self.blocks() {
            for r in 0..ell {
                for c in 0..ell {
                    if self.mask_self && row == col && r == c {
                        continue;
                    }
                    out.push((row * ell + r, col * ell + c));
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(b: usize, ell: usize, cmax: usize) -> BlockLayout {
        BlockLayout::new(b, ell, cmax).unwrap()
    }

    fn random_matrix(seed: u64, b: usize, ell: usize, cmax: usize) -> BlockSparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BlockSparseMatrix::empty(layout(b, ell, cmax));
        for row in 0..b {
            for col in 0..b {
                if m.row_occupancy(row).len() < cmax && rng.random_bool(0.5) {
                    let tile: Vec<f64> = (0..ell * ell).map(|_| rng.random_range(-1.0..1.0)).collect();
                    m.insert_block(row, col, &tile).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn layout_rejects_bad_budget() {
        assert!(BlockLayout::new(4, 2, 0).is_err());
        assert!(BlockLayout::new(4, 2, 5).is_err());
        assert!(BlockLayout::new(0, 2, 1).is_err());
        assert_eq!(BlockLayout::with_default_budget(8, 2).unwrap().max_blocks_per_row(), 2);
    }

    #[test]
    fn empty_matvec_is_zero() {
        let m = BlockSparseMatrix::empty(layout(3, 2, 2));
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn identity_blocks_with_and_without_masking() {
        let ell = 3;
        let mut eye = vec![0.0; ell * ell];
        for d in 0..ell {
            eye[d * ell + d] = 1.0;
        }
        let x = [1.0, -2.0, 3.0, 0.5, 0.25, -1.0];

        let mut masked = BlockSparseMatrix::empty(layout(2, ell, 1));
        masked.insert_block(0, 0, &eye).unwrap();
        masked.insert_block(1, 1, &eye).unwrap();
        assert_eq!(masked.matvec(&x).unwrap(), vec![0.0; 6]);

        let mut open = BlockSparseMatrix::empty(layout(2, ell, 1)).without_self_masking();
        open.insert_block(0, 0, &eye).unwrap();
        open.insert_block(1, 1, &eye).unwrap();
        assert_eq!(open.matvec(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn matvec_matches_dense_oracle() {
        let m = random_matrix(7, 4, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = m.to_dense().unwrap();
        let y = m.matvec(&x).unwrap();
        for r in 0..12 {
            let expect: f64 = (0..12).map(|c| dense[(r, c)] * x[c]).sum();
            assert!((y[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn frobenius_norms() {
        let m = BlockSparseMatrix::empty(layout(3, 2, 2));
        assert!(m.block_frobenius_norms().as_slice().iter().all(|&v| v == 0.0));

        let mut m = BlockSparseMatrix::empty(layout(3, 2, 2));
        m.insert_block(0, 2, &[1.0; 4]).unwrap();
        let norms = m.block_frobenius_norms();
        assert_eq!(norms[(0, 2)], 2.0);
        assert_eq!(norms[(2, 0)], 0.0);

        let m = random_matrix(3, 4, 3, 2);
        let dense = m.to_dense().unwrap();
        let norms = m.block_frobenius_norms();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        s += dense[(i * 3 + r, j * 3 + c)].powi(2);
                    }
                }
                assert!((norms[(i, j)] - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn insert_remove_round_trip() {
        let original = random_matrix(11, 4, 2, 3);
        let mut m = original.clone();
        let (row, col) = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .find(|&(r, c)| !m.is_occupied(r, c) && m.row_occupancy(r).len() < 3)
            .unwrap();
        m.insert_block(row, col, &[0.5; 4]).unwrap();
        assert!(m.is_occupied(row, col));
        m.remove_block(row, col).unwrap();
        assert_eq!(m, original);
    }

    #[test]
    fn insert_into_full_row_is_rejected() {
        let mut m = BlockSparseMatrix::empty(layout(4, 2, 2));
        m.insert_block(1, 0, &[1.0; 4]).unwrap();
        m.insert_block(1, 3, &[1.0; 4]).unwrap();
        assert_eq!(
            m.insert_block(1, 2, &[1.0; 4]),
            Err(Error::RowFull { row: 1, max: 2 })
        );
        assert_eq!(
            m.insert_block(1, 0, &[1.0; 4]),
            Err(Error::BlockOccupied { row: 1, col: 0 })
        );
        assert_eq!(m.remove_block(2, 2), Err(Error::BlockVacant { row: 2, col: 2 }));
    }

    #[test]
    fn diagonal_insert_masks_self_connections() {
        let mut m = BlockSparseMatrix::empty(layout(2, 3, 1));
        m.insert_block(1, 1, &[1.0; 9]).unwrap();
        let tile = m.block(1, 1).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 0.0 } else { 1.0 };
                assert_eq!(tile[r * 3 + c], expect);
            }
        }
    }

    #[test]
    fn to_dense_guard_and_placement() {
        let big = BlockSparseMatrix::empty(layout(4097, 1, 1));
        assert!(matches!(big.to_dense(), Err(Error::TooLarge { .. })));

        let mut m = BlockSparseMatrix::empty(layout(2, 2, 1));
        m.insert_block(0, 1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = m.to_dense().unwrap();
        assert_eq!(d.row(0), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(d.row(1), &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(d.row(2), &[0.0; 4]);
    }

    #[test]
    fn synapse_listing_skips_self_connections() {
        let mut m = BlockSparseMatrix::empty(layout(2, 2, 2));
        m.insert_block(0, 0, &[1.0; 4]).unwrap();
        m.insert_block(0, 1, &[1.0; 4]).unwrap();
        assert_eq!(m.synapses(), vec![(0, 1), (1, 0), (0, 2), (0, 3), (1, 2), (1, 3)]);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(usize, usize),
        Remove(usize, usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0..5usize, 0..5usize).prop_map(|(r, c)| Op::Insert(r, c)),
            (0..5usize, 0..5usize).prop_map(|(r, c)| Op::Remove(r, c)),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_under_any_edit_sequence(ops in proptest::collection::vec(op(), 0..40), seed in 0u64..1000) {
            let mut m = BlockSparseMatrix::empty(layout(5, 2, 3));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for op in ops {
                match op {
                    Op::Insert(r, c) => {
                        let tile: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let _ = m.insert_block(r, c, &tile);
                    }
                    Op::Remove(r, c) => {
                        let _ = m.remove_block(r, c);
                    }
                }
                for row in 0..5 {
                    let occ = m.row_occupancy(row);
                    prop_assert!(occ.len() <= 3);
                    prop_assert!(occ.windows(2).all(|w| w[0] < w[1]));
                }
                if let Some(tile) = m.block(2, 2) {
                    prop_assert_eq!(tile[0], 0.0);
                    prop_assert_eq!(tile[3], 0.0);
                }
            }
            let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
            let dense = m.to_dense().unwrap();
            let y = m.matvec(&x).unwrap();
            let yd = dense.matvec(&x).unwrap();
            for (a, b) in y.iter().zip(&yd) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }
}
