//! Structural credit and plasticity: the trophic field map, block viability,
//! the adaptive survival threshold, pruning and trophic-weighted growth.
//!
//! Block-level matrices here are indexed `[pre block][post block]`, the
//! orientation of `|trc̄ ε̄ᵀ|`. Weight tiles live at `(post, pre)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocksparse::{BlockLayout, BlockSparseMatrix};
use crate::dense::Matrix;
use crate::error::{check_len, Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct TrophicFieldMap {
    pub t: Matrix,
    pub alpha: f64,
}

impl TrophicFieldMap {
    pub fn new(blocks: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter("trophic alpha must lie in [0, 1]"));
        }
        Ok(Self {
            t: Matrix::zeros(blocks, blocks),
            alpha,
        })
    }

    /// `T ← (1 − α) T + α |trc̄ ε̄ᵀ|`.
    pub fn update(&mut self, trc: &[f64], e_gated: &[f64], layout: &BlockLayout) -> Result<()> {
        let inc = trophic_increment(trc, e_gated, layout)?;
        let a = self.alpha;
        for (t, i) in self.t.as_mut_slice().iter_mut().zip(inc.as_slice()) {
            *t = (1.0 - a) * *t + a * i;
        }
        Ok(())
    }

    pub fn max(&self) -> f64 {
        self.t.as_slice().iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// `|trc̄ ε̄ᵀ|` from block means of the trace and the gated error.
pub fn trophic_increment(trc: &[f64], e_gated: &[f64], layout: &BlockLayout) -> Result<Matrix> {
    let tb = layout.block_means(trc)?;
    let eb = layout.block_means(e_gated)?;
    Ok(Matrix::from_fn(tb.len(), eb.len(), |m, n| (tb[m] * eb[n]).abs()))
}

/// `‖W^(post,pre)‖_F · (1 + T[pre][post])`, as a `[pre][post]` matrix.
pub fn viability(w: &BlockSparseMatrix, t: &Matrix) -> Result<Matrix> {
    let b = w.layout().blocks();
    check_len("viability map", b, t.rows())?;
    let mut v = Matrix::zeros(b, b);
    for (post, pre, tile) in w.blocks() {
        v[(pre, post)] = math::norm(tile) * (1.0 + t[(pre, post)]);
    }
    Ok(v)
}

/// Viability of each occupied tile, in storage order of `w.coordinates()`.
pub fn occupied_viabilities(w: &BlockSparseMatrix, t: &Matrix) -> Vec<f64> {
    w.blocks()
        .map(|(post, pre, tile)| math::norm(tile) * (1.0 + t[(pre, post)]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuralPolicy {
    pub p0: f64,
    pub k_density: f64,
    pub k_error: f64,
    pub grow_count_max: usize,
    pub init_scale: f64,
    pub structural_period: u64,
    pub q_admit: f64,
}

impl Default for StructuralPolicy {
    fn default() -> Self {
        Self {
            p0: 20.0,
            k_density: 20.0,
            k_error: 10.0,
            grow_count_max: 4,
            init_scale: 0.1,
            structural_period: 500,
            q_admit: 0.5,
        }
    }
}

impl StructuralPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.p0.is_finite() || !self.k_density.is_finite() || !self.k_error.is_finite() {
            return Err(Error::InvalidParameter("percentile gains must be finite"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::InvalidParameter("init_scale must be finite and >= 0"));
        }
        if self.structural_period == 0 {
            return Err(Error::InvalidParameter("structural_period must be positive"));
        }
        if !(0.0..=1.0).contains(&self.q_admit) {
            return Err(Error::InvalidParameter("q_admit must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `clamp(p0 + k_density·density + k_error·error, 1, 99)`.
    pub fn percentile(&self, density: f64, ewma_error: f64) -> f64 {
        (self.p0 + self.k_density * density + self.k_error * ewma_error).clamp(1.0, 99.0)
    }
}

/// Linear-interpolated percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Survival threshold and the percentile it was taken at.
pub fn survival_threshold(
    viabilities: &[f64],
    density: f64,
    ewma_error: f64,
    policy: &StructuralPolicy,
) -> Result<(f64, f64)> {
    let p = policy.percentile(density, ewma_error);
    Ok((percentile(viabilities, p)?, p))
}

/// Removes every occupied tile whose viability is below `theta`.
/// Returns removed `(post, pre)` tile coordinates.
pub fn prune(w: &mut BlockSparseMatrix, t: &Matrix, theta: f64) -> Result<Vec<(usize, usize)>> {
    let doomed: Vec<(usize, usize)> = w
        .blocks()
        .filter(|&(post, pre, tile)| math::norm(tile) * (1.0 + t[(pre, post)]) < theta)
        .map(|(post, pre, _)| (post, pre))
        .collect();
    for &(post, pre) in &doomed {
        w.remove_block(post, pre)?;
    }
    Ok(doomed)
}

/// Grows up to `policy.grow_count_max` tiles where trophic support is high.
///
/// Candidates are vacant tiles in block-rows with spare budget, weighted by
/// `T / max(T)` and drawn without replacement. A drawn candidate is admitted
/// when `theta · T/max(T) ≥ theta · q_admit`. Returns added `(post, pre)`.
pub fn grow(
    w: &mut BlockSparseMatrix,
    t: &Matrix,
    theta: f64,
    policy: &StructuralPolicy,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let layout = *w.layout();
    let b = layout.blocks();
    check_len("grow trophic map", b, t.rows())?;
    let t_max = t.as_slice().iter().fold(0.0f64, |m, &v| m.max(v));
    let mut added = Vec::new();
    if !(t_max > 0.0) || policy.grow_count_max == 0 {
        return Ok(added);
    }
    let mut candidates: Vec<((usize, usize), f64)> = Vec::new();
    for post in 0..b {
        if w.row_occupancy(post).len() >= layout.max_blocks_per_row() {
            continue;
        }
        for pre in 0..b {
            if !w.is_occupied(post, pre) {
                let weight = t[(pre, post)] / t_max;
                if weight > 0.0 {
                    candidates.push(((post, pre), weight));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ell = layout.block_size();
    let normal = Normal::new(0.0, policy.init_scale / math::sqrt(ell as f64))
        .map_err(|_| Error::InvalidParameter("init_scale"))?;
    let mut draws = 0;
    while draws < policy.grow_count_max && !candidates.is_empty() {
        let pick = weighted_index(&candidates, &mut rng);
        let ((post, pre), weight) = candidates.swap_remove(pick);
        draws += 1;
        if w.row_occupancy(post).len() >= layout.max_blocks_per_row() {
            continue;
        }
        if theta * weight < theta * policy.q_admit {
            continue;
        }
        let init: Vec<f64> = (0..layout.block_len()).map(|_| normal.sample(&mut rng)).collect();
        w.insert_block(post, pre, &init)?;
        added.push((post, pre));
    }
    Ok(added)
}

fn weighted_index(candidates: &[((usize, usize), f64)], rng: &mut impl Rng) -> usize {
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    let mut target = rng.random::<f64>() * total;
    for (i, c) in candidates.iter().enumerate() {
        if target < c.1 {
            return i;
        }
        target -= c.1;
    }
    candidates.len() - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEvent {
    pub step: u64,
    pub percentile: f64,
    pub theta: f64,
    pub removed: Vec<(usize, usize)>,
    pub added: Vec<(usize, usize)>,
    pub density_before: f64,
    pub density_after: f64,
}

/// Viability → threshold → prune → grow, as one atomic edit.
///
/// `density` is the occupied fraction of the block budget and
/// `ewma_error` the normalised running error. An empty matrix skips the
/// threshold and prune stages and grows with `theta = 0`.
pub fn structural_step(
    w: &mut BlockSparseMatrix,
    t: &Matrix,
    ewma_error: f64,
    policy: &StructuralPolicy,
    step: u64,
    seed: u64,
) -> Result<StructuralEvent> {
    let density_before = w.budget_fill();
    let viab = occupied_viabilities(w, t);
    let (theta, p, removed) = if viab.is_empty() {
        (0.0, policy.percentile(density_before, ewma_error), Vec::new())
    } else {
        let (theta, p) = survival_threshold(&viab, density_before, ewma_error, policy)?;
        (theta, p, prune(w, t, theta)?)
    };
    let added = grow(w, t, theta, policy, seed)?;
    Ok(StructuralEvent {
        step,
        percentile: p,
        theta,
        removed,
        added,
        density_before,
        density_after: w.budget_fill(),
    })
}

/// Removes a seeded random `fraction` of the occupied tiles.
pub fn ablate(w: &mut BlockSparseMatrix, fraction: f64, seed: u64) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter("ablation fraction must lie in [0, 1]"));
    }
    let mut coords = w.coordinates();
    let count = libm::round(fraction * coords.len() as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed = vec![];
    for _ in 0..count {
        let k = rng.random_range(0..coords.len());
        let (post, pre) = coords.swap_remove(k);
        w.remove_block(post, pre)?;
        removed.push((post, pre));
    }
    Ok(removed)
}
