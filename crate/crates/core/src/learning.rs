//! Synaptic learning rules: NLMS readout, feedback alignment, Jacobian
//! gating, error-gated Hebbian-Oja recurrent plasticity, homeostatic bias
//! regulation and norm projection.
//!
//! Every rule returns an update; applying it is the caller's job. Recurrent
//! updates exist only for occupied blocks and share the weight topology.

use alloc::vec::Vec;

use crate::blocksparse::BlockSparseMatrix;
use crate::dense::Matrix;
use crate::error::{check_len, Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasticityRates {
    pub eta_h: f64,
    pub eta_o: f64,
    pub eta_d: f64,
    pub eta_b: f64,
    pub eta_out: f64,
    pub eta_fb: f64,
    pub p_star: f64,
    pub eps_small: f64,
    pub norm_cap: f64,
}

impl Default for PlasticityRates {
    fn default() -> Self {
        Self {
            eta_h: 50.0,
            eta_o: 10.0,
            eta_d: 1e-5,
            eta_b: 1e-4,
            eta_out: 0.5,
            eta_fb: 0.05,
            p_star: 0.1,
            eps_small: 1e-6,
            norm_cap: 10.0,
        }
    }
}

impl PlasticityRates {
    /// Rates with every learning rate set to zero.
    pub fn frozen() -> Self {
        Self {
            eta_h: 0.0,
            eta_o: 0.0,
            eta_d: 0.0,
            eta_b: 0.0,
            eta_out: 0.0,
            eta_fb: 0.0,
            ..Self::default()
        }
    }

    /// Checks signs and the timescale ordering
    /// `eta_fb ≤ eta_out / 10 ≤ max(eta_h, eta_o) / 100`.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.eta_h,
            self.eta_o,
            self.eta_d,
            self.eta_b,
            self.eta_out,
            self.eta_fb,
            self.p_star,
            self.eps_small,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("rates must be finite and non-negative"));
        }
        if !(self.norm_cap > 0.0) {
            return Err(Error::InvalidParameter("norm_cap must be positive"));
        }
        let eta_w = self.eta_h.max(self.eta_o);
        let tol = 1e-12;
        if self.eta_fb > self.eta_out / 10.0 * (1.0 + tol) {
            return Err(Error::InvalidParameter("eta_fb must not exceed eta_out / 10"));
        }
        if self.eta_out / 10.0 > eta_w / 100.0 * (1.0 + tol) {
            return Err(Error::InvalidParameter("eta_out / 10 must not exceed max(eta_h, eta_o) / 100"));
        }
        Ok(())
    }
}

/// Switches for the two normalisation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Normalization {
    /// Scale plasticity by `1 / (‖x‖² + eps_small)`.
    pub nlms: bool,
    /// Divide each recurrent update by the number of occupied blocks in its
    /// block-row.
    pub arch_scaling: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            nlms: true,
            arch_scaling: true,
        }
    }
}

impl Normalization {
    pub fn scale(&self, x: &[f64], eps_small: f64) -> f64 {
        if self.nlms {
            1.0 / (math::norm_sq(x) + eps_small)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnableHeads {
    /// Readout, `d_out × N`.
    pub r: Matrix,
    /// Value readout, length `N`.
    pub r_v: Vec<f64>,
    /// Feedback projection, `N × d_out`.
    pub w_fb: Matrix,
    pub b: Vec<f64>,
}

impl LearnableHeads {
    pub fn zeros(neurons: usize, outputs: usize) -> Self {
        Self {
            r: Matrix::zeros(outputs, neurons),
            r_v: alloc::vec![0.0; neurons],
            w_fb: Matrix::zeros(neurons, outputs),
            b: alloc::vec![0.0; neurons],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite()
            && self.w_fb.is_finite()
            && self.r_v.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

pub fn readout_predict(r: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    r.matvec(x)
}

/// `ΔR = −η δ xᵀ · scale`, where `scale = 1 / (‖x‖² + eps_small)`.
pub fn nlms_readout_update(r: &Matrix, x: &[f64], delta: &[f64], eta_out: f64, eps_small: f64) -> Result<Matrix> {
    readout_update(r, x, delta, eta_out, 1.0 / (math::norm_sq(x) + eps_small))
}

/// Readout update with an explicit normalisation factor.
pub fn readout_update(r: &Matrix, x: &[f64], delta: &[f64], eta_out: f64, scale: f64) -> Result<Matrix> {
    check_len("readout update state", r.cols(), x.len())?;
    check_len("readout update error", r.rows(), delta.len())?;
    let c = -eta_out * scale;
    Ok(Matrix::from_fn(r.rows(), r.cols(), |k, j| c * delta[k] * x[j]))
}

/// `ε = W_fb δ`.
pub fn feedback_project(w_fb: &Matrix, delta: &[f64]) -> Result<Vec<f64>> {
    w_fb.matvec(delta)
}

/// `ΔW_fb = −η (W_fb δ − Rᵀδ) δᵀ`.
pub fn feedback_align_update(w_fb: &Matrix, r: &Matrix, delta: &[f64], eta_fb: f64) -> Result<Matrix> {
    check_len("feedback rows", r.cols(), w_fb.rows())?;
    let eps = w_fb.matvec(delta)?;
    let target = r.transpose_matvec(delta)?;
    let residual: Vec<f64> = eps.iter().zip(&target).map(|(a, b)| a - b).collect();
    Ok(Matrix::from_fn(w_fb.rows(), w_fb.cols(), |i, k| {
        -eta_fb * residual[i] * delta[k]
    }))
}

/// Alignment loss `‖W_fb δ − Rᵀδ‖²`.
pub fn alignment_loss(w_fb: &Matrix, r: &Matrix, delta: &[f64]) -> Result<f64> {
    let eps = w_fb.matvec(delta)?;
    let target = r.transpose_matvec(delta)?;
    Ok(eps.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `E = ε ⊙ (1 − x²)`.
pub fn gated_error(eps: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len("gated_error", eps.len(), x.len())?;
    Ok(eps.iter().zip(x).map(|(e, xi)| e * (1.0 - xi * xi)).collect())
}

/// Error-gated Hebbian-Oja update for every occupied synapse.
///
/// For stored entry `(post l, pre k)`:
/// `tanh(E_l)·(η_h trc_k trc_l + η_o x_k (x_l − x_k W_lk))·s − η_d W_lk`,
/// with `s` the NLMS factor (and optional block-row divisor). Diagonal entries
/// of diagonal tiles stay zero and each tile is norm-projected.
pub fn recurrent_plasticity(
    w: &BlockSparseMatrix,
    x: &[f64],
    trc: &[f64],
    e_gated: &[f64],
    rates: &PlasticityRates,
    norm: Normalization,
) -> Result<BlockSparseMatrix> {
    let layout = *w.layout();
    let n = layout.neurons();
    check_len("plasticity state", n, x.len())?;
    check_len("plasticity trace", n, trc.len())?;
    check_len("plasticity error", n, e_gated.len())?;
    let ell = layout.block_size();
    let nlms = norm.scale(x, rates.eps_small);
    let gate: Vec<f64> = e_gated.iter().map(|&e| math::tanh(e)).collect();

    let mut delta = w.zeros_like();
    let coords = w.coordinates();
    let len = layout.block_len();
    let weights = w.values();
    let out = delta.values_mut();
    for (k, &(row, col)) in coords.iter().enumerate() {
        let s = if norm.arch_scaling {
            nlms / w.row_occupancy(row).len() as f64
        } else {
            nlms
        };
        let tile = &weights[k * len..(k + 1) * len];
        let dtile = &mut out[k * len..(k + 1) * len];
        for r in 0..ell {
            let post = row * ell + r;
            let g = gate[post] * s;
            for c in 0..ell {
                let pre = col * ell + c;
                let wv = tile[r * ell + c];
                let hebb = rates.eta_h * trc[pre] * trc[post];
                let oja = rates.eta_o * x[pre] * (x[post] - x[pre] * wv);
                dtile[r * ell + c] = g * (hebb + oja) - rates.eta_d * wv;
            }
        }
        norm_project(dtile, rates.norm_cap);
    }
    delta.apply_self_mask();
    Ok(delta)
}

/// `Δb_j = η_b (p* − a_j) · s`.
pub fn homeostatic_bias_update(a: &[f64], x: &[f64], rates: &PlasticityRates, norm: Normalization) -> Vec<f64> {
    let s = norm.scale(x, rates.eps_small);
    a.iter().map(|&aj| rates.eta_b * (rates.p_star - aj) * s).collect()
}

/// Scales `m` down to Frobenius norm `cap` if it exceeds it.
pub fn norm_project(m: &mut [f64], cap: f64) {
    let n = math::norm(m);
    if n > cap && n.is_finite() {
        let s = cap / n;
        m.iter_mut().for_each(|v| *v *= s);
    }
}

/// Projects every tile of `w` onto the norm ball of radius `cap`.
pub fn project_blocks(w: &mut BlockSparseMatrix, cap: f64) {
    let len = w.layout().block_len();
    for tile in w.values_mut().chunks_mut(len) {
        norm_project(tile, cap);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocksparse::BlockLayout;
    use alloc::vec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn no_norm() -> Normalization {
        Normalization {
            nlms: false,
            arch_scaling: false,
        }
    }

    #[test]
    fn rate_ordering_is_enforced() {
        assert!(PlasticityRates::default().validate().is_ok());
        let d = PlasticityRates::default();
        let r = PlasticityRates { eta_fb: d.eta_out, ..d };
        assert!(r.validate().is_err());
        let r = PlasticityRates { eta_h: 1.0, eta_o: 1.0, ..d };
        assert!(r.validate().is_err());
        assert!(PlasticityRates::frozen().validate().is_ok());
    }

    #[test]
    fn scalar_nlms_step() {
        let r = Matrix::zeros(1, 1);
        let d = nlms_readout_update(&r, &[2.0], &[1.0], 0.5, 0.0).unwrap();
        assert_relative_eq!(d[(0, 0)], -0.25);
        let zero = nlms_readout_update(&r, &[2.0], &[0.0], 0.5, 0.0).unwrap();
        assert_eq!(zero[(0, 0)], 0.0);
    }

    #[test]
    fn unit_rate_nlms_annihilates_residual() {
        let mut r = Matrix::from_vec(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.7]).unwrap();
        let x = [0.4, -0.9, 0.25];
        let y = [0.8, -0.1];
        let pred = readout_predict(&r, &x).unwrap();
        let delta: Vec<f64> = pred.iter().zip(&y).map(|(p, t)| p - t).collect();
        let d = nlms_readout_update(&r, &x, &delta, 1.0, 0.0).unwrap();
        r.add_scaled(&d, 1.0).unwrap();
        let after = readout_predict(&r, &x).unwrap();
        for (a, t) in after.iter().zip(&y) {
            assert!((a - t).abs() < 1e-10);
        }
    }

    #[test]
    fn feedback_alignment_cases() {
        let w_fb = Matrix::zeros(2, 1);
        let r = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let d = feedback_align_update(&w_fb, &r, &[1.0], 0.1).unwrap();
        assert_relative_eq!(d[(0, 0)], 0.1);
        assert_relative_eq!(d[(1, 0)], 0.1);

        let aligned = r.transpose();
        let d = feedback_align_update(&aligned, &r, &[0.7], 0.1).unwrap();
        assert!(d.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(feedback_project(&aligned, &[2.0]).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn gating_boundaries() {
        assert_eq!(gated_error(&[0.5, -2.0], &[1.0, -1.0]).unwrap(), vec![0.0, -0.0]);
        assert_eq!(gated_error(&[0.5], &[0.0]).unwrap(), vec![0.5]);
    }

    fn one_block(ell: usize, w: &[f64]) -> BlockSparseMatrix {
        let layout = BlockLayout::new(1, ell, 1).unwrap();
        let mut m = BlockSparseMatrix::empty(layout).without_self_masking();
        m.insert_block(0, 0, w).unwrap();
        m
    }

    #[test]
    fn zero_error_is_pure_decay() {
        let w = one_block(2, &[0.2, -0.4, 0.6, 1.0]);
        let rates = PlasticityRates {
            eta_d: 0.01,
            ..PlasticityRates::default()
        };
        let d = recurrent_plasticity(&w, &[0.3, 0.1], &[0.5, 0.5], &[0.0, 0.0], &rates, no_norm()).unwrap();
        for (dv, wv) in d.values().iter().zip(w.values()) {
            assert_relative_eq!(*dv, -0.01 * wv, max_relative = 1e-15);
        }
    }

    #[test]
    fn saturated_gate_hebbian_scalar() {
        // entry (post 1, pre 0); saturating error drives tanh to 1
        let w = one_block(2, &[0.0; 4]);
        let rates = PlasticityRates {
            eta_h: 0.1,
            eta_o: 0.0,
            eta_d: 0.0,
            ..PlasticityRates::default()
        };
        let d = recurrent_plasticity(&w, &[0.0, 0.0], &[1.0, 1.0], &[1e3, 1e3], &rates, no_norm()).unwrap();
        assert_relative_eq!(d.block(0, 0).unwrap()[2], 0.1);
    }

    #[test]
    fn oja_fixed_point() {
        let w = one_block(2, &[0.0, 1.0, 1.0, 0.0]);
        let rates = PlasticityRates {
            eta_h: 0.0,
            eta_o: 1.0,
            eta_d: 0.0,
            ..PlasticityRates::default()
        };
        let d = recurrent_plasticity(&w, &[0.5, 0.5], &[0.0, 0.0], &[1e3, 1e3], &rates, no_norm()).unwrap();
        assert_relative_eq!(d.block(0, 0).unwrap()[1], 0.0);
        assert_relative_eq!(d.block(0, 0).unwrap()[2], 0.0);
    }

    #[test]
    fn nlms_and_arch_scaling_divide_the_gated_term() {
        let layout = BlockLayout::new(2, 1, 2).unwrap();
        let mut w = BlockSparseMatrix::empty(layout);
        w.insert_block(0, 1, &[0.0]).unwrap();
        w.insert_block(1, 0, &[0.0]).unwrap();
        w.insert_block(1, 1, &[0.0]).unwrap();
        let rates = PlasticityRates {
            eta_h: 1.0,
            eta_o: 0.0,
            eta_d: 0.0,
            eps_small: 0.0,
            ..PlasticityRates::default()
        };
        let x = [1.0, 1.0];
        let full = recurrent_plasticity(&w, &x, &[1.0, 1.0], &[1e3, 1e3], &rates, Normalization::default()).unwrap();
        // ‖x‖² = 2; row 0 has one block, row 1 two (its diagonal is masked)
        assert_relative_eq!(full.block(0, 1).unwrap()[0], 0.5);
        assert_relative_eq!(full.block(1, 0).unwrap()[0], 0.25);
        assert_eq!(full.block(1, 1).unwrap()[0], 0.0);
    }

    #[test]
    fn bias_update_cases() {
        let rates = PlasticityRates {
            eta_b: 1.0,
            p_star: 0.1,
            eps_small: 0.0,
            ..PlasticityRates::default()
        };
        let nl = Normalization::default();
        assert_relative_eq!(homeostatic_bias_update(&[0.0], &[1.0], &rates, nl)[0], 0.1);
        assert_eq!(homeostatic_bias_update(&[0.1], &[1.0], &rates, nl)[0], 0.0);
        assert!(homeostatic_bias_update(&[0.5], &[1.0], &rates, nl)[0] < 0.0);
    }

    #[test]
    fn projection_cases() {
        let mut z = [0.0; 4];
        norm_project(&mut z, 1.0);
        assert_eq!(z, [0.0; 4]);
        let mut m = [3.0, 4.0];
        norm_project(&mut m, 2.5);
        assert_relative_eq!(math::norm(&m), 2.5, max_relative = 1e-15);
        let mut small = [0.3, 0.4];
        norm_project(&mut small, 2.5);
        assert_eq!(small, [0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn alignment_update_descends(
            w in prop::collection::vec(-1.0f64..1.0, 8),
            r in prop::collection::vec(-1.0f64..1.0, 8),
            d in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let w_fb = Matrix::from_vec(4, 2, w).unwrap();
            let r = Matrix::from_vec(2, 4, r).unwrap();
            let before = alignment_loss(&w_fb, &r, &d).unwrap();
            prop_assume!(before > 1e-9);
            let mut next = w_fb.clone();
            next.add_scaled(&feedback_align_update(&w_fb, &r, &d, 0.05).unwrap(), 1.0).unwrap();
            prop_assert!(alignment_loss(&next, &r, &d).unwrap() < before);
        }

        #[test]
        fn plasticity_is_local(
            x in prop::collection::vec(-0.9f64..0.9, 4),
            trc in prop::collection::vec(-2.0f64..2.0, 4),
            e in prop::collection::vec(-1.0f64..1.0, 4),
            bump in -0.5f64..0.5,
        ) {
            // without normalisation an entry depends only on its own pre/post neurons
            let layout = BlockLayout::new(2, 2, 2).unwrap();
            let mut w = BlockSparseMatrix::empty(layout);
            w.insert_block(0, 0, &[0.1, 0.2, 0.3, 0.4]).unwrap();
            w.insert_block(0, 1, &[0.5, -0.1, 0.2, 0.0]).unwrap();
            let rates = PlasticityRates { eta_h: 1.0, eta_o: 1.0, eta_d: 0.01, ..PlasticityRates::default() };
            let base = recurrent_plasticity(&w, &x, &trc, &e, &rates, no_norm()).unwrap();
            // neuron 3 feeds only block (0,1) entries with pre = 3
            let mut x2 = x.clone();
            x2[3] += bump;
            let mut t2 = trc.clone();
            t2[3] -= bump;
            let moved = recurrent_plasticity(&w, &x2, &t2, &e, &rates, no_norm()).unwrap();
            let b0 = base.block(0, 0).unwrap();
            let m0 = moved.block(0, 0).unwrap();
            prop_assert_eq!(b0, m0);
            let b1 = base.block(0, 1).unwrap();
            let m1 = moved.block(0, 1).unwrap();
            // pre column 0 of block (0,1) is neuron 2
            prop_assert_eq!(b1[0], m1[0]);
            prop_assert_eq!(b1[2], m1[2]);
        }

        #[test]
        fn updates_respect_the_cap(
            x in prop::collection::vec(-1.0f64..1.0, 4),
            trc in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let layout = BlockLayout::new(1, 4, 1).unwrap();
            let mut w = BlockSparseMatrix::empty(layout);
            w.insert_block(0, 0, &[1.0; 16]).unwrap();
            let rates = PlasticityRates { norm_cap: 0.5, eta_h: 100.0, ..PlasticityRates::default() };
            let d = recurrent_plasticity(&w, &x, &trc, &[2.0; 4], &rates, Normalization::default()).unwrap();
            prop_assert!(math::norm(d.values()) <= 0.5 + 1e-12);
        }
    }
}
