//! Discrete-time state evolution, multi-timescale traces and the spectral
//! radius of the one-step map.
//!
//! One step applies the exponential-Euler update
//!
//! ```text
//! x' = α_fast·x + (1 − α_fast)·tanh(W x + W_in u + b) + ξ
//! ```
//!
//! clamps `x'` strictly inside (−1, 1), then advances the eligibility and
//! activity traces from the new state. Time is counted in integer steps; the
//! nominal step is 2 ms, so `τ_fast = 10` steps is 20 ms.

use alloc::vec;
use alloc::vec::Vec;

use crate::blocksparse::BlockSparseMatrix;
use crate::dense::Matrix;
use crate::error::{check_len, Error, Result};
use crate::math;
use crate::noise::noise_sample;

/// States are clamped to `[−CLAMP, CLAMP]`.
pub const CLAMP: f64 = 1.0 - 1e-9;

/// Eligibility constant as a multiple of the fast constant.
pub const ELIG_RATIO: f64 = 10.0;
/// Activity constant as a multiple of the eligibility constant.
pub const ACT_RATIO: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsParams {
    pub dt: f64,
    pub tau_fast: f64,
    pub tau_elig: f64,
    pub tau_act: f64,
    pub noise_sigma: f64,
    pub alpha_fast: f64,
    pub alpha_elig: f64,
    pub alpha_act: f64,
}

impl DynamicsParams {
    /// Parameters with `dt = 1` step and the fixed timescale ratios.
    pub fn new(tau_fast: f64, noise_sigma: f64) -> Result<Self> {
        Self::with_dt(1.0, tau_fast, noise_sigma)
    }

    pub fn with_dt(dt: f64, tau_fast: f64, noise_sigma: f64) -> Result<Self> {
        if !(dt > 0.0) || !(tau_fast > 0.0) {
            return Err(Error::InvalidParameter("dt and tau_fast must be positive"));
        }
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::InvalidParameter("noise sigma must be finite and >= 0"));
        }
        let tau_elig = ELIG_RATIO * tau_fast;
        let tau_act = ACT_RATIO * tau_elig;
        let p = Self {
            dt,
            tau_fast,
            tau_elig,
            tau_act,
            noise_sigma,
            alpha_fast: math::exp(-dt / tau_fast),
            alpha_elig: math::exp(-dt / tau_elig),
            alpha_act: math::exp(-dt / tau_act),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs();
        if !close(self.tau_elig, ELIG_RATIO * self.tau_fast) {
            return Err(Error::InvalidParameter("tau_elig must equal 10 tau_fast"));
        }
        if !close(self.tau_act, ACT_RATIO * self.tau_elig) {
            return Err(Error::InvalidParameter("tau_act must equal 5000 tau_elig"));
        }
        for a in [self.alpha_fast, self.alpha_elig, self.alpha_act] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidParameter("decay factors must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Upper bound on `|trc|` when `|x| ≤ 1`.
    pub fn trace_bound(&self) -> f64 {
        (1.0 - self.alpha_fast) / (1.0 - self.alpha_elig)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub x: Vec<f64>,
    pub trc: Vec<f64>,
    pub a: Vec<f64>,
    pub step: u64,
    pub noise_seed: u64,
}

impl NetworkState {
    pub fn new(neurons: usize, noise_seed: u64) -> Self {
        Self {
            x: vec![0.0; neurons],
            trc: vec![0.0; neurons],
            a: vec![0.0; neurons],
            step: 0,
            noise_seed,
        }
    }

    pub fn neurons(&self) -> usize {
        self.x.len()
    }
}

/// Recurrent drive `W x + W_in u + b`.
pub fn pre_activation(
    w: &BlockSparseMatrix,
    w_in: &Matrix,
    x: &[f64],
    u: &[f64],
    b: &[f64],
) -> Result<Vec<f64>> {
    let n = w.layout().neurons();
    check_len("pre_activation state", n, x.len())?;
    check_len("pre_activation bias", n, b.len())?;
    check_len("pre_activation input rows", n, w_in.rows())?;
    let mut drive = w.matvec(x)?;
    let projected = w_in.matvec(u)?;
    for ((d, p), bias) in drive.iter_mut().zip(&projected).zip(b) {
        *d += p + bias;
    }
    Ok(drive)
}

/// Exponential-Euler update of one neuron followed by the clamp. Returns the
/// new value and whether the clamp was active.
#[inline]
pub fn integrate(x: f64, h: f64, alpha_fast: f64, xi: f64) -> (f64, bool) {
    let raw = alpha_fast * x + (1.0 - alpha_fast) * h + xi;
    if raw > CLAMP {
        (CLAMP, true)
    } else if raw < -CLAMP {
        (-CLAMP, true)
    } else {
        (raw, false)
    }
}

/// Advances traces from the post-update state.
pub fn update_traces(state: &mut NetworkState, p: &DynamicsParams) {
    let gain = 1.0 - p.alpha_fast;
    for ((trc, a), &x) in state.trc.iter_mut().zip(state.a.iter_mut()).zip(&state.x) {
        *trc = p.alpha_elig * *trc + gain * x;
        *a = p.alpha_act * *a + (1.0 - p.alpha_act) * x.abs();
    }
}

/// One full step of the dynamics. Returns the `tanh` activations `h` used.
pub fn step(
    state: &mut NetworkState,
    w: &BlockSparseMatrix,
    w_in: &Matrix,
    u: &[f64],
    b: &[f64],
    p: &DynamicsParams,
) -> Result<Vec<f64>> {
    if state.step == u64::MAX {
        return Err(Error::InvalidParameter("step counter exhausted"));
    }
    let drive = pre_activation(w, w_in, &state.x, u, b)?;
    if let Some(neuron) = drive.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite { neuron });
    }
    let h: Vec<f64> = drive.iter().map(|&d| math::tanh(d)).collect();
    for (i, (x, &hi)) in state.x.iter_mut().zip(&h).enumerate() {
        let xi = noise_sample(state.noise_seed, state.step, i as u64, p.noise_sigma);
        *x = integrate(*x, hi, p.alpha_fast, xi).0;
    }
    update_traces(state, p);
    state.step += 1;
    Ok(h)
}

/// Jacobian of the one-step map, `α I + (1 − α) diag(1 − h²) W`.
pub fn one_step_jacobian(
    w: &BlockSparseMatrix,
    w_in: &Matrix,
    x: &[f64],
    u: &[f64],
    b: &[f64],
    p: &DynamicsParams,
) -> Result<Matrix> {
    let gain = jacobian_gain(w, w_in, x, u, b, p)?;
    let mut j = w.to_dense()?;
    for (r, g) in gain.iter().enumerate() {
        for v in j.row_mut(r) {
            *v *= g;
        }
        j[(r, r)] += p.alpha_fast;
    }
    Ok(j)
}

fn jacobian_gain(
    w: &BlockSparseMatrix,
    w_in: &Matrix,
    x: &[f64],
    u: &[f64],
    b: &[f64],
    p: &DynamicsParams,
) -> Result<Vec<f64>> {
    let drive = pre_activation(w, w_in, x, u, b)?;
    Ok(drive
        .iter()
        .map(|&d| {
            let h = math::tanh(d);
            (1.0 - p.alpha_fast) * (1.0 - h * h)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub radius: f64,
    pub iterations: usize,
    /// `false` when the estimate was still moving at the iteration cap.
    pub converged: bool,
}

/// Smallest iteration budget accepted by [`spectral_radius`].
pub const MIN_POWER_ITERS: usize = 50;

/// Spectral radius of the one-step Jacobian, matrix-free.
///
/// Runs two-vector orthogonal iteration and reads the radius off the 2×2
/// Rayleigh–Ritz matrix, which also resolves a dominant complex pair.
pub fn spectral_radius(
    w: &BlockSparseMatrix,
    w_in: &Matrix,
    x: &[f64],
    u: &[f64],
    b: &[f64],
    p: &DynamicsParams,
    iters: usize,
) -> Result<SpectralEstimate> {
    if iters < MIN_POWER_ITERS {
        return Err(Error::InvalidParameter("power iteration needs at least 50 iterations"));
    }
    let gain = jacobian_gain(w, w_in, x, u, b, p)?;
    let alpha = p.alpha_fast;
    let n = gain.len();
    let mut scratch = vec![0.0; n];
    let apply = |v: &[f64], out: &mut [f64], scratch: &mut [f64]| {
        w.matvec_into(v, scratch).expect("dimensions checked");
        for i in 0..n {
            out[i] = alpha * v[i] + gain[i] * scratch[i];
        }
    };
    if n == 1 {
        let mut out = [0.0];
        apply(&[1.0], &mut out, &mut scratch);
        return Ok(SpectralEstimate {
            radius: out[0].abs(),
            iterations: 1,
            converged: true,
        });
    }
    Ok(subspace_iteration(n, iters, |v, out| apply(v, out, &mut scratch)))
}

/// Two-vector orthogonal iteration for a generic linear operator.
pub fn subspace_iteration(
    n: usize,
    iters: usize,
    mut apply: impl FnMut(&[f64], &mut [f64]),
) -> SpectralEstimate {
    const TOL: f64 = 1e-9;
    const STABLE_ROUNDS: usize = 8;

    // fixed, non-degenerate starting block
    let mut q1: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * math::sin(1.3 * i as f64 + 0.1)).collect();
    let mut q2: Vec<f64> = (0..n).map(|i| math::cos(2.7 * i as f64 + 0.7)).collect();
    orthonormalize(&mut q1, &mut q2);
    let mut z1 = vec![0.0; n];
    let mut z2 = vec![0.0; n];
    let mut last = f64::NAN;
    let mut stable = 0;
    let mut radius = 0.0;
    for it in 1..=iters {
        apply(&q1, &mut z1);
        apply(&q2, &mut z2);
        let h11 = math::dot(&q1, &z1);
        let h12 = math::dot(&q1, &z2);
        let h21 = math::dot(&q2, &z1);
        let h22 = math::dot(&q2, &z2);
        radius = ritz_radius(h11, h12, h21, h22);
        if (radius - last).abs() <= TOL * radius.abs().max(1e-300) {
            stable += 1;
            if stable >= STABLE_ROUNDS {
                return SpectralEstimate {
                    radius,
                    iterations: it,
                    converged: true,
                };
            }
        } else {
            stable = 0;
        }
        last = radius;
        core::mem::swap(&mut q1, &mut z1);
        core::mem::swap(&mut q2, &mut z2);
        if !orthonormalize(&mut q1, &mut q2) {
            // invariant subspace of dimension < 2 reached; the Ritz value is exact
            return SpectralEstimate {
                radius,
                iterations: it,
                converged: true,
            };
        }
    }
    SpectralEstimate {
        radius,
        iterations: iters,
        converged: false,
    }
}

/// Largest eigenvalue modulus of `[[a, b], [c, d]]`.
fn ritz_radius(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let half_trace = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = half_trace * half_trace - det;
    if disc >= 0.0 {
        let root = math::sqrt(disc);
        (half_trace + root).abs().max((half_trace - root).abs())
    } else {
        math::sqrt(det)
    }
}

/// Gram–Schmidt on two vectors. Returns `false` if the pair collapsed.
fn orthonormalize(q1: &mut [f64], q2: &mut [f64]) -> bool {
    let n1 = math::norm(q1);
    if n1 == 0.0 || !n1.is_finite() {
        return false;
    }
    q1.iter_mut().for_each(|v| *v /= n1);
    for _ in 0..2 {
        let proj = math::dot(q1, q2);
        for (a, b) in q2.iter_mut().zip(q1.iter()) {
            *a -= proj * b;
        }
    }
    let n2 = math::norm(q2);
    if n2 <= 1e-300 || !n2.is_finite() {
        return false;
    }
    q2.iter_mut().for_each(|v| *v /= n2);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocksparse::BlockLayout;
    use approx::assert_relative_eq;

    fn params(sigma: f64) -> DynamicsParams {
        DynamicsParams::new(10.0, sigma).unwrap()
    }

    #[test]
    fn leak_ratios_and_alphas() {
        let p = params(0.0);
        assert_eq!(p.tau_elig, 100.0);
        assert_eq!(p.tau_act, 500_000.0);
        assert_relative_eq!(p.alpha_fast, (-0.1f64).exp(), max_relative = 1e-15);
        assert!(p.validate().is_ok());
        let mut bad = p;
        bad.tau_elig = 50.0;
        assert!(bad.validate().is_err());
        assert!(DynamicsParams::new(0.0, 0.0).is_err());
    }

    #[test]
    fn zero_network_stays_at_rest() {
        let layout = BlockLayout::new(2, 2, 1).unwrap();
        let w = BlockSparseMatrix::empty(layout);
        let w_in = Matrix::zeros(4, 1);
        let mut s = NetworkState::new(4, 1);
        step(&mut s, &w, &w_in, &[0.0], &[0.0; 4], &params(0.0)).unwrap();
        assert_eq!(s.x, vec![0.0; 4]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn tanh_bias_is_a_fixed_point() {
        let layout = BlockLayout::new(1, 3, 1).unwrap();
        let w = BlockSparseMatrix::empty(layout);
        let w_in = Matrix::zeros(3, 1);
        let b = [0.3, -0.7, 1.2];
        let mut s = NetworkState::new(3, 1);
        s.x = b.iter().map(|v: &f64| v.tanh()).collect();
        let before = s.x.clone();
        step(&mut s, &w, &w_in, &[0.0], &b, &params(0.0)).unwrap();
        for (a, e) in s.x.iter().zip(&before) {
            assert_relative_eq!(a, e, max_relative = 1e-15);
        }
    }

    #[test]
    fn scalar_decay_step() {
        // alpha_fast = 0.9, x = 0.5, pre-activation 0 -> 0.45
        let (x, clamped) = integrate(0.5, 0.0f64.tanh(), 0.9, 0.0);
        assert_relative_eq!(x, 0.45, max_relative = 1e-15);
        assert!(!clamped);
        assert_eq!(integrate(0.99, 1.0, 0.5, 0.5), (CLAMP, true));
    }

    #[test]
    fn trace_updates() {
        let mut p = params(0.0);
        let mut s = NetworkState::new(1, 0);
        update_traces(&mut s, &p);
        assert_eq!(s.trc[0], 0.0);

        // legacy fixture with tau_fast = 20, tau_elig = 200
        p.alpha_elig = 0.99501;
        p.alpha_fast = 0.95123;
        s.trc[0] = 1.0;
        s.x[0] = 1.0;
        update_traces(&mut s, &p);
        assert_relative_eq!(s.trc[0], 1.04378, max_relative = 1e-12);

        s.a[0] = 0.3;
        s.x[0] = -0.3;
        update_traces(&mut s, &p);
        assert_relative_eq!(s.a[0], 0.3, max_relative = 1e-12);
    }

    #[test]
    fn non_finite_drive_names_the_neuron() {
        let layout = BlockLayout::new(1, 3, 1).unwrap();
        let w = BlockSparseMatrix::empty(layout);
        let w_in = Matrix::zeros(3, 1);
        let mut s = NetworkState::new(3, 0);
        let err = step(&mut s, &w, &w_in, &[0.0], &[0.0, f64::NAN, 0.0], &params(0.0));
        assert_eq!(err, Err(Error::NonFinite { neuron: 1 }));
    }

    #[test]
    fn zero_weights_give_alpha_radius() {
        let layout = BlockLayout::new(4, 4, 2).unwrap();
        let w = BlockSparseMatrix::empty(layout);
        let w_in = Matrix::zeros(16, 1);
        let p = params(0.0);
        let est = spectral_radius(&w, &w_in, &[0.0; 16], &[0.0], &[0.0; 16], &p, 60).unwrap();
        assert_relative_eq!(est.radius, p.alpha_fast, max_relative = 1e-12);
        assert!(spectral_radius(&w, &w_in, &[0.0; 16], &[0.0], &[0.0; 16], &p, 10).is_err());
    }

    #[test]
    fn scaled_identity_radius() {
        let g = 0.6;
        let ell = 3;
        let layout = BlockLayout::new(2, ell, 1).unwrap();
        let mut w = BlockSparseMatrix::empty(layout).without_self_masking();
        let mut tile = vec![0.0; ell * ell];
        for d in 0..ell {
            tile[d * ell + d] = g;
        }
        w.insert_block(0, 0, &tile).unwrap();
        w.insert_block(1, 1, &tile).unwrap();
        let w_in = Matrix::zeros(6, 1);
        let p = params(0.0);
        let est = spectral_radius(&w, &w_in, &[0.0; 6], &[0.0], &[0.0; 6], &p, 50).unwrap();
        assert_relative_eq!(est.radius, p.alpha_fast + (1.0 - p.alpha_fast) * g, max_relative = 1e-12);
        let j = one_step_jacobian(&w, &w_in, &[0.0; 6], &[0.0], &[0.0; 6], &p).unwrap();
        assert_relative_eq!(j[(2, 2)], p.alpha_fast + (1.0 - p.alpha_fast) * g, max_relative = 1e-15);
        assert_eq!(j[(2, 3)], 0.0);
    }

    #[test]
    fn ritz_radius_handles_complex_pairs() {
        // rotation by 90 degrees scaled by 2: eigenvalues ±2i
        assert_relative_eq!(ritz_radius(0.0, -2.0, 2.0, 0.0), 2.0);
        assert_relative_eq!(ritz_radius(3.0, 0.0, 0.0, -5.0), 5.0);
    }
}
