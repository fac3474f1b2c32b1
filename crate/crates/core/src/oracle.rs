//! Exact-gradient references and the metrics that compare credit maps.
//!
//! All oracles differentiate the loss `L = Σ_t ½‖R x_t − y_t‖²` through the
//! exact discrete update, replaying the recorded noise, on a network whose
//! plasticity is frozen. A clamp that was active at a step contributes a zero
//! derivative.

use alloc::vec;
use alloc::vec::Vec;

use crate::blocksparse::DENSE_LIMIT;
use crate::dense::Matrix;
use crate::dynamics::{self, NetworkState};
use crate::error::{check_len, Error, Result};
use crate::learning;
use crate::math;
use crate::network::FrozenModel;
use crate::noise::noise_sample;

/// Longest trajectory accepted by the reverse-mode oracle.
pub const BPTT_MAX_STEPS: usize = 512;
/// Size guards for forward-mode propagation.
pub const EPROP_MAX_NEURONS: usize = 1024;
pub const EPROP_MAX_STEPS: usize = 64;

/// A frozen run: the starting state plus what happened at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x0: Vec<f64>,
    pub trc0: Vec<f64>,
    pub start_step: u64,
    pub noise_seed: u64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// `x_t` after each step.
    pub states: Vec<Vec<f64>>,
    /// `trc_t` after each step.
    pub traces: Vec<Vec<f64>>,
    /// Feedback error `W_fb δ_t` gated by `1 − x_t²`.
    pub gated_errors: Vec<Vec<f64>>,
    /// Oracle error `Rᵀ δ_t` gated by `1 − x_t²`.
    pub gated_targets: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Runs the frozen model from `state` and records every signal.
pub fn record(
    model: &FrozenModel,
    state: &NetworkState,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<Trajectory> {
    check_len("record targets", inputs.len(), targets.len())?;
    let mut s = state.clone();
    let mut traj = Trajectory {
        x0: s.x.clone(),
        trc0: s.trc.clone(),
        start_step: s.step,
        noise_seed: s.noise_seed,
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
        states: Vec::with_capacity(inputs.len()),
        traces: Vec::with_capacity(inputs.len()),
        gated_errors: Vec::with_capacity(inputs.len()),
        gated_targets: Vec::with_capacity(inputs.len()),
    };
    for (u, y) in inputs.iter().zip(targets) {
        dynamics::step(&mut s, &model.w, &model.w_in, u, &model.b, &model.params)?;
        let pred = model.r.matvec(&s.x)?;
        check_len("record target", pred.len(), y.len())?;
        let delta: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
        let eps = learning::feedback_project(&model.w_fb, &delta)?;
        let target = model.r.transpose_matvec(&delta)?;
        traj.gated_errors.push(learning::gated_error(&eps, &s.x)?);
        traj.gated_targets.push(learning::gated_error(&target, &s.x)?);
        traj.states.push(s.x.clone());
        traj.traces.push(s.trc.clone());
    }
    Ok(traj)
}

/// Forward pass quantities needed by the derivatives.
struct Forward {
    /// `x_0 … x_T`.
    xs: Vec<Vec<f64>>,
    /// `(1 − α)(1 − h_t²)` with zeros where the clamp was active, `t = 1 … T`.
    gains: Vec<Vec<f64>>,
    /// `1` where `x_t` was not clamped.
    open: Vec<Vec<f64>>,
    /// `Rᵀ(R x_t − y_t)`.
    direct: Vec<Vec<f64>>,
    loss: f64,
}

fn forward(model: &FrozenModel, wd: &Matrix, traj: &Trajectory) -> Result<Forward> {
    forward_with(model, traj, |x, u| {
        let mut drive = wd.matvec(x)?;
        let proj = model.w_in.matvec(u)?;
        for ((d, p), b) in drive.iter_mut().zip(&proj).zip(&model.b) {
            *d += p + b;
        }
        Ok(drive)
    })
}

/// Same arithmetic as [`forward`] through the block-sparse kernel.
fn forward_sparse(model: &FrozenModel, traj: &Trajectory) -> Result<Forward> {
    forward_with(model, traj, |x, u| {
        dynamics::pre_activation(&model.w, &model.w_in, x, u, &model.b)
    })
}

fn forward_with(
    model: &FrozenModel,
    traj: &Trajectory,
    mut drive_of: impl FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Forward> {
    let p = &model.params;
    let n = traj.x0.len();
    let mut x = traj.x0.clone();
    let mut f = Forward {
        xs: vec![x.clone()],
        gains: Vec::with_capacity(traj.len()),
        open: Vec::with_capacity(traj.len()),
        direct: Vec::with_capacity(traj.len()),
        loss: 0.0,
    };
    for (t, (u, y)) in traj.inputs.iter().zip(&traj.targets).enumerate() {
        let drive = drive_of(&x, u)?;
        let step = traj.start_step + t as u64;
        let mut gain = vec![0.0; n];
        let mut open = vec![0.0; n];
        for i in 0..n {
            let h = math::tanh(drive[i]);
            let xi = noise_sample(traj.noise_seed, step, i as u64, p.noise_sigma);
            let (next, clamped) = dynamics::integrate(x[i], h, p.alpha_fast, xi);
            x[i] = next;
            if !clamped {
                open[i] = 1.0;
                gain[i] = (1.0 - p.alpha_fast) * (1.0 - h * h);
            }
        }
        let pred = model.r.matvec(&x)?;
        let delta: Vec<f64> = pred.iter().zip(y).map(|(a, b)| a - b).collect();
        f.loss += 0.5 * math::norm_sq(&delta);
        f.direct.push(model.r.transpose_matvec(&delta)?);
        f.gains.push(gain);
        f.open.push(open);
        f.xs.push(x.clone());
    }
    Ok(f)
}

fn dense_weights(model: &FrozenModel, traj: &Trajectory) -> Result<Matrix> {
    let n = model.w.layout().neurons();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge {
            neurons: n,
            limit: DENSE_LIMIT,
        });
    }
    if traj.len() > BPTT_MAX_STEPS {
        return Err(Error::InvalidParameter("trajectory longer than the reverse-mode limit"));
    }
    check_len("trajectory state", n, traj.x0.len())?;
    model.w.to_dense()
}

/// Total loss of the frozen model replayed along `traj`, with dense weights
/// `wd` substituted for the recurrent matrix.
pub fn replay_loss(model: &FrozenModel, wd: &Matrix, traj: &Trajectory) -> Result<f64> {
    Ok(forward(model, wd, traj)?.loss)
}

/// States `x_1 … x_T` obtained by replaying `traj`.
pub fn replay_states(model: &FrozenModel, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let wd = dense_weights(model, traj)?;
    let mut xs = forward(model, &wd, traj)?.xs;
    xs.remove(0);
    Ok(xs)
}

/// Reverse sweep for the loss of steps `1 … last`, accumulating `(s, g_s)`
/// pairs where `g_s = ∂L/∂(W x_{s−1})` into `sink`.
fn backward(wd: &Matrix, f: &Forward, alpha: f64, last: usize, only_last: bool, mut sink: impl FnMut(usize, &[f64])) {
    let n = wd.rows();
    let mut lambda = vec![0.0; n];
    let mut g = vec![0.0; n];
    for s in (1..=last).rev() {
        if !only_last || s == last {
            for (l, d) in lambda.iter_mut().zip(&f.direct[s - 1]) {
                *l += d;
            }
        }
        let open = &f.open[s - 1];
        let gain = &f.gains[s - 1];
        for i in 0..n {
            g[i] = gain[i] * lambda[i];
        }
        sink(s, &g);
        let back = wd.transpose_matvec(&g).expect("square");
        for i in 0..n {
            lambda[i] = alpha * open[i] * lambda[i] + back[i];
        }
    }
}

/// Gradient of the total loss with respect to every recurrent weight,
/// dense `N × N` in `(post, pre)` orientation. Masked self-connections get 0.
pub fn bptt_gradient(model: &FrozenModel, traj: &Trajectory) -> Result<Matrix> {
    let wd = dense_weights(model, traj)?;
    let f = forward(model, &wd, traj)?;
    let n = wd.rows();
    let mut grad = Matrix::zeros(n, n);
    backward(&wd, &f, model.params.alpha_fast, traj.len(), false, |s, g| {
        let xp = &f.xs[s - 1];
        for (l, &gl) in g.iter().enumerate() {
            if gl != 0.0 {
                for (o, &xk) in grad.row_mut(l).iter_mut().zip(xp) {
                    *o += gl * xk;
                }
            }
        }
    });
    if model.w.masks_self_connections() {
        for i in 0..n {
            grad[(i, i)] = 0.0;
        }
    }
    Ok(grad)
}

/// Central finite-difference gradient of the total loss for the listed
/// `(post, pre)` entries.
pub fn finite_difference(
    model: &FrozenModel,
    traj: &Trajectory,
    entries: &[(usize, usize)],
    h: f64,
) -> Result<Vec<f64>> {
    let mut wd = dense_weights(model, traj)?;
    let mut out = Vec::with_capacity(entries.len());
    for &(l, k) in entries {
        let orig = wd[(l, k)];
        wd[(l, k)] = orig + h;
        let plus = replay_loss(model, &wd, traj)?;
        wd[(l, k)] = orig - h;
        let minus = replay_loss(model, &wd, traj)?;
        wd[(l, k)] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Sums a dense `(post, pre)` matrix over tiles into a `[pre][post]` map,
/// skipping masked self-connections.
pub fn block_sums(m: &Matrix, blocks: usize, ell: usize, mask_self: bool) -> Matrix {
    let mut out = Matrix::zeros(blocks, blocks);
    for l in 0..m.rows() {
        for k in 0..m.cols() {
            if mask_self && l == k {
                continue;
            }
            out[(k / ell, l / ell)] += m[(l, k)];
        }
    }
    out
}

/// Oracle block credit `G[pre][post]`: the time average over `t` of
/// `|Σ_{k∈pre, l∈post} ∂ℓ_t/∂W_lk|`, where `ℓ_t` is the loss at step `t`
/// differentiated through the whole history before it.
pub fn bptt_block_gradients(model: &FrozenModel, traj: &Trajectory) -> Result<Matrix> {
    let wd = dense_weights(model, traj)?;
    let f = forward(model, &wd, traj)?;
    let layout = *model.w.layout();
    let b = layout.blocks();
    let ell = layout.block_size();
    let mask = model.w.masks_self_connections();
    let t_len = traj.len();
    let mut acc = Matrix::zeros(b, b);
    if t_len == 0 {
        return Ok(acc);
    }
    let xsum: Vec<Vec<f64>> = f.xs.iter().map(|x| block_sum_vec(x, b, ell)).collect();
    let mut step_map = Matrix::zeros(b, b);
    for t in 1..=t_len {
        step_map.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        backward(&wd, &f, model.params.alpha_fast, t, true, |s, g| {
            let gs = block_sum_vec(g, b, ell);
            let xp = &xsum[s - 1];
            for pre in 0..b {
                for post in 0..b {
                    step_map[(pre, post)] += xp[pre] * gs[post];
                }
            }
            if mask {
                // remove the self-connection terms the block products included
                let x = &f.xs[s - 1];
                for (i, gi) in g.iter().enumerate() {
                    step_map[(i / ell, i / ell)] -= gi * x[i];
                }
            }
        });
        for (a, v) in acc.as_mut_slice().iter_mut().zip(step_map.as_slice()) {
            *a += v.abs();
        }
    }
    let scale = 1.0 / t_len as f64;
    acc.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    Ok(acc)
}

fn block_sum_vec(v: &[f64], blocks: usize, ell: usize) -> Vec<f64> {
    (0..blocks).map(|m| v[m * ell..(m + 1) * ell].iter().sum()).collect()
}

/// Local block credit `H[pre][post]`: time average of `|trc̄_t ε̄_tᵀ|` using
/// the feedback error the trophic map sees.
pub fn local_heuristic(traj: &Trajectory, blocks: usize, ell: usize) -> Result<Matrix> {
    heuristic_from(&traj.traces, &traj.gated_errors, blocks, ell)
}

/// Same as [`local_heuristic`] with the oracle error `Rᵀδ` in place of the
/// learned feedback.
pub fn local_heuristic_oracle_error(traj: &Trajectory, blocks: usize, ell: usize) -> Result<Matrix> {
    heuristic_from(&traj.traces, &traj.gated_targets, blocks, ell)
}

fn heuristic_from(traces: &[Vec<f64>], errors: &[Vec<f64>], blocks: usize, ell: usize) -> Result<Matrix> {
    let layout = crate::blocksparse::BlockLayout::new(blocks, ell, blocks)?;
    let mut acc = Matrix::zeros(blocks, blocks);
    if traces.is_empty() {
        return Ok(acc);
    }
    for (trc, e) in traces.iter().zip(errors) {
        let inc = crate::structure::trophic_increment(trc, e, &layout)?;
        acc.add_scaled(&inc, 1.0)?;
    }
    let scale = 1.0 / traces.len() as f64;
    acc.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    Ok(acc)
}

/// Exact forward-mode (real-time recurrent) gradient of the total loss for
/// every existing synapse, in the order of `model.w.synapses()`.
pub fn forward_eprop_exact(model: &FrozenModel, traj: &Trajectory) -> Result<Vec<f64>> {
    let n = model.w.layout().neurons();
    if n > EPROP_MAX_NEURONS {
        return Err(Error::TooLarge {
            neurons: n,
            limit: EPROP_MAX_NEURONS,
        });
    }
    if traj.len() > EPROP_MAX_STEPS {
        return Err(Error::InvalidParameter("trajectory longer than the forward-mode limit"));
    }
    check_len("trajectory state", n, traj.x0.len())?;
    let f = forward_sparse(model, traj)?;
    let syn = model.w.synapses();
    let alpha = model.params.alpha_fast;
    let mut p = vec![0.0; syn.len() * n];
    let mut grad = vec![0.0; syn.len()];
    let mut wp = vec![0.0; n];
    for t in 1..=traj.len() {
        let gain = &f.gains[t - 1];
        let open = &f.open[t - 1];
        let xp = &f.xs[t - 1];
        let direct = &f.direct[t - 1];
        for (s, &(l, k)) in syn.iter().enumerate() {
            let col = &mut p[s * n..(s + 1) * n];
            model.w.matvec_into(col, &mut wp)?;
            wp[l] += xp[k];
            let mut dot = 0.0;
            for i in 0..n {
                col[i] = open[i] * (alpha * col[i] + gain[i] * wp[i]);
                dot += direct[i] * col[i];
            }
            grad[s] += dot;
        }
    }
    Ok(grad)
}

/// Per-synapse local estimates built from eligibility-rate traces.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalEstimates {
    /// `Σ_t (∂ℓ_t/∂x_l)(1 − x_l²) trc_k`.
    pub diagonal: Vec<f64>,
    /// `Σ_t (∂ℓ_t/∂x_l) trc_k`, no Jacobian factor.
    pub ema_only: Vec<f64>,
}

/// Diagonal-Jacobian approximation for every existing synapse, in the order
/// of `synapses`. The trace paired with step `t` is the one from before the
/// step, so a single step uses exactly the presynaptic history that step saw.
pub fn diagonal_approx(model: &FrozenModel, traj: &Trajectory, synapses: &[(usize, usize)]) -> Result<DiagonalEstimates> {
    let mut diagonal = vec![0.0; synapses.len()];
    let mut ema_only = vec![0.0; synapses.len()];
    let mut prev_trc = &traj.trc0;
    for t in 0..traj.len() {
        let x = &traj.states[t];
        let pred = model.r.matvec(x)?;
        let delta: Vec<f64> = pred.iter().zip(&traj.targets[t]).map(|(a, b)| a - b).collect();
        let dl = model.r.transpose_matvec(&delta)?;
        for (s, &(l, k)) in synapses.iter().enumerate() {
            let e = dl[l] * prev_trc[k];
            ema_only[s] += e;
            diagonal[s] += e * (1.0 - x[l] * x[l]);
        }
        prev_trc = &traj.traces[t];
    }
    Ok(DiagonalEstimates { diagonal, ema_only })
}

/// Agreement between an estimate `a` and a reference `b`. Metrics that are
/// undefined for the inputs (zero variance, no positives) are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CreditComparison {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub cosine: Option<f64>,
    pub auroc: Option<f64>,
    pub precision_at_k: Option<f64>,
}

/// Compares two flattened credit maps. Correlations use the signed values;
/// AUROC and precision rank `|a|` against the top `k_fraction` of `|b|`.
pub fn compare(a: &[f64], b: &[f64], k_fraction: f64) -> Result<CreditComparison> {
    check_len("compare", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("credit maps"));
    }
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::InvalidParameter("k_fraction must lie in (0, 1]"));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let (auroc, precision_at_k) = ranking_metrics(a, b, k_fraction);
    Ok(CreditComparison {
        pearson: pearson(a, b),
        spearman: pearson(&ra, &rb),
        cosine: math::cosine(a, b),
        auroc,
        precision_at_k,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let ma = math::mean(a);
    let mb = math::mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / math::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Indices of the `k` largest `|v|`, ties broken by index.
fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

fn ranking_metrics(a: &[f64], b: &[f64], k_fraction: f64) -> (Option<f64>, Option<f64>) {
    let n = a.len();
    let k = libm::ceil(k_fraction * n as f64) as usize;
    let k = k.clamp(1, n);
    let mut positive = vec![false; n];
    for i in top_k(b, k) {
        positive[i] = true;
    }
    let precision = top_k(a, k).iter().filter(|&&i| positive[i]).count() as f64 / k as f64;
    let n_pos = k;
    let n_neg = n - k;
    if n_neg == 0 {
        return (None, Some(precision));
    }
    let scores: Vec<f64> = a.iter().map(|v| v.abs()).collect();
    let r = ranks(&scores);
    let pos_rank_sum: f64 = r.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    (Some(u / (n_pos * n_neg) as f64), Some(precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocksparse::{BlockLayout, BlockSparseMatrix};
    use crate::dynamics::DynamicsParams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identical_and_opposite_maps() {
        let a = [0.3, -1.0, 2.0, 0.7, 5.0, -0.2, 1.1, 0.0, 0.4, 3.0];
        let c = compare(&a, &a, 0.1).unwrap();
        assert_relative_eq!(c.pearson.unwrap(), 1.0);
        assert_relative_eq!(c.spearman.unwrap(), 1.0);
        assert_relative_eq!(c.cosine.unwrap(), 1.0);
        assert_relative_eq!(c.auroc.unwrap(), 1.0);
        assert_relative_eq!(c.precision_at_k.unwrap(), 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_relative_eq!(compare(&a, &neg, 0.1).unwrap().pearson.unwrap(), -1.0);
    }

    #[test]
    fn spearman_hand_case() {
        // rank differences (−1, 1, 0, −1, 1): Σd² = 4, 1 − 6·4/(5·24) = 0.8
        let c = compare(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 3.0, 5.0, 4.0], 0.2).unwrap();
        assert_relative_eq!(c.spearman.unwrap(), 0.8, max_relative = 1e-12);
        // differences (−2, 1, 1, 0, 0): Σd² = 6 gives 0.7
        let d = compare(&[1.0, 2.0, 3.0, 4.0, 5.0], &[3.0, 1.0, 2.0, 4.0, 5.0], 0.2).unwrap();
        assert_relative_eq!(d.spearman.unwrap(), 0.7, max_relative = 1e-12);
    }

    #[test]
    fn undefined_metrics_are_flagged() {
        let c = compare(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0], 0.5).unwrap();
        assert!(c.pearson.is_none());
        let z = compare(&[0.0, 0.0], &[1.0, 2.0], 1.0).unwrap();
        assert!(z.cosine.is_none());
        assert!(z.auroc.is_none());
    }

    #[test]
    fn average_ranks() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn auroc_hand_case() {
        // positives: b's top 2 = indices 0 and 1; a ranks them 4th and 2nd of 4
        let a = [0.3, 0.1, 0.4, 0.05];
        let b = [9.0, 8.0, 1.0, 0.5];
        let c = compare(&a, &b, 0.5).unwrap();
        // pairs (pos, neg): (0.3 vs 0.4 lose, 0.3 vs 0.05 win, 0.1 vs 0.4 lose, 0.1 vs 0.05 win)
        assert_relative_eq!(c.auroc.unwrap(), 0.5);
        assert_relative_eq!(c.precision_at_k.unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_equivariant(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 4..40),
            rot in 0usize..40,
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let n = a.len();
            // permutation that preserves the index tie-break order is a rotation
            // only when no |b| ties exist, which holds almost surely here
            let perm: Vec<usize> = (0..n).map(|i| (i * 7 + rot) % n).collect();
            prop_assume!(gcd(7, n) == 1);
            let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
            let c1 = compare(&a, &b, 0.25).unwrap();
            let c2 = compare(&pa, &pb, 0.25).unwrap();
            let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-9,
                (None, None) => true,
                _ => false,
            };
            prop_assert!(close(c1.pearson, c2.pearson));
            prop_assert!(close(c1.spearman, c2.spearman));
            prop_assert!(close(c1.cosine, c2.cosine));
            prop_assert!(close(c1.auroc, c2.auroc));
            prop_assert!(close(c1.precision_at_k, c2.precision_at_k));
        }
    }

    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }

    fn fixture(blocks: usize, ell: usize, steps: usize, sigma: f64) -> (FrozenModel, Trajectory) {
        let layout = BlockLayout::new(blocks, ell, blocks).unwrap();
        let n = layout.neurons();
        let mut w = BlockSparseMatrix::empty(layout);
        let mut seed = 11u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for r in 0..blocks {
            for c in 0..blocks {
                let tile: Vec<f64> = (0..ell * ell).map(|_| 0.9 * next() / (n as f64).sqrt()).collect();
                w.insert_block(r, c, &tile).unwrap();
            }
        }
        let w_in = Matrix::from_fn(n, 1, |_, _| next());
        let b: Vec<f64> = (0..n).map(|_| 0.3 * next()).collect();
        let r = Matrix::from_fn(1, n, |_, _| next());
        let w_fb = Matrix::from_fn(n, 1, |_, _| next());
        let params = DynamicsParams::new(3.0, sigma).unwrap();
        let model = FrozenModel { w, w_in, b, r, w_fb, params };
        let mut state = NetworkState::new(n, 5);
        state.x = (0..n).map(|_| 0.5 * next()).collect();
        let inputs: Vec<Vec<f64>> = (0..steps).map(|t| vec![(t as f64 * 0.7).sin()]).collect();
        let targets: Vec<Vec<f64>> = (0..steps).map(|t| vec![(t as f64 * 0.7 + 0.7).sin()]).collect();
        let traj = record(&model, &state, &inputs, &targets).unwrap();
        (model, traj)
    }

    #[test]
    fn replay_matches_recorded_noise() {
        let (model, traj) = fixture(2, 4, 10, 0.01);
        let xs = replay_states(&model, &traj).unwrap();
        for (a, b) in xs.iter().flatten().zip(traj.states.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let (model, traj) = fixture(2, 4, 10, 0.01);
        let g = bptt_gradient(&model, &traj).unwrap();
        let entries = model.w.synapses();
        let fd = finite_difference(&model, &traj, &entries, 1e-5).unwrap();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (&(l, k), f) in entries.iter().zip(&fd) {
            assert!((g[(l, k)] - f).abs() <= 1e-6 * scale, "{} vs {}", g[(l, k)], f);
        }
    }

    #[test]
    fn two_neuron_chain() {
        // one block of two neurons, two steps, hand-checkable by differences
        let (model, traj) = fixture(1, 2, 2, 0.0);
        let g = bptt_gradient(&model, &traj).unwrap();
        let fd = finite_difference(&model, &traj, &[(0, 1), (1, 0)], 1e-5).unwrap();
        assert_relative_eq!(g[(0, 1)], fd[0], max_relative = 1e-6);
        assert_relative_eq!(g[(1, 0)], fd[1], max_relative = 1e-6);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn forward_mode_equals_reverse_mode() {
        let (model, traj) = fixture(3, 4, 12, 0.01);
        let g = bptt_gradient(&model, &traj).unwrap();
        let e = forward_eprop_exact(&model, &traj).unwrap();
        let scale = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (&(l, k), v) in model.w.synapses().iter().zip(&e) {
            assert!((g[(l, k)] - v).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn block_gradient_average_of_single_step() {
        let (model, traj) = fixture(2, 3, 1, 0.0);
        let g = bptt_gradient(&model, &traj).unwrap();
        let sums = block_sums(&g, 2, 3, true);
        let blocks = bptt_block_gradients(&model, &traj).unwrap();
        for (a, b) in blocks.as_slice().iter().zip(sums.as_slice()) {
            assert_relative_eq!(*a, b.abs(), max_relative = 1e-10, epsilon = 1e-15);
        }
    }

    #[test]
    fn block_gradients_match_per_step_differences() {
        let (model, traj) = fixture(2, 3, 4, 0.01);
        let blocks = bptt_block_gradients(&model, &traj).unwrap();
        // brute force: per-step losses via truncated trajectories and FD
        let n = 6;
        let all: Vec<(usize, usize)> = (0..n).flat_map(|l| (0..n).map(move |k| (l, k))).filter(|(l, k)| l != k).collect();
        let mut expect = Matrix::zeros(2, 2);
        let mut prev = vec![0.0; all.len()];
        for t in 1..=traj.len() {
            let mut cut = traj.clone();
            cut.inputs.truncate(t);
            cut.targets.truncate(t);
            let total = finite_difference(&model, &cut, &all, 1e-5).unwrap();
            let mut step = Matrix::zeros(2, 2);
            for (i, &(l, k)) in all.iter().enumerate() {
                step[(k / 3, l / 3)] += total[i] - prev[i];
            }
            prev = total;
            for (a, v) in expect.as_mut_slice().iter_mut().zip(step.as_slice()) {
                *a += v.abs() / traj.len() as f64;
            }
        }
        for (a, b) in blocks.as_slice().iter().zip(expect.as_slice()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn perfect_prediction_has_no_gradient() {
        let (mut model, traj) = fixture(2, 2, 1, 0.0);
        let mut t = traj.clone();
        model.r = Matrix::zeros(1, 4);
        t.targets = vec![vec![0.0]];
        assert!(bptt_block_gradients(&model, &t).unwrap().as_slice().iter().all(|v| *v == 0.0));
        assert!(forward_eprop_exact(&model, &t).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_synapse_single_step() {
        let layout = BlockLayout::new(2, 1, 2).unwrap();
        let mut w = BlockSparseMatrix::empty(layout);
        w.insert_block(1, 0, &[0.4]).unwrap();
        let params = DynamicsParams::new(2.0, 0.0).unwrap();
        let model = FrozenModel {
            w,
            w_in: Matrix::zeros(2, 1),
            b: vec![0.0, 0.1],
            r: Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap(),
            w_fb: Matrix::zeros(2, 1),
            params,
        };
        let mut state = NetworkState::new(2, 0);
        state.x = vec![0.6, 0.2];
        let traj = record(&model, &state, &[vec![0.0]], &[vec![0.5]]).unwrap();
        let e = forward_eprop_exact(&model, &traj).unwrap();
        let h = (0.4f64 * 0.6 + 0.1).tanh();
        let x1 = params.alpha_fast * 0.2 + (1.0 - params.alpha_fast) * h;
        let expect = (x1 - 0.5) * (1.0 - params.alpha_fast) * (1.0 - h * h) * 0.6;
        assert_relative_eq!(e[0], expect, max_relative = 1e-12);
    }

    #[test]
    fn heuristic_single_step_is_trophic_increment() {
        let (_, traj) = fixture(2, 3, 1, 0.01);
        let h = local_heuristic(&traj, 2, 3).unwrap();
        let layout = BlockLayout::new(2, 3, 2).unwrap();
        let inc = crate::structure::trophic_increment(&traj.traces[0], &traj.gated_errors[0], &layout).unwrap();
        assert_eq!(h, inc);
    }

    #[test]
    fn heuristic_is_mean_of_increments() {
        let (_, traj) = fixture(2, 3, 7, 0.01);
        let h = local_heuristic(&traj, 2, 3).unwrap();
        let layout = BlockLayout::new(2, 3, 2).unwrap();
        let mut tfm = crate::structure::TrophicFieldMap::new(2, 0.0).unwrap();
        let mut mean = Matrix::zeros(2, 2);
        for t in 0..7 {
            let inc = crate::structure::trophic_increment(&traj.traces[t], &traj.gated_errors[t], &layout).unwrap();
            mean.add_scaled(&inc, 1.0 / 7.0).unwrap();
            tfm.alpha = 1.0 / (t + 1) as f64;
            tfm.update(&traj.traces[t], &traj.gated_errors[t], &layout).unwrap();
        }
        for ((a, b), c) in h.as_slice().iter().zip(mean.as_slice()).zip(tfm.t.as_slice()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
            assert_relative_eq!(*a, *c, max_relative = 1e-12);
        }
    }

    #[test]
    fn diagonal_equals_exact_at_a_fixed_point_single_step() {
        // x0 is a fixed point of the noiseless map and trc0 ∝ x0, so the
        // one-step exact sensitivity and the diagonal estimate coincide
        let layout = BlockLayout::new(2, 2, 2).unwrap();
        let mut w = BlockSparseMatrix::empty(layout);
        w.insert_block(0, 1, &[0.3, -0.2, 0.5, 0.1]).unwrap();
        w.insert_block(1, 0, &[-0.4, 0.2, 0.1, 0.6]).unwrap();
        w.insert_block(1, 1, &[0.0, 0.3, -0.5, 0.0]).unwrap();
        let x0 = vec![0.3, -0.5, 0.2, 0.6];
        let drive = w.matvec(&x0).unwrap();
        let b: Vec<f64> = x0.iter().zip(&drive).map(|(x, d)| x.atanh() - d).collect();
        let params = DynamicsParams::new(4.0, 0.0).unwrap();
        let model = FrozenModel {
            w,
            w_in: Matrix::zeros(4, 1),
            b,
            r: Matrix::from_vec(1, 4, vec![0.5, -1.0, 0.25, 0.8]).unwrap(),
            w_fb: Matrix::zeros(4, 1),
            params,
        };
        let mut state = NetworkState::new(4, 0);
        state.x = x0.clone();
        state.trc = x0.iter().map(|v| (1.0 - params.alpha_fast) * v).collect();
        let traj = record(&model, &state, &[vec![0.0]], &[vec![0.7]]).unwrap();
        let syn = model.w.synapses();
        let exact = forward_eprop_exact(&model, &traj).unwrap();
        let approx = diagonal_approx(&model, &traj, &syn).unwrap();
        for (e, d) in exact.iter().zip(&approx.diagonal) {
            assert_relative_eq!(*e, *d, max_relative = 1e-9, epsilon = 1e-15);
        }
        for (s, &(l, _)) in syn.iter().enumerate() {
            let x = traj.states[0][l];
            assert_relative_eq!(approx.diagonal[s], approx.ema_only[s] * (1.0 - x * x), max_relative = 1e-12);
        }
    }

    #[test]
    fn saturated_post_neuron_has_no_diagonal_credit() {
        let (model, mut traj) = fixture(2, 2, 1, 0.0);
        traj.states[0][1] = 1.0;
        let syn = vec![(1, 0), (1, 2)];
        let d = diagonal_approx(&model, &traj, &syn).unwrap();
        assert_eq!(d.diagonal, vec![0.0, 0.0]);
    }

    #[test]
    fn size_guards() {
        let (model, mut traj) = fixture(1, 2, 1, 0.0);
        traj.inputs = vec![vec![0.0]; EPROP_MAX_STEPS + 1];
        traj.targets = traj.inputs.clone();
        assert!(forward_eprop_exact(&model, &traj).is_err());
    }
}
