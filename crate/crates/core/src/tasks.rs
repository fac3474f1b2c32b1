//! Deterministic task signals for the prediction experiments. Every stream is
//! bounded in `[−1, 1]` and a pure function of its parameters and seed.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MackeyGlass {
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n: f64,
    /// Integration step.
    pub dt: f64,
    /// Time between emitted samples.
    pub subsample: f64,
    /// Constant history value.
    pub history: f64,
    /// Samples discarded before output; also the window for the rescale.
    pub warmup: usize,
}

impl MackeyGlass {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            beta: 0.2,
            gamma: 0.1,
            n: 10.0,
            dt: 0.1,
            subsample: 1.0,
            history: 1.2,
            warmup: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskSpec {
    MackeyGlass(MackeyGlass),
    Sine { period: f64 },
    Square { period: f64 },
    RandomWalk { sigma_step: f64 },
    WhiteNoise { amplitude: f64 },
}

impl TaskSpec {
    /// `length` samples of the stream under `seed`.
    pub fn generate(&self, length: usize, seed: u64) -> Result<Vec<f64>> {
        match *self {
            TaskSpec::MackeyGlass(p) => mackey_glass(&p, length, seed),
            TaskSpec::Sine { period } => periodic(Waveform::Sine, period, length),
            TaskSpec::Square { period } => periodic(Waveform::Square, period, length),
            TaskSpec::RandomWalk { sigma_step } => random_walk(sigma_step, length, seed),
            TaskSpec::WhiteNoise { amplitude } => white_noise(amplitude, length, seed),
        }
    }
}

/// Raw Mackey–Glass samples (no warmup removal, no rescale), starting at
/// `t = 0` with a constant history.
pub fn mackey_glass_raw(p: &MackeyGlass, samples: usize) -> Result<Vec<f64>> {
    if !(p.tau > 0.0) {
        return Err(Error::InvalidParameter("Mackey-Glass delay must be positive"));
    }
    if !(p.dt > 0.0) || !(p.subsample >= p.dt) {
        return Err(Error::InvalidParameter("Mackey-Glass needs 0 < dt <= subsample"));
    }
    let per_sample = libm::round(p.subsample / p.dt) as usize;
    let lag = p.tau / p.dt;
    let total = samples * per_sample + 1;
    // grid values z(k dt); negative indices read the constant history
    let mut z: Vec<f64> = Vec::with_capacity(total);
    z.push(p.history);
    let at = |z: &[f64], idx: f64| -> f64 {
        if idx <= 0.0 {
            return if idx == 0.0 { z[0] } else { p.history };
        }
        let lo = libm::floor(idx) as usize;
        let frac = idx - lo as f64;
        if frac == 0.0 || lo + 1 >= z.len() {
            z[lo.min(z.len() - 1)]
        } else {
            z[lo] + frac * (z[lo + 1] - z[lo])
        }
    };
    let f = |x: f64, xd: f64| p.beta * xd / (1.0 + math::powf(xd, p.n)) - p.gamma * x;
    let mut out = Vec::with_capacity(samples);
    out.push(p.history);
    let mut k = 0usize;
    while out.len() < samples {
        let x = z[k];
        let base = k as f64 - lag;
        let d0 = at(&z, base);
        let dh = at(&z, base + 0.5);
        let d1 = at(&z, base + 1.0);
        let k1 = f(x, d0);
        let k2 = f(x + 0.5 * p.dt * k1, dh);
        let k3 = f(x + 0.5 * p.dt * k2, dh);
        let k4 = f(x + p.dt * k3, d1);
        z.push(x + p.dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
        k += 1;
        if k.is_multiple_of(per_sample) {
            out.push(z[k]);
        }
    }
    Ok(out)
}

/// Mackey–Glass stream rescaled to `[−1, 1]` by the warmup range.
///
/// The seed selects the offset into the attractor: `seed mod 1000` further
/// samples are skipped after the warmup.
pub fn mackey_glass(p: &MackeyGlass, length: usize, seed: u64) -> Result<Vec<f64>> {
    let skip = (seed % 1000) as usize;
    let raw = mackey_glass_raw(p, p.warmup + skip + length)?;
    let window = if p.warmup > 0 { &raw[..p.warmup] } else { &raw[..] };
    let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(raw[p.warmup + skip..]
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (2.0 * (v - lo) / span - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Waveform {
    Sine,
    Square,
}

/// `sin(2π t / period)` or a ±1 square wave that is `+1` for the first half
/// of each period.
pub fn periodic(kind: Waveform, period: f64, length: usize) -> Result<Vec<f64>> {
    if !(period > 0.0) {
        return Err(Error::InvalidParameter("period must be positive"));
    }
    Ok((0..length)
        .map(|t| {
            let t = t as f64;
            match kind {
                Waveform::Sine => math::sin(2.0 * core::f64::consts::PI * t / period),
                Waveform::Square => {
                    let phase = t - period * libm::floor(t / period);
                    if phase < period / 2.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            }
        })
        .collect())
}

/// Gaussian random walk from 0, reflected at ±1.
pub fn random_walk(sigma_step: f64, length: usize, seed: u64) -> Result<Vec<f64>> {
    if !(sigma_step >= 0.0) || !sigma_step.is_finite() {
        return Err(Error::InvalidParameter("sigma_step must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: f64 = 0.0;
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        out.push(x);
        let z: f64 = StandardNormal.sample(&mut rng);
        x += sigma_step * z;
        while x.abs() > 1.0 {
            x = if x > 1.0 { 2.0 - x } else { -2.0 - x };
        }
    }
    Ok(out)
}

/// Independent uniform samples on `[−amplitude, amplitude]`.
pub fn white_noise(amplitude: f64, length: usize, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&amplitude) {
        return Err(Error::InvalidParameter("amplitude must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("finite bounds");
    Ok((0..length).map(|_| amplitude * uniform.sample(&mut rng)).collect())
}

/// `y_t = s_{t−d}`, zero before the first delayed sample exists.
pub fn delay(s: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    if d < s.len() {
        out[d..].copy_from_slice(&s[..s.len() - d]);
    }
    out
}

/// Input/target pairs for recalling the input `d` steps back.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedRecall {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    /// First index whose target is a real past input.
    pub valid_from: usize,
}

pub fn delayed_recall(source: &[f64], d: usize) -> DelayedRecall {
    DelayedRecall {
        inputs: source.to_vec(),
        targets: delay(source, d),
        valid_from: d.min(source.len()),
    }
}

/// One-step-ahead pairs `(u_t, y_t = u_{t+1})`.
pub fn one_step_ahead(s: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if s.len() < 2 {
        return (Vec::new(), Vec::new());
    }
    (s[..s.len() - 1].to_vec(), s[1..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub spec: TaskSpec,
    pub duration: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub samples: Vec<f64>,
    /// Indices where a new segment starts (the first segment is implicit).
    pub markers: Vec<usize>,
}

pub fn schedule(segments: &[Segment]) -> Result<Schedule> {
    let mut samples = Vec::new();
    let mut markers = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            markers.push(samples.len());
        }
        samples.extend(seg.spec.generate(seg.duration, seg.seed)?);
    }
    Ok(Schedule { samples, markers })
}

/// Root-mean-square error divided by the standard deviation of the target.
pub fn nrmse(prediction: &[f64], target: &[f64]) -> Option<f64> {
    let sd = math::sqrt(variance(target)?);
    if sd == 0.0 || prediction.len() != target.len() {
        return None;
    }
    Some(math::sqrt(mse(prediction, target)) / sd)
}

pub fn mse(prediction: &[f64], target: &[f64]) -> f64 {
    let n = prediction.len().min(target.len());
    if n == 0 {
        return 0.0;
    }
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(prediction: &[f64], target: &[f64]) -> Option<f64> {
    let var = variance(target)?;
    if var == 0.0 || prediction.len() != target.len() {
        return None;
    }
    Some(1.0 - mse(prediction, target) / var)
}

/// Population variance.
pub fn variance(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let m = math::mean(v);
    Some(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
}
