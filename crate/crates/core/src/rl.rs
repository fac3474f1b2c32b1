//! Reinforcement learning on the plastic network: a minimal lander
//! environment, TD(0) errors, the costate target, GAE advantages and a
//! softmax policy readout.
//!
//! The value function is the network's ordinary readout, trained by the same
//! NLMS rule as prediction readouts with output error `δ = −rpe`. The feedback
//! pathway therefore aligns with `Rᵀδ = −rpe·R_Vᵀ`, the costate target up to
//! the sign convention of `δ`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::Matrix;
use crate::error::{check_len, Error, Result};
use crate::learning;
use crate::math;
use crate::network::Network;

pub const OBS_DIM: usize = 8;
pub const ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Idle = 0,
    Left = 1,
    Main = 2,
    Right = 3,
}

impl Action {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Action::Idle),
            1 => Some(Action::Left),
            2 => Some(Action::Main),
            3 => Some(Action::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanderParams {
    pub gravity: f64,
    /// Acceleration of the main engine along the body axis.
    pub main_accel: f64,
    /// Lateral acceleration of a side engine.
    pub side_accel: f64,
    /// Angular acceleration of a side engine.
    pub turn_accel: f64,
    pub dt: f64,
    pub step_cap: usize,
    pub start_height: f64,
    /// Initial horizontal offset and velocity are drawn from ± these.
    pub start_spread: f64,
    pub start_speed: f64,
    pub pad_half_width: f64,
    /// Largest touchdown speed counted as a landing.
    pub safe_speed: f64,
    pub safe_angle: f64,
    pub main_fuel: f64,
    pub side_fuel: f64,
}

impl Default for LanderParams {
    fn default() -> Self {
        Self {
            gravity: 1.0,
            main_accel: 2.0,
            side_accel: 0.6,
            turn_accel: 1.0,
            dt: 0.05,
            step_cap: 400,
            start_height: 1.4,
            start_spread: 0.4,
            start_speed: 0.2,
            pad_half_width: 0.25,
            safe_speed: 0.5,
            safe_angle: 0.3,
            main_fuel: 0.3,
            side_fuel: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Landed,
    Crashed,
    OutOfBounds,
    TimedOut,
}

/// Point-mass lander over a flat pad at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LanderEnv {
    pub params: LanderParams,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub angle: f64,
    pub omega: f64,
    pub legs: [bool; 2],
    pub steps: usize,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub done: bool,
}

impl LanderEnv {
    pub fn new(params: LanderParams) -> Self {
        Self {
            params,
            x: 0.0,
            y: params.start_height,
            vx: 0.0,
            vy: 0.0,
            angle: 0.0,
            omega: 0.0,
            legs: [false; 2],
            steps: 0,
            outcome: None,
        }
    }

    pub fn reset(&mut self, seed: u64) -> [f64; OBS_DIM] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.params;
        let mut sym = |s: f64| (2.0 * rng.random::<f64>() - 1.0) * s;
        self.x = sym(p.start_spread);
        self.y = p.start_height;
        self.vx = sym(p.start_speed);
        self.vy = 0.0;
        self.angle = sym(0.1);
        self.omega = 0.0;
        self.legs = [false; 2];
        self.steps = 0;
        self.outcome = None;
        self.observe()
    }

    pub fn observe(&self) -> [f64; OBS_DIM] {
        let leg = |b: bool| if b { 1.0 } else { 0.0 };
        [
            self.x,
            self.y,
            self.vx,
            self.vy,
            self.angle,
            self.omega,
            leg(self.legs[0]),
            leg(self.legs[1]),
        ]
    }

    fn distance(&self) -> f64 {
        math::sqrt(self.x * self.x + self.y * self.y)
    }

    fn speed(&self) -> f64 {
        math::sqrt(self.vx * self.vx + self.vy * self.vy)
    }

    fn potential(&self) -> f64 {
        -100.0 * self.distance() - 100.0 * self.speed() - 100.0 * self.angle.abs()
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.outcome.is_some() {
            return Err(Error::InvalidParameter("episode already finished"));
        }
        let p = self.params;
        let before = self.potential();
        let mut reward = 0.0;
        let (mut ax, mut ay, mut alpha) = (0.0, -p.gravity, 0.0);
        match action {
            Action::Idle => {}
            Action::Main => {
                ax -= math::sin(self.angle) * p.main_accel;
                ay += math::cos(self.angle) * p.main_accel;
                reward -= p.main_fuel;
            }
            Action::Left => {
                ax += p.side_accel;
                alpha -= p.turn_accel;
                reward -= p.side_fuel;
            }
            Action::Right => {
                ax -= p.side_accel;
                alpha += p.turn_accel;
                reward -= p.side_fuel;
            }
        }
        self.vx += ax * p.dt;
        self.vy += ay * p.dt;
        self.omega += alpha * p.dt;
        self.x += self.vx * p.dt;
        self.y += self.vy * p.dt;
        self.angle += self.omega * p.dt;
        self.steps += 1;

        if self.y <= 0.0 {
            self.y = 0.0;
            let soft = self.speed() <= p.safe_speed && self.angle.abs() <= p.safe_angle;
            if soft && self.x.abs() <= p.pad_half_width {
                self.legs = [true, true];
                let quality = 1.0 - 0.5 * self.speed() / p.safe_speed;
                reward += 100.0 * quality + 20.0;
                self.outcome = Some(Outcome::Landed);
            } else {
                reward -= 100.0;
                self.outcome = Some(Outcome::Crashed);
            }
        } else if self.x.abs() > 1.5 || self.y > 2.5 {
            reward -= 100.0;
            self.outcome = Some(Outcome::OutOfBounds);
        } else if self.steps >= p.step_cap {
            self.outcome = Some(Outcome::TimedOut);
        }
        reward += self.potential() - before;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: self.outcome.is_some(),
        })
    }
}

/// `r + γ V(x′) − V(x)`, with `V(x′)` ignored on terminal transitions.
pub fn td_error(r: f64, gamma: f64, v: f64, v_next: f64, done: bool) -> f64 {
    if done {
        r - v
    } else {
        r + gamma * v_next - v
    }
}

/// `rpe · R_Vᵀ`.
pub fn costate_target(rpe: f64, r_v: &[f64]) -> Vec<f64> {
    r_v.iter().map(|v| rpe * v).collect()
}

/// One environment step with the value estimates on either side.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: usize,
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub done: bool,
    pub v: f64,
    pub v_next: f64,
}

impl Transition {
    pub fn td_error(&self, gamma: f64) -> f64 {
        td_error(self.reward, gamma, self.v, self.v_next, self.done)
    }
}

/// Generalised advantage estimates over one stretch of transitions.
pub fn gae_advantages(transitions: &[Transition], gamma: f64, lambda: f64) -> Vec<f64> {
    let deltas: Vec<f64> = transitions.iter().map(|t| t.td_error(gamma)).collect();
    let dones: Vec<bool> = transitions.iter().map(|t| t.done).collect();
    gae(&deltas, &dones, gamma, lambda).expect("lengths agree")
}

/// GAE from per-step TD errors; `dones[t]` cuts the accumulation after
/// step `t`.
pub fn gae(deltas: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    check_len("gae dones", deltas.len(), dones.len())?;
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for t in (0..deltas.len()).rev() {
        if dones[t] {
            acc = 0.0;
        }
        acc = deltas[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| math::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `η · A · (onehot(a) − π) xᵀ / (‖x‖² + eps_small)`, norm-projected.
pub fn policy_update(
    r_pi: &Matrix,
    x: &[f64],
    action: usize,
    advantage: f64,
    eta: f64,
    eps_small: f64,
    cap: f64,
) -> Result<Matrix> {
    check_len("policy state", r_pi.cols(), x.len())?;
    if action >= r_pi.rows() {
        return Err(Error::InvalidParameter("action out of range"));
    }
    let pi = softmax(&r_pi.matvec(x)?);
    let s = eta * advantage / (math::norm_sq(x) + eps_small);
    let mut d = Matrix::from_fn(r_pi.rows(), r_pi.cols(), |k, j| {
        let onehot = if k == action { 1.0 } else { 0.0 };
        s * (onehot - pi[k]) * x[j]
    });
    learning::norm_project(d.as_mut_slice(), cap);
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentParams {
    pub gamma: f64,
    pub lambda: f64,
    pub eta_policy: f64,
    /// Rewards are multiplied by this before learning.
    pub reward_scale: f64,
    /// Observations are multiplied by this before entering the network.
    pub obs_scale: f64,
    /// Network steps per environment step.
    pub ticks: usize,
    /// Network steps on the first observation before the first action.
    pub settle_ticks: usize,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            eta_policy: 0.05,
            reward_scale: 0.01,
            obs_scale: 1.0,
            ticks: 1,
            settle_ticks: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_reward: f64,
    pub steps: usize,
    pub landed: bool,
}

/// Actor-critic on one network: value from the readout, policy from `r_pi`
/// over the state plus a constant feature (`ACTIONS × (N + 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub net: Network,
    pub r_pi: Matrix,
    pub params: AgentParams,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(net: Network, params: AgentParams, seed: u64) -> Result<Self> {
        if net.config.inputs != OBS_DIM || net.config.outputs != 1 {
            return Err(Error::InvalidParameter("agent network needs 8 inputs and 1 output"));
        }
        let n = net.neurons();
        Ok(Self {
            net,
            r_pi: Matrix::zeros(ACTIONS, n + 1),
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn sense(&mut self, obs: &[f64; OBS_DIM]) -> Result<f64> {
        let u: Vec<f64> = obs.iter().map(|v| v * self.params.obs_scale).collect();
        let mut v = 0.0;
        for _ in 0..self.params.ticks {
            v = self.net.advance(&u)?[0];
        }
        Ok(v)
    }

    /// Policy features: the state plus a constant 1 for action offsets.
    fn features(x: &[f64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(x.len() + 1);
        f.extend_from_slice(x);
        f.push(1.0);
        f
    }

    pub fn policy(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.r_pi.matvec(&Self::features(x))?))
    }

    fn sample(&mut self, x: &[f64]) -> Result<usize> {
        let pi = self.policy(x)?;
        let mut target = self.rng.random::<f64>();
        for (k, p) in pi.iter().enumerate() {
            if target < *p {
                return Ok(k);
            }
            target -= p;
        }
        Ok(ACTIONS - 1)
    }

    /// Runs one online episode; `learn = false` only acts.
    pub fn run_episode(&mut self, env: &mut LanderEnv, seed: u64, episode: usize, learn: bool) -> Result<EpisodeLog> {
        let p = self.params;
        let obs = env.reset(seed);
        let n = self.net.neurons();
        self.net.state.x.iter_mut().for_each(|v| *v = 0.0);
        self.net.state.trc.iter_mut().for_each(|v| *v = 0.0);
        let u: Vec<f64> = obs.iter().map(|v| v * p.obs_scale).collect();
        for _ in 0..p.settle_ticks {
            self.net.advance(&u)?;
        }
        let mut v = self.sense(&obs)?;
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut actions = Vec::new();
        let mut deltas = Vec::new();
        let mut total = 0.0;
        loop {
            let x = self.net.state.x.clone();
            let a = self.sample(&x)?;
            let res = env.step(Action::from_index(a).expect("sampled in range"))?;
            total += res.reward;
            let v_next = if res.done { 0.0 } else { self.sense(&res.obs)? };
            let rpe = td_error(res.reward * p.reward_scale, p.gamma, v, v_next, res.done);
            if learn {
                self.net.apply_error(&x, &[-rpe])?;
                let mse = rpe * rpe;
                self.net.after_step(mse)?;
            }
            debug_assert_eq!(x.len(), n);
            xs.push(x);
            actions.push(a);
            deltas.push(rpe);
            v = v_next;
            if res.done {
                break;
            }
        }
        if learn {
            let mut dones = vec![false; deltas.len()];
            if let Some(last) = dones.last_mut() {
                *last = true;
            }
            let adv = gae(&deltas, &dones, p.gamma, p.lambda)?;
            let cap = self.net.config.rates.norm_cap;
            let eps = self.net.config.rates.eps_small;
            for ((x, &a), &ad) in xs.iter().zip(&actions).zip(&adv) {
                let d = policy_update(&self.r_pi, &Self::features(x), a, ad, p.eta_policy, eps, cap)?;
                self.r_pi.add_scaled(&d, 1.0)?;
                learning::norm_project(self.r_pi.as_mut_slice(), cap);
            }
        }
        Ok(EpisodeLog {
            episode,
            total_reward: total,
            steps: env.steps,
            landed: env.outcome == Some(Outcome::Landed),
        })
    }
}

/// Episode return of a uniformly random policy.
pub fn random_episode(env: &mut LanderEnv, seed: u64, action_seed: u64) -> Result<EpisodeLog> {
    env.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut total = 0.0;
    loop {
        let a = rng.random_range(0..ACTIONS);
        let res = env.step(Action::from_index(a).expect("in range"))?;
        total += res.reward;
        if res.done {
            break;
        }
    }
    Ok(EpisodeLog {
        episode: 0,
        total_reward: total,
        steps: env.steps,
        landed: env.outcome == Some(Outcome::Landed),
    })
}
