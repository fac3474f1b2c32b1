//! A complete plastic network: weights, heads, state, trophic map and the
//! per-step update system.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocksparse::{BlockLayout, BlockSparseMatrix};
use crate::dense::Matrix;
use crate::dynamics::{self, DynamicsParams, NetworkState};
use crate::error::{check_len, Error, Result};
use crate::learning::{self, LearnableHeads, Normalization, PlasticityRates};
use crate::math;
use crate::structure::{self, StructuralEvent, StructuralPolicy, TrophicFieldMap};

/// Which parts of the update system run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    pub readout: bool,
    pub feedback: bool,
    pub recurrent: bool,
    pub bias: bool,
    pub trophic: bool,
    pub structural: bool,
}

impl Switches {
    pub const ALL: Switches = Switches {
        readout: true,
        feedback: true,
        recurrent: true,
        bias: true,
        trophic: true,
        structural: true,
    };

    pub const FROZEN: Switches = Switches {
        readout: false,
        feedback: false,
        recurrent: false,
        bias: false,
        trophic: false,
        structural: false,
    };
}

impl Default for Switches {
    fn default() -> Self {
        Self::ALL
    }
}

/// Initial weight statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitParams {
    /// Occupied tiles per block-row at start (capped by the row budget).
    pub blocks_per_row: usize,
    /// Target gain of the initial recurrent weights; entries are drawn with
    /// variance `gain² / fan_in`.
    pub gain: f64,
    /// Multiplier on the `uniform[−0.5, 0.5] / √d_in` input projection.
    pub input_scale: f64,
    /// Biases drawn uniformly from `[−bias_spread, bias_spread]`.
    pub bias_spread: f64,
    /// Standard deviation of feedback entries.
    pub feedback_scale: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        Self {
            blocks_per_row: usize::MAX,
            gain: 0.9,
            input_scale: 1.0,
            bias_spread: 0.1,
            feedback_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub layout: BlockLayout,
    pub inputs: usize,
    pub outputs: usize,
    pub dynamics: DynamicsParams,
    pub rates: PlasticityRates,
    pub policy: StructuralPolicy,
    pub normalization: Normalization,
    pub switches: Switches,
    pub init: InitParams,
    pub trophic_alpha: f64,
    /// Error scale used to normalise the running error for the threshold.
    pub error_baseline: f64,
    /// Weight of the newest sample in the running error average.
    pub error_ewma_rate: f64,
    pub seed: u64,
    pub noise_seed: u64,
}

impl NetworkConfig {
    pub fn new(layout: BlockLayout, inputs: usize, outputs: usize) -> Self {
        Self {
            layout,
            inputs,
            outputs,
            dynamics: DynamicsParams::new(10.0, 0.01).expect("valid defaults"),
            rates: PlasticityRates::default(),
            policy: StructuralPolicy::default(),
            normalization: Normalization::default(),
            switches: Switches::ALL,
            init: InitParams::default(),
            trophic_alpha: 1e-3,
            error_baseline: 1.0,
            error_ewma_rate: 0.01,
            seed: 0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.outputs == 0 {
            return Err(Error::InvalidParameter("inputs and outputs must be positive"));
        }
        self.dynamics.validate()?;
        self.rates.validate()?;
        self.policy.validate()?;
        if !(0.0..=1.0).contains(&self.trophic_alpha) {
            return Err(Error::InvalidParameter("trophic alpha must lie in [0, 1]"));
        }
        if !(self.error_baseline > 0.0) {
            return Err(Error::InvalidParameter("error baseline must be positive"));
        }
        if !(self.error_ewma_rate > 0.0 && self.error_ewma_rate <= 1.0) {
            return Err(Error::InvalidParameter("error EWMA rate must lie in (0, 1]"));
        }
        let i = &self.init;
        if !(i.gain >= 0.0 && i.input_scale >= 0.0 && i.bias_spread >= 0.0 && i.feedback_scale >= 0.0) {
            return Err(Error::InvalidParameter("init scales must be non-negative"));
        }
        Ok(())
    }
}

/// Outcome of one supervised step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub prediction: Vec<f64>,
    pub delta: Vec<f64>,
    /// Mean squared error over outputs.
    pub mse: f64,
    /// `cos(W_fb δ, Rᵀδ)`, undefined for a zero error or readout.
    pub alignment: Option<f64>,
    pub structural: Option<StructuralEvent>,
}

/// Everything the oracles need: the network with plasticity frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    pub w: BlockSparseMatrix,
    pub w_in: Matrix,
    pub b: Vec<f64>,
    pub r: Matrix,
    pub w_fb: Matrix,
    pub params: DynamicsParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub w: BlockSparseMatrix,
    pub w_in: Matrix,
    pub heads: LearnableHeads,
    pub state: NetworkState,
    pub tfm: TrophicFieldMap,
    /// Running mean squared error.
    pub ewma_error: f64,
    structural_draws: u64,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout;
        let n = layout.neurons();
        let b = layout.blocks();
        let ell = layout.block_size();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let per_row = config.init.blocks_per_row.min(layout.max_blocks_per_row());
        let fan_in = (per_row * ell).max(1) as f64;
        let weight = Normal::new(0.0, config.init.gain / math::sqrt(fan_in))
            .map_err(|_| Error::InvalidParameter("init gain"))?;
        let mut w = BlockSparseMatrix::empty(layout);
        for row in 0..b {
            let mut cols: Vec<usize> = (0..b).collect();
            for _ in 0..per_row {
                let k = rng.random_range(0..cols.len());
                let col = cols.swap_remove(k);
                let tile: Vec<f64> = (0..layout.block_len()).map(|_| weight.sample(&mut rng)).collect();
                w.insert_block(row, col, &tile)?;
            }
        }

        let in_scale = config.init.input_scale / math::sqrt(config.inputs as f64);
        let w_in = Matrix::from_fn(n, config.inputs, |_, _| (rng.random::<f64>() - 0.5) * in_scale);

        let mut heads = LearnableHeads::zeros(n, config.outputs);
        let fb = Normal::new(0.0, config.init.feedback_scale.max(0.0))
            .map_err(|_| Error::InvalidParameter("feedback scale"))?;
        for v in heads.w_fb.as_mut_slice() {
            *v = fb.sample(&mut rng);
        }
        let spread = config.init.bias_spread;
        for v in &mut heads.b {
            *v = (2.0 * rng.random::<f64>() - 1.0) * spread;
        }

        Ok(Self {
            w,
            w_in,
            heads,
            state: NetworkState::new(n, config.noise_seed),
            tfm: TrophicFieldMap::new(b, config.trophic_alpha)?,
            ewma_error: config.error_baseline,
            structural_draws: 0,
            config,
        })
    }

    pub fn neurons(&self) -> usize {
        self.config.layout.neurons()
    }

    /// Runs the dynamics for one step and returns the readout prediction.
    pub fn advance(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        dynamics::step(
            &mut self.state,
            &self.w,
            &self.w_in,
            u,
            &self.heads.b,
            &self.config.dynamics,
        )?;
        learning::readout_predict(&self.heads.r, &self.state.x)
    }

    /// One supervised step: advance on `u`, compare with `target`, learn.
    pub fn train_step(&mut self, u: &[f64], target: &[f64]) -> Result<StepReport> {
        let prediction = self.advance(u)?;
        check_len("train_step target", prediction.len(), target.len())?;
        let delta: Vec<f64> = prediction.iter().zip(target).map(|(p, t)| p - t).collect();
        let x = self.state.x.clone();
        let alignment = self.apply_error(&x, &delta)?;
        let mse = math::norm_sq(&delta) / delta.len() as f64;
        let structural = self.after_step(mse)?;
        Ok(StepReport {
            prediction,
            delta,
            mse,
            alignment,
            structural,
        })
    }

    /// Applies every enabled synaptic rule for output error `delta`.
    ///
    /// `x_readout` is the state the readout saw when it produced the
    /// prediction; recurrent plasticity always uses the current state.
    /// Returns the feedback alignment cosine.
    pub fn apply_error(&mut self, x_readout: &[f64], delta: &[f64]) -> Result<Option<f64>> {
        let rates = self.config.rates;
        let norm = self.config.normalization;
        let sw = self.config.switches;
        let eps = learning::feedback_project(&self.heads.w_fb, delta)?;
        let target = self.heads.r.transpose_matvec(delta)?;
        let alignment = math::cosine(&eps, &target);
        let e_gated = learning::gated_error(&eps, &self.state.x)?;

        let dw = if sw.recurrent {
            Some(learning::recurrent_plasticity(
                &self.w,
                &self.state.x,
                &self.state.trc,
                &e_gated,
                &rates,
                norm,
            )?)
        } else {
            None
        };
        let dr = if sw.readout {
            let mut d = learning::readout_update(
                &self.heads.r,
                x_readout,
                delta,
                rates.eta_out,
                norm.scale(x_readout, rates.eps_small),
            )?;
            learning::norm_project(d.as_mut_slice(), rates.norm_cap);
            Some(d)
        } else {
            None
        };
        let dfb = if sw.feedback {
            let mut d = learning::feedback_align_update(&self.heads.w_fb, &self.heads.r, delta, rates.eta_fb)?;
            learning::norm_project(d.as_mut_slice(), rates.norm_cap);
            Some(d)
        } else {
            None
        };
        let db = if sw.bias {
            Some(learning::homeostatic_bias_update(&self.state.a, &self.state.x, &rates, norm))
        } else {
            None
        };

        if let Some(dw) = dw {
            self.w.add_scaled(&dw, 1.0)?;
            learning::project_blocks(&mut self.w, rates.norm_cap);
        }
        if let Some(dr) = dr {
            self.heads.r.add_scaled(&dr, 1.0)?;
            learning::norm_project(self.heads.r.as_mut_slice(), rates.norm_cap);
        }
        if let Some(dfb) = dfb {
            self.heads.w_fb.add_scaled(&dfb, 1.0)?;
            learning::norm_project(self.heads.w_fb.as_mut_slice(), rates.norm_cap);
        }
        if let Some(db) = db {
            for (b, d) in self.heads.b.iter_mut().zip(&db) {
                *b += d;
            }
        }
        if sw.trophic {
            self.tfm.update(&self.state.trc, &e_gated, &self.config.layout)?;
        }
        Ok(alignment)
    }

    /// Updates the running error and runs a structural event when one is due.
    pub fn after_step(&mut self, mse: f64) -> Result<Option<StructuralEvent>> {
        let a = self.config.error_ewma_rate;
        self.ewma_error = (1.0 - a) * self.ewma_error + a * mse;
        let period = self.config.policy.structural_period;
        if self.config.switches.structural && self.state.step.is_multiple_of(period) {
            return self.structural_event().map(Some);
        }
        Ok(None)
    }

    /// Runs one structural event now.
    pub fn structural_event(&mut self) -> Result<StructuralEvent> {
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.structural_draws);
        self.structural_draws += 1;
        let ev = structure::structural_step(
            &mut self.w,
            &self.tfm.t,
            self.ewma_error / self.config.error_baseline,
            &self.config.policy,
            self.state.step,
            seed,
        )?;
        learning::project_blocks(&mut self.w, self.config.rates.norm_cap);
        Ok(ev)
    }

    /// Spectral radius of the one-step Jacobian at the current state.
    pub fn spectral_radius(&self, u: &[f64], iters: usize) -> Result<dynamics::SpectralEstimate> {
        dynamics::spectral_radius(
            &self.w,
            &self.w_in,
            &self.state.x,
            u,
            &self.heads.b,
            &self.config.dynamics,
            iters,
        )
    }

    pub fn frozen(&self) -> FrozenModel {
        FrozenModel {
            w: self.w.clone(),
            w_in: self.w_in.clone(),
            b: self.heads.b.clone(),
            r: self.heads.r.clone(),
            w_fb: self.heads.w_fb.clone(),
            params: self.config.dynamics,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self.heads.is_finite()
            && self.state.x.iter().chain(&self.state.trc).all(|v| v.is_finite())
    }

    /// Counter of structural events already drawn; part of resumable state.
    pub fn structural_draws(&self) -> u64 {
        self.structural_draws
    }

    pub fn set_structural_draws(&mut self, n: u64) {
        self.structural_draws = n;
    }
}
