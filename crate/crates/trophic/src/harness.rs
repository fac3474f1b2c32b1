//! Experiment protocols. Each `run_*` takes a resolved config and a metric
//! sink, writes its curves to the sink and returns a summary report.
//!
//! Replicas use seeds `seed, seed + 1, …`. Network, task and noise seeds are
//! all derived from the replica seed, so a report is a pure function of the
//! config.

use std::io::Write;

use serde_json::json;
use thiserror::Error;

use trophic_core::dynamics::MIN_POWER_ITERS;
use trophic_core::math;
use trophic_core::network::{Network, Switches};
use trophic_core::oracle::{self, CreditComparison};
use trophic_core::rl::{self, Agent, LanderEnv};
use trophic_core::structure::{self, StructuralEvent};
use trophic_core::tasks::{self, TaskSpec};

use crate::config::{ConfigError, ExperimentConfig};
use crate::metrics::{MetricSink, MetricsError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] trophic_core::error::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Input and one-step-ahead target streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Stream {
    pub fn one_step(spec: &TaskSpec, length: usize, seed: u64) -> Result<Self> {
        let s = spec.generate(length + 1, seed)?;
        let (inputs, targets) = tasks::one_step_ahead(&s);
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn replica_seeds(cfg: &ExperimentConfig) -> impl Iterator<Item = u64> + '_ {
    (0..cfg.seeds as u64).map(move |i| cfg.seed.wrapping_add(i))
}

fn new_network(cfg: &ExperimentConfig, inputs: usize, outputs: usize, seed: u64) -> Result<Network> {
    Ok(Network::new(cfg.network(inputs, outputs, seed)?)?)
}

fn record_event<W: Write>(sink: &mut MetricSink<W>, exp: &str, ev: &StructuralEvent) -> Result<()> {
    sink.record_detail(
        exp,
        ev.step,
        "structural_density",
        Some(ev.density_after),
        json!({
            "p": ev.percentile,
            "theta": ev.theta,
            "removed": ev.removed,
            "added": ev.added,
            "density_before": ev.density_before,
        }),
    )?;
    Ok(())
}

/// Mean of `values` over consecutive windows of `every`, keyed by the step
/// that ends each window.
#[derive(Debug, Clone, Default)]
struct Windowed {
    sum: f64,
    count: usize,
}

impl Windowed {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            self.sum += v;
            self.count += 1;
        }
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.count > 0).then(|| self.sum / self.count as f64);
        *self = Self::default();
        out
    }
}

/// Trains `net` on one stream, logging windowed MSE under `exp`.
/// Returns per-step MSE.
pub fn train_stream<W: Write>(
    net: &mut Network,
    stream: &Stream,
    sink: &mut MetricSink<W>,
    exp: &str,
    every: usize,
) -> Result<Vec<f64>> {
    let mut errors = Vec::with_capacity(stream.len());
    let mut window = Windowed::default();
    for (u, y) in stream.inputs.iter().zip(&stream.targets) {
        let rep = net.train_step(&[*u], &[*y])?;
        window.push(Some(rep.mse));
        errors.push(rep.mse);
        if let Some(ev) = &rep.structural {
            record_event(sink, exp, ev)?;
        }
        if net.state.step.is_multiple_of(every as u64) {
            sink.record(exp, net.state.step, "mse", window.take())?;
        }
    }
    Ok(errors)
}

/// Mean squared one-step error of a frozen copy of `net` on `stream`,
/// ignoring the first `washout` steps.
pub fn evaluate(net: &Network, stream: &Stream, washout: usize) -> Result<f64> {
    let mut probe = net.clone();
    probe.config.switches = Switches::FROZEN;
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (u, y)) in stream.inputs.iter().zip(&stream.targets).enumerate() {
        let pred = probe.advance(&[*u])?;
        if t >= washout {
            total += (pred[0] - y) * (pred[0] - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(HarnessError::Invalid("evaluation window shorter than washout".into()));
    }
    Ok(total / count as f64)
}

fn flat(m: &trophic_core::dense::Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn comparison_records<W: Write>(sink: &mut MetricSink<W>, exp: &str, step: u64, c: &CreditComparison) -> Result<()> {
    sink.record(exp, step, "pearson", c.pearson)?;
    sink.record(exp, step, "spearman", c.spearman)?;
    sink.record(exp, step, "cosine", c.cosine)?;
    sink.record(exp, step, "auroc", c.auroc)?;
    sink.record(exp, step, "precision_at_k", c.precision_at_k)?;
    Ok(())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        math::mean(v)
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------- oracle

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// Largest relative gap between per-block reverse-mode sums and
    /// central differences along each block.
    pub block_fd_error: f64,
    /// Largest relative gap between per-entry reverse-mode gradients and
    /// central differences.
    pub entry_fd_error: f64,
    /// Largest relative gap between forward-mode and reverse-mode gradients.
    pub eprop_error: f64,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Checks the reverse-mode oracle against finite differences and the
/// forward-mode oracle on a small fixture.
pub fn run_oracle<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<OracleReport> {
    let mut net = new_network(cfg, 1, 1, cfg.seed)?;
    let stream = Stream::one_step(&cfg.task.spec()?, cfg.warmup + cfg.window, cfg.seed)?;
    for t in 0..cfg.warmup {
        net.train_step(&[stream.inputs[t]], &[stream.targets[t]])?;
    }
    let model = net.frozen();
    let inputs: Vec<Vec<f64>> = stream.inputs[cfg.warmup..].iter().map(|u| vec![*u]).collect();
    let targets: Vec<Vec<f64>> = stream.targets[cfg.warmup..].iter().map(|y| vec![*y]).collect();
    let traj = oracle::record(&model, &net.state, &inputs, &targets)?;

    let grad = oracle::bptt_gradient(&model, &traj)?;
    let n = grad.rows();
    let h = 1e-5;
    let entries: Vec<(usize, usize)> = (0..n)
        .flat_map(|l| (0..n).map(move |k| (l, k)))
        .filter(|(l, k)| !(model.w.masks_self_connections() && l == k))
        .collect();
    let fd = oracle::finite_difference(&model, &traj, &entries, h)?;
    let entry_fd_error = entries
        .iter()
        .zip(&fd)
        .map(|(&(l, k), f)| relative_gap(grad[(l, k)], *f))
        .fold(0.0, f64::max);

    let layout = *model.w.layout();
    let (b, ell) = (layout.blocks(), layout.block_size());
    let sums = oracle::block_sums(&grad, b, ell, model.w.masks_self_connections());
    let mut block_fd_error: f64 = 0.0;
    let mut wd = model.w.to_dense()?;
    for post in 0..b {
        for pre in 0..b {
            let members: Vec<(usize, usize)> = entries
                .iter()
                .copied()
                .filter(|(l, k)| l / ell == post && k / ell == pre)
                .collect();
            let shift = |wd: &mut trophic_core::dense::Matrix, by: f64| {
                for &(l, k) in &members {
                    wd[(l, k)] += by;
                }
            };
            shift(&mut wd, h);
            let plus = oracle::replay_loss(&model, &wd, &traj)?;
            shift(&mut wd, -2.0 * h);
            let minus = oracle::replay_loss(&model, &wd, &traj)?;
            shift(&mut wd, h);
            let fd_block = (plus - minus) / (2.0 * h);
            block_fd_error = block_fd_error.max(relative_gap(sums[(pre, post)], fd_block));
        }
    }

    let eprop = oracle::forward_eprop_exact(&model, &traj)?;
    let eprop_error = model
        .w
        .synapses()
        .iter()
        .zip(&eprop)
        .map(|(&(l, k), e)| relative_gap(grad[(l, k)], *e))
        .fold(0.0, f64::max);

    let exp = format!("{}/oracle", cfg.id);
    sink.record(&exp, 0, "block_fd_error", Some(block_fd_error))?;
    sink.record(&exp, 0, "entry_fd_error", Some(entry_fd_error))?;
    sink.record(&exp, 0, "eprop_error", Some(eprop_error))?;
    Ok(OracleReport {
        block_fd_error,
        entry_fd_error,
        eprop_error,
    })
}

// ---------------------------------------------------------------- exactness

#[derive(Debug, Clone, PartialEq)]
pub struct ExactnessReport {
    /// Local heuristic with learned feedback against the oracle, per seed.
    pub per_seed: Vec<CreditComparison>,
    /// Same heuristic built from the oracle error `Rᵀδ`, per seed.
    pub oracle_error: Vec<CreditComparison>,
    /// Oracle map compared with a permutation of itself, per seed.
    pub shuffled: Vec<CreditComparison>,
    pub mean_pearson: f64,
    pub mean_spearman: f64,
}

/// Trains briefly, freezes, records a trajectory and compares the local
/// block credit with the reverse-mode block gradients.
pub fn run_exactness<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<ExactnessReport> {
    let spec = cfg.task.spec()?;
    let mut per_seed = Vec::new();
    let mut oracle_error = Vec::new();
    let mut shuffled = Vec::new();
    let exp = format!("{}/exactness", cfg.id);
    for (i, seed) in replica_seeds(cfg).enumerate() {
        let mut net = new_network(cfg, 1, 1, seed)?;
        let stream = Stream::one_step(&spec, cfg.warmup + cfg.window, seed)?;
        let warm = Stream {
            inputs: stream.inputs[..cfg.warmup].to_vec(),
            targets: stream.targets[..cfg.warmup].to_vec(),
        };
        train_stream(&mut net, &warm, sink, &format!("{exp}/train{i}"), cfg.curve_every)?;
        let model = net.frozen();
        let inputs: Vec<Vec<f64>> = stream.inputs[cfg.warmup..].iter().map(|u| vec![*u]).collect();
        let targets: Vec<Vec<f64>> = stream.targets[cfg.warmup..].iter().map(|y| vec![*y]).collect();
        let traj = oracle::record(&model, &net.state, &inputs, &targets)?;
        let layout = net.config.layout;
        let (b, ell) = (layout.blocks(), layout.block_size());
        let g = flat(&oracle::bptt_block_gradients(&model, &traj)?);
        let h = flat(&oracle::local_heuristic(&traj, b, ell)?);
        let ho = flat(&oracle::local_heuristic_oracle_error(&traj, b, ell)?);
        let c = oracle::compare(&h, &g, cfg.k_fraction)?;
        comparison_records(sink, &exp, i as u64, &c)?;
        per_seed.push(c);
        oracle_error.push(oracle::compare(&ho, &g, cfg.k_fraction)?);
        let mut perm = g.clone();
        permute(&mut perm, seed);
        shuffled.push(oracle::compare(&h, &perm, cfg.k_fraction)?);
    }
    let pick = |f: fn(&CreditComparison) -> Option<f64>| mean(&per_seed.iter().map(|c| f(c).unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let mean_pearson = pick(|c| c.pearson);
    let mean_spearman = pick(|c| c.spearman);
    sink.record(&exp, cfg.seeds as u64, "mean_pearson", Some(mean_pearson))?;
    sink.record(&exp, cfg.seeds as u64, "mean_spearman", Some(mean_spearman))?;
    Ok(ExactnessReport {
        per_seed,
        oracle_error,
        shuffled,
        mean_pearson,
        mean_spearman,
    })
}

fn permute(v: &mut [f64], seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

// ---------------------------------------------------------------- alignment

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    /// `(step, mean cosine, mean mse)` per window.
    pub curve: Vec<(u64, Option<f64>, f64)>,
    pub first_quarter_cosine: f64,
    pub final_quarter_cosine: f64,
    pub initial_mse: f64,
    /// First window whose MSE is at most 20% of `initial_mse`.
    pub mse_step: Option<u64>,
    /// First window whose cosine exceeds 0.8.
    pub cosine_step: Option<u64>,
}

/// Online training while tracking `cos(ε, Rᵀδ)` and MSE.
pub fn run_alignment<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<AlignmentReport> {
    let mut net = new_network(cfg, 1, 1, cfg.seed)?;
    let stream = Stream::one_step(&cfg.task.spec()?, cfg.steps, cfg.seed)?;
    let exp = format!("{}/alignment", cfg.id);
    let mut state = AlignmentState::default();
    alignment_loop(cfg, &mut net, &stream, 0, &mut state, sink, &exp, |_, _, _, _| Ok(()))?;
    Ok(state.report(untrained_mse(&stream, cfg.curve_every)))
}

/// Error of the zero readout over the first `window` targets.
pub fn untrained_mse(stream: &Stream, window: usize) -> f64 {
    let n = window.clamp(1, stream.len().max(1));
    mean(&stream.targets[..n.min(stream.len())].iter().map(|y| y * y).collect::<Vec<_>>())
}

/// Running state of an alignment run; everything a resumed run needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentState {
    /// Sum and count of finite cosines since the last curve point.
    pub cos_window: (f64, u64),
    /// Sum and count of step errors since the last curve point.
    pub mse_window: (f64, u64),
    pub curve: Vec<(u64, Option<f64>, f64)>,
}

impl AlignmentState {
    /// `initial_mse` is the error of the untrained network.
    pub fn report(&self, initial_mse: f64) -> AlignmentReport {
        let n = self.curve.len();
        let q = (n / 4).max(1);
        let cos_mean = |s: &[(u64, Option<f64>, f64)]| mean(&s.iter().filter_map(|c| c.1).collect::<Vec<_>>());
        let first = cos_mean(&self.curve[..q.min(n)]);
        let last = cos_mean(&self.curve[n.saturating_sub(q)..]);
        let mse_step = self.curve.iter().find(|c| c.2 <= 0.2 * initial_mse).map(|c| c.0);
        let cosine_step = self.curve.iter().find(|c| c.1.is_some_and(|v| v > 0.8)).map(|c| c.0);
        AlignmentReport {
            curve: self.curve.clone(),
            first_quarter_cosine: first,
            final_quarter_cosine: last,
            initial_mse,
            mse_step,
            cosine_step,
        }
    }
}

/// Steps `start..stream.len()` of an alignment run. `checkpoint` is called
/// after every step with the number of steps done, the network, the running
/// state and the number of records written so far.
#[allow(clippy::too_many_arguments)]
pub fn alignment_loop<W: Write>(
    cfg: &ExperimentConfig,
    net: &mut Network,
    stream: &Stream,
    start: usize,
    state: &mut AlignmentState,
    sink: &mut MetricSink<W>,
    exp: &str,
    mut checkpoint: impl FnMut(usize, &Network, &AlignmentState, usize) -> Result<()>,
) -> Result<()> {
    for t in start..stream.len() {
        let rep = net.train_step(&[stream.inputs[t]], &[stream.targets[t]])?;
        if let Some(ev) = &rep.structural {
            record_event(sink, exp, ev)?;
        }
        if let Some(c) = rep.alignment.filter(|c| c.is_finite()) {
            state.cos_window.0 += c;
            state.cos_window.1 += 1;
        }
        state.mse_window.0 += rep.mse;
        state.mse_window.1 += 1;
        if (t + 1) % cfg.curve_every == 0 {
            let cos = (state.cos_window.1 > 0).then(|| state.cos_window.0 / state.cos_window.1 as f64);
            let mse = state.mse_window.0 / state.mse_window.1 as f64;
            let step = (t + 1) as u64;
            sink.record(exp, step, "cosine", cos)?;
            sink.record(exp, step, "mse", Some(mse))?;
            state.curve.push((step, cos, mse));
            state.cos_window = (0.0, 0);
            state.mse_window = (0.0, 0);
        }
        checkpoint(t + 1, net, state, sink.written())?;
    }
    Ok(())
}

// ---------------------------------------------------------------- temporal

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSeed {
    pub diagonal: CreditComparison,
    pub ema_only: CreditComparison,
    pub synapses: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalReport {
    pub per_seed: Vec<TemporalSeed>,
    pub mean_pearson: f64,
    pub mean_auroc: f64,
    pub mean_ema_auroc: f64,
}

/// Diagonal and EMA-only estimates against exact forward-mode gradients,
/// one frozen window per replica seed.
pub fn run_temporal<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<TemporalReport> {
    let spec = cfg.task.spec()?;
    let exp = format!("{}/temporal", cfg.id);
    let mut per_seed = Vec::new();
    for (i, seed) in replica_seeds(cfg).enumerate() {
        let mut net = new_network(cfg, 1, 1, seed)?;
        let stream = Stream::one_step(&spec, cfg.warmup + cfg.window, seed)?;
        let warm = Stream {
            inputs: stream.inputs[..cfg.warmup].to_vec(),
            targets: stream.targets[..cfg.warmup].to_vec(),
        };
        train_stream(&mut net, &warm, sink, &format!("{exp}/train{i}"), cfg.curve_every)?;
        let model = net.frozen();
        let inputs: Vec<Vec<f64>> = stream.inputs[cfg.warmup..].iter().map(|u| vec![*u]).collect();
        let targets: Vec<Vec<f64>> = stream.targets[cfg.warmup..].iter().map(|y| vec![*y]).collect();
        let traj = oracle::record(&model, &net.state, &inputs, &targets)?;
        let exact = oracle::forward_eprop_exact(&model, &traj)?;
        let syn = model.w.synapses();
        let est = oracle::diagonal_approx(&model, &traj, &syn)?;
        let diagonal = oracle::compare(&est.diagonal, &exact, cfg.k_fraction)?;
        let ema_only = oracle::compare(&est.ema_only, &exact, cfg.k_fraction)?;
        comparison_records(sink, &format!("{exp}/diagonal"), i as u64, &diagonal)?;
        comparison_records(sink, &format!("{exp}/ema_only"), i as u64, &ema_only)?;
        per_seed.push(TemporalSeed {
            diagonal,
            ema_only,
            synapses: syn.len(),
        });
    }
    let avg = |f: &dyn Fn(&TemporalSeed) -> Option<f64>| mean(&per_seed.iter().map(|s| f(s).unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let report = TemporalReport {
        mean_pearson: avg(&|s| s.diagonal.pearson),
        mean_auroc: avg(&|s| s.diagonal.auroc),
        mean_ema_auroc: avg(&|s| s.ema_only.auroc),
        per_seed,
    };
    sink.record(&exp, cfg.seeds as u64, "mean_pearson", Some(report.mean_pearson))?;
    sink.record(&exp, cfg.seeds as u64, "mean_auroc", Some(report.mean_auroc))?;
    sink.record(&exp, cfg.seeds as u64, "mean_ema_auroc", Some(report.mean_ema_auroc))?;
    Ok(report)
}

// ---------------------------------------------------------------- NLMS ablation

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCondition {
    pub name: &'static str,
    pub nlms: bool,
    pub arch_scaling: bool,
    /// Windowed MSE.
    pub curve: Vec<f64>,
    /// `1 − last window / untrained error`.
    pub reduction: f64,
}

pub const ABLATIONS: [(&str, bool, bool); 4] = [
    ("original", true, true),
    ("no_nlms", false, true),
    ("no_arch_scaling", true, false),
    ("neither", false, false),
];

/// The four normalisation toggles on the same stream and initial network.
pub fn run_nlms_ablation<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<Vec<AblationCondition>> {
    let stream = Stream::one_step(&cfg.task.spec()?, cfg.steps, cfg.seed)?;
    // Error of the untrained zero readout.
    let initial = mean(&stream.targets.iter().map(|y| y * y).collect::<Vec<_>>());
    let mut out = Vec::new();
    for (name, nlms, arch) in ABLATIONS {
        let mut c = cfg.clone();
        c.normalization.nlms = nlms;
        c.normalization.arch_scaling = arch;
        let mut net = new_network(&c, 1, 1, cfg.seed)?;
        let exp = format!("{}/nlms/{name}", cfg.id);
        let errors = train_stream(&mut net, &stream, sink, &exp, cfg.curve_every)?;
        let curve: Vec<f64> = errors.chunks(cfg.curve_every).map(mean).collect();
        let last = curve.last().copied().unwrap_or(f64::NAN);
        let reduction = if net.is_finite() { 1.0 - last / initial } else { f64::NEG_INFINITY };
        sink.record(&exp, cfg.steps as u64, "reduction", Some(reduction))?;
        out.push(AblationCondition {
            name,
            nlms,
            arch_scaling: arch,
            curve,
            reduction,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- continual

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionResult {
    pub baseline: f64,
    pub zero_shot: f64,
    pub relearned: f64,
    /// `1 − (relearned − baseline) / baseline`.
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualReport {
    pub retention: Vec<RetentionResult>,
    /// `1 − pretrained / naive` initial Task-B error, per seed.
    pub transfer: Vec<f64>,
    /// Mean error of each segment in an alternating schedule (first seed).
    pub switching: Vec<f64>,
    /// Steps to converge relearning A: `(experienced, naive)`, per seed.
    pub relearning: Vec<(Option<usize>, Option<usize>)>,
}

impl ContinualReport {
    pub fn median_zero_shot_ratio(&self) -> f64 {
        median(&self.retention.iter().map(|r| r.zero_shot / r.baseline).collect::<Vec<_>>())
    }

    pub fn median_relearn_ratio(&self) -> f64 {
        median(&self.retention.iter().map(|r| r.relearned / r.baseline).collect::<Vec<_>>())
    }
}

/// Steps until EWMA(MSE, 0.99) improves by less than 1% over 500 steps.
pub fn convergence_step(errors: &[f64]) -> Option<usize> {
    const SPAN: usize = 500;
    let mut ewma = Vec::with_capacity(errors.len());
    let mut e = errors.first().copied()?;
    for &x in errors {
        e = 0.99 * e + 0.01 * x;
        ewma.push(e);
    }
    (SPAN..ewma.len()).find(|&t| ewma[t] > 0.99 * ewma[t - SPAN])
}

fn evaluation_stream(spec: &TaskSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Stream> {
    Stream::one_step(spec, cfg.eval_window + washout(cfg), seed.wrapping_add(7919))
}

fn washout(cfg: &ExperimentConfig) -> usize {
    (cfg.eval_window / 4).max(1)
}

/// Retention, transfer, task switching and relearning on Task A / Task B.
pub fn run_continual_suite<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<ContinualReport> {
    let spec_a = cfg.task.spec()?;
    let spec_b = cfg.task_b.spec()?;
    let mut report = ContinualReport {
        retention: Vec::new(),
        transfer: Vec::new(),
        switching: Vec::new(),
        relearning: Vec::new(),
    };
    let wash = washout(cfg);
    for (i, seed) in replica_seeds(cfg).enumerate() {
        let exp = format!("{}/continual/{i}", cfg.id);
        let a_train = Stream::one_step(&spec_a, cfg.warmup, seed)?;
        let b_train = Stream::one_step(&spec_b, cfg.steps, seed.wrapping_add(1))?;
        let a_eval = evaluation_stream(&spec_a, cfg, seed)?;

        let mut net = new_network(cfg, 1, 1, seed)?;
        train_stream(&mut net, &a_train, sink, &format!("{exp}/a"), cfg.curve_every)?;
        let baseline = evaluate(&net, &a_eval, wash)?;
        let pretrained = net.clone();
        let b_errors = train_stream(&mut net, &b_train, sink, &format!("{exp}/b"), cfg.curve_every)?;
        let zero_shot = evaluate(&net, &a_eval, wash)?;
        let mut relearn = net.clone();
        let relearn_stream = Stream::one_step(&spec_a, 1, seed.wrapping_add(2))?;
        relearn.train_step(&[relearn_stream.inputs[0]], &[relearn_stream.targets[0]])?;
        let relearned = evaluate(&relearn, &a_eval, wash)?;
        let retention = 1.0 - (relearned - baseline) / baseline;
        let step = net.state.step;
        sink.record(&exp, step, "baseline", Some(baseline))?;
        sink.record(&exp, step, "zero_shot", Some(zero_shot))?;
        sink.record(&exp, step, "relearned", Some(relearned))?;
        sink.record(&exp, step, "retention", Some(retention))?;
        report.retention.push(RetentionResult {
            baseline,
            zero_shot,
            relearned,
            retention,
        });

        // transfer: initial Task-B error with and without Task-A experience
        let span = cfg.switch_period.min(b_errors.len()).max(1);
        let pre_b = mean(&b_errors[..span]);
        let mut naive = new_network(cfg, 1, 1, seed)?;
        let mut quiet = MetricSink::memory(sink.config_hash());
        let naive_b = train_stream(&mut naive, &b_train, &mut quiet, "naive", cfg.curve_every)?;
        let naive_initial = mean(&naive_b[..span]);
        let transfer = 1.0 - pre_b / naive_initial;
        sink.record(&exp, step, "transfer", Some(transfer))?;
        report.transfer.push(transfer);

        // relearning speed after forgetting
        let a_again = Stream::one_step(&spec_a, cfg.warmup, seed.wrapping_add(3))?;
        let mut experienced = net.clone();
        let exp_errors = train_stream(&mut experienced, &a_again, &mut quiet, "experienced", cfg.curve_every)?;
        let mut fresh = new_network(cfg, 1, 1, seed)?;
        let fresh_errors = train_stream(&mut fresh, &a_again, &mut quiet, "fresh", cfg.curve_every)?;
        let pair = (convergence_step(&exp_errors), convergence_step(&fresh_errors));
        let ratio = match pair {
            (Some(e), Some(f)) if e > 0 => Some(f as f64 / e as f64),
            _ => None,
        };
        sink.record(&exp, step, "relearning_speedup", ratio)?;
        report.relearning.push(pair);

        if i == 0 {
            let mut alt = pretrained.clone();
            let segments: Vec<tasks::Segment> = (0..cfg.switches_count)
                .map(|k| tasks::Segment {
                    spec: if k % 2 == 0 { spec_b } else { spec_a },
                    duration: cfg.switch_period + 1,
                    seed: seed.wrapping_add(10 + k as u64),
                })
                .collect();
            for (k, seg) in segments.iter().enumerate() {
                let s = Stream::one_step(&seg.spec, cfg.switch_period, seg.seed)?;
                let e = train_stream(&mut alt, &s, &mut quiet, "switching", cfg.curve_every)?;
                let m = mean(&e);
                sink.record(&format!("{exp}/switching"), k as u64, "segment_mse", Some(m))?;
                report.switching.push(m);
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- damage

#[derive(Debug, Clone, PartialEq)]
pub struct DamageResult {
    pub baseline: f64,
    pub immediate: f64,
    pub recovered: f64,
    pub blocks_before: usize,
    pub blocks_after_damage: usize,
    pub blocks_final: usize,
    /// Windowed training MSE after the damage.
    pub curve: Vec<f64>,
}

impl DamageResult {
    pub fn recovery_ratio(&self) -> f64 {
        self.recovered / self.baseline
    }
}

/// Converge, ablate a fraction of tiles, keep learning, measure recovery.
/// Errors are online one-step training errors over `eval_window` steps.
pub fn run_damage_recovery<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<Vec<DamageResult>> {
    let spec = cfg.task.spec()?;
    let mut out = Vec::new();
    for (i, seed) in replica_seeds(cfg).enumerate() {
        let exp = format!("{}/damage/{i}", cfg.id);
        let mut net = new_network(cfg, 1, 1, seed)?;
        let train = Stream::one_step(&spec, cfg.warmup + cfg.steps, seed)?;
        let (pre, post) = train.inputs.split_at(cfg.warmup);
        let (pre_y, post_y) = train.targets.split_at(cfg.warmup);
        let before = train_stream(
            &mut net,
            &Stream {
                inputs: pre.to_vec(),
                targets: pre_y.to_vec(),
            },
            sink,
            &exp,
            cfg.curve_every,
        )?;
        let w = cfg.eval_window.max(1);
        let baseline = mean(&before[before.len().saturating_sub(w)..]);
        let blocks_before = net.w.occupied_count();
        structure::ablate(&mut net.w, cfg.ablation_fraction, seed ^ 0xDA3A6E)?;
        let blocks_after_damage = net.w.occupied_count();
        let step = net.state.step;
        sink.record(&exp, step, "baseline", Some(baseline))?;
        let errors = train_stream(
            &mut net,
            &Stream {
                inputs: post.to_vec(),
                targets: post_y.to_vec(),
            },
            sink,
            &exp,
            cfg.curve_every,
        )?;
        let immediate = mean(&errors[..w.min(errors.len())]);
        let recovered = mean(&errors[errors.len().saturating_sub(w)..]);
        sink.record(&exp, net.state.step, "post_damage", Some(immediate))?;
        sink.record(&exp, net.state.step, "recovered", Some(recovered))?;
        sink.record(&exp, net.state.step, "recovery_ratio", Some(recovered / baseline))?;
        out.push(DamageResult {
            baseline,
            immediate,
            recovered,
            blocks_before,
            blocks_after_damage,
            blocks_final: net.w.occupied_count(),
            curve: errors.chunks(cfg.curve_every).map(mean).collect(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- criticality

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityReport {
    /// `(step, ρ)` at every probe.
    pub series: Vec<(u64, f64)>,
    pub final_third_mean: f64,
}

/// Spectral radius of the one-step Jacobian along a prediction run.
pub fn run_criticality<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<CriticalityReport> {
    let mut net = new_network(cfg, 1, 1, cfg.seed)?;
    let stream = Stream::one_step(&cfg.task.spec()?, cfg.steps, cfg.seed)?;
    let exp = format!("{}/criticality", cfg.id);
    let iters = cfg.power_iters.max(MIN_POWER_ITERS);
    let mut series = Vec::new();
    for t in 0..stream.len() {
        let u = [stream.inputs[t]];
        let rep = net.train_step(&u, &[stream.targets[t]])?;
        if let Some(ev) = &rep.structural {
            record_event(sink, &exp, ev)?;
        }
        if (t + 1) % cfg.probe_every == 0 {
            let next = [stream.inputs.get(t + 1).copied().unwrap_or(u[0])];
            let est = net.spectral_radius(&next, iters)?;
            let step = (t + 1) as u64;
            sink.record(&exp, step, "spectral_radius", Some(est.radius))?;
            series.push((step, est.radius));
        }
    }
    let tail = &series[series.len() - series.len() / 3..];
    let final_third_mean = mean(&tail.iter().map(|s| s.1).collect::<Vec<_>>());
    sink.record(&exp, stream.len() as u64, "final_third_mean", Some(final_third_mean))?;
    Ok(CriticalityReport {
        series,
        final_third_mean,
    })
}

// ---------------------------------------------------------------- memory

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    /// `(delay, R²)` on held-out input.
    pub r_squared: Vec<(usize, Option<f64>)>,
}

impl MemoryReport {
    pub fn at(&self, delay: usize) -> Option<f64> {
        self.r_squared.iter().find(|r| r.0 == delay).and_then(|r| r.1)
    }
}

/// One readout per delay recalls the input `d` steps back.
pub fn run_memory_capacity<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<MemoryReport> {
    let spec = cfg.task.spec()?;
    let delays = &cfg.delays;
    let mut net = new_network(cfg, 1, delays.len(), cfg.seed)?;
    let exp = format!("{}/memory", cfg.id);
    let train = spec.generate(cfg.steps, cfg.seed)?;
    let targets: Vec<Vec<f64>> = delays.iter().map(|&d| tasks::delay(&train, d)).collect();
    let mut window = Windowed::default();
    for t in 0..train.len() {
        let y: Vec<f64> = targets.iter().map(|s| s[t]).collect();
        let rep = net.train_step(&[train[t]], &y)?;
        if let Some(ev) = &rep.structural {
            record_event(sink, &exp, ev)?;
        }
        window.push(Some(rep.mse));
        if (t + 1) % cfg.curve_every == 0 {
            sink.record(&exp, (t + 1) as u64, "mse", window.take())?;
        }
    }

    let wash = washout(cfg).max(*delays.iter().max().unwrap_or(&0));
    let test = spec.generate(cfg.eval_window + wash, cfg.seed.wrapping_add(7919))?;
    let mut probe = net.clone();
    probe.config.switches = Switches::FROZEN;
    let mut preds: Vec<Vec<f64>> = vec![Vec::new(); delays.len()];
    let mut truth: Vec<Vec<f64>> = vec![Vec::new(); delays.len()];
    for t in 0..test.len() {
        let p = probe.advance(&[test[t]])?;
        if t >= wash {
            for (j, &d) in delays.iter().enumerate() {
                preds[j].push(p[j]);
                truth[j].push(test[t - d]);
            }
        }
    }
    let step = cfg.steps as u64;
    let mut r_squared = Vec::new();
    for (j, &d) in delays.iter().enumerate() {
        let r2 = tasks::r_squared(&preds[j], &truth[j]);
        sink.record_detail(&exp, step, "r_squared", r2, json!({ "delay": d }))?;
        r_squared.push((d, r2));
    }
    Ok(MemoryReport { r_squared })
}

// ---------------------------------------------------------------- capacity

/// `C(B, K) · (c·ℓ)^K`.
pub fn compositional_capacity(blocks: usize, k: usize, block_size: usize, c: f64) -> f64 {
    if k > blocks {
        return 0.0;
    }
    let mut binom = 1.0;
    for i in 0..k {
        binom = binom * (blocks - i) as f64 / (i + 1) as f64;
    }
    binom * (c * block_size as f64).powi(k as i32)
}

pub fn run_capacity<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<f64> {
    let v = compositional_capacity(cfg.capacity_blocks, cfg.capacity_k, cfg.capacity_block_size, cfg.capacity_c);
    sink.record(&format!("{}/capacity", cfg.id), 0, "capacity", Some(v))?;
    Ok(v)
}

// ---------------------------------------------------------------- RL

#[derive(Debug, Clone, PartialEq)]
pub struct RlRun {
    pub rewards: Vec<f64>,
    pub moving_average: Vec<f64>,
    pub landings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlReport {
    pub runs: Vec<RlRun>,
    /// Per-episode returns of the uniformly random policy.
    pub baseline: Vec<f64>,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
}

impl RlRun {
    /// Mean moving average over the first and last quarter of episodes.
    pub fn quartile_means(&self) -> (f64, f64) {
        let n = self.moving_average.len();
        let q = (n / 4).max(1);
        (mean(&self.moving_average[..q]), mean(&self.moving_average[n - q..]))
    }
}

pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for i in 0..v.len() {
        sum += v[i];
        if i >= window {
            sum -= v[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Episode seed for episode `e` of replica `seed`; shared with the baseline.
fn episode_seed(seed: u64, e: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(e as u64)
}

/// Online actor-critic on the built-in lander, plus a random baseline.
pub fn run_rl<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<RlReport> {
    let mut runs = Vec::new();
    for (i, seed) in replica_seeds(cfg).enumerate() {
        let exp = format!("{}/rl/{i}", cfg.id);
        let net = new_network(cfg, rl::OBS_DIM, 1, seed)?;
        let mut agent = Agent::new(net, cfg.agent, seed)?;
        let mut env = LanderEnv::new(cfg.lander);
        let mut rewards = Vec::with_capacity(cfg.steps);
        let mut landings = 0;
        for e in 0..cfg.steps {
            let log = agent.run_episode(&mut env, episode_seed(seed, e), e, true)?;
            rewards.push(log.total_reward);
            landings += usize::from(log.landed);
            let ma = moving_average(&rewards, cfg.moving_average);
            sink.record_detail(
                &exp,
                e as u64,
                "episode_reward",
                Some(log.total_reward),
                json!({ "steps": log.steps, "landed": log.landed, "moving_average": ma[e] }),
            )?;
        }
        let ma = moving_average(&rewards, cfg.moving_average);
        runs.push(RlRun {
            rewards,
            moving_average: ma,
            landings,
        });
    }
    let mut env = LanderEnv::new(cfg.lander);
    let mut baseline = Vec::with_capacity(cfg.baseline_episodes);
    for e in 0..cfg.baseline_episodes {
        let log = rl::random_episode(&mut env, episode_seed(cfg.seed, e), cfg.seed ^ (e as u64) << 20)?;
        baseline.push(log.total_reward);
    }
    let baseline_mean = mean(&baseline);
    let baseline_sd = std_dev(&baseline);
    let exp = format!("{}/rl/baseline", cfg.id);
    sink.record(&exp, 0, "baseline_mean", Some(baseline_mean))?;
    sink.record(&exp, 0, "baseline_sd", Some(baseline_sd))?;
    Ok(RlReport {
        runs,
        baseline,
        baseline_mean,
        baseline_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn capacity_formula() {
        assert_eq!(compositional_capacity(10, 0, 32, 0.15), 1.0);
        // C(4, 2) · (0.5 · 4)² = 6 · 4
        assert_relative_eq!(compositional_capacity(4, 2, 4, 0.5), 24.0);
        assert_eq!(compositional_capacity(3, 4, 8, 0.5), 0.0);
        // C(64, 4) = 635376 and 4.8⁴ = 530.8416
        assert_relative_eq!(compositional_capacity(64, 4, 32, 0.15), 635_376.0 * 530.8416, max_relative = 1e-12);
    }

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_relative_eq!(std_dev(&[1.0, 2.0, 3.0, 4.0]), (5.0f64 / 3.0).sqrt());
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn convergence_detection() {
        let flat = vec![1.0; 2000];
        assert_eq!(convergence_step(&flat), Some(500));
        let falling: Vec<f64> = (0..3000).map(|t| 0.1 + (-(t as f64) / 200.0).exp()).collect();
        let c = convergence_step(&falling).unwrap();
        assert!(c > 1000, "{c}");
        assert_eq!(convergence_step(&[]), None);
    }
}
