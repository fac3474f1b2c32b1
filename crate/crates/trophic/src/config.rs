//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers.
//!
//! Every key has a default, unknown keys are rejected, and dotted
//! `section.key=value` overrides apply on top of a file. The resolved form
//! written by [`ExperimentConfig::to_text`] lists every key and is what the
//! config hash is computed from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use trophic_core::blocksparse::BlockLayout;
use trophic_core::dynamics::DynamicsParams;
use trophic_core::learning::{Normalization, PlasticityRates};
use trophic_core::network::{InitParams, NetworkConfig, Switches};
use trophic_core::rl::{AgentParams, LanderParams};
use trophic_core::structure::StructuralPolicy;
use trophic_core::tasks::{MackeyGlass, TaskSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("override `{0}` is not of the form section.key=value")]
    BadOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Raw `section.key → value` pairs.
pub type Table = BTreeMap<String, String>;

/// Parses the text format into a table. Later duplicates are an error.
pub fn parse_table(text: &str) -> Result<Table, ConfigError> {
    let mut table = Table::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |message: &str| ConfigError::Syntax {
            line: i + 1,
            message: message.to_string(),
        };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?;
            let name = name.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(syntax("bad section name"));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
        let key = key.trim();
        if key.is_empty() || section.is_empty() {
            return Err(syntax("key outside a section"));
        }
        let full = format!("{section}.{key}");
        if table.insert(full.clone(), value.trim().to_string()).is_some() {
            return Err(syntax(&format!("duplicate key `{full}`")));
        }
    }
    Ok(table)
}

/// Applies `section.key=value` overrides.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
        let key = key.trim();
        if key.split('.').count() != 2 || key.starts_with('.') || key.ends_with('.') {
            return Err(ConfigError::BadOverride(o.clone()));
        }
        table.insert(key.to_string(), value.trim().to_string());
    }
    Ok(())
}

/// Settings for one task stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: String,
    pub tau: f64,
    pub period: f64,
    pub sigma_step: f64,
    pub amplitude: f64,
}

impl TaskConfig {
    fn named(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            tau: 17.0,
            period: 20.0,
            sigma_step: 0.05,
            amplitude: 1.0,
        }
    }

    pub fn spec(&self) -> Result<TaskSpec, ConfigError> {
        Ok(match self.kind.as_str() {
            "mackey_glass" => TaskSpec::MackeyGlass(MackeyGlass::new(self.tau)),
            "sine" => TaskSpec::Sine { period: self.period },
            "square" => TaskSpec::Square { period: self.period },
            "random_walk" => TaskSpec::RandomWalk {
                sigma_step: self.sigma_step,
            },
            "white_noise" => TaskSpec::WhiteNoise {
                amplitude: self.amplitude,
            },
            other => return Err(ConfigError::Invalid(format!("unknown task kind `{other}`"))),
        })
    }
}

/// Experiment protocols the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Oracle,
    Exactness,
    Alignment,
    Temporal,
    NlmsAblation,
    Continual,
    Damage,
    Criticality,
    Memory,
    Capacity,
    Rl,
    Suite,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 12] = [
        ExperimentKind::Oracle,
        ExperimentKind::Exactness,
        ExperimentKind::Alignment,
        ExperimentKind::Temporal,
        ExperimentKind::NlmsAblation,
        ExperimentKind::Continual,
        ExperimentKind::Damage,
        ExperimentKind::Criticality,
        ExperimentKind::Memory,
        ExperimentKind::Capacity,
        ExperimentKind::Rl,
        ExperimentKind::Suite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Oracle => "oracle",
            ExperimentKind::Exactness => "exactness",
            ExperimentKind::Alignment => "alignment",
            ExperimentKind::Temporal => "temporal",
            ExperimentKind::NlmsAblation => "nlms_ablation",
            ExperimentKind::Continual => "continual",
            ExperimentKind::Damage => "damage",
            ExperimentKind::Criticality => "criticality",
            ExperimentKind::Memory => "memory",
            ExperimentKind::Capacity => "capacity",
            ExperimentKind::Rl => "rl",
            ExperimentKind::Suite => "suite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: String,
    pub seed: u64,
    pub seeds: usize,
    /// Main horizon in steps (or episodes for RL).
    pub steps: usize,
    /// Training steps before a frozen measurement.
    pub warmup: usize,
    /// Length of a frozen trajectory.
    pub window: usize,
    /// Length of a frozen evaluation.
    pub eval_window: usize,
    pub k_fraction: f64,

    pub blocks: usize,
    pub block_size: usize,
    pub max_blocks_per_row: usize,
    /// Tiles per block-row at start; 0 fills the row budget.
    pub initial_blocks_per_row: usize,
    pub gain: f64,
    pub input_scale: f64,
    pub bias_spread: f64,
    pub feedback_scale: f64,
    pub trophic_alpha: f64,
    pub error_baseline: f64,
    pub error_ewma_rate: f64,
    pub noise_seed: u64,

    pub dt: f64,
    pub tau_fast: f64,
    pub noise_sigma: f64,

    pub rates: PlasticityRates,
    pub switches: Switches,
    pub normalization: Normalization,
    pub policy: StructuralPolicy,

    pub task: TaskConfig,
    pub task_b: TaskConfig,

    pub switch_period: usize,
    pub switches_count: usize,
    pub ablation_fraction: f64,
    pub delays: Vec<usize>,
    pub probe_every: usize,
    pub power_iters: usize,

    pub capacity_blocks: usize,
    pub capacity_k: usize,
    pub capacity_block_size: usize,
    pub capacity_c: f64,

    pub agent: AgentParams,
    pub lander: LanderParams,
    pub baseline_episodes: usize,
    pub moving_average: usize,

    pub criteria: Vec<usize>,

    pub output_dir: String,
    pub checkpoint_every: usize,
    pub curve_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let init = InitParams::default();
        Self {
            id: "run".to_string(),
            kind: "alignment".to_string(),
            seed: 1,
            seeds: 1,
            steps: 2000,
            warmup: 1000,
            window: 100,
            eval_window: 200,
            k_fraction: 0.1,
            blocks: 8,
            block_size: 16,
            max_blocks_per_row: 4,
            initial_blocks_per_row: 0,
            gain: init.gain,
            input_scale: init.input_scale,
            bias_spread: init.bias_spread,
            feedback_scale: init.feedback_scale,
            trophic_alpha: 1e-3,
            error_baseline: 1.0,
            error_ewma_rate: 0.01,
            noise_seed: 0,
            dt: 1.0,
            tau_fast: 10.0,
            noise_sigma: 0.01,
            rates: PlasticityRates::default(),
            switches: Switches::ALL,
            normalization: Normalization::default(),
            policy: StructuralPolicy::default(),
            task: TaskConfig::named("mackey_glass"),
            task_b: TaskConfig::named("sine"),
            switch_period: 200,
            switches_count: 10,
            ablation_fraction: 0.75,
            delays: (1..=10).collect(),
            probe_every: 100,
            power_iters: 60,
            capacity_blocks: 64,
            capacity_k: 4,
            capacity_block_size: 32,
            capacity_c: 0.15,
            agent: AgentParams::default(),
            lander: LanderParams::default(),
            baseline_episodes: 200,
            moving_average: 100,
            criteria: (1..=12).collect(),
            output_dir: "runs".to_string(),
            checkpoint_every: 0,
            curve_every: 100,
        }
    }
}

/// Reads or writes each field under its `section.key` name.
trait Visitor {
    fn f64(&mut self, key: &str, v: &mut f64) -> Result<(), ConfigError>;
    fn usize(&mut self, key: &str, v: &mut usize) -> Result<(), ConfigError>;
    fn u64(&mut self, key: &str, v: &mut u64) -> Result<(), ConfigError>;
    fn bool(&mut self, key: &str, v: &mut bool) -> Result<(), ConfigError>;
    fn string(&mut self, key: &str, v: &mut String) -> Result<(), ConfigError>;
    fn list(&mut self, key: &str, v: &mut Vec<usize>) -> Result<(), ConfigError>;
}

struct Reader<'a> {
    table: &'a Table,
    seen: Vec<String>,
}

impl Reader<'_> {
    fn raw(&mut self, key: &str) -> Option<&str> {
        self.seen.push(key.to_string());
        self.table.get(key).map(String::as_str)
    }
}

fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    }
}

impl Visitor for Reader<'_> {
    fn f64(&mut self, key: &str, v: &mut f64) -> Result<(), ConfigError> {
        if let Some(s) = self.raw(key) {
            *v = s.parse().map_err(|_| bad(key, s, "a number"))?;
        }
        Ok(())
    }

    fn usize(&mut self, key: &str, v: &mut usize) -> Result<(), ConfigError> {
        if let Some(s) = self.raw(key) {
            *v = s.parse().map_err(|_| bad(key, s, "a non-negative integer"))?;
        }
        Ok(())
    }

    fn u64(&mut self, key: &str, v: &mut u64) -> Result<(), ConfigError> {
        if let Some(s) = self.raw(key) {
            *v = s.parse().map_err(|_| bad(key, s, "a non-negative integer"))?;
        }
        Ok(())
    }

    fn bool(&mut self, key: &str, v: &mut bool) -> Result<(), ConfigError> {
        if let Some(s) = self.raw(key) {
            *v = match s {
                "true" => true,
                "false" => false,
                _ => return Err(bad(key, s, "true or false")),
            };
        }
        Ok(())
    }

    fn string(&mut self, key: &str, v: &mut String) -> Result<(), ConfigError> {
        if let Some(s) = self.raw(key) {
            *v = s.to_string();
        }
        Ok(())
    }

    fn list(&mut self, key: &str, v: &mut Vec<usize>) -> Result<(), ConfigError> {
        if let Some(s) = self.raw(key) {
            *v = s
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| bad(key, s, "a comma-separated list of integers")))
                .collect::<Result<_, _>>()?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer {
    out: String,
    section: String,
}

impl Writer {
    fn put(&mut self, key: &str, value: String) {
        let (section, name) = key.split_once('.').expect("keys are section.name");
        if section != self.section {
            if !self.out.is_empty() {
                self.out.push('\n');
            }
            let _ = writeln!(self.out, "[{section}]");
            self.section = section.to_string();
        }
        let _ = writeln!(self.out, "{name} = {value}");
    }
}

impl Visitor for Writer {
    fn f64(&mut self, key: &str, v: &mut f64) -> Result<(), ConfigError> {
        self.put(key, format!("{v:?}"));
        Ok(())
    }

    fn usize(&mut self, key: &str, v: &mut usize) -> Result<(), ConfigError> {
        self.put(key, v.to_string());
        Ok(())
    }

    fn u64(&mut self, key: &str, v: &mut u64) -> Result<(), ConfigError> {
        self.put(key, v.to_string());
        Ok(())
    }

    fn bool(&mut self, key: &str, v: &mut bool) -> Result<(), ConfigError> {
        self.put(key, v.to_string());
        Ok(())
    }

    fn string(&mut self, key: &str, v: &mut String) -> Result<(), ConfigError> {
        self.put(key, v.clone());
        Ok(())
    }

    fn list(&mut self, key: &str, v: &mut Vec<usize>) -> Result<(), ConfigError> {
        let items: Vec<String> = v.iter().map(ToString::to_string).collect();
        self.put(key, items.join(", "));
        Ok(())
    }
}

impl ExperimentConfig {
    fn visit(&mut self, v: &mut impl Visitor) -> Result<(), ConfigError> {
        v.string("experiment.id", &mut self.id)?;
        v.string("experiment.kind", &mut self.kind)?;
        v.u64("experiment.seed", &mut self.seed)?;
        v.usize("experiment.seeds", &mut self.seeds)?;
        v.usize("experiment.steps", &mut self.steps)?;
        v.usize("experiment.warmup", &mut self.warmup)?;
        v.usize("experiment.window", &mut self.window)?;
        v.usize("experiment.eval_window", &mut self.eval_window)?;
        v.f64("experiment.k_fraction", &mut self.k_fraction)?;

        v.usize("network.blocks", &mut self.blocks)?;
        v.usize("network.block_size", &mut self.block_size)?;
        v.usize("network.max_blocks_per_row", &mut self.max_blocks_per_row)?;
        v.usize("network.initial_blocks_per_row", &mut self.initial_blocks_per_row)?;
        v.f64("network.gain", &mut self.gain)?;
        v.f64("network.input_scale", &mut self.input_scale)?;
        v.f64("network.bias_spread", &mut self.bias_spread)?;
        v.f64("network.feedback_scale", &mut self.feedback_scale)?;
        v.f64("network.trophic_alpha", &mut self.trophic_alpha)?;
        v.f64("network.error_baseline", &mut self.error_baseline)?;
        v.f64("network.error_ewma_rate", &mut self.error_ewma_rate)?;
        v.u64("network.noise_seed", &mut self.noise_seed)?;

        v.f64("dynamics.dt", &mut self.dt)?;
        v.f64("dynamics.tau_fast", &mut self.tau_fast)?;
        v.f64("dynamics.noise_sigma", &mut self.noise_sigma)?;

        let r = &mut self.rates;
        v.f64("rates.eta_h", &mut r.eta_h)?;
        v.f64("rates.eta_o", &mut r.eta_o)?;
        v.f64("rates.eta_d", &mut r.eta_d)?;
        v.f64("rates.eta_b", &mut r.eta_b)?;
        v.f64("rates.eta_out", &mut r.eta_out)?;
        v.f64("rates.eta_fb", &mut r.eta_fb)?;
        v.f64("rates.p_star", &mut r.p_star)?;
        v.f64("rates.eps_small", &mut r.eps_small)?;
        v.f64("rates.norm_cap", &mut r.norm_cap)?;

        let s = &mut self.switches;
        v.bool("plasticity.readout", &mut s.readout)?;
        v.bool("plasticity.feedback", &mut s.feedback)?;
        v.bool("plasticity.recurrent", &mut s.recurrent)?;
        v.bool("plasticity.bias", &mut s.bias)?;
        v.bool("plasticity.trophic", &mut s.trophic)?;
        v.bool("plasticity.structural", &mut s.structural)?;
        v.bool("plasticity.nlms", &mut self.normalization.nlms)?;
        v.bool("plasticity.arch_scaling", &mut self.normalization.arch_scaling)?;

        let p = &mut self.policy;
        v.f64("structure.p0", &mut p.p0)?;
        v.f64("structure.k_density", &mut p.k_density)?;
        v.f64("structure.k_error", &mut p.k_error)?;
        v.usize("structure.grow_count_max", &mut p.grow_count_max)?;
        v.f64("structure.init_scale", &mut p.init_scale)?;
        v.u64("structure.period", &mut p.structural_period)?;
        v.f64("structure.q_admit", &mut p.q_admit)?;

        for (section, t) in [("task", &mut self.task), ("task_b", &mut self.task_b)] {
            v.string(&format!("{section}.kind"), &mut t.kind)?;
            v.f64(&format!("{section}.tau"), &mut t.tau)?;
            v.f64(&format!("{section}.period"), &mut t.period)?;
            v.f64(&format!("{section}.sigma_step"), &mut t.sigma_step)?;
            v.f64(&format!("{section}.amplitude"), &mut t.amplitude)?;
        }

        v.usize("continual.switch_period", &mut self.switch_period)?;
        v.usize("continual.switches", &mut self.switches_count)?;
        v.f64("damage.fraction", &mut self.ablation_fraction)?;
        v.list("memory.delays", &mut self.delays)?;
        v.usize("criticality.probe_every", &mut self.probe_every)?;
        v.usize("criticality.power_iters", &mut self.power_iters)?;

        v.usize("capacity.blocks", &mut self.capacity_blocks)?;
        v.usize("capacity.k", &mut self.capacity_k)?;
        v.usize("capacity.block_size", &mut self.capacity_block_size)?;
        v.f64("capacity.c", &mut self.capacity_c)?;

        let a = &mut self.agent;
        v.f64("rl.gamma", &mut a.gamma)?;
        v.f64("rl.lambda", &mut a.lambda)?;
        v.f64("rl.eta_policy", &mut a.eta_policy)?;
        v.f64("rl.reward_scale", &mut a.reward_scale)?;
        v.f64("rl.obs_scale", &mut a.obs_scale)?;
        v.usize("rl.ticks", &mut a.ticks)?;
        v.usize("rl.settle_ticks", &mut a.settle_ticks)?;
        v.usize("rl.baseline_episodes", &mut self.baseline_episodes)?;
        v.usize("rl.moving_average", &mut self.moving_average)?;
        let l = &mut self.lander;
        v.f64("lander.gravity", &mut l.gravity)?;
        v.f64("lander.main_accel", &mut l.main_accel)?;
        v.f64("lander.side_accel", &mut l.side_accel)?;
        v.f64("lander.turn_accel", &mut l.turn_accel)?;
        v.f64("lander.dt", &mut l.dt)?;
        v.usize("lander.step_cap", &mut l.step_cap)?;

        v.list("suite.criteria", &mut self.criteria)?;

        v.string("output.dir", &mut self.output_dir)?;
        v.usize("output.checkpoint_every", &mut self.checkpoint_every)?;
        v.usize("output.curve_every", &mut self.curve_every)?;
        Ok(())
    }

    /// Builds a config from a table, rejecting unknown keys.
    pub fn from_table(table: &Table) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut reader = Reader {
            table,
            seen: Vec::new(),
        };
        cfg.visit(&mut reader)?;
        if let Some(k) = table.keys().find(|k| !reader.seen.contains(k)) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = parse_table(text)?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(&table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    /// Every key with its resolved value, in canonical order.
    pub fn to_text(&self) -> String {
        let mut w = Writer::default();
        self.clone().visit(&mut w).expect("writing cannot fail");
        w.out
    }

    /// First 16 hex digits of the SHA-256 of the resolved text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn experiment(&self) -> Result<ExperimentKind, ConfigError> {
        ExperimentKind::parse(&self.kind)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown experiment kind `{}`", self.kind)))
    }

    pub fn layout(&self) -> Result<BlockLayout, ConfigError> {
        BlockLayout::new(self.blocks, self.block_size, self.max_blocks_per_row).map_err(invalid)
    }

    pub fn dynamics(&self) -> Result<DynamicsParams, ConfigError> {
        DynamicsParams::with_dt(self.dt, self.tau_fast, self.noise_sigma).map_err(invalid)
    }

    /// Network settings for `inputs → outputs` under `seed`.
    pub fn network(&self, inputs: usize, outputs: usize, seed: u64) -> Result<NetworkConfig, ConfigError> {
        let mut c = NetworkConfig::new(self.layout()?, inputs, outputs);
        c.dynamics = self.dynamics()?;
        c.rates = self.rates;
        c.policy = self.policy;
        c.normalization = self.normalization;
        c.switches = self.switches;
        c.init = InitParams {
            blocks_per_row: if self.initial_blocks_per_row == 0 {
                usize::MAX
            } else {
                self.initial_blocks_per_row
            },
            gain: self.gain,
            input_scale: self.input_scale,
            bias_spread: self.bias_spread,
            feedback_scale: self.feedback_scale,
        };
        c.trophic_alpha = self.trophic_alpha;
        c.error_baseline = self.error_baseline;
        c.error_ewma_rate = self.error_ewma_rate;
        c.seed = seed;
        c.noise_seed = self.noise_seed.wrapping_add(seed);
        c.validate().map_err(invalid)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment()?;
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(ConfigError::Invalid("experiment.id must be non-empty [A-Za-z0-9_-]".into()));
        }
        if self.seeds == 0 {
            return Err(ConfigError::Invalid("experiment.seeds must be positive".into()));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(ConfigError::Invalid("experiment.k_fraction must lie in (0, 1]".into()));
        }
        self.task.spec()?;
        self.task_b.spec()?;
        self.network(1, 1, self.seed)?;
        if !(0.0..=1.0).contains(&self.ablation_fraction) {
            return Err(ConfigError::Invalid("damage.fraction must lie in [0, 1]".into()));
        }
        if self.delays.is_empty() {
            return Err(ConfigError::Invalid("memory.delays must not be empty".into()));
        }
        if self.probe_every == 0 || self.curve_every == 0 || self.moving_average == 0 {
            return Err(ConfigError::Invalid("periods must be positive".into()));
        }
        if self.agent.ticks == 0 || !(0.0..=1.0).contains(&self.agent.gamma) || !(0.0..=1.0).contains(&self.agent.lambda) {
            return Err(ConfigError::Invalid("rl.ticks > 0 and gamma, lambda in [0, 1] required".into()));
        }
        if let Some(c) = self.criteria.iter().find(|c| !(1..=12).contains(*c)) {
            return Err(ConfigError::Invalid(format!("suite criterion {c} does not exist")));
        }
        Ok(())
    }
}

fn invalid(e: trophic_core::error::Error) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn sections_keys_and_comments() {
        let text = "# comment\n[experiment]\nkind = temporal # trailing\nseed = 7\n\n[network]\nblocks = 4\n";
        let cfg = ExperimentConfig::parse(text, &[]).unwrap();
        assert_eq!(cfg.kind, "temporal");
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.blocks, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("[network]\nblokcs = 4\n", &[]).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "network.blokcs"));
        assert!(err.to_string().contains("network.blokcs"));
    }

    #[test]
    fn overrides_apply_and_are_checked() {
        let cfg = ExperimentConfig::parse("[experiment]\nseed = 1\n", &["experiment.seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(matches!(
            ExperimentConfig::parse("", &["seed=9".into()]),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("", &["rates.nope=1".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn syntax_and_value_errors() {
        assert!(matches!(parse_table("key = 1\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_table("[a]\nx = 1\nx = 2\n"), Err(ConfigError::Syntax { line: 3, .. })));
        assert!(matches!(parse_table("[a\n"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(
            ExperimentConfig::parse("[experiment]\nseed = -1\n", &[]),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("[experiment]\nkind = dance\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        // rate ordering is enforced
        assert!(matches!(
            ExperimentConfig::parse("[rates]\neta_fb = 1.0\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn hash_tracks_resolved_values() {
        let a = ExperimentConfig::parse("", &[]).unwrap();
        let b = ExperimentConfig::parse("[experiment]\nseed = 1\n", &[]).unwrap();
        let c = ExperimentConfig::parse("[experiment]\nseed = 2\n", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn lists_parse() {
        let cfg = ExperimentConfig::parse("[memory]\ndelays = 1, 3,6\n", &[]).unwrap();
        assert_eq!(cfg.delays, vec![1, 3, 6]);
    }
}
