//! Acceptance checks, the bundled presets they run on, and a dispatcher from
//! config to experiment.

use std::io::Write;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::harness::{self, median, HarnessError, Result};
use crate::metrics::MetricSink;

/// Bundled preset text by experiment name.
pub const PRESETS: [(&str, &str); 12] = [
    ("oracle", include_str!("../../../configs/oracle.cfg")),
    ("exactness", include_str!("../../../configs/exactness.cfg")),
    ("temporal", include_str!("../../../configs/temporal.cfg")),
    ("alignment", include_str!("../../../configs/alignment.cfg")),
    ("nlms_ablation", include_str!("../../../configs/nlms_ablation.cfg")),
    ("continual", include_str!("../../../configs/continual.cfg")),
    ("damage", include_str!("../../../configs/damage.cfg")),
    ("criticality", include_str!("../../../configs/criticality.cfg")),
    ("memory", include_str!("../../../configs/memory.cfg")),
    ("capacity", include_str!("../../../configs/capacity.cfg")),
    ("rl", include_str!("../../../configs/rl.cfg")),
    ("desk", include_str!("../../../configs/desk.cfg")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.1)
        .ok_or_else(|| HarnessError::Invalid(format!("no preset named `{name}`")))?;
    Ok(ExperimentConfig::parse(text, &[])?)
}

/// Runs the experiment `cfg` names and returns a JSON summary of its report.
pub fn run<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricSink<W>) -> Result<Value> {
    Ok(match cfg.experiment()? {
        ExperimentKind::Oracle => {
            let r = harness::run_oracle(cfg, sink)?;
            json!({ "block_fd_error": r.block_fd_error, "entry_fd_error": r.entry_fd_error, "eprop_error": r.eprop_error })
        }
        ExperimentKind::Exactness => {
            let r = harness::run_exactness(cfg, sink)?;
            json!({
                "mean_pearson": r.mean_pearson,
                "mean_spearman": r.mean_spearman,
                "pearson": r.per_seed.iter().map(|c| c.pearson).collect::<Vec<_>>(),
                "spearman": r.per_seed.iter().map(|c| c.spearman).collect::<Vec<_>>(),
                "shuffled_pearson": r.shuffled.iter().map(|c| c.pearson).collect::<Vec<_>>(),
            })
        }
        ExperimentKind::Alignment => {
            let r = harness::run_alignment(cfg, sink)?;
            json!({
                "first_quarter_cosine": r.first_quarter_cosine,
                "final_quarter_cosine": r.final_quarter_cosine,
                "initial_mse": r.initial_mse,
                "mse_step": r.mse_step,
                "cosine_step": r.cosine_step,
            })
        }
        ExperimentKind::Temporal => {
            let r = harness::run_temporal(cfg, sink)?;
            json!({
                "mean_pearson": r.mean_pearson,
                "mean_auroc": r.mean_auroc,
                "mean_ema_auroc": r.mean_ema_auroc,
                "pearson": r.per_seed.iter().map(|s| s.diagonal.pearson).collect::<Vec<_>>(),
                "auroc": r.per_seed.iter().map(|s| s.diagonal.auroc).collect::<Vec<_>>(),
                "ema_auroc": r.per_seed.iter().map(|s| s.ema_only.auroc).collect::<Vec<_>>(),
            })
        }
        ExperimentKind::NlmsAblation => {
            let r = harness::run_nlms_ablation(cfg, sink)?;
            Value::Object(r.iter().map(|c| (c.name.to_string(), json!(finite(c.reduction)))).collect())
        }
        ExperimentKind::Continual => {
            let r = harness::run_continual_suite(cfg, sink)?;
            json!({
                "median_zero_shot_ratio": r.median_zero_shot_ratio(),
                "median_relearn_ratio": r.median_relearn_ratio(),
                "retention": r.retention.iter().map(|x| x.retention).collect::<Vec<_>>(),
                "transfer": r.transfer,
                "switching": r.switching,
                "relearning": r.relearning,
            })
        }
        ExperimentKind::Damage => {
            let r = harness::run_damage_recovery(cfg, sink)?;
            let ratios: Vec<f64> = r.iter().map(|d| d.recovery_ratio()).collect();
            json!({
                "median_recovery_ratio": median(&ratios),
                "recovery_ratio": ratios,
                "immediate_ratio": r.iter().map(|d| d.immediate / d.baseline).collect::<Vec<_>>(),
            })
        }
        ExperimentKind::Criticality => {
            let r = harness::run_criticality(cfg, sink)?;
            json!({ "final_third_mean": r.final_third_mean, "probes": r.series.len() })
        }
        ExperimentKind::Memory => {
            let r = harness::run_memory_capacity(cfg, sink)?;
            json!({ "r_squared": r.r_squared })
        }
        ExperimentKind::Capacity => json!({ "capacity": harness::run_capacity(cfg, sink)? }),
        ExperimentKind::Rl => {
            let r = harness::run_rl(cfg, sink)?;
            json!({
                "baseline_mean": r.baseline_mean,
                "baseline_sd": r.baseline_sd,
                "quartiles": r.runs.iter().map(|x| x.quartile_means()).collect::<Vec<_>>(),
                "landings": r.runs.iter().map(|x| x.landings).collect::<Vec<_>>(),
            })
        }
        ExperimentKind::Suite => {
            return Err(HarnessError::Invalid("a suite config runs through the suite command".into()));
        }
    })
}

fn step_text(s: Option<u64>) -> String {
    s.map_or_else(|| "never".to_string(), |v| v.to_string())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Outcome of one acceptance check.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        let limit = self.limit.map(|l| format!(" / {}s", l.as_secs())).unwrap_or_default();
        format!(
            "[{}] {:>2} {:<20} {} ({:.1}s{limit})",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }

    pub fn to_json(&self) -> Value {
        json!({
            "id": self.id,
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "elapsed_s": self.elapsed.as_secs_f64(),
            "limit_s": self.limit.map(|l| l.as_secs()),
        })
    }
}

pub const CRITERIA: [(usize, &str, Option<u64>); 12] = [
    (1, "structural_exactness", Some(120)),
    (2, "oracle_correctness", Some(60)),
    (3, "temporal_exactness", Some(300)),
    (4, "spatial_alignment", Some(600)),
    (5, "nlms_ablation", Some(300)),
    (6, "continual_retention", Some(600)),
    (7, "damage_recovery", Some(900)),
    (8, "criticality", Some(600)),
    (9, "memory_capacity", Some(600)),
    (10, "capacity_formula", None),
    (11, "rl_trend", Some(1800)),
    (12, "determinism", None),
];

/// JSON-lines metric output of one check.
pub type Records = Vec<u8>;

/// Runs check `id` on its preset. Returns the result and the metric file
/// the run wrote.
pub fn criterion(id: usize) -> Result<(CriterionResult, Records)> {
    let &(_, name, limit) = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .ok_or_else(|| HarnessError::Invalid(format!("criterion {id} does not exist")))?;
    let start = Instant::now();
    let (ok, detail, records) = check(id)?;
    let elapsed = start.elapsed();
    let limit = limit.map(Duration::from_secs);
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let detail = if in_time { detail } else { format!("{detail}; over time budget") };
    Ok((
        CriterionResult {
            id,
            name,
            passed: ok && in_time,
            detail,
            elapsed,
            limit,
        },
        records,
    ))
}

fn sink_for(cfg: &ExperimentConfig) -> MetricSink<Vec<u8>> {
    MetricSink::memory(&cfg.hash())
}

fn check(id: usize) -> Result<(bool, String, Records)> {
    let name = match id {
        1 => "exactness",
        2 => "oracle",
        3 => "temporal",
        4 => "alignment",
        5 => "nlms_ablation",
        6 => "continual",
        7 => "damage",
        8 => "criticality",
        9 => "memory",
        10 => "capacity",
        11 => "rl",
        _ => return determinism(),
    };
    let cfg = preset(name)?;
    let mut sink = sink_for(&cfg);
    let (ok, detail) = match id {
        1 => {
            let r = harness::run_exactness(&cfg, &mut sink)?;
            (
                r.mean_pearson >= 0.90 && r.mean_spearman >= 0.85,
                format!("pearson {:.4} (≥ 0.90), spearman {:.4} (≥ 0.85)", r.mean_pearson, r.mean_spearman),
            )
        }
        2 => {
            let r = harness::run_oracle(&cfg, &mut sink)?;
            let fd = r.block_fd_error.max(r.entry_fd_error);
            (
                fd <= 1e-5 && r.eprop_error <= 1e-8,
                format!("finite-difference gap {fd:.2e} (≤ 1e-5), forward/reverse gap {:.2e} (≤ 1e-8)", r.eprop_error),
            )
        }
        3 => {
            let r = harness::run_temporal(&cfg, &mut sink)?;
            (
                r.mean_pearson >= 0.70 && r.mean_auroc >= 0.85 && r.mean_ema_auroc < r.mean_auroc,
                format!(
                    "pearson {:.3} (≥ 0.70), auroc {:.3} (≥ 0.85), ema-only auroc {:.3} (< diagonal)",
                    r.mean_pearson, r.mean_auroc, r.mean_ema_auroc
                ),
            )
        }
        4 => {
            let r = harness::run_alignment(&cfg, &mut sink)?;
            let gain = r.final_quarter_cosine - r.first_quarter_cosine;
            let order = match (r.mse_step, r.cosine_step) {
                (Some(m), Some(c)) => m < c,
                (Some(_), None) => true,
                _ => false,
            };
            (
                gain >= 0.3 && order,
                format!(
                    "cosine {:.3} → {:.3} (gain ≥ 0.3), mse ≤ 20% at step {}, cosine > 0.8 at step {}",
                    r.first_quarter_cosine,
                    r.final_quarter_cosine,
                    step_text(r.mse_step),
                    step_text(r.cosine_step)
                ),
            )
        }
        5 => {
            let r = harness::run_nlms_ablation(&cfg, &mut sink)?;
            let red = |n: &str| r.iter().find(|c| c.name == n).map_or(f64::NAN, |c| c.reduction);
            let (orig, none, neither) = (red("original"), red("no_nlms"), red("neither"));
            (
                orig >= 0.5 && none <= 0.1 && neither <= 0.1,
                format!("reduction original {orig:.3} (≥ 0.5), no-NLMS {none:.3e} (≤ 0.1), neither {neither:.3e} (≤ 0.1)"),
            )
        }
        6 => {
            let r = harness::run_continual_suite(&cfg, &mut sink)?;
            let zs = r.median_zero_shot_ratio();
            let rl = r.median_relearn_ratio();
            (
                zs > 3.0 && rl <= 1.1,
                format!("zero-shot {zs:.2}× baseline (> 3), after one step {rl:.3}× (≤ 1.1)"),
            )
        }
        7 => {
            let r = harness::run_damage_recovery(&cfg, &mut sink)?;
            let m = median(&r.iter().map(|d| d.recovery_ratio()).collect::<Vec<_>>());
            (m <= 10.0, format!("median recovery {m:.2}× baseline (≤ 10)"))
        }
        8 => {
            let r = harness::run_criticality(&cfg, &mut sink)?;
            let m = r.final_third_mean;
            ((0.8..=1.2).contains(&m), format!("final-third ρ {m:.3} (in [0.8, 1.2])"))
        }
        9 => {
            let r = harness::run_memory_capacity(&cfg, &mut sink)?;
            let (d1, d6) = (r.at(1).unwrap_or(f64::NAN), r.at(6).unwrap_or(f64::NAN));
            (d1 >= 0.9 && d6 >= 0.4, format!("R² delay 1 {d1:.3} (≥ 0.9), delay 6 {d6:.3} (≥ 0.4)"))
        }
        10 => {
            let v = harness::run_capacity(&cfg, &mut sink)?;
            let gap = (v / 7.6e8 - 1.0).abs();
            (gap <= 0.02, format!("{v:.4e} vs 7.6e8, gap {:.1}% (≤ 2%)", gap * 100.0))
        }
        _ => {
            let r = harness::run_rl(&cfg, &mut sink)?;
            let threshold = r.baseline_mean + 2.0 * r.baseline_sd;
            let q: Vec<(f64, f64)> = r.runs.iter().map(|x| x.quartile_means()).collect();
            let gain = median(&q.iter().map(|x| x.1 - x.0).collect::<Vec<_>>());
            let last = median(&q.iter().map(|x| x.1).collect::<Vec<_>>());
            (
                gain > 0.0 && last >= threshold,
                format!(
                    "median quartile gain {gain:.1} (> 0), last quartile {last:.1} (≥ {threshold:.1} = random {:.1} + 2·{:.1})",
                    r.baseline_mean, r.baseline_sd
                ),
            )
        }
    };
    Ok((ok, detail, sink.into_inner()))
}

/// Short versions of every experiment kind, each run twice.
pub fn determinism_configs() -> Result<Vec<ExperimentConfig>> {
    let short: [(&str, &[&str]); 11] = [
        ("oracle", &[]),
        ("exactness", &["experiment.seeds=2", "experiment.warmup=100", "experiment.window=20"]),
        ("temporal", &["experiment.seeds=1", "experiment.warmup=50", "experiment.window=6", "network.block_size=8"]),
        ("alignment", &["experiment.steps=600"]),
        ("nlms_ablation", &["experiment.steps=200"]),
        ("continual", &["experiment.seeds=1", "experiment.warmup=600", "experiment.steps=600", "continual.switches=2"]),
        ("damage", &["experiment.seeds=2", "experiment.warmup=400", "experiment.steps=400"]),
        ("criticality", &["experiment.steps=600"]),
        ("memory", &["experiment.steps=600"]),
        ("capacity", &[]),
        ("rl", &["experiment.seeds=1", "experiment.steps=20", "rl.baseline_episodes=10", "rl.moving_average=5"]),
    ];
    short
        .iter()
        .map(|(name, o)| {
            let cfg = preset(name)?;
            let overrides: Vec<String> = o.iter().map(|s| s.to_string()).collect();
            Ok(ExperimentConfig::parse(&cfg.to_text(), &overrides)?)
        })
        .collect()
}

fn determinism() -> Result<(bool, String, Records)> {
    let mut differing = Vec::new();
    let mut all = Vec::new();
    let configs = determinism_configs()?;
    for cfg in &configs {
        let mut a = sink_for(cfg);
        run(cfg, &mut a)?;
        let mut b = sink_for(cfg);
        run(cfg, &mut b)?;
        let (a, b) = (a.into_inner(), b.into_inner());
        if a != b || a.is_empty() {
            differing.push(cfg.kind.clone());
        }
        all.extend(a);
    }
    let detail = if differing.is_empty() {
        format!("{} experiment kinds rerun byte-identically", configs.len())
    } else {
        format!("differing reruns: {}", differing.join(", "))
    };
    Ok((differing.is_empty(), detail, all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_match_their_kind() {
        for (name, _) in PRESETS {
            let cfg = preset(name).unwrap();
            if name == "desk" {
                assert_eq!(cfg.experiment().unwrap(), ExperimentKind::Suite);
                assert_eq!(cfg.criteria, (1..=12).collect::<Vec<_>>());
            } else {
                assert_eq!(cfg.kind, name);
            }
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn capacity_criterion_reports_the_gap() {
        let (r, recs) = criterion(10).unwrap();
        assert_eq!(r.name, "capacity_formula");
        assert!(r.detail.contains("3.3728e8"), "{}", r.detail);
        assert!(!recs.is_empty());
        assert!(r.line().starts_with(if r.passed { "[PASS]" } else { "[FAIL]" }));
    }

    #[test]
    fn dispatcher_rejects_suite_configs() {
        let cfg = preset("desk").unwrap();
        assert!(run(&cfg, &mut MetricSink::memory("h")).is_err());
        assert!(criterion(13).is_err());
    }
}
