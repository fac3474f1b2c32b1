//! Checkpoints of alignment runs and replay from them.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "TRPHCKPT" | u32 version | u64 len + config hash | u64 steps done
//! u64 records written
//! recurrent weight snapshot | state snapshot
//! W_in | R | R_V | W_fb | b | TFM | f64 TFM alpha | f64 running error
//! u64 structural draws
//! f64 + u64 cosine window | f64 + u64 error window
//! u64 len, then per curve point: u64 step, u8 has cosine, f64 cosine, f64 mse
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use trophic_core::learning::LearnableHeads;
use trophic_core::network::Network;
use trophic_core::snapshot::{self, ByteReader, ByteWriter};
use trophic_core::structure::TrophicFieldMap;

use crate::config::ExperimentConfig;
use crate::harness::{self, AlignmentReport, AlignmentState, HarnessError, Stream};
use crate::metrics::MetricSink;

pub const MAGIC: [u8; 8] = *b"TRPHCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error(transparent)]
    Core(#[from] trophic_core::error::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("checkpoint was written under config {found}, not {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint shape does not match the config: {0}")]
    Shape(&'static str),
    #[error("checkpoints are only written for alignment runs")]
    Unsupported,
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A paused alignment run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub steps_done: u64,
    /// Records the run had written when the checkpoint was taken.
    pub records: u64,
    pub network: Network,
    pub alignment: AlignmentState,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.usize(self.config_hash.len());
        w.bytes(self.config_hash.as_bytes());
        w.u64(self.steps_done);
        w.u64(self.records);
        let net = &self.network;
        snapshot::write_matrix(&mut w, &net.w);
        snapshot::write_state(&mut w, &net.state);
        w.matrix(&net.w_in);
        w.matrix(&net.heads.r);
        w.f64s(&net.heads.r_v);
        w.matrix(&net.heads.w_fb);
        w.f64s(&net.heads.b);
        w.matrix(&net.tfm.t);
        w.f64(net.tfm.alpha);
        w.f64(net.ewma_error);
        w.u64(net.structural_draws());
        let a = &self.alignment;
        w.f64(a.cos_window.0);
        w.u64(a.cos_window.1);
        w.f64(a.mse_window.0);
        w.u64(a.mse_window.1);
        w.usize(a.curve.len());
        for &(step, cos, mse) in &a.curve {
            w.u64(step);
            w.u8(cos.is_some() as u8);
            w.f64(cos.unwrap_or(0.0));
            w.f64(mse);
        }
        w.into_inner()
    }

    /// Decodes a checkpoint taken under `cfg`. The network is rebuilt from
    /// the config and every stored part is checked against its shape.
    pub fn decode(bytes: &[u8], cfg: &ExperimentConfig) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.bytes(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = r.usize()?;
        let hash = String::from_utf8_lossy(r.bytes(n)?).into_owned();
        let expected = cfg.hash();
        if hash != expected {
            return Err(CheckpointError::HashMismatch { expected, found: hash });
        }
        let steps_done = r.u64()?;
        let records = r.u64()?;

        let mut net = Network::new(cfg.network(1, 1, cfg.seed).map_err(HarnessError::from)?)?;
        let w = snapshot::read_matrix(&mut r)?;
        if w.layout() != net.w.layout() || w.masks_self_connections() != net.w.masks_self_connections() {
            return Err(CheckpointError::Shape("recurrent layout"));
        }
        let state = snapshot::read_state(&mut r)?;
        if state.neurons() != net.state.neurons() {
            return Err(CheckpointError::Shape("state length"));
        }
        let w_in = r.matrix()?;
        let heads = LearnableHeads {
            r: r.matrix()?,
            r_v: r.f64s()?,
            w_fb: r.matrix()?,
            b: r.f64s()?,
        };
        let tfm = TrophicFieldMap {
            t: r.matrix()?,
            alpha: r.f64()?,
        };
        let same = |a: &trophic_core::dense::Matrix, b: &trophic_core::dense::Matrix| a.rows() == b.rows() && a.cols() == b.cols();
        if !same(&w_in, &net.w_in)
            || !same(&heads.r, &net.heads.r)
            || !same(&heads.w_fb, &net.heads.w_fb)
            || heads.r_v.len() != net.heads.r_v.len()
            || heads.b.len() != net.heads.b.len()
            || !same(&tfm.t, &net.tfm.t)
        {
            return Err(CheckpointError::Shape("heads or trophic map"));
        }
        net.w = w;
        net.state = state;
        net.w_in = w_in;
        net.heads = heads;
        net.tfm = tfm;
        net.ewma_error = r.f64()?;
        net.set_structural_draws(r.u64()?);

        let mut alignment = AlignmentState {
            cos_window: (r.f64()?, r.u64()?),
            mse_window: (r.f64()?, r.u64()?),
            curve: Vec::new(),
        };
        for _ in 0..r.usize()? {
            let step = r.u64()?;
            let has = r.u8()?;
            let cos = r.f64()?;
            let mse = r.f64()?;
            alignment.curve.push((step, (has == 1).then_some(cos), mse));
        }
        if !r.is_at_end() {
            return Err(CheckpointError::Shape("trailing bytes"));
        }
        Ok(Self {
            config_hash: hash,
            steps_done,
            records,
            network: net,
            alignment,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|source| io(path, source))
    }

    pub fn load(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| io(path, source))?;
        Self::decode(&bytes, cfg)
    }
}

fn io(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// File name of the checkpoint taken after `step` steps.
pub fn file_name(step: usize) -> String {
    format!("checkpoint-{step:08}.bin")
}

fn experiment_name(cfg: &ExperimentConfig) -> String {
    format!("{}/alignment", cfg.id)
}

/// An alignment run that saves a checkpoint into `dir` every
/// `output.checkpoint_every` steps. Returns the report and the files written.
pub fn run_alignment<W: Write>(
    cfg: &ExperimentConfig,
    sink: &mut MetricSink<W>,
    dir: &Path,
) -> Result<(AlignmentReport, Vec<PathBuf>)> {
    let mut net = Network::new(cfg.network(1, 1, cfg.seed).map_err(HarnessError::from)?)?;
    let stream = Stream::one_step(&cfg.task.spec().map_err(HarnessError::from)?, cfg.steps, cfg.seed)?;
    let mut state = AlignmentState::default();
    let mut files = Vec::new();
    let hash = cfg.hash();
    let every = cfg.checkpoint_every;
    harness::alignment_loop(cfg, &mut net, &stream, 0, &mut state, sink, &experiment_name(cfg), |t, net, st, written| {
        if every > 0 && t % every == 0 && t < stream.len() {
            let ck = Checkpoint {
                config_hash: hash.clone(),
                steps_done: t as u64,
                records: written as u64,
                network: net.clone(),
                alignment: st.clone(),
            };
            let path = dir.join(file_name(t));
            ck.save(&path).map_err(|e| HarnessError::Invalid(e.to_string()))?;
            files.push(path);
        }
        Ok(())
    })?;
    Ok((state.report(harness::untrained_mse(&stream, cfg.curve_every)), files))
}

/// Continues a checkpointed run to the end, writing only the records that
/// follow the checkpoint.
pub fn replay<W: Write>(cfg: &ExperimentConfig, ck: Checkpoint, sink: &mut MetricSink<W>) -> Result<AlignmentReport> {
    if cfg.experiment().map_err(HarnessError::from)? != crate::config::ExperimentKind::Alignment {
        return Err(CheckpointError::Unsupported);
    }
    let stream = Stream::one_step(&cfg.task.spec().map_err(HarnessError::from)?, cfg.steps, cfg.seed)?;
    let start = ck.steps_done as usize;
    if start > stream.len() {
        return Err(CheckpointError::Shape("checkpoint is past the end of the run"));
    }
    let mut net = ck.network;
    let mut state = ck.alignment;
    harness::alignment_loop(cfg, &mut net, &stream, start, &mut state, sink, &experiment_name(cfg), |_, _, _, _| Ok(()))?;
    Ok(state.report(harness::untrained_mse(&stream, cfg.curve_every)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        ExperimentConfig::parse(
            "[experiment]\nkind = alignment\nsteps = 120\n[network]\nblocks = 4\nblock_size = 4\nmax_blocks_per_row = 2\n[structure]\nperiod = 25\n[output]\ncurve_every = 10\ncheckpoint_every = 50\n",
            &[],
        )
        .unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let cfg = config();
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricSink::memory(&cfg.hash());
        let (_, files) = run_alignment(&cfg, &mut sink, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let ck = Checkpoint::load(&files[0], &cfg).unwrap();
        assert_eq!(ck.steps_done, 50);
        assert_eq!(ck.alignment.curve.len(), 5);
        assert_eq!(Checkpoint::decode(&ck.encode(), &cfg).unwrap(), ck);
    }

    #[test]
    fn replay_reproduces_the_tail() {
        let cfg = config();
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricSink::memory(&cfg.hash());
        let (full, files) = run_alignment(&cfg, &mut sink, dir.path()).unwrap();
        let original = sink.into_inner();
        let lines: Vec<&[u8]> = original.split_inclusive(|&b| b == b'\n').collect();
        for f in &files {
            let ck = Checkpoint::load(f, &cfg).unwrap();
            let skip = ck.records as usize;
            let mut resumed = MetricSink::memory(&cfg.hash());
            let report = replay(&cfg, ck, &mut resumed).unwrap();
            assert_eq!(resumed.into_inner(), lines[skip..].concat());
            assert_eq!(report, full);
        }
    }

    #[test]
    fn foreign_config_is_rejected() {
        let cfg = config();
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricSink::memory(&cfg.hash());
        let (_, files) = run_alignment(&cfg, &mut sink, dir.path()).unwrap();
        let other = ExperimentConfig::parse(&cfg.to_text(), &["experiment.seed=2".into()]).unwrap();
        assert!(matches!(Checkpoint::load(&files[0], &other), Err(CheckpointError::HashMismatch { .. })));
        let bytes = std::fs::read(&files[0]).unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[1..], &cfg), Err(CheckpointError::BadMagic)));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3], &cfg).is_err());
    }
}
