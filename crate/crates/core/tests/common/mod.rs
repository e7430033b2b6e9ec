//! Desk-scale setup shared by the slow integration tests: a synthetic
//! 42-task corpus and a small dense model trained on it.

#![allow(dead_code)]

use std::path::PathBuf;
use std::time::{Duration, Instant};

use weaver_core::calibration::{build_synthetic_calibration, capture_activations, synthetic_records, SyntheticSpec};
use weaver_core::training::{train_dense, Corpus, LossRow, TrainConfig};
use weaver_core::{ActivationMatrix, CalibrationSet, DenseGluModel, HParams};

pub const TASKS: usize = 42;
pub const CLUSTERS: usize = 6;
pub const DATA_SEED: u64 = 1;

pub fn hparams() -> HParams {
    HParams {
        d_model: 64,
        n_heads: 4,
        n_layers: 4,
        d_ffn: 256,
        max_seq_len: 128,
        ..HParams::default()
    }
}

pub fn pretrain_config() -> TrainConfig {
    TrainConfig {
        total_steps: 1000,
        warmup_steps: 50,
        batch_size: 16,
        seq_len: 64,
        ..TrainConfig::default()
    }
}

pub struct Desk {
    pub dense: DenseGluModel,
    pub train: Corpus,
    pub held: Corpus,
    pub calib: CalibrationSet,
    pub acts: Vec<ActivationMatrix>,
    /// Empty when the model came from the cache.
    pub trace: Vec<LossRow>,
    pub train_time: Duration,
}

pub fn corpus() -> (Corpus, Corpus) {
    let spec = SyntheticSpec::corpus(TASKS, CLUSTERS, 100, DATA_SEED);
    let records = synthetic_records(&spec).expect("corpus");
    Corpus::from_texts(records.into_iter().map(|r| r.text)).split()
}

fn cache_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk-dense-v1.ewck")
}

/// Trains the desk model, or loads it from the target directory when
/// `allow_cache` is set and an earlier run already trained it. Training is
/// deterministic, so the cached model is identical to a fresh one.
pub fn desk(allow_cache: bool) -> Desk {
    let (train, held) = corpus();
    let path = cache_path();
    let start = Instant::now();
    let (dense, trace) = match allow_cache.then(|| DenseGluModel::load(&path).ok()).flatten() {
        Some(m) => (m, Vec::new()),
        None => {
            let init = DenseGluModel::random(&hparams(), DATA_SEED).expect("init");
            let (m, trace) = train_dense(&init, &train, &pretrain_config()).expect("pretraining");
            let tmp = path.with_extension("tmp");
            if m.save(&tmp).is_ok() {
                let _ = std::fs::rename(&tmp, &path);
            }
            (m, trace)
        }
    };
    let train_time = start.elapsed();
    let calib = build_synthetic_calibration(TASKS, CLUSTERS, 5, DATA_SEED).expect("calibration");
    let acts = capture_activations(&dense, &calib).expect("capture").layers;
    Desk {
        dense,
        train,
        held,
        calib,
        acts,
        trace,
        train_time,
    }
}
