//! Fixtures shared by the benchmarks.

use weaver_core::calibration::{build_synthetic_calibration, capture_activations};
use weaver_core::specialization::allocate;
use weaver_core::weaving::weave_model;
use weaver_core::{DenseGluModel, HParams, Matrix, MoeModel, WeaverConfig};

/// Deterministic pseudo-random matrix without pulling in an RNG.
pub fn filled(rows: usize, cols: usize, salt: f32) -> Matrix {
    let data = (0..rows * cols).map(|i| ((i as f32 * 0.618 + salt).sin() * 43758.547).fract()).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Desk-sized dense model and its woven pruning-mode counterpart.
pub fn models(k_active: usize) -> (DenseGluModel, MoeModel) {
    let hp = HParams::default();
    let dense = DenseGluModel::random(&hp, 7).expect("model");
    let calib = build_synthetic_calibration(12, 4, 3, 7).expect("calibration");
    let acts = capture_activations(&dense, &calib).expect("capture").layers;
    let cfg = WeaverConfig { k_active, ..WeaverConfig::default() };
    let allocs = allocate(&acts, calib.num_tasks(), &cfg).expect("allocation");
    let moe = weave_model(&dense, &acts, &allocs, &cfg).expect("weave");
    (dense, moe)
}
