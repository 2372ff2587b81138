//! Self-check harness behind the `kernel-selfcheck` CLI command: identity,
//! shape, pooling-oracle, and gradient checks with a machine-readable report.

use serde::{Deserialize, Serialize};

use crate::backward::backward;
use crate::forward::{adaptive_pool, editor_forward, l1_loss};
use crate::matrix::Matrix;
use crate::params::{EditorConfig, EditorParams, SplitMix64};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckReport>,
    pub all_passed: bool,
}

#[derive(Debug, Clone)]
pub struct SelfCheckOptions {
    pub seed: u64,
    pub gradient_configs: usize,
    pub gradient_tolerance: f64,
    pub epsilon: f64,
    /// Test-harness hook: perturb one analytic gradient entry so the
    /// gradient check must fail. Negative control only.
    pub corrupt_gradient: bool,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            seed: 7,
            gradient_configs: 5,
            gradient_tolerance: 1e-4,
            epsilon: 1e-5,
            corrupt_gradient: false,
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

fn check_identity(rng: &mut SplitMix64) -> CheckReport {
    let mut failures = Vec::new();
    for k in [1usize, 4, 49, 256] {
        let cfg = EditorConfig::new(8, 2, 2);
        let params = match EditorParams::seeded(cfg, rng.next_u64()) {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("K={k}: {e}"));
                continue;
            }
        };
        let e_v = random_matrix(k, 8, rng);
        let e_act = random_matrix(32, 8, rng);
        match editor_forward(&e_v, &e_act, &params) {
            Ok(out) => {
                let bitwise = out
                    .data()
                    .iter()
                    .zip(e_v.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !bitwise {
                    failures.push(format!("K={k}: zero-init output differs from input"));
                }
            }
            Err(e) => failures.push(format!("K={k}: {e}")),
        }
    }
    CheckReport {
        name: "zero_init_identity".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "zero-init editor is bit-exact identity for K in {1,4,49,256}".into()
        } else {
            failures.join("; ")
        },
    }
}

fn check_shapes(rng: &mut SplitMix64) -> CheckReport {
    let cfg = EditorConfig::new(8, 4, 2);
    let params = EditorParams::seeded_dense(cfg, rng.next_u64()).expect("params");
    let e_act = random_matrix(32, 8, rng);
    let mut failures = Vec::new();
    for k in [1usize, 4, 49, 256] {
        let e_v = random_matrix(k, 8, rng);
        match editor_forward(&e_v, &e_act, &params) {
            Ok(out) => {
                if out.rows() != k || out.cols() != 8 {
                    failures.push(format!("K={k}: got {}x{}", out.rows(), out.cols()));
                }
            }
            Err(e) => failures.push(format!("K={k}: {e}")),
        }
    }
    CheckReport {
        name: "shape_preservation".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "output shape is KxD for K in {1,4,49,256}".into()
        } else {
            failures.join("; ")
        },
    }
}

fn check_pooling(rng: &mut SplitMix64) -> CheckReport {
    let mut failures = Vec::new();
    for n in 1..=100usize {
        let input = random_matrix(n, 4, rng);
        let out = match adaptive_pool(&input, 32) {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("N={n}: {e}"));
                continue;
            }
        };
        // Direct bin enumeration.
        for i in 0..32 {
            let start = i * n / 32;
            let end = ((i + 1) * n).div_ceil(32);
            for c in 0..4 {
                let mut acc = 0.0;
                for r in start..end {
                    acc += input.get(r, c);
                }
                let expect = acc / (end - start) as f64;
                if (out.get(i, c) - expect).abs() > 1e-12 {
                    failures.push(format!("N={n} row {i} col {c}"));
                }
            }
        }
        if n == 32 && out != input {
            failures.push("N=32 not exact identity".into());
        }
    }
    CheckReport {
        name: "adaptive_pool_oracle".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "pooling matches bin enumeration for N in 1..=100, M=32".into()
        } else {
            format!("{} mismatches: {}", failures.len(), failures[0])
        },
    }
}

fn check_gradients(opts: &SelfCheckOptions, rng: &mut SplitMix64) -> CheckReport {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for cfg_idx in 0..opts.gradient_configs {
        let d = [4usize, 8, 8, 16, 6][cfg_idx % 5];
        let heads = [2usize, 2, 4, 4, 3][cfg_idx % 5];
        let blocks = 1 + cfg_idx % 2;
        let mut cfg = EditorConfig::new(d, heads, blocks);
        cfg.ffn_dim = 2 * d;
        let params = EditorParams::seeded_dense(cfg.clone(), rng.next_u64()).expect("params");
        let k = 1 + (cfg_idx % 4);
        let e_v = random_matrix(k, d, rng);
        let e_act = random_matrix(6, d, rng);
        let target = random_matrix(k, d, rng);

        let grads = match backward(&e_v, &e_act, &params, &target) {
            Ok(g) => g,
            Err(e) => {
                failures.push(format!("config {cfg_idx}: {e}"));
                continue;
            }
        };
        let n = params.scalar_count();
        // Deterministic stride keeps the self-check fast; the acceptance
        // suite sweeps every entry.
        let stride = (n / 200).max(1);
        let mut idx = 0usize;
        while idx < n {
            let base = params.scalar(idx);
            let mut plus = params.clone();
            plus.set_scalar(idx, base + opts.epsilon);
            let mut minus = params.clone();
            minus.set_scalar(idx, base - opts.epsilon);
            let lp = l1_loss(&editor_forward(&e_v, &e_act, &plus).unwrap(), &target).unwrap();
            let lm = l1_loss(&editor_forward(&e_v, &e_act, &minus).unwrap(), &target).unwrap();
            let numeric = (lp - lm) / (2.0 * opts.epsilon);
            let mut analytic = grads.scalar(idx, &cfg);
            if opts.corrupt_gradient && cfg_idx == 0 && idx == 0 {
                analytic += 1.0;
            }
            let denom = analytic.abs().max(numeric.abs()).max(1e-10);
            let rel = (analytic - numeric).abs() / denom;
            if (analytic - numeric).abs() >= 1e-9 && rel > opts.gradient_tolerance {
                failures.push(format!(
                    "config {cfg_idx} param {idx}: analytic {analytic:.3e} vs numeric {numeric:.3e}"
                ));
            }
            worst = worst.max(rel);
            idx += stride;
        }
    }
    CheckReport {
        name: "gradient_finite_difference".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "{} configs, worst relative error {:.3e} (tolerance {:.1e})",
                opts.gradient_configs, worst, opts.gradient_tolerance
            )
        } else {
            failures.join("; ")
        },
    }
}

/// Runs all self-checks and assembles the report.
pub fn run_selfcheck(opts: &SelfCheckOptions) -> SelfCheckReport {
    let mut rng = SplitMix64::new(opts.seed);
    let checks = vec![
        check_identity(&mut rng),
        check_shapes(&mut rng),
        check_pooling(&mut rng),
        check_gradients(opts, &mut rng),
    ];
    let all_passed = checks.iter().all(|c| c.passed);
    SelfCheckReport {
        seed: opts.seed,
        checks,
        all_passed,
    }
}
