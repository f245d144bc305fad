//! Acceptance suite: one test per acceptance criterion, each printing a
//! PASS line with its measured values (visible under `--nocapture`).
//!
//! Run with:
//!     cargo test -p vqlab-cli --test acceptance -- --nocapture

use std::time::{Duration, Instant};

use proptest::prelude::*;

use vqlab::core::{distortion, Batch, Codebook};
use vqlab::harness::{
    batch_size_sweep, compare_rules, run_experiment, spearman, CodebookInit, ExperimentConfig,
};
use vqlab::kmeans::{init_codebook, lloyd, InitStrategy, DEFAULT_MAX_ITER, DEFAULT_TOL};
use vqlab::streams::{sample_base, DriftKind};
use vqlab::transvq::{
    gradient_check, project, train_step, ProjectorConfig, ProjectorParams,
};
use vqlab::updaters::{ema_batch_step, rbf_weight, softmax_weights, RuleKind, UpdateRule};

/// Final-epoch utilization of the vanilla EMA run in criterion 4, recorded
/// from the first run at seed 0 with the toy defaults and pinned since:
/// exactly one of the sixteen codes stays alive.
const GOLDEN_VANILLA_EMA_FINAL_UTILIZATION: f64 = 1.0 / 16.0;

fn assert_runtime(name: &str, elapsed: Duration, budget: Duration) {
    assert!(
        elapsed <= budget,
        "{name} took {elapsed:?}, budget {budget:?}"
    );
}

#[test]
fn acceptance_01_kmeans_fixed_point() {
    let start = Instant::now();
    let (points, _) = sample_base(DriftKind::Translation, 1500, 1.0, None, 0).unwrap();
    let result = lloyd(
        points.view(),
        16,
        &InitStrategy::KMeansPlusPlus,
        0,
        DEFAULT_MAX_ITER,
        1e-8,
    )
    .unwrap();
    assert!(result.converged, "Lloyd must converge at tol 1e-8");

    // One full-batch winner-take-all update in expectation: every centroid
    // moves eta times its cell-mean pull; eta = 1 is the worst case.
    let mut updated = result.codebook.clone();
    let batch = Batch::from_points(points.clone()).unwrap();
    ema_batch_step(&mut updated, &batch, 1.0).unwrap();
    let mut max_disp = 0.0f64;
    for c in 0..16 {
        let diff = &updated.code(c) - &result.codebook.code(c);
        max_disp = max_disp.max(diff.dot(&diff).sqrt());
    }
    assert!(
        max_disp < 1e-7,
        "full-batch update moved a centroid by {max_disp:.3e}"
    );
    let elapsed = start.elapsed();
    assert_runtime("criterion 1", elapsed, Duration::from_secs(1));
    println!(
        "ACCEPTANCE 1 (k-means fixed point): PASS, max displacement {max_disp:.3e} in {elapsed:?}"
    );
}

#[test]
fn acceptance_02_lyapunov_monotonicity() {
    let start = Instant::now();
    let mut worst_rise = 0.0f64;
    for seed in 0..100u64 {
        let (points, _) = sample_base(DriftKind::Translation, 300, 1.0, None, seed).unwrap();
        let result = lloyd(
            points.view(),
            8,
            &InitStrategy::RandomSample,
            seed,
            DEFAULT_MAX_ITER,
            DEFAULT_TOL,
        )
        .unwrap();
        for w in result.distortion_trace.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    assert!(
        worst_rise <= 1e-12,
        "distortion rose by {worst_rise:.3e} somewhere"
    );
    let elapsed = start.elapsed();
    assert_runtime("criterion 2", elapsed, Duration::from_secs(10));
    println!(
        "ACCEPTANCE 2 (Lyapunov monotonicity, 100 seeds): PASS, worst rise {worst_rise:.3e} in {elapsed:?}"
    );
}

#[test]
fn acceptance_03_ntk_exact_tracking() {
    let start = Instant::now();
    let mut config = ExperimentConfig::toy(
        DriftKind::Translation,
        UpdateRule::new(RuleKind::NtkExact),
    );
    config.batch_size = 1;
    config.epochs = 2;
    config.init = CodebookInit::Lloyd;
    let trace = run_experiment(&config).unwrap();

    // Tracking error, reconstructed from the trace: each non-winning code's
    // displacement per step must equal the step's drift increment exactly
    // (the translation Jacobian is the identity).
    let mut worst = 0.0f64;
    let mut prev_codebook = trace.initial_codebook.clone();
    let mut prev_state = vec![0.0; 2];
    for record in &trace.records {
        for c in 0..config.k {
            if record.winners.contains(&c) {
                continue;
            }
            let mut err = 0.0;
            for j in 0..config.d {
                let moved = record.codebook[[c, j]] - prev_codebook[[c, j]];
                let wanted = record.drift_state[j] - prev_state[j];
                err += (moved - wanted) * (moved - wanted);
            }
            worst = worst.max(err.sqrt());
        }
        prev_codebook = record.codebook.clone();
        prev_state = record.drift_state.clone();
    }
    assert!(worst < 1e-9, "per-step tracking error {worst:.3e}");
    assert!(
        trace.epoch_utilization.iter().all(|u| *u == 1.0),
        "utilization dropped below 1: {:?}",
        trace.epoch_utilization
    );
    let elapsed = start.elapsed();
    assert_runtime("criterion 3", elapsed, Duration::from_secs(5));
    println!(
        "ACCEPTANCE 3 (exact drift propagation): PASS, worst tracking error {worst:.3e}, utilization {:?} in {elapsed:?}",
        trace.epoch_utilization
    );
}

#[test]
fn acceptance_04_dead_codes_versus_rescue() {
    let start = Instant::now();
    let config = ExperimentConfig::toy(DriftKind::Translation, UpdateRule::new(RuleKind::Ema));
    let rules = [
        UpdateRule::new(RuleKind::Ema),
        UpdateRule::new(RuleKind::NsvqSoftmax),
    ];
    let results = compare_rules(&config, &rules).unwrap();
    let ema = &results[0].trace;
    let nsvq = &results[1].trace;

    let ema_util = *ema.epoch_utilization.last().unwrap();
    let nsvq_util = *nsvq.epoch_utilization.last().unwrap();
    let ema_dist = ema.final_record().unwrap().distortion_target;
    let nsvq_dist = nsvq.final_record().unwrap().distortion_target;

    assert!(ema_util < 1.0, "vanilla EMA kept full utilization");
    assert_eq!(
        ema_util, GOLDEN_VANILLA_EMA_FINAL_UTILIZATION,
        "golden vanilla utilization moved"
    );
    assert_eq!(nsvq_util, 1.0, "softmax rescue lost codes");
    assert!(
        nsvq_dist < ema_dist,
        "rescue did not improve target distortion: {nsvq_dist} !< {ema_dist}"
    );
    let elapsed = start.elapsed();
    assert_runtime("criterion 4", elapsed, Duration::from_secs(30));
    println!(
        "ACCEPTANCE 4 (dead codes vs rescue): PASS, ema util {ema_util} (golden), nsvq util {nsvq_util}, target distortion {nsvq_dist:.4} < {ema_dist:.4} in {elapsed:?}"
    );
}

#[test]
fn acceptance_05_projector_gradient_exactness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in [1usize, 4, 16] {
        for dim in [2usize, 3] {
            for d_model in [8usize, 16] {
                let cfg = ProjectorConfig { dim, d_model, mlp_ratio: 2 };
                let seed = (k * 100 + dim * 10 + d_model) as u64;
                let params = ProjectorParams::random_init(cfg, seed).unwrap();
                let (points, _) =
                    sample_base(DriftKind::Translation, k.max(32), 1.0, None, seed ^ 0xABCD)
                        .unwrap();
                let mut base =
                    init_codebook(points.view(), k, &InitStrategy::RandomSample, seed).unwrap();
                if dim == 3 {
                    // The streams are 2D; lift to 3D by appending a
                    // deterministic third coordinate.
                    let mut lifted = lift_to_3d(&base);
                    std::mem::swap(&mut base, &mut lifted);
                }
                let err = gradient_check(&params, &base, 1e-5).unwrap();
                worst = worst.max(err);
                assert!(
                    err <= 1e-5,
                    "K={k} d={dim} d_model={d_model}: relative error {err:.3e}"
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert_runtime("criterion 5", elapsed, Duration::from_secs(30));
    println!(
        "ACCEPTANCE 5 (projector gradient exactness, 12 configs): PASS, worst relative error {worst:.3e} in {elapsed:?}"
    );
}

fn lift_to_3d(base: &Codebook) -> Codebook {
    let k = base.k();
    let mut rows = Vec::with_capacity(k * 3);
    for c in 0..k {
        let row = base.code(c);
        rows.push(row[0]);
        rows.push(row[1]);
        rows.push(0.25 * row[0] - 0.5 * row[1] + 0.1);
    }
    Codebook::new(ndarray::Array2::from_shape_vec((k, 3), rows).unwrap()).unwrap()
}

#[test]
fn acceptance_06_projector_full_propagation() {
    let start = Instant::now();
    let cfg = ProjectorConfig { dim: 2, d_model: 16, mlp_ratio: 2 };
    let mut params = ProjectorParams::random_init(cfg, 42).unwrap();
    let (points, _) = sample_base(DriftKind::Translation, 32, 1.0, None, 42).unwrap();
    let base = init_codebook(points.view(), 16, &InitStrategy::RandomSample, 42).unwrap();
    let base_bits: Vec<u64> = base.codes().iter().map(|v| v.to_bits()).collect();

    let e_x = {
        let mut target = base.code(3).to_owned();
        target[0] += 1.0;
        target[1] -= 0.5;
        target
    };
    let report = train_step(&mut params, &base, e_x.view(), 3, 1e-3).unwrap();
    let moved = report
        .row_displacements
        .iter()
        .filter(|v| **v > 1e-12)
        .count();
    assert_eq!(moved, 16, "only {moved}/16 transformed codes moved");
    let after_bits: Vec<u64> = base.codes().iter().map(|v| v.to_bits()).collect();
    assert_eq!(base_bits, after_bits, "base codebook changed bits");
    let elapsed = start.elapsed();
    assert_runtime("criterion 6", elapsed, Duration::from_secs(5));
    println!(
        "ACCEPTANCE 6 (winner-only step moves all codes): PASS, 16/16 rows moved, base frozen, in {elapsed:?}"
    );
}

#[test]
fn acceptance_07_projector_identity_at_init() {
    let start = Instant::now();
    let cfg = ProjectorConfig { dim: 2, d_model: 16, mlp_ratio: 2 };
    let params = ProjectorParams::identity_init(cfg, 7).unwrap();
    let (points, _) = sample_base(DriftKind::Translation, 32, 1.0, None, 7).unwrap();
    let base = init_codebook(points.view(), 16, &InitStrategy::RandomSample, 7).unwrap();
    let (projected, _) = project(&params, &base).unwrap();
    let mut max_abs_dev = 0.0f64;
    for (a, b) in projected.codes().iter().zip(base.codes().iter()) {
        max_abs_dev = max_abs_dev.max((a - b).abs());
    }
    assert_eq!(max_abs_dev, 0.0, "identity init deviated");
    let elapsed = start.elapsed();
    assert_runtime("criterion 7", elapsed, Duration::from_secs(1));
    println!(
        "ACCEPTANCE 7 (identity at init): PASS, max abs deviation {max_abs_dev} in {elapsed:?}"
    );
}

#[test]
fn acceptance_08_batch_size_effect() {
    let start = Instant::now();
    // The batch-size effect at desk scale: the per-batch cluster-mean rule
    // with a strong mixing factor, three epochs of sample budget, batch
    // sizes {1, 4, 16, 64}, ten seeds.
    let mut rhos = Vec::new();
    for seed in 0..10u64 {
        let mut config = ExperimentConfig::toy(
            DriftKind::Translation,
            UpdateRule::new(RuleKind::Ema).with_alpha(0.8),
        );
        config.seed = seed;
        config.epochs = 3;
        let rows = batch_size_sweep(&config, &[1, 4, 16, 64]).unwrap();
        let bs: Vec<f64> = rows.iter().map(|r| r.batch_size as f64).collect();
        let ds: Vec<f64> = rows.iter().map(|r| r.final_distortion).collect();
        rhos.push(spearman(&bs, &ds).unwrap());
    }
    let mut sorted = rhos.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = (sorted[4] + sorted[5]) / 2.0;
    assert!(
        median <= -0.8,
        "median Spearman {median} over seeds, per-seed {rhos:?}"
    );
    let elapsed = start.elapsed();
    assert_runtime("criterion 8", elapsed, Duration::from_secs(120));
    println!(
        "ACCEPTANCE 8 (batch-size effect): PASS, median Spearman {median:.3} (per-seed {rhos:?}) in {elapsed:?}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 10_000,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    /// Criterion 9, RBF side: weights live in (0, 1], equal one exactly at
    /// distance zero, and decay strictly with distance.
    #[test]
    fn acceptance_09_rbf_weight_properties(
        dist in 0.0f64..50.0,
        gap in 1e-6f64..10.0,
        bandwidth in 0.1f64..20.0,
    ) {
        let w = rbf_weight(dist, bandwidth);
        prop_assert!(w > 0.0 && w <= 1.0);
        prop_assert_eq!(w == 1.0, dist == 0.0);
        prop_assert_eq!(rbf_weight(0.0, bandwidth), 1.0);
        let farther = rbf_weight(dist + gap, bandwidth);
        prop_assert!(farther < w, "weight failed to decay: {} !< {}", farther, w);
    }

    /// Criterion 9, softmax side: weights live in (0, 1], sum to one over
    /// the set they are defined on, and decay strictly with distance.
    #[test]
    fn acceptance_09_softmax_weight_properties(
        dists in prop::collection::vec(0.0f64..50.0, 2..16),
        gap in 1e-6f64..10.0,
        tau in 0.1f64..20.0,
    ) {
        let weights = softmax_weights(&dists, tau);
        let total: f64 = weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for w in &weights {
            prop_assert!(*w > 0.0 && *w <= 1.0);
        }
        // Append a strictly farther entry: it must weigh strictly less than
        // the entry it dominates.
        let mut extended = dists.clone();
        extended.push(dists[0] + gap);
        let w2 = softmax_weights(&extended, tau);
        prop_assert!(w2[extended.len() - 1] < w2[0]);
    }
}

#[test]
fn acceptance_09_runtime_note() {
    // The two property blocks above run 10,000 cases each; proptest treats
    // any counterexample as a test failure, so reaching this point in the
    // suite with them green is the "zero failures" requirement.
    println!("ACCEPTANCE 9 (weight-kernel properties): PASS when both 10k-case property tests above are green");
}

#[test]
fn acceptance_10_cli_determinism() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_vqlab");
    let out_a = std::env::temp_dir().join("vqlab_acc10_a");
    let out_b = std::env::temp_dir().join("vqlab_acc10_b");
    for out in [&out_a, &out_b] {
        let _ = std::fs::remove_dir_all(out);
        let status = std::process::Command::new(bin)
            .args([
                "demo",
                "translation",
                "--rule",
                "nsvq-softmax",
                "--seed",
                "0",
                "--epochs",
                "2",
                "--out",
            ])
            .arg(out)
            .status()
            .expect("demo run");
        assert!(status.success());
    }
    let a = std::fs::read(out_a.join("trace.csv")).unwrap();
    let b = std::fs::read(out_b.join("trace.csv")).unwrap();
    assert_eq!(a, b, "repeated CLI runs diverged");
    let _ = std::fs::remove_dir_all(&out_a);
    let _ = std::fs::remove_dir_all(&out_b);
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE 10 (CLI determinism): PASS, {} identical bytes in {elapsed:?}",
        a.len()
    );
}

/// The stationary sanity check behind criterion 1's framing: with the drift
/// switched off and a Lloyd initialization, running the online rule does
/// not degrade distortion beyond one percent.
#[test]
fn stationary_run_reaches_and_holds_the_fixed_point() {
    let mut config = ExperimentConfig::toy(
        DriftKind::Translation,
        UpdateRule::new(RuleKind::VanillaSa).with_eta(0.05),
    );
    config.drift_rate = 0.0;
    config.epochs = 3;
    config.init = CodebookInit::Lloyd;
    let trace = run_experiment(&config).unwrap();
    let initial = distortion(
        trace.base.view(),
        &Codebook::new(trace.initial_codebook.clone()).unwrap(),
    )
    .unwrap();
    let last = trace.final_record().unwrap().distortion_current;
    assert!(
        (last - initial).abs() <= 0.01 * initial,
        "stationary distortion drifted from {initial} to {last}"
    );
}
