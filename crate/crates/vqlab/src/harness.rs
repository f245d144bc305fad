//! Reproducible experiment runs: a drift process, a codebook, one update
//! rule, and a per-step trace of everything that happened.
//!
//! A run executes `epochs` passes over a shuffled permutation of the base
//! dataset in batches: draw the drifted batch, assign it, update the
//! codebook under the rule, then advance the drift state. Schedules apply
//! at epoch boundaries. Everything derives from the run seed, so identical
//! configs produce byte-identical traces.

use std::collections::BTreeSet;
use std::io::{self, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::{assign_batch, distortion, nearest_code, Batch, Codebook};
use crate::error::{Error, Result};
use crate::kmeans::{lloyd, InitStrategy, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::streams::{DriftKind, DriftProcess, DriftState, StreamOptions};
use crate::updaters::{
    apply_schedules, delta_e_weighted_step, ema_batch_step, modified_ste_step, nsvq_rbf_step,
    nsvq_softmax_step, vanilla_sa_step, RuleKind, UpdateRule,
};

/// Batch size used by the toy demos when none is given.
pub const DEFAULT_BATCH_SIZE: usize = 32;
/// Epochs used by the toy demos when none is given.
pub const DEFAULT_EPOCHS: usize = 10;
/// Snapshots captured per run.
pub const DEFAULT_SNAPSHOTS: usize = 5;

/// How the initial codebook is drawn.
#[derive(Debug, Clone)]
pub enum CodebookInit {
    /// `K x d` standard normal entries (the toy-demo default).
    Gaussian,
    /// Converged Lloyd's k-means on the base points.
    Lloyd,
    Explicit(Codebook),
}

/// Full description of one run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub process: DriftKind,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub rule: UpdateRule,
    pub seed: u64,
    pub snapshots: usize,
    pub init: CodebookInit,
    pub noise_scale: f64,
    pub drift_rate: f64,
}

impl ExperimentConfig {
    /// Toy-demo defaults: 1500 points, 16 codes in 2D, unit noise, drift
    /// rate 0.1, Gaussian codebook init, seed 0.
    pub fn toy(process: DriftKind, rule: UpdateRule) -> Self {
        Self {
            process,
            n: 1500,
            k: 16,
            d: 2,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            rule,
            seed: 0,
            snapshots: DEFAULT_SNAPSHOTS,
            init: CodebookInit::Gaussian,
            noise_scale: 1.0,
            drift_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.d == 0 || self.batch_size == 0 || self.snapshots == 0
        {
            return Err(Error::InvalidConfig("all counts must be >= 1".into()));
        }
        if self.batch_size > self.n {
            return Err(Error::InvalidConfig(format!(
                "batch size {} exceeds dataset size {}",
                self.batch_size, self.n
            )));
        }
        if self.noise_scale.is_nan() || self.noise_scale <= 0.0 {
            return Err(Error::InvalidConfig("noise scale must be > 0".into()));
        }
        if !self.drift_rate.is_finite() || self.drift_rate < 0.0 {
            return Err(Error::InvalidConfig("drift rate must be finite and >= 0".into()));
        }
        self.rule.validate()
    }
}

/// Everything recorded at one step; metrics are taken at the end-of-step
/// state (after the codebook update and the drift step).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Flattened drift state (theta, or A row-major).
    pub drift_state: Vec<f64>,
    pub codebook: Array2<f64>,
    /// Pre-update batch assignment.
    pub winners: Vec<usize>,
    /// Distortion of the full drifted dataset against the codebook.
    pub distortion_current: f64,
    /// Distortion of the fixed targets against the codebook.
    pub distortion_target: f64,
    /// Fraction of codes hit so far in the current epoch.
    pub utilization: f64,
    pub dead_codes: usize,
}

/// Point-cloud snapshot for plotting.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub batch_points: Array2<f64>,
    pub codebook: Array2<f64>,
}

/// Per-step trace of one run.
#[derive(Debug, Clone)]
pub struct TraceLog {
    pub rule_name: String,
    pub process_name: String,
    pub batch_size: usize,
    pub base: Array2<f64>,
    pub targets: Array2<f64>,
    pub initial_codebook: Array2<f64>,
    pub records: Vec<StepRecord>,
    /// Initial state plus evenly spaced mid-run snapshots.
    pub snapshots: Vec<Snapshot>,
    /// Full-epoch utilization, one entry per completed epoch.
    pub epoch_utilization: Vec<f64>,
}

impl TraceLog {
    pub fn final_record(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Writes the trace as CSV: one row per step, header mandatory. The
    /// drift state is flattened into a single space-separated column.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "step,rule,process,B,theta_or_A,distortion_current,distortion_target,utilization,dead_codes"
        )?;
        for r in &self.records {
            let state: Vec<String> = r.drift_state.iter().map(|v| format!("{v}")).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                self.rule_name,
                self.process_name,
                self.batch_size,
                state.join(" "),
                r.distortion_current,
                r.distortion_target,
                r.utilization,
                r.dead_codes
            )?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

fn init_codebook_for_run(config: &ExperimentConfig, process: &DriftProcess) -> Result<Codebook> {
    match &config.init {
        CodebookInit::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1);
            let codes = Array2::from_shape_fn((config.k, config.d), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            Codebook::new(codes)
        }
        CodebookInit::Lloyd => {
            let result = lloyd(
                process.base(),
                config.k,
                &InitStrategy::KMeansPlusPlus,
                config.seed,
                DEFAULT_MAX_ITER,
                DEFAULT_TOL,
            )?;
            Ok(result.codebook)
        }
        CodebookInit::Explicit(cb) => {
            if cb.k() != config.k || cb.dim() != config.d {
                return Err(Error::ShapeMismatch(format!(
                    "explicit codebook {}x{}, config wants {}x{}",
                    cb.k(),
                    cb.dim(),
                    config.k,
                    config.d
                )));
            }
            Ok(cb.clone())
        }
    }
}

/// Applies one rule to one batch.
///
/// Sample-level rules process the batch in order. Rules that propagate the
/// drift receive the pending state increment: `delta-e` spreads each
/// sample's share of it, `modified-ste` evaluates the drift residual at the
/// winner's code vector, and `ntk-exact` applies per-sample winner steps
/// followed by one exact propagation pass over the codes that won nothing
/// in the batch.
fn apply_rule(
    codebook: &mut Codebook,
    rule: &UpdateRule,
    batch: &Batch,
    process: &DriftProcess,
    pending: &DriftState,
    configured_batch_size: usize,
) -> Result<()> {
    match rule.kind {
        RuleKind::VanillaSa => {
            for i in 0..batch.len() {
                vanilla_sa_step(codebook, batch.point(i), rule.eta)?;
            }
        }
        RuleKind::Ema => {
            ema_batch_step(codebook, batch, rule.alpha)?;
        }
        RuleKind::NsvqSoftmax => {
            for i in 0..batch.len() {
                nsvq_softmax_step(codebook, batch.point(i), rule.eta, rule.tau)?;
            }
        }
        RuleKind::NsvqRbf => {
            for i in 0..batch.len() {
                nsvq_rbf_step(codebook, batch.point(i), rule.two_sigma_sq, rule.eta)?;
            }
        }
        RuleKind::DeltaEWeighted => {
            let share = 1.0 / batch.len() as f64;
            for i in 0..batch.len() {
                let base_point = process.base().row(batch.source_indices()[i]).to_owned();
                let jac = process.exact_jacobian(base_point.view())?;
                let e_step = jac.apply(pending)? * share;
                delta_e_weighted_step(codebook, batch.point(i), e_step.view(), rule.two_sigma_sq)?;
            }
        }
        RuleKind::ModifiedSte => {
            let d_eff = configured_batch_size * rule.d_eff;
            for i in 0..batch.len() {
                let (winner, _) = nearest_code(batch.point(i), codebook)?;
                let rep = codebook.code(winner).to_owned();
                let jac = process.exact_jacobian(rep.view())?;
                let enc_grad = jac.apply(pending)?;
                modified_ste_step(
                    codebook,
                    batch.point(i),
                    enc_grad.view(),
                    rule.eta,
                    rule.lambda,
                    d_eff,
                )?;
            }
        }
        RuleKind::NtkExact => {
            let mut won = vec![false; codebook.k()];
            for i in 0..batch.len() {
                let report = vanilla_sa_step(codebook, batch.point(i), 1.0)?;
                won[report.winner.expect("vanilla step always has a winner")] = true;
            }
            let mut moves = Vec::new();
            for (c, hit) in won.iter().enumerate() {
                if !hit {
                    let jac = process.exact_jacobian(codebook.code(c))?;
                    moves.push((c, jac.apply(pending)?));
                }
            }
            for (c, delta) in moves {
                let moved = &codebook.code(c) + &delta;
                codebook.set_code(c, moved.view())?;
            }
        }
    }
    Ok(())
}

/// Runs one experiment to completion and returns its trace.
pub fn run_experiment(config: &ExperimentConfig) -> Result<TraceLog> {
    config.validate()?;
    let options = StreamOptions {
        dim: config.d,
        noise_scale: config.noise_scale,
        mean: None,
        rate: config.drift_rate,
        scaling_target: None,
    };
    let mut process = DriftProcess::sample_with(config.process, config.n, config.seed, &options)?;
    let mut codebook = init_codebook_for_run(config, &process)?;

    let steps_per_epoch = config.n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let snapshot_steps: BTreeSet<usize> = (1..=config.snapshots)
        .map(|i| (i * total_steps).div_ceil(config.snapshots))
        .collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(2);

    let mut trace = TraceLog {
        rule_name: config.rule.kind.to_string(),
        process_name: config.process.to_string(),
        batch_size: config.batch_size,
        base: process.base().to_owned(),
        targets: process.targets().to_owned(),
        initial_codebook: codebook.codes().clone(),
        records: Vec::with_capacity(total_steps),
        snapshots: vec![Snapshot {
            step: 0,
            batch_points: Array2::zeros((0, config.d)),
            codebook: codebook.codes().clone(),
        }],
        epoch_utilization: Vec::with_capacity(config.epochs),
    };

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let rule = apply_schedules(&config.rule, epoch);
        let mut perm: Vec<usize> = (0..config.n).collect();
        perm.shuffle(&mut shuffle_rng);
        let mut hits = vec![false; config.k];
        for chunk in perm.chunks(config.batch_size) {
            step += 1;
            let (batch, targets) = process.next_batch(chunk)?;
            let assignment = assign_batch(&batch, &codebook)?;
            for &w in assignment.winners() {
                hits[w] = true;
            }
            let pending = process.pending_delta(&batch, targets.view())?;
            apply_rule(
                &mut codebook,
                &rule,
                &batch,
                &process,
                &pending,
                config.batch_size,
            )?;
            process.apply_delta(&pending)?;

            let drifted = process.encode_all();
            let hit_count = hits.iter().filter(|h| **h).count();
            trace.records.push(StepRecord {
                step,
                drift_state: process.state().flatten(),
                codebook: codebook.codes().clone(),
                winners: assignment.winners().to_vec(),
                distortion_current: distortion(drifted.view(), &codebook)?,
                distortion_target: distortion(process.targets(), &codebook)?,
                utilization: hit_count as f64 / config.k as f64,
                dead_codes: config.k - hit_count,
            });
            if snapshot_steps.contains(&step) {
                trace.snapshots.push(Snapshot {
                    step,
                    batch_points: batch.points().clone(),
                    codebook: codebook.codes().clone(),
                });
            }
        }
        let hit_count = hits.iter().filter(|h| **h).count();
        trace.epoch_utilization.push(hit_count as f64 / config.k as f64);
    }
    Ok(trace)
}

/// One row of a batch-size sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub batch_size: usize,
    pub final_distortion: f64,
    pub final_utilization: f64,
}

/// Runs the same experiment at several batch sizes.
///
/// Each run covers the identical sample budget (epochs times the dataset),
/// under the identical seed; only the batch size varies.
pub fn batch_size_sweep(
    base_config: &ExperimentConfig,
    batch_sizes: &[usize],
) -> Result<Vec<SweepRow>> {
    if batch_sizes.is_empty() {
        return Err(Error::EmptyInput("batch sizes".into()));
    }
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let mut config = base_config.clone();
        config.batch_size = b;
        let trace = run_experiment(&config)?;
        let last = trace
            .final_record()
            .ok_or_else(|| Error::InvalidConfig("sweep needs at least one epoch".into()))?;
        rows.push(SweepRow {
            batch_size: b,
            final_distortion: last.distortion_current,
            final_utilization: trace
                .epoch_utilization
                .last()
                .copied()
                .unwrap_or(last.utilization),
        });
    }
    Ok(rows)
}

/// One rule's trace inside a comparison.
#[derive(Debug, Clone)]
pub struct RuleComparison {
    pub rule_name: String,
    pub trace: TraceLog,
}

/// Runs several rules against the identical stream (same seed, same
/// batches) and returns their traces side by side.
pub fn compare_rules(
    config: &ExperimentConfig,
    rules: &[UpdateRule],
) -> Result<Vec<RuleComparison>> {
    if rules.len() < 2 {
        return Err(Error::InvalidConfig("comparison needs at least two rules".into()));
    }
    rules
        .iter()
        .map(|rule| {
            let mut c = config.clone();
            c.rule = rule.clone();
            run_experiment(&c).map(|trace| RuleComparison {
                rule_name: rule.kind.to_string(),
                trace,
            })
        })
        .collect()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average rank over the tie group (1-based ranks).
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} xs against {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("need at least two points".into()));
    }
    if !xs.iter().chain(ys).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rank correlation inputs".into()));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
