//! Codebook-update rules.
//!
//! Every rule mutates the codebook in place and returns a [`StepReport`]
//! describing what moved. Within a step, all displacements and kernel
//! weights are computed from the pre-update codebook, so the order in which
//! codes are touched does not matter.
//!
//! The rules:
//! - `vanilla`: winner-take-all stochastic approximation;
//! - `ema`: per-batch exponential moving average toward cluster means;
//! - `nsvq-softmax`: winner step plus softmax-weighted pull of every other
//!   code toward the sample;
//! - `nsvq-rbf`: winner step plus RBF-weighted pull of every other code;
//! - `delta-e`: winner step plus RBF-weighted propagation of a supplied
//!   encoder-output increment;
//! - `modified-ste`: delay-free winner correction from the simulated
//!   encoder gradient;
//! - `ntk-exact`: oracle that propagates the exact first-order drift to
//!   non-winners through the state Jacobian.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};

use crate::core::{assign_batch, nearest_code, Batch, Codebook};
use crate::error::{Error, Result};
use crate::streams::{DriftProcess, DriftState};

/// Selects one of the update algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    VanillaSa,
    Ema,
    NsvqSoftmax,
    NsvqRbf,
    DeltaEWeighted,
    ModifiedSte,
    /// Exact-propagation oracle; needs a drift process at run time.
    NtkExact,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RuleKind::VanillaSa => "vanilla",
            RuleKind::Ema => "ema",
            RuleKind::NsvqSoftmax => "nsvq-softmax",
            RuleKind::NsvqRbf => "nsvq-rbf",
            RuleKind::DeltaEWeighted => "delta-e",
            RuleKind::ModifiedSte => "modified-ste",
            RuleKind::NtkExact => "ntk-exact",
        };
        f.write_str(name)
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(RuleKind::VanillaSa),
            "ema" => Ok(RuleKind::Ema),
            "nsvq-softmax" => Ok(RuleKind::NsvqSoftmax),
            "nsvq-rbf" => Ok(RuleKind::NsvqRbf),
            "delta-e" => Ok(RuleKind::DeltaEWeighted),
            "modified-ste" => Ok(RuleKind::ModifiedSte),
            "ntk-exact" => Ok(RuleKind::NtkExact),
            other => Err(Error::InvalidConfig(format!("unknown rule '{other}'"))),
        }
    }
}

/// An update rule with its hyperparameters.
///
/// `eta` is the step size (the toy learning rate), `alpha` the EMA mixing
/// factor, `tau` the softmax temperature, `two_sigma_sq` the RBF bandwidth
/// in its `2*sigma^2` form, `lambda` the simulated encoder step size, and
/// `d_eff` the effective dimension dividing the modified-STE gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRule {
    pub kind: RuleKind,
    pub eta: f64,
    pub alpha: f64,
    pub tau: f64,
    pub two_sigma_sq: f64,
    pub lambda: f64,
    pub d_eff: usize,
}

impl UpdateRule {
    /// Rule with the toy defaults: `eta` 0.3, `alpha` 0.3, `tau` 32,
    /// `2*sigma^2` 1, `lambda` 1, `d_eff` 1.
    ///
    /// The initial temperature is deliberately wide: with the halving
    /// schedule it starts near-uniform, so every code rides the early fast
    /// drift, and sharpens as the drift settles.
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            eta: 0.3,
            alpha: 0.3,
            tau: 32.0,
            two_sigma_sq: 1.0,
            lambda: 1.0,
            d_eff: 1,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_two_sigma_sq(mut self, two_sigma_sq: f64) -> Self {
        self.two_sigma_sq = two_sigma_sq;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidConfig(format!("eta {} outside (0, 1]", self.eta)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau {} must be > 0", self.tau)));
        }
        if self.two_sigma_sq.is_nan() || self.two_sigma_sq <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "two_sigma_sq {} must be > 0",
                self.two_sigma_sq
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.d_eff == 0 {
            return Err(Error::InvalidConfig("d_eff must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one update step did: the winning code (absent for batch-level EMA),
/// the displacement applied to every code, and the multiplier each code's
/// pull term received (1 for a full winner step, kernel weights for the
/// propagated codes, 0 for untouched codes).
#[derive(Debug, Clone)]
pub struct StepReport {
    pub winner: Option<usize>,
    pub displacements: Array2<f64>,
    pub weights: Vec<f64>,
}

impl StepReport {
    /// Euclidean norm of one code's displacement.
    pub fn displacement_norm(&self, k: usize) -> f64 {
        self.displacements.row(k).dot(&self.displacements.row(k)).sqrt()
    }
}

/// RBF kernel weight `exp(-dist_sq / two_sigma_sq)` for squared distance
/// `dist_sq` and bandwidth in its `2*sigma^2` form.
pub fn rbf_weight(dist_sq: f64, two_sigma_sq: f64) -> f64 {
    (-dist_sq / two_sigma_sq).exp()
}

/// Softmax over `-dist_sq / tau`; sums to one over the given set.
pub fn softmax_weights(dist_sqs: &[f64], tau: f64) -> Vec<f64> {
    // All exponents are <= 0 once shifted by the minimum distance, so the
    // normalizer is at least 1 and never overflows.
    let min = dist_sqs.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = dist_sqs.iter().map(|&d| (-(d - min) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_point(x: ArrayView1<'_, f64>, codebook: &Codebook, what: &str) -> Result<()> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    if x.len() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{what} of dimension {} against codebook of dimension {}",
            x.len(),
            codebook.dim()
        )));
    }
    Ok(())
}

fn apply(codebook: &mut Codebook, displacements: &Array2<f64>) {
    *codebook.codes_mut() += displacements;
}

/// Winner-take-all step: the nearest code moves `eta` of the way to `x`;
/// every other code is untouched.
pub fn vanilla_sa_step(codebook: &mut Codebook, x: ArrayView1<'_, f64>, eta: f64) -> Result<StepReport> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidConfig(format!("eta {eta} outside (0, 1]")));
    }
    check_point(x, codebook, "sample")?;
    let (winner, _) = nearest_code(x, codebook)?;
    let mut disp = Array2::zeros(codebook.codes().dim());
    {
        let delta = &x - &codebook.code(winner);
        disp.row_mut(winner).assign(&(delta * eta));
    }
    apply(codebook, &disp);
    let mut weights = vec![0.0; codebook.k()];
    weights[winner] = 1.0;
    Ok(StepReport { winner: Some(winner), displacements: disp, weights })
}

/// Batch EMA step: every cluster with assigned samples moves `alpha` of the
/// way to the mean of its samples; clusters with none stay put.
pub fn ema_batch_step(codebook: &mut Codebook, batch: &Batch, alpha: f64) -> Result<StepReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside (0, 1]")));
    }
    let assignment = assign_batch(batch, codebook)?;
    let k = codebook.k();
    let d = codebook.dim();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &w) in assignment.winners().iter().enumerate() {
        counts[w] += 1;
        let mut row = sums.row_mut(w);
        row += &batch.point(i);
    }
    let mut disp = Array2::zeros((k, d));
    let mut weights = vec![0.0; k];
    for c in 0..k {
        if counts[c] > 0 {
            let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
            let delta = (&mean - &codebook.code(c)) * alpha;
            disp.row_mut(c).assign(&delta);
            weights[c] = 1.0;
        }
    }
    apply(codebook, &disp);
    Ok(StepReport { winner: None, displacements: disp, weights })
}

/// Winner step plus softmax-weighted pull of every other code toward the
/// sample, with weights from inter-code distances to the winner.
pub fn nsvq_softmax_step(
    codebook: &mut Codebook,
    x: ArrayView1<'_, f64>,
    lr: f64,
    tau: f64,
) -> Result<StepReport> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidConfig(format!("lr {lr} must be > 0")));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau {tau} must be > 0")));
    }
    check_point(x, codebook, "sample")?;
    let (winner, _) = nearest_code(x, codebook)?;
    let k = codebook.k();
    let dist_sqs: Vec<f64> = (0..k)
        .map(|c| {
            let diff = &codebook.code(c) - &codebook.code(winner);
            diff.dot(&diff)
        })
        .collect();
    let omega = softmax_weights(&dist_sqs, tau);
    let mut disp = Array2::zeros(codebook.codes().dim());
    let mut weights = vec![0.0; k];
    for c in 0..k {
        let pull = &x - &codebook.code(c);
        if c == winner {
            disp.row_mut(c).assign(&(pull * lr));
            weights[c] = 1.0;
        } else {
            disp.row_mut(c).assign(&(pull * (lr * omega[c])));
            weights[c] = omega[c];
        }
    }
    apply(codebook, &disp);
    Ok(StepReport { winner: Some(winner), displacements: disp, weights })
}

/// Winner step plus RBF-weighted pull of every other code toward the
/// encoder output `e_x`.
pub fn nsvq_rbf_step(
    codebook: &mut Codebook,
    e_x: ArrayView1<'_, f64>,
    two_sigma_sq: f64,
    eta: f64,
) -> Result<StepReport> {
    if two_sigma_sq.is_nan() || two_sigma_sq <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "two_sigma_sq {two_sigma_sq} must be > 0"
        )));
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::InvalidConfig(format!("eta {eta} must be > 0")));
    }
    check_point(e_x, codebook, "encoder output")?;
    let (winner, _) = nearest_code(e_x, codebook)?;
    let k = codebook.k();
    let mut disp = Array2::zeros(codebook.codes().dim());
    let mut weights = vec![0.0; k];
    for c in 0..k {
        let pull = &e_x - &codebook.code(c);
        if c == winner {
            disp.row_mut(c).assign(&(pull * eta));
            weights[c] = 1.0;
        } else {
            let w = rbf_weight(pull.dot(&pull), two_sigma_sq);
            disp.row_mut(c).assign(&(pull * (eta * w)));
            weights[c] = w;
        }
    }
    apply(codebook, &disp);
    Ok(StepReport { winner: Some(winner), displacements: disp, weights })
}

/// Winner takes the full embedding step to `x_i`; every other code receives
/// the supplied encoder increment `e_step` scaled by an RBF weight on its
/// distance to `x_i`.
pub fn delta_e_weighted_step(
    codebook: &mut Codebook,
    x_i: ArrayView1<'_, f64>,
    e_step: ArrayView1<'_, f64>,
    two_sigma_sq: f64,
) -> Result<StepReport> {
    if two_sigma_sq.is_nan() || two_sigma_sq <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "two_sigma_sq {two_sigma_sq} must be > 0"
        )));
    }
    check_point(x_i, codebook, "sample")?;
    check_point(e_step, codebook, "encoder increment")?;
    let (winner, _) = nearest_code(x_i, codebook)?;
    let k = codebook.k();
    let mut disp = Array2::zeros(codebook.codes().dim());
    let mut weights = vec![0.0; k];
    for c in 0..k {
        if c == winner {
            let pull = &x_i - &codebook.code(c);
            disp.row_mut(c).assign(&pull);
            weights[c] = 1.0;
        } else {
            let diff = &codebook.code(c) - &x_i;
            let w = rbf_weight(diff.dot(&diff), two_sigma_sq);
            disp.row_mut(c).assign(&(&e_step * w));
            weights[c] = w;
        }
    }
    apply(codebook, &disp);
    Ok(StepReport { winner: Some(winner), displacements: disp, weights })
}

/// Delay-free winner correction: the winner moves along
/// `eta * ((2/d_eff)(e_x - c_w) + (2*lambda/d_eff) * enc_grad)`;
/// non-winners are untouched.
pub fn modified_ste_step(
    codebook: &mut Codebook,
    e_x: ArrayView1<'_, f64>,
    enc_grad: ArrayView1<'_, f64>,
    eta: f64,
    lambda: f64,
    d_eff: usize,
) -> Result<StepReport> {
    if d_eff == 0 {
        return Err(Error::InvalidConfig("d_eff must be >= 1".into()));
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::InvalidConfig(format!("eta {eta} must be > 0")));
    }
    check_point(e_x, codebook, "encoder output")?;
    check_point(enc_grad, codebook, "encoder gradient")?;
    let (winner, _) = nearest_code(e_x, codebook)?;
    let scale = 2.0 / d_eff as f64;
    let mut disp = Array2::zeros(codebook.codes().dim());
    {
        let pull = &e_x - &codebook.code(winner);
        let step = pull * scale + &enc_grad * (scale * lambda);
        disp.row_mut(winner).assign(&(step * eta));
    }
    apply(codebook, &disp);
    let mut weights = vec![0.0; codebook.k()];
    weights[winner] = 1.0;
    Ok(StepReport { winner: Some(winner), displacements: disp, weights })
}

/// Oracle step: the winner takes the full embedding step to `x_i`, and every
/// other code moves by the exact first-order drift `J(c_j) . delta_state`,
/// with its own code vector standing in for the encoder output.
pub fn ntk_exact_step(
    codebook: &mut Codebook,
    process: &DriftProcess,
    x_i: ArrayView1<'_, f64>,
    delta_state: &DriftState,
) -> Result<StepReport> {
    check_point(x_i, codebook, "sample")?;
    let (winner, _) = nearest_code(x_i, codebook)?;
    let k = codebook.k();
    let mut disp = Array2::zeros(codebook.codes().dim());
    let mut weights = vec![0.0; k];
    for c in 0..k {
        if c == winner {
            let pull = &x_i - &codebook.code(c);
            disp.row_mut(c).assign(&pull);
        } else {
            let jac = process.exact_jacobian(codebook.code(c))?;
            let moved = jac.apply(delta_state)?;
            disp.row_mut(c).assign(&moved);
        }
        weights[c] = 1.0;
    }
    apply(codebook, &disp);
    Ok(StepReport { winner: Some(winner), displacements: disp, weights })
}

/// Rule after `epochs_done` completed epochs: temperature halves, step size
/// and RBF bandwidth decay by 0.9, each per epoch. The EMA mixing factor
/// and encoder step size are unscheduled.
pub fn apply_schedules(rule: &UpdateRule, epochs_done: usize) -> UpdateRule {
    let mut out = rule.clone();
    out.tau = rule.tau / 2f64.powi(epochs_done as i32);
    out.eta = rule.eta * 0.9f64.powi(epochs_done as i32);
    out.two_sigma_sq = rule.two_sigma_sq * 0.9f64.powi(epochs_done as i32);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use crate::streams::{DriftKind, ScalingMode, StreamOptions};

    fn codebook(rows: Vec<Vec<f64>>) -> Codebook {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Codebook::new(Array2::from_shape_vec((rows.len(), d), flat).unwrap()).unwrap()
    }

    #[test]
    fn vanilla_full_step_jumps_to_sample() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![9.0, 9.0]]);
        let report = vanilla_sa_step(&mut cb, array![1.0, 2.0].view(), 1.0).unwrap();
        assert_eq!(report.winner, Some(0));
        assert_eq!(cb.code(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(cb.code(1).to_vec(), vec![9.0, 9.0]);
    }

    #[test]
    fn vanilla_zero_displacement_on_own_code() {
        let mut cb = codebook(vec![vec![1.0, 1.0], vec![5.0, 5.0]]);
        let report = vanilla_sa_step(&mut cb, array![1.0, 1.0].view(), 0.7).unwrap();
        assert!(report.displacements.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vanilla_half_step_hand_checked() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![4.0, 0.0]]);
        vanilla_sa_step(&mut cb, array![1.0, 0.0].view(), 0.5).unwrap();
        assert_eq!(cb.code(0).to_vec(), vec![0.5, 0.0]);
        assert_eq!(cb.code(1).to_vec(), vec![4.0, 0.0]);
    }

    #[test]
    fn ema_alpha_one_is_batch_lloyd_m_step() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![10.0, 0.0]]);
        let batch = Batch::from_points(array![[1.0, 0.0], [3.0, 0.0], [9.0, 0.0]]).unwrap();
        ema_batch_step(&mut cb, &batch, 1.0).unwrap();
        assert_eq!(cb.code(0).to_vec(), vec![2.0, 0.0]);
        assert_eq!(cb.code(1).to_vec(), vec![9.0, 0.0]);
    }

    #[test]
    fn ema_skips_unassigned_cluster() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![100.0, 100.0]]);
        let batch = Batch::from_points(array![[1.0, 1.0]]).unwrap();
        let report = ema_batch_step(&mut cb, &batch, 0.3).unwrap();
        assert_eq!(cb.code(1).to_vec(), vec![100.0, 100.0]);
        assert_eq!(report.weights[1], 0.0);
        assert_eq!(report.displacement_norm(1), 0.0);
    }

    #[test]
    fn ema_partial_step_toward_mean() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![100.0, 0.0]]);
        let batch = Batch::from_points(array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).unwrap();
        ema_batch_step(&mut cb, &batch, 0.3).unwrap();
        // Mean is (2, 0); 30% of the way from the origin is (0.6, 0).
        assert_abs_diff_eq!(cb.code(0)[0], 0.6, epsilon = 1e-15);
        assert_eq!(cb.code(0)[1], 0.0);
    }

    #[test]
    fn softmax_k1_reduces_to_vanilla() {
        let mut a = codebook(vec![vec![1.0, 1.0]]);
        let mut b = a.clone();
        nsvq_softmax_step(&mut a, array![2.0, 0.0].view(), 0.4, 1.0).unwrap();
        vanilla_sa_step(&mut b, array![2.0, 0.0].view(), 0.4).unwrap();
        assert_eq!(a.codes(), b.codes());
    }

    #[test]
    fn softmax_equal_distances_get_equal_weights() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let report = nsvq_softmax_step(&mut cb, array![0.1, 0.0].view(), 0.5, 1.0).unwrap();
        assert_eq!(report.winner, Some(0));
        assert_eq!(report.weights[1], report.weights[2]);
    }

    #[test]
    fn softmax_weights_hand_checked() {
        // Codes at squared distances {0, 1, 4} from the winner with tau = 1:
        // weights proportional to {1, e^-1, e^-4}.
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-2.0, 0.0]]);
        let x = array![0.1, 0.0];
        let before = cb.codes().clone();
        let lr = 0.5;
        let report = nsvq_softmax_step(&mut cb, x.view(), lr, 1.0).unwrap();
        let z = 1.0 + (-1.0f64).exp() + (-4.0f64).exp();
        let w1 = (-1.0f64).exp() / z;
        let w2 = (-4.0f64).exp() / z;
        assert_abs_diff_eq!(report.weights[1], w1, epsilon = 1e-15);
        assert_abs_diff_eq!(report.weights[2], w2, epsilon = 1e-15);
        // Per-code displacements follow lr * w * (x - c) from the pre-update codebook.
        assert_abs_diff_eq!(
            cb.code(1)[0] - before[[1, 0]],
            lr * w1 * (0.1 - 1.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            cb.code(2)[0] - before[[2, 0]],
            lr * w2 * (0.1 + 2.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(cb.code(0)[0] - before[[0, 0]], lr * 0.1, epsilon = 1e-15);
    }

    #[test]
    fn rbf_far_code_is_frozen() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![1e6, 0.0]]);
        nsvq_rbf_step(&mut cb, array![0.0, 0.0].view(), 1.0, 1.0).unwrap();
        assert_eq!(cb.code(1).to_vec(), vec![1e6, 0.0]);
    }

    #[test]
    fn rbf_coincident_code_has_unit_weight_zero_displacement() {
        let mut cb = codebook(vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let report = nsvq_rbf_step(&mut cb, array![0.5, 0.5].view(), 1.0, 1.0).unwrap();
        assert_eq!(report.winner, Some(0));
        assert_eq!(report.weights[1], 1.0);
        assert_eq!(report.displacement_norm(1), 0.0);
    }

    #[test]
    fn rbf_scalar_example() {
        // e_x = 0, winner at -1, non-winner at 2, 2 sigma^2 = 1, eta = 1:
        // non-winner displacement is e^-4 * (0 - 2).
        let mut cb = codebook(vec![vec![-1.0], vec![2.0]]);
        nsvq_rbf_step(&mut cb, array![0.0].view(), 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(cb.code(1)[0], 2.0 - 2.0 * (-4.0f64).exp(), epsilon = 1e-15);
        assert_eq!(cb.code(0)[0], 0.0);
    }

    #[test]
    fn delta_e_zero_increment_moves_only_winner() {
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![3.0, 0.0]]);
        let report = delta_e_weighted_step(
            &mut cb,
            array![1.0, 0.0].view(),
            array![0.0, 0.0].view(),
            1.0,
        )
        .unwrap();
        assert_eq!(report.winner, Some(0));
        assert_eq!(cb.code(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(cb.code(1).to_vec(), vec![3.0, 0.0]);
    }

    #[test]
    fn delta_e_coincident_non_winners_receive_full_increment() {
        let x = array![2.0, 2.0];
        let mut cb = codebook(vec![vec![2.0, 2.0], vec![2.0, 2.0], vec![2.0, 2.0]]);
        let e_step = array![0.3, -0.7];
        let report = delta_e_weighted_step(&mut cb, x.view(), e_step.view(), 1.0).unwrap();
        assert_eq!(report.winner, Some(0));
        for c in 1..3 {
            assert_eq!(report.weights[c], 1.0);
            assert_abs_diff_eq!(cb.code(c)[0], 2.3, epsilon = 1e-15);
            assert_abs_diff_eq!(cb.code(c)[1], 1.3, epsilon = 1e-15);
        }
    }

    #[test]
    fn delta_e_weight_scalar_example() {
        // 2 sigma^2 = 2 and squared distance 2 give weight e^-1.
        assert_abs_diff_eq!(rbf_weight(2.0, 2.0), (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn modified_ste_without_encoder_gradient() {
        let mut cb = codebook(vec![vec![0.0, 0.0]]);
        modified_ste_step(
            &mut cb,
            array![1.0, 0.0].view(),
            array![0.0, 0.0].view(),
            0.5,
            0.1,
            2,
        )
        .unwrap();
        // eta * (2/d) * (e_x - c) = 0.5 * 1.0 * (1, 0).
        assert_abs_diff_eq!(cb.code(0)[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn modified_ste_pure_encoder_term() {
        let mut cb = codebook(vec![vec![1.0, 1.0]]);
        modified_ste_step(
            &mut cb,
            array![1.0, 1.0].view(),
            array![0.0, 4.0].view(),
            1.0,
            0.5,
            2,
        )
        .unwrap();
        // eta * (2 lambda / d) * g = 1 * 0.5 * (0, 4) = (0, 2).
        assert_eq!(cb.code(0)[0], 1.0);
        assert_abs_diff_eq!(cb.code(0)[1], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn modified_ste_combined_example() {
        // d_eff = 2, lambda = 0.1, e_x - c_w = (1, 0), g = (0, 5), eta = 1:
        // displacement (1, 0.5).
        let mut cb = codebook(vec![vec![0.0, 0.0]]);
        let report = modified_ste_step(
            &mut cb,
            array![1.0, 0.0].view(),
            array![0.0, 5.0].view(),
            1.0,
            0.1,
            2,
        )
        .unwrap();
        assert_abs_diff_eq!(report.displacements[[0, 0]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(report.displacements[[0, 1]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ntk_exact_translation_moves_non_winners_by_delta() {
        let process = DriftProcess::sample(DriftKind::Translation, 10, 0).unwrap();
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![-4.0, 2.0]]);
        let delta = DriftState::Theta(array![0.25, -0.5]);
        let report = ntk_exact_step(&mut cb, &process, array![0.1, 0.1].view(), &delta).unwrap();
        assert_eq!(report.winner, Some(0));
        assert_eq!(cb.code(1).to_vec(), vec![5.25, 4.5]);
        assert_eq!(cb.code(2).to_vec(), vec![-3.75, 1.5]);
        // Winner takes the full embedding step instead.
        assert_eq!(cb.code(0).to_vec(), vec![0.1, 0.1]);
    }

    #[test]
    fn ntk_exact_zero_delta_moves_only_winner() {
        let process = DriftProcess::sample(DriftKind::Translation, 10, 0).unwrap();
        let mut cb = codebook(vec![vec![0.0, 0.0], vec![5.0, 5.0]]);
        let delta = DriftState::Theta(array![0.0, 0.0]);
        ntk_exact_step(&mut cb, &process, array![1.0, 1.0].view(), &delta).unwrap();
        assert_eq!(cb.code(1).to_vec(), vec![5.0, 5.0]);
        assert_eq!(cb.code(0).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn ntk_exact_split_signed_propagation() {
        let process = DriftProcess::sample(DriftKind::Split, 10, 0).unwrap();
        let mut cb = codebook(vec![vec![20.0, 20.0], vec![-1.0, 2.0]]);
        let delta = DriftState::Theta(array![0.3, 0.3]);
        let report = ntk_exact_step(&mut cb, &process, array![20.0, 20.0].view(), &delta).unwrap();
        assert_eq!(report.winner, Some(0));
        assert_abs_diff_eq!(cb.code(1)[0], -1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(cb.code(1)[1], 2.3, epsilon = 1e-15);
    }

    #[test]
    fn ntk_exact_scaling_uses_matrix_action() {
        let options = StreamOptions {
            scaling_target: Some(array![[2.0, 0.0], [0.0, 2.0]]),
            ..StreamOptions::default()
        };
        let process =
            DriftProcess::sample_with(DriftKind::Scaling(ScalingMode::Expand), 10, 0, &options)
                .unwrap();
        let mut cb = codebook(vec![vec![100.0, 100.0], vec![1.0, 2.0]]);
        let delta = DriftState::Matrix(array![[0.1, 0.0], [0.0, 0.2]]);
        ntk_exact_step(&mut cb, &process, array![100.0, 100.0].view(), &delta).unwrap();
        // dA . c = (0.1 * 1, 0.2 * 2).
        assert_abs_diff_eq!(cb.code(1)[0], 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(cb.code(1)[1], 2.4, epsilon = 1e-15);
    }

    #[test]
    fn schedules_epoch_zero_is_identity() {
        let rule = UpdateRule::new(RuleKind::NsvqSoftmax);
        assert_eq!(apply_schedules(&rule, 0), rule);
    }

    #[test]
    fn schedules_decay_hand_checked() {
        let rule = UpdateRule::new(RuleKind::NsvqSoftmax).with_tau(1.0);
        assert_abs_diff_eq!(apply_schedules(&rule, 3).tau, 0.125, epsilon = 1e-15);
        let rule = rule.with_two_sigma_sq(1.0);
        assert_abs_diff_eq!(apply_schedules(&rule, 2).two_sigma_sq, 0.81, epsilon = 1e-15);
        assert_abs_diff_eq!(
            apply_schedules(&rule, 1).eta,
            rule.eta * 0.9,
            epsilon = 1e-15
        );
    }

    #[test]
    fn schedules_stay_positive() {
        let rule = UpdateRule::new(RuleKind::NsvqSoftmax);
        let late = apply_schedules(&rule, 500);
        assert!(late.tau > 0.0 && late.eta > 0.0 && late.two_sigma_sq > 0.0);
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let w = softmax_weights(&[0.0, 1.0, 4.0, 9.0], 0.7);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(w.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn weights_decay_monotonically_in_distance() {
        assert!(rbf_weight(1.0, 1.0) > rbf_weight(2.0, 1.0));
        let w = softmax_weights(&[0.0, 1.0, 2.0], 1.0);
        assert!(w[1] > w[2]);
        assert_eq!(rbf_weight(0.0, 1.0), 1.0);
    }

    #[test]
    fn rule_validation_bounds() {
        let mut rule = UpdateRule::new(RuleKind::VanillaSa);
        assert!(rule.validate().is_ok());
        rule.eta = 0.0;
        assert!(rule.validate().is_err());
        rule.eta = 0.5;
        rule.tau = -1.0;
        assert!(rule.validate().is_err());
    }

    #[test]
    fn rule_kind_round_trips_through_strings() {
        for kind in [
            RuleKind::VanillaSa,
            RuleKind::Ema,
            RuleKind::NsvqSoftmax,
            RuleKind::NsvqRbf,
            RuleKind::DeltaEWeighted,
            RuleKind::ModifiedSte,
            RuleKind::NtkExact,
        ] {
            assert_eq!(kind.to_string().parse::<RuleKind>().unwrap(), kind);
        }
        assert!("not-a-rule".parse::<RuleKind>().is_err());
    }
}
