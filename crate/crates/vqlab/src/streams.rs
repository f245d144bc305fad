//! Non-stationary data processes standing in for a drifting encoder.
//!
//! Three parametric forms drive the drift, all affine in their state:
//!
//! - translation: `E(x) = x + theta`, targets `x + (10, 10)`;
//! - scaling: `E(x) = A x`, targets `x M^T` for a fixed matrix `M` with
//!   spectral norm above (expansion) or below (shrink) one;
//! - split: `E(x) = x + sign(x) .* theta`, targets `x + 10 sign(x)`.
//!
//! Because the encoders are affine in the state, the state Jacobians are
//! exact, and first-order drift propagation is exact to machine precision.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::Batch;
use crate::error::{Error, Result};

/// Default drift rate `r`.
pub const DEFAULT_RATE: f64 = 0.1;
/// Magnitude of the fixed target offset for translation and split.
pub const TARGET_OFFSET: f64 = 10.0;

/// Whether a scaling process expands or shrinks the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    Expand,
    Shrink,
}

/// The drift family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftKind {
    Translation,
    Scaling(ScalingMode),
    Split,
}

impl std::fmt::Display for DriftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            DriftKind::Translation => "translation",
            DriftKind::Scaling(ScalingMode::Expand) => "expansion",
            DriftKind::Scaling(ScalingMode::Shrink) => "shrink",
            DriftKind::Split => "split",
        };
        f.write_str(name)
    }
}

/// Drift state: a vector `theta` (translation, split) or a matrix `A` (scaling).
///
/// The same type doubles as a state increment.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftState {
    Theta(Array1<f64>),
    Matrix(Array2<f64>),
}

impl DriftState {
    /// Row-major flattening, for traces and CSV output.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            DriftState::Theta(v) => v.to_vec(),
            DriftState::Matrix(m) => m.iter().copied().collect(),
        }
    }

    pub fn zeros_like(&self) -> DriftState {
        match self {
            DriftState::Theta(v) => DriftState::Theta(Array1::zeros(v.len())),
            DriftState::Matrix(m) => DriftState::Matrix(Array2::zeros(m.dim())),
        }
    }
}

/// Exact derivative of the encoder output with respect to the drift state,
/// evaluated at one input point.
#[derive(Debug, Clone, PartialEq)]
pub enum StateJacobian {
    /// Translation: the identity on `R^d`.
    Identity { dim: usize },
    /// Split: `diag(sign(x))`.
    SignDiagonal { signs: Array1<f64> },
    /// Scaling: the map `dA -> dA . x`, carrying the evaluation point.
    MatrixAction { point: Array1<f64> },
}

impl StateJacobian {
    /// Applies the Jacobian to a state increment: the first-order (here
    /// exact) change of the encoder output.
    pub fn apply(&self, delta: &DriftState) -> Result<Array1<f64>> {
        match (self, delta) {
            (StateJacobian::Identity { dim }, DriftState::Theta(v)) => {
                if v.len() != *dim {
                    return Err(Error::ShapeMismatch(format!(
                        "delta of length {} for dimension {dim}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
            (StateJacobian::SignDiagonal { signs }, DriftState::Theta(v)) => {
                if v.len() != signs.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "delta of length {} for dimension {}",
                        v.len(),
                        signs.len()
                    )));
                }
                Ok(signs * v)
            }
            (StateJacobian::MatrixAction { point }, DriftState::Matrix(da)) => {
                if da.ncols() != point.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "delta matrix {}x{} against point of dimension {}",
                        da.nrows(),
                        da.ncols(),
                        point.len()
                    )));
                }
                Ok(da.dot(point))
            }
            _ => Err(Error::ShapeMismatch(
                "state increment kind does not match the Jacobian".into(),
            )),
        }
    }

    /// Tangent-kernel product `J(x_j) . J(x_i)^T` with another Jacobian of
    /// the same family.
    pub fn ntk_with(&self, other: &StateJacobian) -> Result<Array2<f64>> {
        match (self, other) {
            (StateJacobian::Identity { dim }, StateJacobian::Identity { dim: d2 }) => {
                if dim != d2 {
                    return Err(Error::ShapeMismatch("identity dimensions differ".into()));
                }
                Ok(Array2::eye(*dim))
            }
            (
                StateJacobian::SignDiagonal { signs: s1 },
                StateJacobian::SignDiagonal { signs: s2 },
            ) => {
                if s1.len() != s2.len() {
                    return Err(Error::ShapeMismatch("sign diagonals differ in length".into()));
                }
                Ok(Array2::from_diag(&(s1 * s2)))
            }
            (
                StateJacobian::MatrixAction { point: p1 },
                StateJacobian::MatrixAction { point: p2 },
            ) => {
                if p1.len() != p2.len() {
                    return Err(Error::ShapeMismatch("points differ in dimension".into()));
                }
                let inner = p1.dot(p2);
                Ok(Array2::eye(p1.len()) * inner)
            }
            _ => Err(Error::ShapeMismatch(
                "tangent kernel across different drift families".into(),
            )),
        }
    }

    /// Dense `d x state_dim` matrix form (row-major state flattening), used
    /// by finite-difference checks.
    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            StateJacobian::Identity { dim } => Array2::eye(*dim),
            StateJacobian::SignDiagonal { signs } => Array2::from_diag(signs),
            StateJacobian::MatrixAction { point } => {
                let d = point.len();
                let mut dense = Array2::zeros((d, d * d));
                for i in 0..d {
                    for j in 0..d {
                        dense[[i, i * d + j]] = point[j];
                    }
                }
                dense
            }
        }
    }
}

/// Optional overrides for [`DriftProcess::sample_with`].
#[derive(Debug, Clone)]
pub struct StreamOptions {
    pub dim: usize,
    pub noise_scale: f64,
    /// Mean of the base Gaussian; defaults to zero except for split, which
    /// centers at 0.5 per coordinate.
    pub mean: Option<Array1<f64>>,
    pub rate: f64,
    /// Explicit scaling target `M`; sampled by spectral norm when absent.
    pub scaling_target: Option<Array2<f64>>,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            dim: 2,
            noise_scale: 1.0,
            mean: None,
            rate: DEFAULT_RATE,
            scaling_target: None,
        }
    }
}

/// A non-stationary stream: fixed base points and targets plus an evolving
/// drift state.
#[derive(Debug, Clone)]
pub struct DriftProcess {
    kind: DriftKind,
    state: DriftState,
    rate: f64,
    base: Array2<f64>,
    targets: Array2<f64>,
    scaling_target: Option<Array2<f64>>,
}

fn sign_plus(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Spectral norm by power iteration on `M^T M`; deterministic start vector.
pub fn spectral_norm(m: ArrayView2<'_, f64>) -> f64 {
    let d = m.ncols();
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    for _ in 0..200 {
        let w = m.t().dot(&m.dot(&v));
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    let mv = m.dot(&v);
    mv.dot(&mv).sqrt()
}

fn sample_scaling_target(dim: usize, mode: ScalingMode, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let raw = Array2::from_shape_fn((dim, dim), |_| rng.sample::<f64, _>(StandardNormal));
    let target_norm = match mode {
        ScalingMode::Expand => 1.5 + rng.random::<f64>(),
        ScalingMode::Shrink => 0.3 + 0.4 * rng.random::<f64>(),
    };
    let current = spectral_norm(raw.view());
    raw * (target_norm / current)
}

impl DriftProcess {
    /// Samples a process with the standard toy parameters
    /// (`d = 2`, unit noise, rate 0.1).
    pub fn sample(kind: DriftKind, n: usize, seed: u64) -> Result<Self> {
        Self::sample_with(kind, n, seed, &StreamOptions::default())
    }

    /// Samples a process, overriding defaults from `options`.
    pub fn sample_with(kind: DriftKind, n: usize, seed: u64, options: &StreamOptions) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("stream needs N >= 1".into()));
        }
        let d = options.dim;
        if d == 0 {
            return Err(Error::InvalidConfig("stream needs d >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = match (&options.mean, kind) {
            (Some(m), _) => {
                if m.len() != d {
                    return Err(Error::ShapeMismatch(format!(
                        "mean of length {} for dimension {d}",
                        m.len()
                    )));
                }
                m.clone()
            }
            (None, DriftKind::Split) => Array1::from_elem(d, 0.5),
            (None, _) => Array1::zeros(d),
        };
        let base = Array2::from_shape_fn((n, d), |(_, j)| {
            mean[j] + options.noise_scale * rng.sample::<f64, _>(StandardNormal)
        });

        let (targets, scaling_target) = match kind {
            DriftKind::Translation => {
                let targets = &base + TARGET_OFFSET;
                (targets, None)
            }
            DriftKind::Scaling(mode) => {
                let m = match &options.scaling_target {
                    Some(explicit) => {
                        if explicit.nrows() != d || explicit.ncols() != d {
                            return Err(Error::ShapeMismatch(format!(
                                "scaling target {}x{} for dimension {d}",
                                explicit.nrows(),
                                explicit.ncols()
                            )));
                        }
                        explicit.clone()
                    }
                    None => sample_scaling_target(d, mode, &mut rng),
                };
                let targets = base.dot(&m.t());
                (targets, Some(m))
            }
            DriftKind::Split => {
                let targets = Array2::from_shape_fn((n, d), |(i, j)| {
                    base[[i, j]] + TARGET_OFFSET * sign_plus(base[[i, j]])
                });
                (targets, None)
            }
        };

        let state = match kind {
            DriftKind::Scaling(_) => DriftState::Matrix(Array2::eye(d)),
            _ => DriftState::Theta(Array1::zeros(d)),
        };

        Ok(Self {
            kind,
            state,
            rate: options.rate,
            base,
            targets,
            scaling_target,
        })
    }

    /// Builds a process over explicit base points; targets are constructed
    /// per the kind's rule and the state starts at rest.
    pub fn from_parts(kind: DriftKind, base: Array2<f64>, rate: f64) -> Result<Self> {
        if base.nrows() == 0 || base.ncols() == 0 {
            return Err(Error::EmptyInput("base points".into()));
        }
        let d = base.ncols();
        let (targets, scaling_target, state) = match kind {
            DriftKind::Translation => (
                &base + TARGET_OFFSET,
                None,
                DriftState::Theta(Array1::zeros(d)),
            ),
            DriftKind::Split => {
                let t = Array2::from_shape_fn(base.dim(), |(i, j)| {
                    base[[i, j]] + TARGET_OFFSET * sign_plus(base[[i, j]])
                });
                (t, None, DriftState::Theta(Array1::zeros(d)))
            }
            DriftKind::Scaling(_) => {
                return Err(Error::InvalidConfig(
                    "scaling needs a target matrix; use sample_with".into(),
                ))
            }
        };
        Ok(Self {
            kind,
            state,
            rate,
            base,
            targets,
            scaling_target,
        })
    }

    pub fn kind(&self) -> DriftKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.base.nrows()
    }

    pub fn dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn base(&self) -> ArrayView2<'_, f64> {
        self.base.view()
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }

    pub fn scaling_target(&self) -> Option<ArrayView2<'_, f64>> {
        self.scaling_target.as_ref().map(|m| m.view())
    }

    pub fn state(&self) -> &DriftState {
        &self.state
    }

    /// Replaces the drift state; the replacement must match the process family.
    pub fn set_state(&mut self, state: DriftState) -> Result<()> {
        match (&self.state, &state) {
            (DriftState::Theta(old), DriftState::Theta(new)) if old.len() == new.len() => {}
            (DriftState::Matrix(old), DriftState::Matrix(new)) if old.dim() == new.dim() => {}
            _ => {
                return Err(Error::ShapeMismatch(
                    "state does not match the process family".into(),
                ))
            }
        }
        self.state = state;
        Ok(())
    }

    /// Drifts one base point under the current state.
    pub fn encode(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "point of dimension {} for process of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(match (&self.kind, &self.state) {
            (DriftKind::Translation, DriftState::Theta(theta)) => &x + theta,
            (DriftKind::Split, DriftState::Theta(theta)) => {
                Array1::from_shape_fn(x.len(), |j| x[j] + sign_plus(x[j]) * theta[j])
            }
            (DriftKind::Scaling(_), DriftState::Matrix(a)) => a.dot(&x),
            _ => unreachable!("state family is enforced by construction"),
        })
    }

    /// Every base point drifted under the current state.
    pub fn encode_all(&self) -> Array2<f64> {
        match (&self.kind, &self.state) {
            (DriftKind::Translation, DriftState::Theta(theta)) => &self.base + theta,
            (DriftKind::Split, DriftState::Theta(theta)) => {
                Array2::from_shape_fn(self.base.dim(), |(i, j)| {
                    self.base[[i, j]] + sign_plus(self.base[[i, j]]) * theta[j]
                })
            }
            (DriftKind::Scaling(_), DriftState::Matrix(a)) => self.base.dot(&a.t()),
            _ => unreachable!("state family is enforced by construction"),
        }
    }

    /// Drifted points for the given dataset indices plus the matching target
    /// rows. Does not mutate the state.
    pub fn next_batch(&self, indices: &[usize]) -> Result<(Batch, Array2<f64>)> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("batch indices".into()));
        }
        let d = self.dim();
        let mut points = Array2::zeros((indices.len(), d));
        let mut targets = Array2::zeros((indices.len(), d));
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= self.n() {
                return Err(Error::IndexOutOfRange { index: idx, len: self.n() });
            }
            let drifted = self.encode(self.base.row(idx))?;
            points.row_mut(row).assign(&drifted);
            targets.row_mut(row).assign(&self.targets.row(idx));
        }
        let batch = Batch::new(points, indices.to_vec())?;
        Ok((batch, targets))
    }

    /// The state increment one drift step would apply, without applying it.
    ///
    /// Translation and split move `theta` by `r * mean(Y_b - X_b)` over the
    /// drifted batch; scaling moves `A` along `r * (2/B) * E^T X_b` with
    /// `E = Y_b - X_b A^T` and `X_b` the base rows.
    pub fn pending_delta(&self, batch: &Batch, targets: ArrayView2<'_, f64>) -> Result<DriftState> {
        if batch.dim() != self.dim() || targets.ncols() != self.dim() {
            return Err(Error::ShapeMismatch("batch/targets dimension".into()));
        }
        if targets.nrows() != batch.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} target rows for a batch of {}",
                targets.nrows(),
                batch.len()
            )));
        }
        let b = batch.len() as f64;
        match self.kind {
            DriftKind::Translation | DriftKind::Split => {
                let residual = &targets - batch.points();
                let mean = residual.sum_axis(ndarray::Axis(0)) / b;
                Ok(DriftState::Theta(mean * self.rate))
            }
            DriftKind::Scaling(_) => {
                let a = match &self.state {
                    DriftState::Matrix(a) => a,
                    DriftState::Theta(_) => unreachable!("scaling state is a matrix"),
                };
                let mut base_rows = Array2::zeros((batch.len(), self.dim()));
                for (row, &idx) in batch.source_indices().iter().enumerate() {
                    if idx >= self.n() {
                        return Err(Error::IndexOutOfRange { index: idx, len: self.n() });
                    }
                    base_rows.row_mut(row).assign(&self.base.row(idx));
                }
                let residual = &targets - &base_rows.dot(&a.t());
                let grad = residual.t().dot(&base_rows) * (2.0 / b);
                Ok(DriftState::Matrix(grad * self.rate))
            }
        }
    }

    /// Adds a state increment in place.
    pub fn apply_delta(&mut self, delta: &DriftState) -> Result<()> {
        match (&mut self.state, delta) {
            (DriftState::Theta(theta), DriftState::Theta(d)) if theta.len() == d.len() => {
                *theta += d;
                Ok(())
            }
            (DriftState::Matrix(a), DriftState::Matrix(d)) if a.dim() == d.dim() => {
                *a += d;
                Ok(())
            }
            _ => Err(Error::ShapeMismatch(
                "delta does not match the process family".into(),
            )),
        }
    }

    /// One drift step: computes the pending increment from the batch and
    /// applies it. Returns the applied increment.
    pub fn drift_step(&mut self, batch: &Batch, targets: ArrayView2<'_, f64>) -> Result<DriftState> {
        let delta = self.pending_delta(batch, targets)?;
        self.apply_delta(&delta)?;
        Ok(delta)
    }

    /// Exact encoder-state Jacobian at a base point.
    ///
    /// For split processes a coordinate exactly at zero has no sign
    /// derivative and is rejected.
    pub fn exact_jacobian(&self, x: ArrayView1<'_, f64>) -> Result<StateJacobian> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("jacobian evaluation point".into()));
        }
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "point of dimension {} for process of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        match self.kind {
            DriftKind::Translation => Ok(StateJacobian::Identity { dim: self.dim() }),
            DriftKind::Split => {
                if x.iter().any(|v| *v == 0.0) {
                    return Err(Error::DegenerateInput(
                        "sign derivative undefined at a zero coordinate".into(),
                    ));
                }
                Ok(StateJacobian::SignDiagonal {
                    signs: x.mapv(sign_plus),
                })
            }
            DriftKind::Scaling(_) => Ok(StateJacobian::MatrixAction { point: x.to_owned() }),
        }
    }

    /// Tangent kernel `J(x_j) . J(x_i)^T` between two points.
    pub fn ntk(&self, x_j: ArrayView1<'_, f64>, x_i: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        let jj = self.exact_jacobian(x_j)?;
        let ji = self.exact_jacobian(x_i)?;
        jj.ntk_with(&ji)
    }

    pub fn encoder_view(&self) -> EncoderView<'_> {
        EncoderView { process: self }
    }
}

/// Borrowed view of the process as an encoder: point map plus state Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct EncoderView<'a> {
    process: &'a DriftProcess,
}

impl EncoderView<'_> {
    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.process.encode(x)
    }

    pub fn jacobian_wrt_state(&self, x: ArrayView1<'_, f64>) -> Result<StateJacobian> {
        self.process.exact_jacobian(x)
    }
}

/// Samples base points and their fixed targets for one drift kind.
pub fn sample_base(
    kind: DriftKind,
    n: usize,
    noise_scale: f64,
    mean: Option<Array1<f64>>,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let options = StreamOptions {
        noise_scale,
        mean,
        ..StreamOptions::default()
    };
    let process = DriftProcess::sample_with(kind, n, seed, &options)?;
    Ok((process.base.clone(), process.targets.clone()))
}
