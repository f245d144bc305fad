//! Batch Lloyd's k-means: initialization, the descent iteration itself, and
//! fixed-point checks used as the convergence oracle for online rules.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::core::{distortion, Codebook};
use crate::error::{Error, Result};

/// Default convergence tolerance on the max centroid displacement.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 500;

/// How the initial codebook is chosen.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// K distinct rows sampled uniformly without replacement.
    RandomSample,
    /// D^2-weighted seeding: each next center drawn with probability
    /// proportional to its squared distance to the nearest chosen center.
    KMeansPlusPlus,
    /// Caller-provided codebook, used as-is.
    Explicit(Codebook),
}

/// Outcome of a Lloyd run.
#[derive(Debug, Clone)]
pub struct LloydResult {
    pub codebook: Codebook,
    /// Iterations actually executed.
    pub iterations: usize,
    /// Distortion of the returned codebook on the training points.
    pub final_distortion: f64,
    /// True iff the max centroid displacement dropped below `tol` before `max_iter`.
    pub converged: bool,
    /// Distortion at the start of each iteration; non-increasing by construction.
    pub distortion_trace: Vec<f64>,
}

fn row_sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Draws an initial codebook of `k` codes from `points` under `strategy`.
///
/// Deterministic under a fixed seed. Fails with a degenerate-input error if
/// the data holds fewer than `k` distinct points.
pub fn init_codebook(
    points: ArrayView2<'_, f64>,
    k: usize,
    strategy: &InitStrategy,
    seed: u64,
) -> Result<Codebook> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Infeasible(format!("{n} points for {k} codes")));
    }
    match strategy {
        InitStrategy::Explicit(cb) => {
            if cb.k() != k || cb.dim() != points.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "explicit codebook {}x{}, expected {}x{}",
                    cb.k(),
                    cb.dim(),
                    k,
                    points.ncols()
                )));
            }
            Ok(cb.clone())
        }
        InitStrategy::RandomSample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut chosen: Vec<usize> = Vec::with_capacity(k);
            for idx in order {
                let candidate = points.row(idx);
                let duplicate = chosen
                    .iter()
                    .any(|&c| points.row(c).iter().zip(candidate.iter()).all(|(a, b)| a == b));
                if !duplicate {
                    chosen.push(idx);
                    if chosen.len() == k {
                        break;
                    }
                }
            }
            if chosen.len() < k {
                return Err(Error::DegenerateInput(format!(
                    "fewer than {k} distinct points for random-sample init"
                )));
            }
            let mut codes = Array2::zeros((k, points.ncols()));
            for (row, &idx) in chosen.iter().enumerate() {
                codes.row_mut(row).assign(&points.row(idx));
            }
            Codebook::new(codes)
        }
        InitStrategy::KMeansPlusPlus => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen: Vec<usize> = Vec::with_capacity(k);
            chosen.push(rng.random_range(0..n));
            let mut min_d2: Vec<f64> = (0..n)
                .map(|i| row_sq_dist(points.row(i), points.row(chosen[0])))
                .collect();
            while chosen.len() < k {
                let total: f64 = min_d2.iter().sum();
                if total <= 0.0 {
                    return Err(Error::DegenerateInput(format!(
                        "fewer than {k} distinct points for kmeans++ init"
                    )));
                }
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d2) in min_d2.iter().enumerate() {
                    u -= d2;
                    if u <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                chosen.push(pick);
                for i in 0..n {
                    let d2 = row_sq_dist(points.row(i), points.row(pick));
                    if d2 < min_d2[i] {
                        min_d2[i] = d2;
                    }
                }
            }
            let mut codes = Array2::zeros((k, points.ncols()));
            for (row, &idx) in chosen.iter().enumerate() {
                codes.row_mut(row).assign(&points.row(idx));
            }
            Codebook::new(codes)
        }
    }
}

/// Runs batch Lloyd iteration until the max centroid displacement falls
/// below `tol` or `max_iter` is reached.
///
/// Empty cells are reseeded to the point with the largest current
/// quantization error, keeping `K` constant; the recorded distortion
/// sequence is non-increasing either way.
pub fn lloyd(
    points: ArrayView2<'_, f64>,
    k: usize,
    init: &InitStrategy,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<LloydResult> {
    let n = points.nrows();
    let d = points.ncols();
    if n < k {
        return Err(Error::Infeasible(format!("{n} points for {k} codes")));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidConfig("tol must be > 0".into()));
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("training points".into()));
    }

    let mut codebook = init_codebook(points, k, init, seed)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let mut winners = vec![0usize; n];
    let mut win_dist = vec![0.0f64; n];

    for iter in 0..max_iter {
        iterations = iter + 1;

        // Assignment phase.
        let mut total = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = row_sq_dist(points.row(i), codebook.code(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            winners[i] = best;
            win_dist[i] = best_d;
            total += best_d;
        }
        trace.push(total / n as f64);

        // Update phase: cell means.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[winners[i]] += 1;
            let mut row = sums.row_mut(winners[i]);
            row += &points.row(i);
        }
        let mut new_codes = codebook.codes().clone();
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                new_codes.row_mut(c).assign(&mean);
            }
        }

        // Empty-cluster repair: reseed to the worst-quantized point.
        let mut reused = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let mut worst = None;
                let mut worst_d = -1.0;
                for i in 0..n {
                    if !reused[i] && win_dist[i] > worst_d {
                        worst_d = win_dist[i];
                        worst = Some(i);
                    }
                }
                let idx = worst.expect("n >= k guarantees a reseed candidate");
                reused[idx] = true;
                new_codes.row_mut(c).assign(&points.row(idx));
            }
        }

        let mut max_disp = 0.0f64;
        for c in 0..k {
            let disp = row_sq_dist(codebook.codes().row(c), new_codes.row(c)).sqrt();
            if disp > max_disp {
                max_disp = disp;
            }
        }
        codebook = Codebook::new(new_codes)?;
        if max_disp < tol {
            converged = true;
            break;
        }
    }

    let final_distortion = distortion(points, &codebook)?;
    Ok(LloydResult {
        codebook,
        iterations,
        final_distortion,
        converged,
        distortion_trace: trace,
    })
}

/// True iff every nonempty Voronoi cell has its centroid within `tol`
/// (Euclidean) of the cell mean.
pub fn is_fixed_point(points: ArrayView2<'_, f64>, codebook: &Codebook, tol: f64) -> Result<bool> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("fixed-point check over zero points".into()));
    }
    if points.ncols() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "points of dimension {} against codebook of dimension {}",
            points.ncols(),
            codebook.dim()
        )));
    }
    let k = codebook.k();
    let mut sums = Array2::<f64>::zeros((k, codebook.dim()));
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist = row_sq_dist(points.row(i), codebook.code(c));
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        counts[best] += 1;
        let mut row = sums.row_mut(best);
        row += &points.row(i);
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let mean: Array1<f64> = sums.row(c).mapv(|v| v / counts[c] as f64);
        let disp = row_sq_dist(codebook.code(c), mean.view()).sqrt();
        if disp > tol {
            return Ok(false);
        }
    }
    Ok(true)
}
