//! Fundamental data types and metrics shared by every other module.
//!
//! A [`Codebook`] is a `K x d` matrix of code vectors; a [`Batch`] is a
//! `B x d` slice of the stream together with the dataset indices it was
//! drawn from. Assignment is winner-take-all on squared Euclidean
//! distance, with ties broken toward the lowest code index so runs are
//! reproducible.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// A set of `K` code vectors in `R^d`, addressable by stable index.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Array2<f64>,
}

impl Codebook {
    /// Wraps a `K x d` matrix, requiring `K >= 1`, `d >= 1` and all entries finite.
    pub fn new(codes: Array2<f64>) -> Result<Self> {
        if codes.nrows() == 0 || codes.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "codebook must be at least 1x1, got {}x{}",
                codes.nrows(),
                codes.ncols()
            )));
        }
        if !codes.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self { codes })
    }

    /// Number of codes `K`.
    pub fn k(&self) -> usize {
        self.codes.nrows()
    }

    /// Embedding dimension `d`.
    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }

    /// The `K x d` code matrix.
    pub fn codes(&self) -> &Array2<f64> {
        &self.codes
    }

    /// One code vector by index.
    pub fn code(&self, k: usize) -> ArrayView1<'_, f64> {
        self.codes.row(k)
    }

    /// Overwrites one code vector; the replacement must be finite and of matching dimension.
    pub fn set_code(&mut self, k: usize, value: ArrayView1<'_, f64>) -> Result<()> {
        if k >= self.k() {
            return Err(Error::IndexOutOfRange { index: k, len: self.k() });
        }
        if value.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "code of length {} into codebook of dimension {}",
                value.len(),
                self.dim()
            )));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("replacement code".into()));
        }
        self.codes.row_mut(k).assign(&value);
        Ok(())
    }

    pub(crate) fn codes_mut(&mut self) -> &mut Array2<f64> {
        &mut self.codes
    }
}

/// A mini-batch of stream points plus the dataset indices they came from.
#[derive(Debug, Clone)]
pub struct Batch {
    points: Array2<f64>,
    source_indices: Vec<usize>,
}

impl Batch {
    /// Builds a batch; requires `B >= 1`, finite entries, and one source index per row.
    pub fn new(points: Array2<f64>, source_indices: Vec<usize>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptyInput("batch has no points".into()));
        }
        if source_indices.len() != points.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} source indices for {} points",
                source_indices.len(),
                points.nrows()
            )));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("batch points".into()));
        }
        Ok(Self { points, source_indices })
    }

    /// Batch with positional indices `0..B`.
    pub fn from_points(points: Array2<f64>) -> Result<Self> {
        let indices = (0..points.nrows()).collect();
        Self::new(points, indices)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }
}

/// Winner-take-all assignment of a batch: per-point winning code index and
/// squared distance to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    winners: Vec<usize>,
    distances: Vec<f64>,
}

impl Assignment {
    pub fn winners(&self) -> &[usize] {
        &self.winners
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn len(&self) -> usize {
        self.winners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.winners.is_empty()
    }
}

/// Summary metrics over a window of assignments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean squared distance of points to their nearest code.
    pub distortion: f64,
    /// Fraction of codes assigned at least once in the window.
    pub utilization: f64,
    /// Codes with zero assignments in the window.
    pub dead_codes: usize,
}

impl Metrics {
    /// Computes distortion over `points` and utilization/dead-code counts
    /// over a window of winner indices.
    pub fn compute(points: ArrayView2<'_, f64>, codebook: &Codebook, window: &[usize]) -> Result<Self> {
        let distortion = distortion(points, codebook)?;
        let utilization = utilization(window, codebook.k())?;
        let dead_codes = dead_code_count(window, codebook.k());
        Ok(Self { distortion, utilization, dead_codes })
    }
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the code nearest to `x`.
///
/// Exact ties resolve to the lowest index.
pub fn nearest_code(x: ArrayView1<'_, f64>, codebook: &Codebook) -> Result<(usize, f64)> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("query point".into()));
    }
    if x.len() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point of dimension {} against codebook of dimension {}",
            x.len(),
            codebook.dim()
        )));
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (k, code) in codebook.codes().rows().into_iter().enumerate() {
        let d = squared_distance(x, code);
        if d < best_dist {
            best_dist = d;
            best = k;
        }
    }
    Ok((best, best_dist))
}

/// Assigns every batch point to its nearest code.
pub fn assign_batch(batch: &Batch, codebook: &Codebook) -> Result<Assignment> {
    if batch.dim() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch of dimension {} against codebook of dimension {}",
            batch.dim(),
            codebook.dim()
        )));
    }
    let mut winners = Vec::with_capacity(batch.len());
    let mut distances = Vec::with_capacity(batch.len());
    for point in batch.points().rows() {
        let (w, d) = nearest_code(point, codebook)?;
        winners.push(w);
        distances.push(d);
    }
    Ok(Assignment { winners, distances })
}

/// Empirical distortion: mean over points of the squared distance to the
/// nearest code.
pub fn distortion(points: ArrayView2<'_, f64>, codebook: &Codebook) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(Error::EmptyInput("distortion over zero points".into()));
    }
    if points.ncols() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "points of dimension {} against codebook of dimension {}",
            points.ncols(),
            codebook.dim()
        )));
    }
    let d = points.ncols();
    let codes = codebook.codes();
    let code_slice = codes.as_slice().expect("codebooks are standard layout");
    let mut total = 0.0;
    // Slice-based inner loop; this runs once per harness step over the full
    // dataset, so it is the hottest path in the crate.
    for point in points.rows() {
        let mut best = f64::INFINITY;
        for code in code_slice.chunks_exact(d) {
            let mut dist = 0.0;
            for (p, c) in point.iter().zip(code) {
                let diff = p - c;
                dist += diff * diff;
            }
            if dist < best {
                best = dist;
            }
        }
        total += best;
    }
    Ok(total / points.nrows() as f64)
}

/// Fraction of the `K` codes that appear at least once in the window.
pub fn utilization(window: &[usize], k: usize) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::EmptyInput("utilization over an empty window".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("utilization with K = 0".into()));
    }
    let mut hit = vec![false; k];
    for &w in window {
        if w >= k {
            return Err(Error::IndexOutOfRange { index: w, len: k });
        }
        hit[w] = true;
    }
    let used = hit.iter().filter(|h| **h).count();
    Ok(used as f64 / k as f64)
}

/// Number of codes with zero assignments in the window.
pub fn dead_code_count(window: &[usize], k: usize) -> usize {
    let mut hit = vec![false; k];
    for &w in window {
        if w < k {
            hit[w] = true;
        }
    }
    hit.iter().filter(|h| !**h).count()
}
