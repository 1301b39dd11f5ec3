//! Shared numeric kernels: norms, squared-L2 distances, Lloyd's k-means with
//! k-means++ seeding, and PCA fitting/projection.
//!
//! Distances are squared L2 throughout; square roots only appear at reporting
//! boundaries.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use thiserror::Error;

use crate::descriptor::{Descriptor, DescriptorSet};

/// Norms at or below this are treated as zero and left unnormalized.
pub const EPS_NORM: f64 = 1e-12;
/// Added to eigenvalues before whitening.
pub const WHITEN_EPS: f64 = 1e-9;
/// Relative inertia improvement below which Lloyd iterations stop.
pub const KMEANS_REL_TOL: f64 = 1e-7;

/// Seeded generator used by every randomized routine in the crate.
pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Mixes a base seed with a stream id (splitmix64 finalizer) so that
/// independent consumers, e.g. one per query, get decorrelated streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("insufficient data: need at least {required} rows, got {available}")]
    InsufficientData { required: usize, available: usize },
    #[error("requested {requested} components but at most {max} are available")]
    TooManyComponents { requested: usize, max: usize },
}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, NumericsError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(NumericsError::InvalidInput(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact on an empty slice with cols == 0 would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> Matrix {
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Squared Euclidean distance. Uses eight independent accumulators so the
/// loop vectorizes; the reduction order is fixed, so results are reproducible.
#[inline]
pub fn sq_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Scales `v` to unit length in place. Returns `false` (and leaves `v`
/// untouched) when the norm is at or below [`EPS_NORM`].
pub fn l2_normalize_in_place(v: &mut [f32]) -> bool {
    let n = l2_norm(v);
    if n > EPS_NORM {
        for x in v.iter_mut() {
            *x = (*x as f64 / n) as f32;
        }
        true
    } else {
        false
    }
}

pub fn l2_normalize(v: &[f32]) -> Result<Descriptor, NumericsError> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(NumericsError::InvalidInput(format!(
            "non-finite value at position {i}"
        )));
    }
    let mut values = v.to_vec();
    let normalized = l2_normalize_in_place(&mut values);
    Ok(Descriptor { values, normalized })
}

/// All-pairs squared L2 distances between the rows of `a` and `b`.
pub fn pairwise_sq_l2(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.cols(),
            actual: b.cols(),
        });
    }
    let m = b.rows();
    let mut out = vec![0f32; a.rows() * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let ai = a.row(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = sq_l2(ai, b.row(j));
            }
        });
    }
    Matrix::new(a.rows(), m, out)
}

/// Index of the nearest row of `centroids` to `v`; ties go to the lower index.
#[inline]
pub fn nearest_row(centroids: &Matrix, v: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_l2(v, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Result of a k-means fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Matrix,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment step, in order.
    pub history: Vec<f64>,
    /// Final cluster of each training point.
    pub assignments: Vec<usize>,
    /// Number of times an empty cluster was refilled.
    pub repairs: usize,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn nearest(&self, v: &[f32]) -> (usize, f32) {
        nearest_row(&self.centroids, v)
    }
}

fn assign_all(data: &Matrix, centroids: &Matrix, assign: &mut [usize], dist: &mut [f32]) {
    assign
        .par_iter_mut()
        .zip(dist.par_iter_mut())
        .enumerate()
        .for_each(|(i, (a, d))| {
            let (j, dd) = nearest_row(centroids, data.row(i));
            *a = j;
            *d = dd;
        });
}

fn kmeans_pp_init(data: &Matrix, k: usize, rng: &mut SeededRng) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f32> = (0..n)
        .into_par_iter()
        .map(|i| sq_l2(data.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().map(|&d| d as f64).sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0f64;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d as f64;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the final sum
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        let cr = centroids.row(c);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = sq_l2(data.row(i), cr);
            if nd < *d {
                *d = nd;
            }
        });
    }
    centroids
}

/// Lloyd's k-means seeded with k-means++.
///
/// Stops after `max_iters` centroid updates or once the relative inertia
/// improvement falls below [`KMEANS_REL_TOL`]. Empty clusters are refilled with
/// the point farthest from its centroid in the currently largest cluster.
pub fn kmeans(data: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<Codebook, NumericsError> {
    let n = data.rows();
    if k == 0 {
        return Err(NumericsError::InvalidInput("k must be at least 1".into()));
    }
    if n < k {
        return Err(NumericsError::InsufficientData {
            required: k,
            available: n,
        });
    }
    if !data.is_finite() {
        return Err(NumericsError::InvalidInput("non-finite training data".into()));
    }
    let dim = data.cols();
    let mut rng = seeded_rng(seed);
    let mut centroids = kmeans_pp_init(data, k, &mut rng);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0f32; n];
    let mut history = Vec::new();
    let mut repairs = 0usize;
    let mut iter = 0usize;

    loop {
        assign_all(data, &centroids, &mut assign, &mut dist);
        repairs += repair_empty(data, &mut centroids, &mut assign, &mut dist);
        let inertia: f64 = dist.iter().map(|&d| d as f64).sum();
        let converged = match history.last() {
            Some(&prev) => prev - inertia < KMEANS_REL_TOL * prev,
            None => false,
        };
        history.push(inertia);
        if converged || inertia == 0.0 || iter >= max_iters {
            break;
        }

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            let s = &mut sums[a * dim..(a + 1) * dim];
            for (acc, &x) in s.iter_mut().zip(data.row(i)) {
                *acc += x as f64;
            }
        }
        for c in 0..k {
            let cnt = counts[c] as f64;
            for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *dst = (s / cnt) as f32;
            }
        }
        iter += 1;
    }

    let inertia = *history.last().expect("at least one assignment step");
    Ok(Codebook {
        centroids,
        inertia,
        history,
        assignments: assign,
        repairs,
    })
}

fn repair_empty(data: &Matrix, centroids: &mut Matrix, assign: &mut [usize], dist: &mut [f32]) -> usize {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    for &a in assign.iter() {
        sizes[a] += 1;
    }
    let mut repaired = 0;
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let mut largest = 0;
        for (c, &s) in sizes.iter().enumerate() {
            if s > sizes[largest] {
                largest = c;
            }
        }
        let mut far = None::<(usize, f32)>;
        for (i, &a) in assign.iter().enumerate() {
            if a == largest && far.is_none_or(|(_, d)| dist[i] > d) {
                far = Some((i, dist[i]));
            }
        }
        let (p, _) = far.expect("largest cluster is non-empty when n >= k");
        assign[p] = empty;
        dist[p] = 0.0;
        sizes[largest] -= 1;
        sizes[empty] += 1;
        centroids.row_mut(empty).copy_from_slice(data.row(p));
        repaired += 1;
    }
    repaired
}

/// Fitted PCA projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    /// `out_dim x dim`, orthonormal rows sorted by decreasing eigenvalue.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
    pub whiten: bool,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// Projection before the final L2 normalization.
    pub fn project(&self, v: &[f32]) -> Result<Vec<f32>, NumericsError> {
        if v.len() != self.input_dim() {
            return Err(NumericsError::DimensionMismatch {
                expected: self.input_dim(),
                actual: v.len(),
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(&x, &m)| x as f64 - m as f64).collect();
        Ok(self
            .components
            .iter_rows()
            .zip(&self.eigenvalues)
            .map(|(row, &ev)| {
                let p: f64 = row.iter().zip(&centered).map(|(&c, &x)| c as f64 * x).sum();
                if self.whiten {
                    (p / (ev + WHITEN_EPS).sqrt()) as f32
                } else {
                    p as f32
                }
            })
            .collect())
    }

    /// Maps projected coordinates back to input space.
    pub fn reconstruct(&self, projected: &[f32]) -> Result<Vec<f32>, NumericsError> {
        if projected.len() != self.output_dim() {
            return Err(NumericsError::DimensionMismatch {
                expected: self.output_dim(),
                actual: projected.len(),
            });
        }
        let mut out: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for ((row, &ev), &p) in self.components.iter_rows().zip(&self.eigenvalues).zip(projected) {
            let p = if self.whiten {
                p as f64 * (ev + WHITEN_EPS).sqrt()
            } else {
                p as f64
            };
            for (o, &c) in out.iter_mut().zip(row) {
                *o += c as f64 * p;
            }
        }
        Ok(out.into_iter().map(|x| x as f32).collect())
    }

    pub fn apply(&self, d: &Descriptor) -> Result<Descriptor, NumericsError> {
        let projected = self.project(&d.values)?;
        l2_normalize(&projected)
    }

    pub fn apply_set(&self, set: &DescriptorSet) -> Result<DescriptorSet, NumericsError> {
        let rows: Vec<Vec<f32>> = set
            .matrix()
            .iter_rows()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|r| {
                self.project(r).map(|mut p| {
                    l2_normalize_in_place(&mut p);
                    p
                })
            })
            .collect::<Result<_, _>>()?;
        let matrix = Matrix::from_rows(&rows)?;
        let out = DescriptorSet::new(set.ids().to_vec(), matrix)
            .map_err(|e| NumericsError::InvalidInput(e.to_string()))?;
        Ok(out)
    }
}

/// Fits PCA on the rows of `set` using the sample covariance (divisor n-1).
pub fn pca_fit(set: &DescriptorSet, out_dim: usize, whiten: bool) -> Result<PcaModel, NumericsError> {
    pca_fit_matrix(set.matrix(), out_dim, whiten)
}

pub fn pca_fit_matrix(data: &Matrix, out_dim: usize, whiten: bool) -> Result<PcaModel, NumericsError> {
    let n = data.rows();
    let dim = data.cols();
    if n < 2 {
        return Err(NumericsError::InsufficientData {
            required: 2,
            available: n,
        });
    }
    let max = (n - 1).min(dim);
    if out_dim == 0 || out_dim > max {
        return Err(NumericsError::TooManyComponents {
            requested: out_dim,
            max,
        });
    }
    if !data.is_finite() {
        return Err(NumericsError::InvalidInput("non-finite training data".into()));
    }
    let mut mean = vec![0f64; dim];
    for r in data.iter_rows() {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| data.get(i, j) as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Matrix::zeros(out_dim, dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for (r, &src) in order.iter().take(out_dim).enumerate() {
        let col = eig.eigenvectors.column(src);
        // sign convention: largest-magnitude entry positive
        let mut pivot = 0;
        for j in 0..dim {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (j, dst) in components.row_mut(r).iter_mut().enumerate() {
            *dst = (sign * col[j]) as f32;
        }
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }
    Ok(PcaModel {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        components,
        eigenvalues,
        whiten,
    })
}

/// Convenience wrapper over [`PcaModel::apply`].
pub fn pca_apply(model: &PcaModel, d: &Descriptor) -> Result<Descriptor, NumericsError> {
    model.apply(d)
}
