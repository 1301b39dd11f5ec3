//! Backbone-output pooling into fixed-size global descriptors.
//!
//! Feature-map pooling treats the `H·W` spatial positions as a set of
//! `C`-dimensional local features. Every public pooling function ends with an
//! L2 normalization; the `*_pooled` variants return the vector before it.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::Descriptor;
use crate::numerics::{dot, l2_normalize_in_place, seeded_rng, Matrix};

pub const GEM_DEFAULT_P: f64 = 3.0;
pub const GEM_DEFAULT_EPS: f64 = 1e-6;
/// Target overlap between neighbouring R-MAC regions along the long side.
const RMAC_OVERLAP: f64 = 0.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("channel mismatch: parameters expect {expected} channels, map has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("token matrix has no CLS token")]
    MissingCls,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Dense `C×H×W` backbone output, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, AggregationError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(AggregationError::InvalidShape(format!(
                "{channels}x{height}x{width} has a zero dimension"
            )));
        }
        if data.len() != channels * height * width {
            return Err(AggregationError::InvalidShape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AggregationError::InvalidShape("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Spatial plane of channel `c`, row-major `H×W`.
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.positions();
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Local feature (all channels) at flat spatial position `pos`.
    pub fn local_feature(&self, pos: usize) -> Vec<f32> {
        let hw = self.positions();
        (0..self.channels).map(|c| self.data[c * hw + pos]).collect()
    }
}

/// Transformer output: one row per token, optionally led by a CLS token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: Matrix,
    cls_present: bool,
}

impl TokenMatrix {
    pub fn new(tokens: Matrix, cls_present: bool) -> Result<Self, AggregationError> {
        let min = if cls_present { 2 } else { 1 };
        if tokens.rows() < min {
            return Err(AggregationError::InvalidShape(format!(
                "{} tokens, need at least {min}",
                tokens.rows()
            )));
        }
        if tokens.cols() == 0 {
            return Err(AggregationError::InvalidShape("zero token dimension".into()));
        }
        Ok(Self { tokens, cls_present })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn cls_present(&self) -> bool {
        self.cls_present
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }
}

fn finish(mut v: Vec<f32>) -> Descriptor {
    let normalized = l2_normalize_in_place(&mut v);
    Descriptor { values: v, normalized }
}

pub fn spoc_pooled(f: &FeatureMap) -> Vec<f32> {
    let hw = f.positions() as f64;
    (0..f.channels)
        .map(|c| (f.plane(c).iter().map(|&x| x as f64).sum::<f64>() / hw) as f32)
        .collect()
}

/// Sum-pooling of convolutions: per-channel spatial mean.
pub fn spoc(f: &FeatureMap) -> Descriptor {
    finish(spoc_pooled(f))
}

pub fn mac_pooled(f: &FeatureMap) -> Vec<f32> {
    (0..f.channels)
        .map(|c| f.plane(c).iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect()
}

/// Maximum activations of convolutions: per-channel spatial max.
pub fn mac(f: &FeatureMap) -> Descriptor {
    finish(mac_pooled(f))
}

/// Per channel `(mean(max(x, eps)^p))^(1/p)`.
///
/// Evaluated as `m · (mean((x/m)^p))^(1/p)` with `m` the channel maximum so
/// large `p` does not overflow.
pub fn gem_pooled(f: &FeatureMap, p: f64, eps: f64) -> Result<Vec<f32>, AggregationError> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(AggregationError::InvalidParameter(format!("GeM power must be >= 1, got {p}")));
    }
    if !(eps > 0.0) {
        return Err(AggregationError::InvalidParameter(format!("GeM eps must be > 0, got {eps}")));
    }
    let hw = f.positions() as f64;
    Ok((0..f.channels)
        .map(|c| {
            let plane = f.plane(c);
            if p == 1.0 {
                return (plane.iter().map(|&x| (x as f64).max(eps)).sum::<f64>() / hw) as f32;
            }
            let m = plane.iter().map(|&x| (x as f64).max(eps)).fold(eps, f64::max);
            let s = plane
                .iter()
                .map(|&x| ((x as f64).max(eps) / m).powf(p))
                .sum::<f64>()
                / hw;
            (m * s.powf(1.0 / p)) as f32
        })
        .collect())
}

/// Generalized-mean pooling.
pub fn gem(f: &FeatureMap, p: f64, eps: f64) -> Result<Descriptor, AggregationError> {
    Ok(finish(gem_pooled(f, p, eps)?))
}

/// Square pooling region `[y, y+side) × [x, x+side)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y: usize,
    pub x: usize,
    pub side: usize,
}

fn region_starts(len: usize, side: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    let step = (len - side) as f64 / (count - 1) as f64;
    (0..count).map(|k| (k as f64 * step).floor() as usize).collect()
}

/// R-MAC region grid.
///
/// Level `l` uses squares of side `floor(2·min(H,W)/(l+1))`: `l` of them along
/// the short side, and along the long side `l` plus a fixed number of extra
/// regions picked so that consecutive regions overlap by about 40%. Regions are
/// spaced uniformly, starting flush with the map edge.
pub fn rmac_regions(height: usize, width: usize, levels: usize) -> Result<Vec<Region>, AggregationError> {
    if levels == 0 {
        return Err(AggregationError::InvalidParameter("R-MAC needs at least one level".into()));
    }
    let short = height.min(width);
    let long = height.max(width);
    let mut extra = 0;
    if long != short {
        let mut best = f64::INFINITY;
        for steps in 2..=7usize {
            let b = (long - short) as f64 / (steps - 1) as f64;
            let s = short as f64;
            let overlap = (s * s - s * b) / (s * s);
            let err = (overlap - RMAC_OVERLAP).abs();
            if err < best {
                best = err;
                extra = steps - 1;
            }
        }
    }
    let mut regions = Vec::new();
    for l in 1..=levels {
        let side = 2 * short / (l + 1);
        if side == 0 {
            return Err(AggregationError::DegenerateGeometry(format!(
                "level {l} region side is zero for a {height}x{width} map"
            )));
        }
        let ny = l + if height > width { extra } else { 0 };
        let nx = l + if width > height { extra } else { 0 };
        for &y in &region_starts(height, side, ny) {
            for &x in &region_starts(width, side, nx) {
                regions.push(Region { y, x, side });
            }
        }
    }
    Ok(regions)
}

pub fn region_max(f: &FeatureMap, r: Region) -> Vec<f32> {
    (0..f.channels)
        .map(|c| {
            let mut m = f32::NEG_INFINITY;
            for y in r.y..r.y + r.side {
                for x in r.x..r.x + r.side {
                    m = m.max(f.at(c, y, x));
                }
            }
            m
        })
        .collect()
}

/// Regional MAC: sum of L2-normalized region max-vectors over the grid from
/// [`rmac_regions`], then L2-normalized.
pub fn rmac(f: &FeatureMap, levels: usize) -> Result<Descriptor, AggregationError> {
    Ok(finish(rmac_pooled(f, levels)?))
}

pub fn rmac_pooled(f: &FeatureMap, levels: usize) -> Result<Vec<f32>, AggregationError> {
    let regions = rmac_regions(f.height, f.width, levels)?;
    let mut acc = vec![0f64; f.channels];
    for r in regions {
        let mut v = region_max(f, r);
        l2_normalize_in_place(&mut v);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// NetVLAD layer parameters (`K` clusters over `C` channels).
#[derive(Debug, Clone, PartialEq)]
pub struct VladParams {
    pub centroids: Matrix,
    pub assign_weights: Matrix,
    pub assign_bias: Vec<f32>,
}

impl VladParams {
    pub fn new(centroids: Matrix, assign_weights: Matrix, assign_bias: Vec<f32>) -> Result<Self, AggregationError> {
        let (k, c) = (centroids.rows(), centroids.cols());
        if k < 2 {
            return Err(AggregationError::InvalidParameter(format!("NetVLAD needs K >= 2, got {k}")));
        }
        if assign_weights.rows() != k || assign_weights.cols() != c || assign_bias.len() != k {
            return Err(AggregationError::InvalidShape(format!(
                "assignment parameters {}x{} / {} do not match centroids {k}x{c}",
                assign_weights.rows(),
                assign_weights.cols(),
                assign_bias.len()
            )));
        }
        if !centroids.is_finite() || !assign_weights.is_finite() || assign_bias.iter().any(|b| !b.is_finite()) {
            return Err(AggregationError::InvalidParameter("non-finite NetVLAD parameter".into()));
        }
        Ok(Self {
            centroids,
            assign_weights,
            assign_bias,
        })
    }

    /// Random parameters in the usual NetVLAD initialization: unit-norm
    /// centroids, `w_k = 2α·c_k`, `b_k = −α‖c_k‖²`.
    pub fn seeded(k: usize, channels: usize, alpha: f32, seed: u64) -> Result<Self, AggregationError> {
        let mut rng = seeded_rng(seed);
        let mut centroids = Matrix::zeros(k, channels);
        for r in 0..k {
            let row = centroids.row_mut(r);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            l2_normalize_in_place(row);
        }
        let mut weights = Matrix::zeros(k, channels);
        let mut bias = vec![0f32; k];
        for (r, b) in bias.iter_mut().enumerate() {
            let c = centroids.row(r).to_vec();
            for (w, &cv) in weights.row_mut(r).iter_mut().zip(&c) {
                *w = 2.0 * alpha * cv;
            }
            *b = -alpha * dot(&c, &c);
        }
        Self::new(centroids, weights, bias)
    }

    pub fn clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn channels(&self) -> usize {
        self.centroids.cols()
    }
}

/// Soft-assignment of every spatial position: a `positions × K` matrix whose
/// rows are softmaxes of `w_k·x + b_k`.
pub fn vlad_assignments(f: &FeatureMap, params: &VladParams) -> Result<Matrix, AggregationError> {
    check_channels(f, params)?;
    let k = params.clusters();
    let mut out = Matrix::zeros(f.positions(), k);
    for pos in 0..f.positions() {
        let x = f.local_feature(pos);
        let logits: Vec<f64> = (0..k)
            .map(|j| dot(params.assign_weights.row(j), &x) as f64 + params.assign_bias[j] as f64)
            .collect();
        let soft = softmax(&logits);
        for (dst, s) in out.row_mut(pos).iter_mut().zip(soft) {
            *dst = s as f32;
        }
    }
    Ok(out)
}

fn check_channels(f: &FeatureMap, params: &VladParams) -> Result<(), AggregationError> {
    if params.channels() != f.channels {
        return Err(AggregationError::ChannelMismatch {
            expected: params.channels(),
            actual: f.channels,
        });
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// NetVLAD output plus the clusters whose residual block was zero (left zero
/// by intra-normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct VladOutput {
    pub descriptor: Descriptor,
    pub zero_blocks: Vec<usize>,
}

/// Residual sums `V_k = Σ_i a_k(x_i)(x_i − c_k)` before any normalization,
/// laid out cluster-major (`K·C`).
pub fn vlad_residuals(f: &FeatureMap, params: &VladParams) -> Result<Vec<f64>, AggregationError> {
    let assign = vlad_assignments(f, params)?;
    let (k, c) = (params.clusters(), params.channels());
    let mut v = vec![0f64; k * c];
    for pos in 0..f.positions() {
        let x = f.local_feature(pos);
        for j in 0..k {
            let a = assign.get(pos, j) as f64;
            let cen = params.centroids.row(j);
            for ch in 0..c {
                v[j * c + ch] += a * (x[ch] as f64 - cen[ch] as f64);
            }
        }
    }
    Ok(v)
}

pub fn netvlad_detailed(f: &FeatureMap, params: &VladParams) -> Result<VladOutput, AggregationError> {
    let v = vlad_residuals(f, params)?;
    let c = params.channels();
    let mut out: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let mut zero_blocks = Vec::new();
    for (j, block) in out.chunks_mut(c).enumerate() {
        if !l2_normalize_in_place(block) {
            block.iter_mut().for_each(|x| *x = 0.0);
            zero_blocks.push(j);
        }
    }
    Ok(VladOutput {
        descriptor: finish(out),
        zero_blocks,
    })
}

/// NetVLAD: soft-assigned residual aggregation with intra-normalization.
/// Output dimension is `K·C`.
pub fn netvlad(f: &FeatureMap, params: &VladParams) -> Result<Descriptor, AggregationError> {
    Ok(netvlad_detailed(f, params)?.descriptor)
}

/// Attention-weighted token pooling (CLS excluded when present).
pub fn seqpool(t: &TokenMatrix, attn_weights: &[f32]) -> Result<Descriptor, AggregationError> {
    if attn_weights.len() != t.dim() {
        return Err(AggregationError::DimensionMismatch {
            expected: t.dim(),
            actual: attn_weights.len(),
        });
    }
    let start = usize::from(t.cls_present);
    let rows: Vec<&[f32]> = t.tokens.iter_rows().skip(start).collect();
    let logits: Vec<f64> = rows.iter().map(|r| dot(attn_weights, r) as f64).collect();
    let scores = softmax(&logits);
    let mut acc = vec![0f64; t.dim()];
    for (r, s) in rows.iter().zip(scores) {
        for (a, &x) in acc.iter_mut().zip(r.iter()) {
            *a += s * x as f64;
        }
    }
    Ok(finish(acc.into_iter().map(|x| x as f32).collect()))
}

pub fn cls_token(t: &TokenMatrix) -> Result<Descriptor, AggregationError> {
    if !t.cls_present {
        return Err(AggregationError::MissingCls);
    }
    Ok(finish(t.tokens.row(0).to_vec()))
}

/// Fully connected projection head `W·d + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl LinearHead {
    pub fn new(weights: Matrix, bias: Vec<f32>) -> Result<Self, AggregationError> {
        if bias.len() != weights.rows() {
            return Err(AggregationError::InvalidShape(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias })
    }

    /// Random weights with orthonormal rows (or columns when `out > in`),
    /// zero bias.
    pub fn orthogonal(out_dim: usize, in_dim: usize, seed: u64) -> Result<Self, AggregationError> {
        if out_dim == 0 || in_dim == 0 {
            return Err(AggregationError::InvalidShape("zero-sized projection".into()));
        }
        let (rows, cols) = if out_dim <= in_dim { (out_dim, in_dim) } else { (in_dim, out_dim) };
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
        while basis.len() < rows {
            let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
            // modified Gram-Schmidt, twice for stability
            for _ in 0..2 {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= p * y;
                    }
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let flat: Vec<f32> = basis.iter().flatten().map(|&x| x as f32).collect();
        let m = Matrix::new(rows, cols, flat).expect("shape is consistent");
        let weights = if out_dim <= in_dim { m } else { m.transpose() };
        Self::new(weights, vec![0.0; out_dim])
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn project_raw(&self, v: &[f32]) -> Result<Vec<f32>, AggregationError> {
        if v.len() != self.in_dim() {
            return Err(AggregationError::DimensionMismatch {
                expected: self.in_dim(),
                actual: v.len(),
            });
        }
        Ok(self
            .weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, &b)| (w.iter().zip(v).map(|(&a, &x)| a as f64 * x as f64).sum::<f64>() + b as f64) as f32)
            .collect())
    }

    pub fn project(&self, d: &Descriptor) -> Result<Descriptor, AggregationError> {
        Ok(finish(self.project_raw(&d.values)?))
    }
}

pub fn linear_project(d: &Descriptor, weights: &Matrix, bias: &[f32]) -> Result<Descriptor, AggregationError> {
    LinearHead::new(weights.clone(), bias.to_vec())?.project(d)
}

/// Feature-map pooling method with its hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pooling {
    Spoc,
    Mac,
    Gem {
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Rmac {
        #[serde(default = "default_levels")]
        levels: usize,
    },
    Netvlad {
        clusters: usize,
        #[serde(default = "default_alpha")]
        alpha: f32,
        #[serde(default)]
        seed: u64,
    },
}

fn default_p() -> f64 {
    GEM_DEFAULT_P
}

fn default_eps() -> f64 {
    GEM_DEFAULT_EPS
}

fn default_levels() -> usize {
    3
}

fn default_alpha() -> f32 {
    10.0
}

/// A pooling method bound to any parameters it needs.
#[derive(Debug, Clone)]
pub enum Aggregator {
    Spoc,
    Mac,
    Gem { p: f64, eps: f64 },
    Rmac { levels: usize },
    NetVlad(VladParams),
}

impl Aggregator {
    /// Binds `pooling`; NetVLAD parameters are drawn from its seed.
    pub fn from_pooling(pooling: &Pooling, channels: usize) -> Result<Self, AggregationError> {
        Ok(match *pooling {
            Pooling::Spoc => Aggregator::Spoc,
            Pooling::Mac => Aggregator::Mac,
            Pooling::Gem { p, eps } => Aggregator::Gem { p, eps },
            Pooling::Rmac { levels } => Aggregator::Rmac { levels },
            Pooling::Netvlad { clusters, alpha, seed } => {
                Aggregator::NetVlad(VladParams::seeded(clusters, channels, alpha, seed)?)
            }
        })
    }

    pub fn output_dim(&self, channels: usize) -> usize {
        match self {
            Aggregator::NetVlad(p) => p.clusters() * channels,
            _ => channels,
        }
    }

    pub fn apply(&self, f: &FeatureMap) -> Result<Descriptor, AggregationError> {
        match self {
            Aggregator::Spoc => Ok(spoc(f)),
            Aggregator::Mac => Ok(mac(f)),
            Aggregator::Gem { p, eps } => gem(f, *p, *eps),
            Aggregator::Rmac { levels } => rmac(f, *levels),
            Aggregator::NetVlad(params) => netvlad(f, params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_norm;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_map(c: usize, h: usize, w: usize, lo: f32, hi: f32, seed: u64) -> FeatureMap {
        let mut rng = seeded_rng(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn spoc_and_mac_scalar_examples() {
        let f = FeatureMap::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(spoc_pooled(&f), vec![2.0]);
        assert_eq!(mac_pooled(&f), vec![3.0]);
        let d = spoc(&f);
        assert!(d.normalized && d.values == vec![1.0]);

        let constant = FeatureMap::new(3, 2, 2, vec![0.7; 12]).unwrap();
        for v in spoc_pooled(&constant) {
            assert!((v - 0.7).abs() < 1e-7);
        }
    }

    #[test]
    fn mac_dominates_spoc_on_non_negative_maps() {
        let f = random_map(8, 5, 7, 0.0, 4.0, 1);
        for (m, s) in mac_pooled(&f).iter().zip(spoc_pooled(&f)) {
            assert!(*m >= s);
        }
    }

    #[test]
    fn gem_scalar_and_limits() {
        let f = FeatureMap::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        let v = gem_pooled(&f, 3.0, 1e-6).unwrap()[0] as f64;
        assert!((v - 14f64.powf(1.0 / 3.0)).abs() < 1e-5);
        assert!((v - 2.4101).abs() < 1e-4);

        let low = FeatureMap::new(2, 2, 2, vec![-1.0, 1e-9, 0.0, -3.0, 1e-8, -2.0, 0.0, 1e-7]).unwrap();
        for v in gem_pooled(&low, 3.0, 1e-6).unwrap() {
            assert!((v as f64 - 1e-6).abs() < 1e-12);
        }

        assert!(matches!(gem(&f, 0.5, 1e-6), Err(AggregationError::InvalidParameter(_))));
    }

    #[test]
    fn gem_p1_is_spoc_and_large_p_is_mac() {
        let f = random_map(16, 6, 6, 0.5, 2.0, 2);
        for (g, s) in gem_pooled(&f, 1.0, 1e-6).unwrap().iter().zip(spoc_pooled(&f)) {
            assert!((g - s).abs() < 1e-6);
        }
        for (g, m) in gem_pooled(&f, 1000.0, 1e-6).unwrap().iter().zip(mac_pooled(&f)) {
            assert!((g - m).abs() < 1e-2, "{g} vs {m}");
        }
    }

    #[test]
    fn rmac_single_level_square_is_mac() {
        let f = random_map(5, 6, 6, 0.0, 1.0, 3);
        let r = rmac(&f, 1).unwrap();
        let m = mac(&f);
        for (a, b) in r.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rmac_constant_map_is_levels_independent() {
        let f = FeatureMap::new(3, 7, 9, vec![0.25; 3 * 63]).unwrap();
        let expect = 1.0 / 3f32.sqrt();
        for levels in 1..=3 {
            let r = rmac(&f, levels).unwrap();
            assert!(r.values.iter().all(|v| (v - expect).abs() < 1e-6));
        }
    }

    #[test]
    fn rmac_ramp_matches_naive_region_enumeration() {
        // 4x4 single-channel ramp, value = 4y + x.
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let f = FeatureMap::new(1, 4, 4, data).unwrap();
        // Level 1: one 4x4 region. Level 2: side floor(8/3)=2, 2x2 regions at
        // starts {0, 2} on both axes.
        let expected_regions = vec![
            Region { y: 0, x: 0, side: 4 },
            Region { y: 0, x: 0, side: 2 },
            Region { y: 0, x: 2, side: 2 },
            Region { y: 2, x: 0, side: 2 },
            Region { y: 2, x: 2, side: 2 },
        ];
        assert_eq!(rmac_regions(4, 4, 2).unwrap(), expected_regions);
        // Naive enumerator: per-region max by scanning, normalized (C=1, so
        // any positive max becomes 1), summed over regions.
        let naive: f64 = expected_regions
            .iter()
            .map(|r| {
                let mut m = f32::NEG_INFINITY;
                for y in r.y..r.y + r.side {
                    for x in r.x..r.x + r.side {
                        m = m.max((4 * y + x) as f32);
                    }
                }
                if m > 0.0 { 1.0 } else { 0.0 }
            })
            .sum();
        assert_eq!(rmac_pooled(&f, 2).unwrap(), vec![naive as f32]);
        assert_eq!(rmac(&f, 2).unwrap().values, vec![1.0]);

        // Multi-channel check of the pre-normalization sum against the naive
        // enumerator.
        let g = random_map(3, 4, 4, 0.1, 1.0, 5);
        let mut acc = vec![0f64; 3];
        for r in &expected_regions {
            let mut v: Vec<f32> = (0..3)
                .map(|c| {
                    let mut m = f32::NEG_INFINITY;
                    for y in r.y..r.y + r.side {
                        for x in r.x..r.x + r.side {
                            m = m.max(g.at(c, y, x));
                        }
                    }
                    m
                })
                .collect();
            l2_normalize_in_place(&mut v);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x as f64;
            }
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = rmac(&g, 2).unwrap();
        for (a, b) in got.values.iter().zip(&acc) {
            assert!((*a as f64 - b / n).abs() < 1e-6);
        }
    }

    #[test]
    fn rmac_wide_map_adds_long_side_regions() {
        let regions = rmac_regions(10, 20, 1).unwrap();
        assert!(regions.len() > 1);
        for r in &regions {
            assert_eq!(r.side, 10);
            assert_eq!(r.y, 0);
            assert!(r.x + r.side <= 20);
        }
        assert_eq!(regions.last().unwrap().x + 10, 20);
    }

    #[test]
    fn rmac_degenerate_geometry() {
        let f = FeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(rmac(&f, 2), Err(AggregationError::DegenerateGeometry(_))));
    }

    #[test]
    fn netvlad_one_position_hand_cases() {
        let f = FeatureMap::new(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let centroids = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();

        // Moderate preference for cluster 0: a = (1/(1+e^-10), 1/(1+e^10)).
        // V0 = a0·(0,0) = 0 -> zero block; V1 = a1·(1,-1) -> (1,-1)/√2.
        let w = Matrix::from_rows(&[[10.0f32, 0.0], [0.0, 0.0]]).unwrap();
        let params = VladParams::new(centroids.clone(), w, vec![0.0, 0.0]).unwrap();
        let a = vlad_assignments(&f, &params).unwrap();
        let a1 = 1.0 / (1.0 + 10f64.exp());
        assert!((a.get(0, 1) as f64 - a1).abs() < 1e-9);
        let out = netvlad_detailed(&f, &params).unwrap();
        assert_eq!(out.zero_blocks, vec![0]);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let expect = [0.0, 0.0, s, -s];
        for (g, e) in out.descriptor.values.iter().zip(expect) {
            assert!((g - e).abs() < 1e-6);
        }
        assert!(out.descriptor.normalized);

        // Hard one-hot assignment: the second block's mass underflows the norm
        // threshold too, leaving an all-zero, unnormalized descriptor.
        let w = Matrix::from_rows(&[[100.0f32, 0.0], [0.0, 0.0]]).unwrap();
        let params = VladParams::new(centroids, w, vec![0.0, 0.0]).unwrap();
        let out = netvlad_detailed(&f, &params).unwrap();
        assert_eq!(out.zero_blocks, vec![0, 1]);
        assert!(!out.descriptor.normalized);
        assert!(out.descriptor.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn netvlad_uniform_assignment_matches_direct_formula() {
        let (k, c) = (4, 6);
        let f = random_map(c, 3, 5, -1.0, 1.0, 6);
        let mut rng = seeded_rng(7);
        let cents = Matrix::new(k, c, (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let params = VladParams::new(cents.clone(), Matrix::zeros(k, c), vec![0.0; k]).unwrap();
        let v = vlad_residuals(&f, &params).unwrap();
        for j in 0..k {
            for ch in 0..c {
                let direct: f64 = (0..f.positions())
                    .map(|p| (f.plane(ch)[p] as f64 - cents.get(j, ch) as f64) / k as f64)
                    .sum();
                assert!((v[j * c + ch] - direct).abs() < 1e-5);
            }
        }
        let d = netvlad(&f, &params).unwrap();
        assert_eq!(d.dim(), k * c);
        assert!((l2_norm(&d.values) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn netvlad_channel_mismatch_and_dims() {
        let params = VladParams::seeded(64, 8, 10.0, 1).unwrap();
        let f = random_map(4, 2, 2, 0.0, 1.0, 1);
        assert!(matches!(netvlad(&f, &params), Err(AggregationError::ChannelMismatch { .. })));
        let g = random_map(8, 3, 3, 0.0, 1.0, 1);
        assert_eq!(netvlad(&g, &params).unwrap().dim(), 64 * 8);
        assert_eq!(Aggregator::NetVlad(params).output_dim(1024), 65536);
    }

    #[test]
    fn seqpool_cases() {
        let toks = Matrix::from_rows(&[[9.0f32, 9.0], [1.0, 0.0], [0.0, 3.0], [2.0, 1.0]]).unwrap();
        let t = TokenMatrix::new(toks, true).unwrap();
        // zero weights: plain mean of non-CLS tokens (1,4/3)
        let d = seqpool(&t, &[0.0, 0.0]).unwrap();
        let mean = Descriptor::from_raw(vec![1.0, 4.0 / 3.0]);
        for (a, b) in d.values.iter().zip(&mean.values) {
            assert!((a - b).abs() < 1e-6);
        }
        // logits (0, 60, 20): token (0,3) leads the runner-up by 40
        let d = seqpool(&t, &[0.0, 20.0]).unwrap();
        assert!((d.values[0] - 0.0).abs() < 1e-4 && (d.values[1] - 1.0).abs() < 1e-4);

        let single = TokenMatrix::new(Matrix::from_rows(&[[5.0f32, 5.0], [3.0, 4.0]]).unwrap(), true).unwrap();
        let d = seqpool(&single, &[1.0, -1.0]).unwrap();
        assert!((d.values[0] - 0.6).abs() < 1e-6 && (d.values[1] - 0.8).abs() < 1e-6);

        assert!(matches!(seqpool(&t, &[1.0]), Err(AggregationError::DimensionMismatch { .. })));
    }

    #[test]
    fn cls_token_cases() {
        let mut rows = vec![[3.0f32, 4.0], [1.0, 1.0], [7.0, -2.0]];
        let t = TokenMatrix::new(Matrix::from_rows(&rows).unwrap(), true).unwrap();
        let d = cls_token(&t).unwrap();
        assert_eq!(d.values, vec![0.6, 0.8]);
        rows[1] = [100.0, -50.0];
        rows[2] = [0.0, 0.0];
        let t2 = TokenMatrix::new(Matrix::from_rows(&rows).unwrap(), true).unwrap();
        assert_eq!(cls_token(&t2).unwrap(), d);

        let min = TokenMatrix::new(Matrix::from_rows(&[[0.0f32, 2.0], [1.0, 1.0]]).unwrap(), true).unwrap();
        assert_eq!(cls_token(&min).unwrap().values, vec![0.0, 1.0]);

        let no_cls = TokenMatrix::new(Matrix::from_rows(&[[1.0f32, 0.0]]).unwrap(), false).unwrap();
        assert_eq!(cls_token(&no_cls), Err(AggregationError::MissingCls));
        assert!(TokenMatrix::new(Matrix::from_rows(&[[1.0f32, 0.0]]).unwrap(), true).is_err());
    }

    #[test]
    fn linear_projection_cases() {
        let d = Descriptor::from_raw(vec![0.2, -0.4, 0.9]);
        let mut eye = Matrix::zeros(3, 3);
        for i in 0..3 {
            eye.row_mut(i)[i] = 1.0;
        }
        let out = linear_project(&d, &eye, &[0.0; 3]).unwrap();
        for (a, b) in out.values.iter().zip(&d.values) {
            assert!((a - b).abs() < 1e-7);
        }

        let head = LinearHead::orthogonal(128, 256, 3).unwrap();
        let mut rng = seeded_rng(4);
        let x = Descriptor::from_raw((0..256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = head.project(&x).unwrap();
        assert_eq!(y.dim(), 128);
        assert!((l2_norm(&y.values) - 1.0).abs() < 1e-5);
        for i in 0..4 {
            for j in 0..4 {
                let p = dot(head.weights.row(i), head.weights.row(j));
                assert!((p - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }

        assert!(matches!(
            linear_project(&d, &Matrix::zeros(2, 4), &[0.0, 0.0]),
            Err(AggregationError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_head_reproduces_pca() {
        use crate::numerics::pca_fit_matrix;
        let mut rng = seeded_rng(12);
        let data = Matrix::new(200, 10, (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pca = pca_fit_matrix(&data, 4, false).unwrap();
        let w = pca.components.clone();
        let bias: Vec<f32> = w
            .iter_rows()
            .map(|r| -(r.iter().zip(&pca.mean).map(|(&a, &m)| a as f64 * m as f64).sum::<f64>()) as f32)
            .collect();
        for i in 0..20 {
            let d = Descriptor::from_raw(data.row(i).to_vec());
            let via_fc = linear_project(&d, &w, &bias).unwrap();
            let via_pca = pca.apply(&d).unwrap();
            for (a, b) in via_fc.values.iter().zip(&via_pca.values) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    fn permuted(f: &FeatureMap, seed: u64) -> FeatureMap {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..f.positions()).collect();
        perm.shuffle(&mut seeded_rng(seed));
        let mut data = Vec::with_capacity(f.data.len());
        for c in 0..f.channels {
            let plane = f.plane(c);
            data.extend(perm.iter().map(|&p| plane[p]));
        }
        FeatureMap::new(f.channels, f.height, f.width, data).unwrap()
    }

    proptest! {
        #[test]
        fn outputs_are_unit_norm(seed in any::<u64>(), c in 1usize..12, h in 2usize..7, w in 2usize..7) {
            let f = random_map(c, h, w, 0.0, 3.0, seed);
            let params = VladParams::seeded(3, c, 5.0, seed).unwrap();
            for d in [spoc(&f), mac(&f), gem(&f, 3.0, 1e-6).unwrap(), rmac(&f, 2).unwrap(), netvlad(&f, &params).unwrap()] {
                prop_assert!(!d.normalized || (l2_norm(&d.values) - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn gem_monotone_in_p(seed in any::<u64>(), p1 in 1.0f64..20.0, dp in 0.0f64..20.0) {
            let f = random_map(4, 3, 4, 0.0, 2.0, seed);
            let a = gem_pooled(&f, p1, 1e-6).unwrap();
            let b = gem_pooled(&f, p1 + dp, 1e-6).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x as f64 <= *y as f64 + 1e-6 * (*y as f64).max(1.0));
            }
        }

        #[test]
        fn spatial_permutation_invariance(seed in any::<u64>()) {
            let f = random_map(5, 4, 3, 0.0, 1.0, seed);
            let g = permuted(&f, seed ^ 1);
            let params = VladParams::seeded(3, 5, 5.0, seed).unwrap();
            let pairs = [
                (spoc(&f), spoc(&g)),
                (mac(&f), mac(&g)),
                (gem(&f, 3.0, 1e-6).unwrap(), gem(&g, 3.0, 1e-6).unwrap()),
                (netvlad(&f, &params).unwrap(), netvlad(&g, &params).unwrap()),
            ];
            for (a, b) in pairs {
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn vlad_assignments_sum_to_one(seed in any::<u64>()) {
            let f = random_map(6, 3, 3, -2.0, 2.0, seed);
            let params = VladParams::seeded(5, 6, 20.0, seed).unwrap();
            let a = vlad_assignments(&f, &params).unwrap();
            for r in a.iter_rows() {
                let s: f64 = r.iter().map(|&x| x as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn positive_scaling_cancels(seed in any::<u64>(), lambda in 0.01f32..100.0) {
            let f = random_map(6, 3, 3, 0.0, 1.0, seed);
            let scaled = FeatureMap::new(6, 3, 3, f.data().iter().map(|x| x * lambda).collect()).unwrap();
            for (a, b) in [(spoc(&f), spoc(&scaled)), (mac(&f), mac(&scaled))] {
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }
}
