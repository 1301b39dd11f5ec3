//! Query-side image geometry: resize policies, five-crop generation, and
//! fusion of per-crop retrieval results.
//!
//! Resized dimensions are rounded half up with a minimum of 1. Five crops
//! are always ordered top-left, top-right, bottom-left, bottom-right, centre.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::FeatureMap;
use crate::descriptor::Descriptor;
use crate::index::{Hit, SearchResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipeError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("target dimensions must be positive, got {0}x{1}")]
    ZeroTarget(usize, usize),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("fusion needs at least one input")]
    NothingToFuse,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Row-major `H×W×C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self, PipeError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(PipeError::InvalidImage(format!("zero dimension {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(PipeError::InvalidImage(format!(
                "{} values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PipeError::InvalidImage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, PipeError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image, PipeError> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(PipeError::Geometry(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut px = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            px.extend_from_slice(&self.pixels[start..start + w * self.channels]);
        }
        Ok(Image {
            height: h,
            width: w,
            channels: self.channels,
            pixels: px,
        })
    }

    /// Channel-major view for aggregation: channel `c` becomes plane `c`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[ch * h * w + y * w + x] = self.at(y, x, ch);
                }
            }
        }
        FeatureMap::new(c, h, w, data).expect("image dimensions are positive and finite")
    }
}

/// `floor(x + 0.5)`, at least 1.
pub fn round_dim(x: f64) -> usize {
    ((x + 0.5).floor() as usize).max(1)
}

/// Bilinear resampling with half-pixel centres (corners not aligned).
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image, PipeError> {
    if out_h == 0 || out_w == 0 {
        return Err(PipeError::ZeroTarget(out_h, out_w));
    }
    if (out_h, out_w) == img.dims() {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, img.height);
    let xs = taps(out_w, img.width);
    let c = img.channels;
    let mut px = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - wx) + img.at(y0, x1, ch) * wx;
                let bot = img.at(y1, x0, ch) * (1.0 - wx) + img.at(y1, x1, ch) * wx;
                px.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: c,
        pixels: px,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPolicy {
    HardResize,
    SingleQuery,
    CentralCrop,
    FiveCrops,
}

impl CropPolicy {
    pub fn name(self) -> &'static str {
        match self {
            CropPolicy::HardResize => "hard_resize",
            CropPolicy::SingleQuery => "single_query",
            CropPolicy::CentralCrop => "central_crop",
            CropPolicy::FiveCrops => "five_crops",
        }
    }
}

impl std::str::FromStr for CropPolicy {
    type Err = PipeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            CropPolicy::HardResize,
            CropPolicy::SingleQuery,
            CropPolicy::CentralCrop,
            CropPolicy::FiveCrops,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| PipeError::Geometry(format!("unknown crop policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub policy: CropPolicy,
    pub crops: Vec<Image>,
}

fn check_target(h: usize, w: usize) -> Result<(), PipeError> {
    if h == 0 || w == 0 {
        Err(PipeError::ZeroTarget(h, w))
    } else {
        Ok(())
    }
}

/// Anisotropic resize to exactly `db_h × db_w`.
pub fn policy_hard_resize(q: &Image, db_h: usize, db_w: usize) -> Result<CropSet, PipeError> {
    check_target(db_h, db_w)?;
    Ok(CropSet {
        policy: CropPolicy::HardResize,
        crops: vec![resize_bilinear(q, db_h, db_w)?],
    })
}

/// Isotropic resize so the shorter query side equals `min_side`.
fn resize_short_side(q: &Image, min_side: usize) -> Result<Image, PipeError> {
    let (h, w) = q.dims();
    let (oh, ow) = if h <= w {
        (min_side, round_dim(w as f64 * min_side as f64 / h as f64))
    } else {
        (round_dim(h as f64 * min_side as f64 / w as f64), min_side)
    };
    resize_bilinear(q, oh, ow)
}

/// Isotropic resize matching the shorter sides; no padding, so the output
/// may differ from the database dimensions.
pub fn policy_single_query(q: &Image, db_h: usize, db_w: usize) -> Result<CropSet, PipeError> {
    check_target(db_h, db_w)?;
    Ok(CropSet {
        policy: CropPolicy::SingleQuery,
        crops: vec![resize_short_side(q, db_h.min(db_w))?],
    })
}

/// Smallest isotropic resize covering `db_h × db_w`, then a centred crop.
pub fn policy_central_crop(q: &Image, db_h: usize, db_w: usize) -> Result<CropSet, PipeError> {
    check_target(db_h, db_w)?;
    let (h, w) = q.dims();
    let scale = (db_h as f64 / h as f64).max(db_w as f64 / w as f64);
    let rh = round_dim(h as f64 * scale).max(db_h);
    let rw = round_dim(w as f64 * scale).max(db_w);
    let resized = resize_bilinear(q, rh, rw)?;
    let crop = resized.crop((rh - db_h) / 2, (rw - db_w) / 2, db_h, db_w)?;
    Ok(CropSet {
        policy: CropPolicy::CentralCrop,
        crops: vec![crop],
    })
}

/// Top-left corners of the five square crops of side `side` in an
/// `h × w` image: TL, TR, BL, BR, centre.
pub fn five_crop_offsets(h: usize, w: usize, side: usize) -> Result<[(usize, usize); 5], PipeError> {
    if side == 0 || side > h || side > w {
        return Err(PipeError::Geometry(format!("crop side {side} does not fit {h}x{w}")));
    }
    let (dy, dx) = (h - side, w - side);
    Ok([(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)])
}

/// Resize so the shorter side is `db_min_side`, then take five square crops.
pub fn policy_five_crops(q: &Image, db_min_side: usize) -> Result<CropSet, PipeError> {
    check_target(db_min_side, db_min_side)?;
    let resized = resize_short_side(q, db_min_side)?;
    let offsets = five_crop_offsets(resized.height, resized.width, db_min_side)?;
    let crops = offsets
        .iter()
        .map(|&(y, x)| resized.crop(y, x, db_min_side, db_min_side))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CropSet {
        policy: CropPolicy::FiveCrops,
        crops,
    })
}

pub fn apply_policy(policy: CropPolicy, q: &Image, db_h: usize, db_w: usize) -> Result<CropSet, PipeError> {
    match policy {
        CropPolicy::HardResize => policy_hard_resize(q, db_h, db_w),
        CropPolicy::SingleQuery => policy_single_query(q, db_h, db_w),
        CropPolicy::CentralCrop => policy_central_crop(q, db_h, db_w),
        CropPolicy::FiveCrops => policy_five_crops(q, db_h.min(db_w)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Average the crop descriptors, then search once.
    Mean,
    /// Per id, keep the smallest distance reached by any crop.
    NearestCrop,
    /// Reciprocal-rank voting over each crop's top 20.
    MajorityVote,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Mean => "mean",
            Fusion::NearestCrop => "nearest_crop",
            Fusion::MajorityVote => "majority_vote",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = PipeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Fusion::Mean, Fusion::NearestCrop, Fusion::MajorityVote]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| PipeError::Geometry(format!("unknown fusion {s:?}")))
    }
}

/// Arithmetic mean of the crop descriptors, L2-normalized.
pub fn fuse_mean(descs: &[Descriptor]) -> Result<Descriptor, PipeError> {
    let first = descs.first().ok_or(PipeError::NothingToFuse)?;
    let dim = first.dim();
    let mut acc = vec![0f64; dim];
    for d in descs {
        if d.dim() != dim {
            return Err(PipeError::DimensionMismatch {
                expected: dim,
                actual: d.dim(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(&d.values) {
            *a += v as f64;
        }
    }
    let n = descs.len() as f64;
    Ok(Descriptor::from_raw(acc.into_iter().map(|a| (a / n) as f32).collect()))
}

fn rank_hits(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    hits.sort_by(|a, b| a.sq_dist.total_cmp(&b.sq_dist).then(a.id.cmp(&b.id)));
    hits.truncate(k);
    hits
}

/// Pools all crop hits, keeps each id's minimum distance, ranks ascending.
pub fn fuse_nearest_crop(per_crop: &[SearchResult], k: usize) -> Result<SearchResult, PipeError> {
    let first = per_crop.first().ok_or(PipeError::NothingToFuse)?;
    let mut best: HashMap<u64, f32> = HashMap::new();
    for r in per_crop {
        for h in &r.hits {
            best.entry(h.id)
                .and_modify(|d| {
                    if h.sq_dist < *d {
                        *d = h.sq_dist
                    }
                })
                .or_insert(h.sq_dist);
        }
    }
    let hits = best.into_iter().map(|(id, sq_dist)| Hit { id, sq_dist }).collect();
    Ok(SearchResult {
        query_id: first.query_id,
        hits: rank_hits(hits, k),
        k_requested: k,
    })
}

/// Ranks considered per crop by [`fuse_majority_vote`].
pub const VOTE_DEPTH: usize = 20;

/// Each crop votes for its top [`VOTE_DEPTH`] ids with weight `1/(rank+1)`
/// (rank 0-based). Ids are ordered by total vote descending, then by best
/// distance, then by id. Returned distances are each id's best distance.
pub fn fuse_majority_vote(per_crop: &[SearchResult], k: usize) -> Result<SearchResult, PipeError> {
    let first = per_crop.first().ok_or(PipeError::NothingToFuse)?;
    let mut tally: HashMap<u64, (f64, f32)> = HashMap::new();
    for r in per_crop {
        for (rank, h) in r.hits.iter().take(VOTE_DEPTH).enumerate() {
            let e = tally.entry(h.id).or_insert((0.0, f32::INFINITY));
            e.0 += 1.0 / (rank + 1) as f64;
            if h.sq_dist < e.1 {
                e.1 = h.sq_dist;
            }
        }
    }
    let mut scored: Vec<(u64, f64, f32)> = tally.into_iter().map(|(id, (v, d))| (id, v, d)).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(SearchResult {
        query_id: first.query_id,
        hits: scored.into_iter().map(|(id, _, sq_dist)| Hit { id, sq_dist }).collect(),
        k_requested: k,
    })
}

/// Vote totals per id as used by [`fuse_majority_vote`].
pub fn vote_totals(per_crop: &[SearchResult]) -> HashMap<u64, f64> {
    let mut tally = HashMap::new();
    for r in per_crop {
        for (rank, h) in r.hits.iter().take(VOTE_DEPTH).enumerate() {
            *tally.entry(h.id).or_insert(0.0) += 1.0 / (rank + 1) as f64;
        }
    }
    tally
}

/// Relative convolutional cost (and pixel storage) after scaling both image
/// sides by `r`.
pub fn flops_scale(r: f64) -> f64 {
    r * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn result(q: u64, hits: &[(u64, f32)]) -> SearchResult {
        SearchResult {
            query_id: q,
            hits: hits.iter().map(|&(id, sq_dist)| Hit { id, sq_dist }).collect(),
            k_requested: hits.len().max(1),
        }
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = random_image(7, 5, 3, 1);
        assert_eq!(resize_bilinear(&img, 7, 5).unwrap(), img);
        let c = Image::constant(4, 6, 2, 0.25).unwrap();
        let r = resize_bilinear(&c, 9, 3).unwrap();
        assert!(r.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn resize_ramp_matches_hand_computation() {
        // 2x2 [[0, 1], [0.5, 1]] -> 4x4. Source coordinates for outputs
        // 0..4 are clamp((o + 0.5) / 2 - 0.5) = 0, 0.25, 0.75, 1.
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.5, 1.0]).unwrap();
        let r = resize_bilinear(&img, 4, 4).unwrap();
        let s = [0.0f32, 0.25, 0.75, 1.0];
        for (y, &sy) in s.iter().enumerate() {
            for (x, &sx) in s.iter().enumerate() {
                let top = sx;
                let bot = 0.5 + 0.5 * sx;
                let want = top * (1.0 - sy) + bot * sy;
                assert!((r.at(y, x, 0) - want).abs() < 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn hard_resize_shapes() {
        let q = random_image(64, 48, 1, 2);
        let out = policy_hard_resize(&q, 48, 64).unwrap();
        assert_eq!(out.crops[0].dims(), (48, 64));
        let same = policy_hard_resize(&q, 64, 48).unwrap();
        assert_eq!(same.crops[0], q);
    }

    #[test]
    fn single_query_rounding() {
        let q = Image::constant(960, 540, 1, 0.5).unwrap();
        let out = policy_single_query(&q, 480, 640).unwrap();
        assert_eq!(out.crops[0].dims(), (853, 480));
        let sq = Image::constant(30, 30, 1, 0.5).unwrap();
        assert_eq!(policy_single_query(&sq, 20, 20).unwrap().crops[0].dims(), (20, 20));
    }

    #[test]
    fn central_crop_of_tall_query_is_centred() {
        // a tall query whose rows encode their own index
        let h = 40;
        let w = 10;
        let px: Vec<f32> = (0..h).flat_map(|y| vec![y as f32 / (h - 1) as f32; w]).collect();
        let q = Image::new(h, w, 1, px).unwrap();
        let out = policy_central_crop(&q, 10, 10).unwrap();
        let c = &out.crops[0];
        assert_eq!(c.dims(), (10, 10));
        // rows 15..25 survive, so the crop is symmetric about the centre
        let centre = (c.at(4, 0, 0) + c.at(5, 0, 0)) / 2.0;
        assert!((centre - 0.5).abs() < 1e-6);
        assert!((c.at(0, 0, 0) - 15.0 / 39.0).abs() < 1e-6);
    }

    #[test]
    fn five_crop_offsets_and_order() {
        assert_eq!(five_crop_offsets(480, 640, 480).unwrap(), [(0, 0), (0, 160), (0, 0), (0, 160), (0, 80)]);
        let sq = random_image(12, 12, 2, 3);
        let five = policy_five_crops(&sq, 12).unwrap();
        assert_eq!(five.crops.len(), 5);
        assert!(five.crops.iter().all(|c| *c == sq));
        assert!(five_crop_offsets(10, 20, 11).is_err());
    }

    #[test]
    fn equal_dims_give_identical_single_crops() {
        let q = random_image(24, 32, 3, 4);
        let a = policy_hard_resize(&q, 24, 32).unwrap();
        let b = policy_single_query(&q, 24, 32).unwrap();
        let c = policy_central_crop(&q, 24, 32).unwrap();
        assert_eq!(a.crops, b.crops);
        assert_eq!(b.crops, c.crops);
    }

    #[test]
    fn fuse_mean_cases() {
        let d = Descriptor::from_raw(vec![0.6, 0.8]);
        assert_eq!(fuse_mean(&[d.clone(), d.clone()]).unwrap(), d);
        let x = Descriptor::from_raw(vec![1.0, 0.0]);
        let y = Descriptor::from_raw(vec![0.0, 1.0]);
        let m = fuse_mean(&[x, y]).unwrap();
        assert!((m.values[0] - m.values[1]).abs() < 1e-7);
        assert!(fuse_mean(&[]).is_err());
    }

    #[test]
    fn nearest_crop_keeps_minimum() {
        let a = result(1, &[(5, 0.3), (6, 0.5)]);
        let b = result(1, &[(6, 0.1), (7, 0.9)]);
        let f = fuse_nearest_crop(&[a.clone(), b], 3).unwrap();
        let got: Vec<(u64, f32)> = f.hits.iter().map(|h| (h.id, h.sq_dist)).collect();
        assert_eq!(got, vec![(6, 0.1), (5, 0.3), (7, 0.9)]);
        let empty = result(1, &[]);
        let solo = fuse_nearest_crop(&[a.clone(), empty.clone(), empty], 2).unwrap();
        assert_eq!(solo.hits, a.hits);
    }

    #[test]
    fn majority_vote_hand_count() {
        // id 1: 1 + 1/2 = 1.5; id 2: 1/2 + 1 = 1.5; id 3: 1 + 1/3
        let r = vec![
            result(0, &[(1, 0.2), (2, 0.4)]),
            result(0, &[(2, 0.1), (1, 0.5)]),
            result(0, &[(3, 0.3), (9, 0.6), (1, 0.7)]),
        ];
        let t = vote_totals(&r);
        assert!((t[&1] - (1.0 + 0.5 + 1.0 / 3.0)).abs() < 1e-12);
        assert!((t[&2] - 1.5).abs() < 1e-12);
        assert!((t[&3] - 1.0).abs() < 1e-12);
        let f = fuse_majority_vote(&r, 3).unwrap();
        assert_eq!(f.hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn majority_vote_unanimous_and_disjoint() {
        let same: Vec<SearchResult> = (0..5).map(|i| result(0, &[(4, 0.1 * i as f32), (i as u64 + 10, 1.0)])).collect();
        assert_eq!(fuse_majority_vote(&same, 1).unwrap().hits[0].id, 4);
        // disjoint top-1 slots: equal votes, smallest distance wins
        let disjoint: Vec<SearchResult> = (0..5).map(|i| result(0, &[(i as u64, 1.0 - 0.1 * i as f32)])).collect();
        assert_eq!(fuse_majority_vote(&disjoint, 1).unwrap().hits[0].id, 4);
    }

    #[test]
    fn flops_scaling() {
        assert!((flops_scale(0.4) - 0.16).abs() < 1e-15);
        assert!((flops_scale(0.8) - 0.64).abs() < 1e-15);
        assert_eq!(flops_scale(1.0), 1.0);
    }

    proptest! {
        #[test]
        fn policies_respect_geometry(h in 1usize..80, w in 1usize..80, dh in 1usize..60, dw in 1usize..60) {
            let q = Image::constant(h, w, 1, 0.5).unwrap();
            prop_assert_eq!(policy_hard_resize(&q, dh, dw).unwrap().crops[0].dims(), (dh, dw));
            let s = policy_single_query(&q, dh, dw).unwrap();
            let (sh, sw) = s.crops[0].dims();
            prop_assert_eq!(sh.min(sw), dh.min(dw));
            prop_assert_eq!(policy_central_crop(&q, dh, dw).unwrap().crops[0].dims(), (dh, dw));
            let f = policy_five_crops(&q, dh.min(dw)).unwrap();
            prop_assert_eq!(f.crops.len(), 5);
            for c in &f.crops {
                prop_assert_eq!(c.dims(), (dh.min(dw), dh.min(dw)));
            }
        }

        #[test]
        fn nearest_crop_lower_bounds(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let crops: Vec<SearchResult> = (0..5)
                .map(|_| {
                    let mut hits: Vec<(u64, f32)> = (0..8).map(|_| (rng.random_range(0..12), rng.random::<f32>())).collect();
                    hits.sort_by(|a, b| a.1.total_cmp(&b.1));
                    hits.dedup_by_key(|h| h.0);
                    result(0, &hits)
                })
                .collect();
            let fused = fuse_nearest_crop(&crops, 100).unwrap();
            for h in &fused.hits {
                for c in &crops {
                    if let Some(o) = c.hits.iter().find(|x| x.id == h.id) {
                        prop_assert!(h.sq_dist <= o.sq_dist);
                    }
                }
            }
        }

        #[test]
        fn flops_multiplicative(a in 0.0f64..2.0, b in 0.0f64..2.0) {
            prop_assert!((flops_scale(a * b) - flops_scale(a) * flops_scale(b)).abs() < 1e-12);
        }
    }
}
