//! Geodesic ground truth and recall metrics.
//!
//! A database image is a positive for a query when it lies within
//! `threshold_m` meters (haversine on a 6,371 km sphere) and, if a heading
//! limit is configured and both images carry a heading, when their headings
//! differ by at most that limit.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::DescriptorSet;
use crate::index::{SearchResult, TimingReport};
use crate::numerics::Matrix;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const DEFAULT_THRESHOLD_M: f64 = 25.0;
pub const DEFAULT_N_LIST: [usize; 4] = [1, 5, 10, 20];
const METERS_PER_DEG_LAT: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    OutOfRange { lat: f64, lon: f64 },
    #[error("heading {0} outside [0, 360)")]
    BadHeading(f64),
    #[error("missing heading")]
    MissingHeading,
    #[error("unknown id {0}")]
    UnknownId(u64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("id {0} appears in more than one database")]
    IdCollision(u64),
    #[error("{0}")]
    Shape(String),
    #[error("distractor pose within {threshold_m} m of query {query}")]
    DistractorTooClose { query: u64, threshold_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPose {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub heading_deg: Option<f64>,
}

impl GeoPose {
    pub fn new(lat_deg: f64, lon_deg: f64, heading_deg: Option<f64>) -> Result<Self, GeoError> {
        let p = Self {
            lat_deg,
            lon_deg,
            heading_deg,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(-90.0..=90.0).contains(&self.lat_deg) || !(-180.0..=180.0).contains(&self.lon_deg) {
            return Err(GeoError::OutOfRange {
                lat: self.lat_deg,
                lon: self.lon_deg,
            });
        }
        if let Some(h) = self.heading_deg {
            if !(0.0..360.0).contains(&h) {
                return Err(GeoError::BadHeading(h));
            }
        }
        Ok(())
    }

    /// Pose displaced by `north_m`/`east_m` meters using a local
    /// equirectangular approximation (accurate at city scale).
    pub fn offset_m(&self, north_m: f64, east_m: f64) -> GeoPose {
        let lat = self.lat_deg + north_m / METERS_PER_DEG_LAT;
        let lon = self.lon_deg + east_m / (METERS_PER_DEG_LAT * self.lat_deg.to_radians().cos());
        GeoPose {
            lat_deg: lat.clamp(-90.0, 90.0),
            lon_deg: wrap_lon(lon),
            heading_deg: self.heading_deg,
        }
    }
}

fn wrap_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        lon
    } else {
        (lon + 180.0).rem_euclid(360.0) - 180.0
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: &GeoPose, b: &GeoPose) -> Result<f64, GeoError> {
    a.validate()?;
    b.validate()?;
    Ok(haversine_unchecked(a, b))
}

#[inline]
fn haversine_unchecked(a: &GeoPose, b: &GeoPose) -> f64 {
    let (la1, la2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Smallest angle between two headings, in `[0, 180]`.
pub fn heading_delta_deg(a: &GeoPose, b: &GeoPose) -> Result<f64, GeoError> {
    match (a.heading_deg, b.heading_deg) {
        (Some(x), Some(y)) => {
            let d = (x - y).abs().rem_euclid(360.0);
            Ok(d.min(360.0 - d))
        }
        _ => Err(GeoError::MissingHeading),
    }
}

/// Evaluation settings: distance threshold, recall cut-offs and optional
/// heading limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_m: f64,
    pub n_list: Vec<usize>,
    #[serde(default)]
    pub heading_max_deg: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_m: DEFAULT_THRESHOLD_M,
            n_list: DEFAULT_N_LIST.to_vec(),
            heading_max_deg: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.threshold_m > 0.0) {
            return Err(GeoError::InvalidConfig(format!(
                "threshold must be positive, got {}",
                self.threshold_m
            )));
        }
        if self.n_list.is_empty() || self.n_list[0] == 0 || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GeoError::InvalidConfig(format!(
                "N list must be strictly ascending and >= 1, got {:?}",
                self.n_list
            )));
        }
        if let Some(h) = self.heading_max_deg {
            if !(h >= 0.0) {
                return Err(GeoError::InvalidConfig(format!("heading limit must be >= 0, got {h}")));
            }
        }
        Ok(())
    }
}

/// Id-addressable pose table with a latitude-sorted view for radius queries.
#[derive(Debug, Clone)]
pub struct PoseTable {
    ids: Vec<u64>,
    poses: Vec<GeoPose>,
    by_id: HashMap<u64, usize>,
    // (lat, row) sorted by lat
    lat_order: Vec<(f64, usize)>,
}

impl PoseTable {
    pub fn new(ids: Vec<u64>, poses: Vec<GeoPose>) -> Result<Self, GeoError> {
        if ids.len() != poses.len() {
            return Err(GeoError::Shape(format!("{} ids for {} poses", ids.len(), poses.len())));
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (row, (&id, p)) in ids.iter().zip(&poses).enumerate() {
            p.validate()?;
            if by_id.insert(id, row).is_some() {
                return Err(GeoError::IdCollision(id));
            }
        }
        let mut lat_order: Vec<(f64, usize)> = poses.iter().enumerate().map(|(i, p)| (p.lat_deg, i)).collect();
        lat_order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(Self {
            ids,
            poses,
            by_id,
            lat_order,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn poses(&self) -> &[GeoPose] {
        &self.poses
    }

    pub fn get(&self, id: u64) -> Result<&GeoPose, GeoError> {
        self.by_id.get(&id).map(|&r| &self.poses[r]).ok_or(GeoError::UnknownId(id))
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Rows within `radius_m` of `center` (inclusive), ascending row order.
    pub fn rows_within(&self, center: &GeoPose, radius_m: f64) -> Vec<usize> {
        let dlat = radius_m / METERS_PER_DEG_LAT * 1.000_001 + 1e-12;
        let lo = self.lat_order.partition_point(|&(lat, _)| lat < center.lat_deg - dlat);
        let hi = self.lat_order.partition_point(|&(lat, _)| lat <= center.lat_deg + dlat);
        let mut rows: Vec<usize> = self.lat_order[lo..hi]
            .iter()
            .filter(|&&(_, r)| haversine_unchecked(center, &self.poses[r]) <= radius_m)
            .map(|&(_, r)| r)
            .collect();
        rows.sort_unstable();
        rows
    }

    /// Smallest distance from `center` to any pose in the table.
    pub fn nearest_distance_m(&self, center: &GeoPose) -> Option<f64> {
        self.poses
            .iter()
            .map(|p| haversine_unchecked(center, p))
            .min_by(|a, b| a.total_cmp(b))
    }
}

/// Outcome of a positives lookup.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Positives {
    pub ids: HashSet<u64>,
    /// Pairs admitted without a heading check because a heading was missing.
    pub heading_unchecked: usize,
}

/// Database ids that count as correct for a query under `cfg`.
pub fn positives_of(q: &GeoPose, db: &PoseTable, cfg: &EvalConfig) -> Positives {
    let mut out = Positives::default();
    for r in db.rows_within(q, cfg.threshold_m) {
        let p = &db.poses[r];
        if let Some(limit) = cfg.heading_max_deg {
            match heading_delta_deg(q, p) {
                Ok(delta) if delta > limit => continue,
                Ok(_) => {}
                Err(_) => out.heading_unchecked += 1,
            }
        }
        out.ids.insert(db.ids[r]);
    }
    out
}

/// Recall@N report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub n_queries: usize,
    /// `N -> fraction of queries with a positive in the top N`.
    pub recall_at: BTreeMap<usize, f64>,
    /// Fraction of queries with at least one positive in the database.
    pub upper_bound: f64,
    /// 1-based rank of the first positive hit per query, in result order.
    pub first_hit_rank: Vec<Option<usize>>,
    /// Number of queries without any positive; they stay in the denominator.
    pub queries_without_positive: usize,
    /// Query/database pairs admitted without a heading check.
    pub heading_unchecked_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

struct QueryOutcome {
    first_hit: Option<usize>,
    has_positive: bool,
    heading_unchecked: usize,
}

fn score_queries(
    results: &[SearchResult],
    queries: &PoseTable,
    db: &PoseTable,
    cfg: &EvalConfig,
) -> Result<Vec<QueryOutcome>, GeoError> {
    results
        .iter()
        .map(|res| {
            let qp = queries.get(res.query_id)?;
            let pos = positives_of(qp, db, cfg);
            let mut first_hit = None;
            for (rank, hit) in res.hits.iter().enumerate() {
                if !db.contains(hit.id) {
                    return Err(GeoError::UnknownId(hit.id));
                }
                if first_hit.is_none() && pos.ids.contains(&hit.id) {
                    first_hit = Some(rank + 1);
                }
            }
            Ok(QueryOutcome {
                first_hit,
                has_positive: !pos.ids.is_empty(),
                heading_unchecked: pos.heading_unchecked,
            })
        })
        .collect()
}

/// Recall@N for every N in `cfg.n_list`. Queries without positives count in
/// the denominator, so recall at N = |database| equals the upper bound.
pub fn recall_at_n(
    results: &[SearchResult],
    queries: &PoseTable,
    db: &PoseTable,
    cfg: &EvalConfig,
) -> Result<EvalReport, GeoError> {
    cfg.validate()?;
    let outcomes = score_queries(results, queries, db, cfg)?;
    let n = outcomes.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let recall_at = cfg
        .n_list
        .iter()
        .map(|&cut| (cut, frac(outcomes.iter().filter(|o| o.first_hit.is_some_and(|r| r <= cut)).count())))
        .collect();
    let with_pos = outcomes.iter().filter(|o| o.has_positive).count();
    Ok(EvalReport {
        config: cfg.clone(),
        n_queries: n,
        recall_at,
        upper_bound: frac(with_pos),
        first_hit_rank: outcomes.iter().map(|o| o.first_hit).collect(),
        queries_without_positive: n - with_pos,
        heading_unchecked_pairs: outcomes.iter().map(|o| o.heading_unchecked).sum(),
        timing: None,
    })
}

/// A curve `x -> (recall, upper bound)`, exported as CSV with columns
/// `x,recall,upper_bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub x: Vec<f64>,
    pub recall: Vec<f64>,
    pub upper_bound: Vec<f64>,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,recall,upper_bound\n");
        for i in 0..self.x.len() {
            s.push_str(&format!("{},{},{}\n", self.x[i], self.recall[i], self.upper_bound[i]));
        }
        s
    }
}

/// Recall@1 and upper bound at each distance threshold.
pub fn threshold_sweep(
    results: &[SearchResult],
    queries: &PoseTable,
    db: &PoseTable,
    thresholds: &[f64],
    heading_max_deg: Option<f64>,
) -> Result<Curve, GeoError> {
    let mut curve = Curve {
        x: Vec::new(),
        recall: Vec::new(),
        upper_bound: Vec::new(),
    };
    for &t in thresholds {
        let cfg = EvalConfig {
            threshold_m: t,
            n_list: vec![1],
            heading_max_deg,
        };
        let r = recall_at_n(results, queries, db, &cfg)?;
        curve.x.push(t);
        curve.recall.push(r.recall_at[&1]);
        curve.upper_bound.push(r.upper_bound);
    }
    Ok(curve)
}

/// Recall@N for N = 1..=n_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub curve: Curve,
    pub first_hit_rank: Vec<Option<usize>>,
}

impl RecallCurve {
    /// Among queries not solved within the top `n1`, the fraction solved
    /// within the top `n2` (`n2 > n1`). `None` when every query was solved.
    pub fn conditional(&self, n1: usize, n2: usize) -> Option<f64> {
        let missed: Vec<_> = self
            .first_hit_rank
            .iter()
            .filter(|r| !r.is_some_and(|r| r <= n1))
            .collect();
        if missed.is_empty() {
            return None;
        }
        let recovered = missed.iter().filter(|r| r.is_some_and(|r| r <= n2)).count();
        Some(recovered as f64 / missed.len() as f64)
    }
}

pub fn recall_curve(
    results: &[SearchResult],
    queries: &PoseTable,
    db: &PoseTable,
    cfg: &EvalConfig,
    n_max: usize,
) -> Result<RecallCurve, GeoError> {
    if n_max == 0 {
        return Err(GeoError::InvalidConfig("n_max must be >= 1".into()));
    }
    let full = EvalConfig {
        n_list: (1..=n_max).collect(),
        ..cfg.clone()
    };
    let r = recall_at_n(results, queries, db, &full)?;
    Ok(RecallCurve {
        curve: Curve {
            x: (1..=n_max).map(|n| n as f64).collect(),
            recall: r.recall_at.values().copied().collect(),
            upper_bound: vec![r.upper_bound; n_max],
        },
        first_hit_rank: r.first_hit_rank,
    })
}

/// A merged database: descriptors, poses, and the source index of each id.
#[derive(Debug, Clone)]
pub struct MergedDatabase {
    pub descriptors: DescriptorSet,
    pub poses: Vec<GeoPose>,
    pub provenance: HashMap<u64, usize>,
}

/// Id-disjoint union of several databases. Row order is source order.
pub fn merge_databases(sets: &[(DescriptorSet, Vec<GeoPose>)]) -> Result<MergedDatabase, GeoError> {
    let dim = sets.first().map_or(0, |(d, _)| d.dim());
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut poses = Vec::new();
    let mut provenance = HashMap::new();
    for (src, (set, p)) in sets.iter().enumerate() {
        if set.dim() != dim {
            return Err(GeoError::Shape(format!("database {src} has dim {} != {dim}", set.dim())));
        }
        if set.len() != p.len() {
            return Err(GeoError::Shape(format!("database {src}: {} descriptors, {} poses", set.len(), p.len())));
        }
        for (i, &id) in set.ids().iter().enumerate() {
            if provenance.insert(id, src).is_some() {
                return Err(GeoError::IdCollision(id));
            }
            ids.push(id);
            data.extend_from_slice(set.row(i));
        }
        poses.extend_from_slice(p);
    }
    let n = ids.len();
    let matrix = Matrix::new(n, dim, data).map_err(|e| GeoError::Shape(e.to_string()))?;
    Ok(MergedDatabase {
        descriptors: DescriptorSet::new(ids, matrix).map_err(|e| GeoError::Shape(e.to_string()))?,
        poses,
        provenance,
    })
}

/// Where injected distractors are placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarPosePolicy {
    /// Every distractor at the same pose.
    Fixed(GeoPose),
    /// Distractors spread on a ring of `radius_m` around `center`.
    Ring { center: GeoPose, radius_m: f64 },
}

/// Appends `distractors` to the database, with poses farther than
/// `threshold_m` from every query.
pub fn inject_distractors(
    db: &DescriptorSet,
    db_poses: &[GeoPose],
    distractors: &DescriptorSet,
    policy: &FarPosePolicy,
    queries: &PoseTable,
    threshold_m: f64,
) -> Result<(DescriptorSet, Vec<GeoPose>), GeoError> {
    let n = distractors.len();
    let poses: Vec<GeoPose> = match policy {
        FarPosePolicy::Fixed(p) => vec![*p; n],
        FarPosePolicy::Ring { center, radius_m } => (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n.max(1) as f64;
                center.offset_m(radius_m * a.cos(), radius_m * a.sin())
            })
            .collect(),
    };
    // Checking each distinct pose against every query is exact but slow for
    // large rings; the query table's radius search keeps it cheap.
    let mut checked: Vec<GeoPose> = Vec::new();
    for p in &poses {
        p.validate()?;
        if checked.last() == Some(p) {
            continue;
        }
        if let Some(&r) = queries.rows_within(p, threshold_m).first() {
            return Err(GeoError::DistractorTooClose {
                query: queries.ids()[r],
                threshold_m,
            });
        }
        checked.push(*p);
    }
    let merged = merge_databases(&[(db.clone(), db_poses.to_vec()), (distractors.clone(), poses)])?;
    Ok((merged.descriptors, merged.poses))
}
