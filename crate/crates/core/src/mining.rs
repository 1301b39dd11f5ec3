//! Training-triplet assembly: a positive within a small radius chosen by
//! descriptor distance, and negatives strictly beyond an exclusion radius
//! chosen by full, partial or random mining.
//!
//! Mining reads a descriptor snapshot; refreshing it is the caller's job.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::DescriptorSet;
use crate::geoeval::{GeoPose, PoseTable};
use crate::numerics::{derive_seed, seeded_rng, sq_l2};

pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiningError {
    #[error("query {0} has no database image within the positive radius")]
    NoPositive(u64),
    #[error("query {query_id}: {available} eligible negatives, need {required}")]
    InsufficientPool {
        query_id: u64,
        required: usize,
        available: usize,
    },
    #[error("invalid mining configuration: {0}")]
    InvalidConfig(String),
    #[error("descriptor and pose tables disagree: {0}")]
    Misaligned(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Full,
    Partial,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub strategy: Strategy,
    pub n_neg: usize,
    pub positive_radius_m: f64,
    /// Negatives lie strictly farther than this.
    pub negative_min_m: f64,
    /// Eligible negatives sampled per query by partial mining.
    pub partial_sample: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Full,
            n_neg: 10,
            positive_radius_m: 10.0,
            negative_min_m: 25.0,
            partial_sample: 1000,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        let bad = |m: String| Err(MiningError::InvalidConfig(m));
        if self.n_neg == 0 {
            return bad("n_neg must be positive".into());
        }
        if !(self.positive_radius_m >= 0.0 && self.negative_min_m > self.positive_radius_m) {
            return bad(format!(
                "need 0 <= positive_radius_m ({}) < negative_min_m ({})",
                self.positive_radius_m, self.negative_min_m
            ));
        }
        if self.partial_sample < self.n_neg {
            return bad(format!("partial_sample {} < n_neg {}", self.partial_sample, self.n_neg));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "query")]
    pub query_id: u64,
    #[serde(rename = "positive")]
    pub positive_id: u64,
    /// Hardest first for full and partial mining; draw order for random.
    #[serde(rename = "negatives")]
    pub negative_ids: Vec<u64>,
}

/// A descriptor snapshot with row-aligned poses.
pub struct MiningDb<'a> {
    descriptors: &'a DescriptorSet,
    poses: &'a PoseTable,
}

impl<'a> MiningDb<'a> {
    pub fn new(descriptors: &'a DescriptorSet, poses: &'a PoseTable) -> Result<Self, MiningError> {
        if descriptors.ids() != poses.ids() {
            return Err(MiningError::Misaligned("ids differ or are in a different order".into()));
        }
        Ok(Self { descriptors, poses })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    fn check_dim(&self, q: &[f32]) -> Result<(), MiningError> {
        if q.len() != self.descriptors.dim() {
            return Err(MiningError::DimensionMismatch {
                expected: self.descriptors.dim(),
                actual: q.len(),
            });
        }
        Ok(())
    }

    /// Rows strictly beyond `negative_min_m` from `pose`, ascending.
    pub fn eligible_rows(&self, pose: &GeoPose, cfg: &MiningConfig) -> Vec<usize> {
        let near = self.poses.rows_within(pose, cfg.negative_min_m);
        let mut out = Vec::with_capacity(self.len() - near.len());
        let mut it = near.into_iter().peekable();
        for r in 0..self.len() {
            if it.peek() == Some(&r) {
                it.next();
            } else {
                out.push(r);
            }
        }
        out
    }

    /// The `n` rows among `rows` nearest to `q` in descriptor space,
    /// ascending by `(distance, id)`.
    fn hardest(&self, q: &[f32], rows: &[usize], n: usize) -> Vec<(f32, u64)> {
        let mut scored: Vec<(f32, u64)> = rows
            .iter()
            .map(|&r| (sq_l2(q, self.descriptors.row(r)), self.descriptors.ids()[r]))
            .collect();
        let cmp = |a: &(f32, u64), b: &(f32, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if n < scored.len() {
            scored.select_nth_unstable_by(n, cmp);
            scored.truncate(n);
        }
        scored.sort_by(cmp);
        scored
    }
}

/// The in-radius database image nearest in descriptor space, ties to the
/// lower id.
pub fn select_positive(q: &[f32], pose: &GeoPose, db: &MiningDb, cfg: &MiningConfig, query_id: u64) -> Result<u64, MiningError> {
    db.check_dim(q)?;
    let rows = db.poses.rows_within(pose, cfg.positive_radius_m);
    db.hardest(q, &rows, 1)
        .first()
        .map(|&(_, id)| id)
        .ok_or(MiningError::NoPositive(query_id))
}

fn pool_check(query_id: u64, available: usize, cfg: &MiningConfig) -> Result<(), MiningError> {
    if available < cfg.n_neg {
        return Err(MiningError::InsufficientPool {
            query_id,
            required: cfg.n_neg,
            available,
        });
    }
    Ok(())
}

/// Sampled eligible rows for partial mining; the whole pool when the sample
/// size reaches it. Seeded per query.
pub fn partial_sample_rows(query_id: u64, eligible: &[usize], cfg: &MiningConfig) -> Vec<usize> {
    if cfg.partial_sample >= eligible.len() {
        return eligible.to_vec();
    }
    let mut rng = seeded_rng(derive_seed(cfg.seed, query_id));
    let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), cfg.partial_sample)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn triplet(query_id: u64, positive_id: u64, negs: impl IntoIterator<Item = u64>) -> Triplet {
    Triplet {
        query_id,
        positive_id,
        negative_ids: negs.into_iter().collect(),
    }
}

/// Hardest `n_neg` negatives over the whole eligible database.
pub fn mine_full(query_id: u64, q: &[f32], pose: &GeoPose, db: &MiningDb, cfg: &MiningConfig) -> Result<Triplet, MiningError> {
    cfg.validate()?;
    let positive = select_positive(q, pose, db, cfg, query_id)?;
    let eligible = db.eligible_rows(pose, cfg);
    pool_check(query_id, eligible.len(), cfg)?;
    Ok(triplet(query_id, positive, db.hardest(q, &eligible, cfg.n_neg).into_iter().map(|x| x.1)))
}

/// Hardest `n_neg` negatives within a seeded sample of `partial_sample`
/// eligible images.
pub fn mine_partial(query_id: u64, q: &[f32], pose: &GeoPose, db: &MiningDb, cfg: &MiningConfig) -> Result<Triplet, MiningError> {
    cfg.validate()?;
    let positive = select_positive(q, pose, db, cfg, query_id)?;
    let eligible = db.eligible_rows(pose, cfg);
    let sampled = partial_sample_rows(query_id, &eligible, cfg);
    pool_check(query_id, sampled.len(), cfg)?;
    Ok(triplet(query_id, positive, db.hardest(q, &sampled, cfg.n_neg).into_iter().map(|x| x.1)))
}

/// `n_neg` eligible negatives drawn uniformly without replacement.
pub fn mine_random(query_id: u64, q: &[f32], pose: &GeoPose, db: &MiningDb, cfg: &MiningConfig) -> Result<Triplet, MiningError> {
    cfg.validate()?;
    let positive = select_positive(q, pose, db, cfg, query_id)?;
    let eligible = db.eligible_rows(pose, cfg);
    pool_check(query_id, eligible.len(), cfg)?;
    let negs = random_negatives(query_id, &eligible, db.descriptors.ids(), cfg);
    Ok(triplet(query_id, positive, negs))
}

fn random_negatives(query_id: u64, eligible: &[usize], ids: &[u64], cfg: &MiningConfig) -> Vec<u64> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, query_id));
    sample(&mut rng, eligible.len(), cfg.n_neg)
        .into_iter()
        .map(|i| ids[eligible[i]])
        .collect()
}

pub fn mine(query_id: u64, q: &[f32], pose: &GeoPose, db: &MiningDb, cfg: &MiningConfig) -> Result<Triplet, MiningError> {
    match cfg.strategy {
        Strategy::Full => mine_full(query_id, q, pose, db, cfg),
        Strategy::Partial => mine_partial(query_id, q, pose, db, cfg),
        Strategy::Random => mine_random(query_id, q, pose, db, cfg),
    }
}

/// Triplets for a query batch plus the queries that could not be mined.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MiningReport {
    pub triplets: Vec<Triplet>,
    pub without_positive: Vec<u64>,
    pub insufficient_pool: Vec<u64>,
}

/// Mines every query in parallel; output order follows the query set.
pub fn mine_all(
    queries: &DescriptorSet,
    query_poses: &PoseTable,
    db: &MiningDb,
    cfg: &MiningConfig,
) -> Result<MiningReport, MiningError> {
    cfg.validate()?;
    if queries.ids() != query_poses.ids() {
        return Err(MiningError::Misaligned("query ids differ from query poses".into()));
    }
    if !queries.is_empty() {
        db.check_dim(queries.row(0))?;
    }
    let outcomes: Vec<Result<Triplet, MiningError>> = (0..queries.len())
        .into_par_iter()
        .map(|i| mine(queries.ids()[i], queries.row(i), &query_poses.poses()[i], db, cfg))
        .collect();
    let mut report = MiningReport::default();
    for o in outcomes {
        match o {
            Ok(t) => report.triplets.push(t),
            Err(MiningError::NoPositive(q)) => report.without_positive.push(q),
            Err(MiningError::InsufficientPool { query_id, .. }) => report.insufficient_pool.push(query_id),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// `Σⱼ max(0, ‖q−p‖² − ‖q−nⱼ‖² + margin)`.
pub fn triplet_loss(q: &[f32], p: &[f32], negs: &[&[f32]], margin: f64) -> Result<f64, MiningError> {
    let check = |v: &[f32]| {
        if v.len() == q.len() {
            Ok(())
        } else {
            Err(MiningError::DimensionMismatch {
                expected: q.len(),
                actual: v.len(),
            })
        }
    };
    check(p)?;
    let dp = sq_l2(q, p) as f64;
    let mut loss = 0.0;
    for n in negs {
        check(n)?;
        loss += (dp - sq_l2(q, n) as f64 + margin).max(0.0);
    }
    Ok(loss)
}
