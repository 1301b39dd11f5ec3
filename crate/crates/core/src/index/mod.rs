//! Nearest-neighbour search behind one contract: exhaustive flat search,
//! IVF, PQ, IVFPQ, the inverted multi-index and HNSW.
//!
//! Every index is immutable once built, searchable from many threads, and
//! reports an analytic memory footprint. Distances are squared L2 and hit
//! lists are ordered by `(distance, id)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Container, DataError, Section};
use crate::descriptor::DescriptorSet;
use crate::numerics::{kmeans, Codebook, Matrix, NumericsError};

mod flat;
mod hnsw;
mod ivf;
mod ivfpq;
mod multi;
mod pq;

pub use flat::FlatIndex;
pub use hnsw::HnswIndex;
pub use ivf::IvfIndex;
pub use ivfpq::IvfPqIndex;
pub use multi::MultiIndex;
pub use pq::{PqCodec, PqIndex};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("invalid index configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot build an index over an empty set")]
    Empty,
    #[error("insufficient training data: need {required} vectors, have {available}")]
    InsufficientData { required: usize, available: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("corrupt index container: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub sq_dist: f32,
}

impl Hit {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.sq_dist.total_cmp(&other.sq_dist).then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query_id: u64,
    /// Ascending by distance, ties by id; at most `k_requested` entries.
    pub hits: Vec<Hit>,
    pub k_requested: usize,
}

impl SearchResult {
    pub fn top_id(&self) -> Option<u64> {
        self.hits.first().map(|h| h.id)
    }
}

/// Timing and memory measurements for one search batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Descriptor extraction time per image, when the caller measured it.
    pub t_e_ms: Option<f64>,
    /// Wall-clock matching time for the whole query batch.
    pub t_m_ms: f64,
    /// `t_m_ms / |queries|`.
    pub t_m_per_query_ms: f64,
    /// Per-query total `t_e_ms + t_m_per_query_ms`, when `t_e_ms` is known.
    pub t_i_ms: Option<f64>,
    pub memory_bytes: u64,
}

impl TimingReport {
    pub fn with_extraction(mut self, t_e_ms: f64) -> Self {
        self.t_e_ms = Some(t_e_ms);
        self.t_i_ms = Some(t_e_ms + self.t_m_per_query_ms);
        self
    }
}

/// Analytic storage accounting in bytes. Not process RSS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Footprint {
    /// Raw f32 vectors kept for exact scoring.
    pub vectors: u64,
    /// Compressed codes.
    pub codes: u64,
    /// The u64 id table.
    pub ids: u64,
    /// Coarse and product-quantizer centroids.
    pub centroids: u64,
    /// Graph adjacency lists and per-node levels.
    pub links: u64,
    /// Inverted-list or cell offset tables.
    pub tables: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.vectors + self.codes + self.ids + self.centroids + self.links + self.tables
    }

    pub fn flat(n: u64, dim: u64) -> Self {
        Self {
            vectors: n * dim * 4,
            ids: n * 8,
            ..Self::default()
        }
    }

    pub fn ivf(n: u64, dim: u64, nlist: u64) -> Self {
        Self {
            centroids: nlist * dim * 4,
            tables: (nlist + 1) * 8,
            ..Self::flat(n, dim)
        }
    }

    pub fn pq(n: u64, dim: u64, m_sub: u64, nbits: u64) -> Self {
        Self {
            codes: n * pq::code_bytes(m_sub as usize, nbits as u32) as u64,
            ids: n * 8,
            centroids: (1u64 << nbits) * dim * 4,
            ..Self::default()
        }
    }

    pub fn ivfpq(n: u64, dim: u64, nlist: u64, m_sub: u64, nbits: u64) -> Self {
        let base = Self::pq(n, dim, m_sub, nbits);
        Self {
            centroids: base.centroids + nlist * dim * 4,
            tables: (nlist + 1) * 8,
            ..base
        }
    }

    pub fn multiindex(n: u64, dim: u64, k_half: u64) -> Self {
        Self {
            centroids: k_half * dim * 4,
            tables: (k_half * k_half + 1) * 8,
            ..Self::flat(n, dim)
        }
    }

    /// Accounting for an index that has not been built. HNSW depends on the
    /// drawn levels, so only its lower bound (layer-0 links) is returned.
    pub fn estimate(cfg: &IndexConfig, n: u64, dim: u64) -> Self {
        match cfg.kind {
            IndexKind::Flat => Self::flat(n, dim),
            IndexKind::Ivf => Self::ivf(n, dim, cfg.nlist as u64),
            IndexKind::Pq => Self::pq(n, dim, cfg.m_sub as u64, cfg.nbits as u64),
            IndexKind::Ivfpq => Self::ivfpq(n, dim, cfg.nlist as u64, cfg.m_sub as u64, cfg.nbits as u64),
            IndexKind::Multiindex => Self::multiindex(n, dim, cfg.k_half as u64),
            IndexKind::Hnsw => Self {
                links: n * (2 * cfg.m_links as u64) * 4 + n * 4,
                ..Self::flat(n, dim)
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    Ivf,
    Pq,
    Ivfpq,
    Multiindex,
    Hnsw,
}

impl IndexKind {
    pub const ALL: [IndexKind; 6] = [
        IndexKind::Flat,
        IndexKind::Ivf,
        IndexKind::Pq,
        IndexKind::Ivfpq,
        IndexKind::Multiindex,
        IndexKind::Hnsw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Flat => "flat",
            IndexKind::Ivf => "ivf",
            IndexKind::Pq => "pq",
            IndexKind::Ivfpq => "ivfpq",
            IndexKind::Multiindex => "multiindex",
            IndexKind::Hnsw => "hnsw",
        }
    }

    fn code(self) -> u64 {
        IndexKind::ALL.iter().position(|&k| k == self).unwrap() as u64
    }

    fn from_code(c: u64) -> Option<Self> {
        IndexKind::ALL.get(c as usize).copied()
    }
}

impl std::str::FromStr for IndexKind {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IndexKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| IndexError::InvalidConfig(format!("unknown index kind {s:?}")))
    }
}

impl std::fmt::Display for IndexKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub kind: IndexKind,
    /// Coarse cells (ivf, ivfpq).
    pub nlist: usize,
    /// Cells scanned per query (ivf, ivfpq).
    pub nprobe: usize,
    /// PQ subspaces; must divide the descriptor dimension.
    pub m_sub: usize,
    /// Bits per PQ code, 4 or 8.
    pub nbits: u32,
    /// Codebook size per half (multiindex).
    pub k_half: usize,
    /// Graph out-degree above layer 0; layer 0 allows twice as many (hnsw).
    pub m_links: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
    /// Lloyd iterations for every quantizer.
    pub kmeans_iters: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            kind: IndexKind::Flat,
            nlist: 64,
            nprobe: 8,
            m_sub: 8,
            nbits: 8,
            k_half: 16,
            m_links: 16,
            ef_construction: 100,
            ef_search: 64,
            seed: 0,
            kmeans_iters: 25,
        }
    }
}

impl IndexConfig {
    pub fn new(kind: IndexKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), IndexError> {
        let bad = |m: String| Err(IndexError::InvalidConfig(m));
        if dim == 0 {
            return bad("descriptor dimension must be positive".into());
        }
        match self.kind {
            IndexKind::Flat => {}
            IndexKind::Ivf | IndexKind::Ivfpq => {
                if self.nlist == 0 {
                    return bad("nlist must be at least 1".into());
                }
                if self.nprobe == 0 || self.nprobe > self.nlist {
                    return bad(format!("nprobe {} must lie in 1..={}", self.nprobe, self.nlist));
                }
            }
            IndexKind::Multiindex => {
                if self.k_half < 2 {
                    return bad("k_half must be at least 2".into());
                }
                if dim < 2 {
                    return bad("multiindex needs dimension of at least 2".into());
                }
            }
            IndexKind::Hnsw => {
                if self.m_links < 2 {
                    return bad("m_links must be at least 2".into());
                }
                if self.ef_construction == 0 || self.ef_search == 0 {
                    return bad("ef values must be positive".into());
                }
            }
            IndexKind::Pq => {}
        }
        if matches!(self.kind, IndexKind::Pq | IndexKind::Ivfpq) {
            if self.nbits != 4 && self.nbits != 8 {
                return bad(format!("nbits must be 4 or 8, got {}", self.nbits));
            }
            if self.m_sub == 0 || !dim.is_multiple_of(self.m_sub) {
                return bad(format!("m_sub {} must divide dimension {dim}", self.m_sub));
            }
        }
        Ok(())
    }
}

/// Query-time overrides of the build configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SearchParams {
    pub nprobe: Option<usize>,
    pub ef_search: Option<usize>,
}

impl SearchParams {
    pub fn nprobe(n: usize) -> Self {
        Self {
            nprobe: Some(n),
            ..Self::default()
        }
    }

    pub fn ef_search(ef: usize) -> Self {
        Self {
            ef_search: Some(ef),
            ..Self::default()
        }
    }
}

/// Bounded max-heap keeping the `k` smallest `(distance, id)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<HeapHit>,
}

#[derive(Clone, Copy)]
struct HeapHit(Hit);

impl PartialEq for HeapHit {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapHit {}
impl PartialOrd for HeapHit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapHit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp_key(&other.0)
    }
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, id: u64, sq_dist: f32) {
        let h = HeapHit(Hit { id, sq_dist });
        if self.heap.len() < self.k {
            self.heap.push(h);
        } else if let Some(top) = self.heap.peek() {
            if h < *top {
                self.heap.pop();
                self.heap.push(h);
            }
        }
    }

    pub(crate) fn into_sorted(self) -> Vec<Hit> {
        self.heap.into_sorted_vec().into_iter().map(|h| h.0).collect()
    }
}

pub(crate) fn train_codebook(data: &Matrix, k: usize, seed: u64, iters: usize) -> Result<Codebook, IndexError> {
    if data.rows() < k {
        return Err(IndexError::InsufficientData {
            required: k,
            available: data.rows(),
        });
    }
    Ok(kmeans(data, k, seed, iters)?)
}

/// Indices of the `n` rows of `centroids` nearest to `v`, ties to the lower
/// index, with their squared distances.
pub(crate) fn nearest_centroids(centroids: &Matrix, v: &[f32], n: usize) -> Vec<(usize, f32)> {
    let mut d: Vec<(usize, f32)> = centroids
        .iter_rows()
        .enumerate()
        .map(|(i, c)| (i, crate::numerics::sq_l2(v, c)))
        .collect();
    let n = n.min(d.len());
    let cmp = |a: &(usize, f32), b: &(usize, f32)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if n < d.len() {
        d.select_nth_unstable_by(n, cmp);
        d.truncate(n);
    }
    d.sort_by(cmp);
    d
}

/// Compressed-sparse-row grouping of rows by bucket: `order` lists the
/// original rows bucket by bucket, `offsets[b]..offsets[b+1]` spans bucket `b`.
pub(crate) fn group_rows(buckets: &[usize], n_buckets: usize) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; n_buckets + 1];
    for &b in buckets {
        offsets[b + 1] += 1;
    }
    for i in 0..n_buckets {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut order = vec![0usize; buckets.len()];
    for (row, &b) in buckets.iter().enumerate() {
        order[cursor[b]] = row;
        cursor[b] += 1;
    }
    (order, offsets)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Index {
    Flat(FlatIndex),
    Ivf(IvfIndex),
    Pq(PqIndex),
    IvfPq(IvfPqIndex),
    Multi(MultiIndex),
    Hnsw(HnswIndex),
}

impl Index {
    /// Builds an index over `set`. Deterministic for a fixed `cfg.seed`.
    pub fn build(set: &DescriptorSet, cfg: &IndexConfig) -> Result<Self, IndexError> {
        if set.is_empty() {
            return Err(IndexError::Empty);
        }
        cfg.validate(set.dim())?;
        Ok(match cfg.kind {
            IndexKind::Flat => Index::Flat(FlatIndex::build(set, cfg)),
            IndexKind::Ivf => Index::Ivf(IvfIndex::build(set, cfg)?),
            IndexKind::Pq => Index::Pq(PqIndex::build(set, cfg)?),
            IndexKind::Ivfpq => Index::IvfPq(IvfPqIndex::build(set, cfg)?),
            IndexKind::Multiindex => Index::Multi(MultiIndex::build(set, cfg)?),
            IndexKind::Hnsw => Index::Hnsw(HnswIndex::build(set, cfg)),
        })
    }

    pub fn kind(&self) -> IndexKind {
        self.config().kind
    }

    pub fn config(&self) -> &IndexConfig {
        match self {
            Index::Flat(i) => &i.cfg,
            Index::Ivf(i) => &i.cfg,
            Index::Pq(i) => &i.cfg,
            Index::IvfPq(i) => &i.cfg,
            Index::Multi(i) => &i.cfg,
            Index::Hnsw(i) => &i.cfg,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Index::Flat(i) => i.dim(),
            Index::Ivf(i) => i.dim(),
            Index::Pq(i) => i.dim(),
            Index::IvfPq(i) => i.dim(),
            Index::Multi(i) => i.dim(),
            Index::Hnsw(i) => i.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Index::Flat(i) => i.len(),
            Index::Ivf(i) => i.len(),
            Index::Pq(i) => i.len(),
            Index::IvfPq(i) => i.len(),
            Index::Multi(i) => i.len(),
            Index::Hnsw(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn footprint(&self) -> Footprint {
        match self {
            Index::Flat(i) => i.footprint(),
            Index::Ivf(i) => i.footprint(),
            Index::Pq(i) => i.footprint(),
            Index::IvfPq(i) => i.footprint(),
            Index::Multi(i) => i.footprint(),
            Index::Hnsw(i) => i.footprint(),
        }
    }

    pub fn memory_bytes(&self) -> u64 {
        self.footprint().total()
    }

    fn check_params(&self, params: &SearchParams) -> Result<(), IndexError> {
        let cfg = self.config();
        if let Some(np) = params.nprobe {
            if matches!(cfg.kind, IndexKind::Ivf | IndexKind::Ivfpq) && (np == 0 || np > cfg.nlist) {
                return Err(IndexError::InvalidConfig(format!("nprobe {np} must lie in 1..={}", cfg.nlist)));
            }
        }
        if params.ef_search == Some(0) {
            return Err(IndexError::InvalidConfig("ef_search must be positive".into()));
        }
        Ok(())
    }

    /// Top-`k` hits for a single query vector. The caller guarantees the
    /// dimension and parameters are valid.
    pub fn search_one(&self, q: &[f32], k: usize, params: &SearchParams) -> Vec<Hit> {
        match self {
            Index::Flat(i) => i.search_one(q, k),
            Index::Ivf(i) => i.search_one(q, k, params.nprobe.unwrap_or(i.cfg.nprobe)),
            Index::Pq(i) => i.search_one(q, k),
            Index::IvfPq(i) => i.search_one(q, k, params.nprobe.unwrap_or(i.cfg.nprobe)),
            Index::Multi(i) => i.search_one(q, k),
            Index::Hnsw(i) => i.search_one(q, k, params.ef_search.unwrap_or(i.cfg.ef_search)),
        }
    }

    /// Searches a query batch in parallel. `t_m_ms` is wall-clock time over
    /// the batch; per-query results do not depend on the thread count.
    pub fn search(
        &self,
        queries: &DescriptorSet,
        k: usize,
        params: &SearchParams,
    ) -> Result<(Vec<SearchResult>, TimingReport), IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if queries.dim() != self.dim() && !queries.is_empty() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim(),
                actual: queries.dim(),
            });
        }
        self.check_params(params)?;
        let start = Instant::now();
        let hits: Vec<Vec<Hit>> = (0..queries.len())
            .into_par_iter()
            .map(|i| self.search_one(queries.row(i), k, params))
            .collect();
        let t_m_ms = start.elapsed().as_secs_f64() * 1e3;
        let results = hits
            .into_iter()
            .zip(queries.ids())
            .map(|(hits, &query_id)| SearchResult {
                query_id,
                hits,
                k_requested: k,
            })
            .collect();
        let nq = queries.len().max(1) as f64;
        Ok((
            results,
            TimingReport {
                t_e_ms: None,
                t_m_ms,
                t_m_per_query_ms: t_m_ms / nq,
                t_i_ms: None,
                memory_bytes: self.memory_bytes(),
            },
        ))
    }

    pub fn to_container(&self) -> Container {
        let cfg = self.config();
        let mut header = vec![
            cfg.kind.code(),
            self.dim() as u64,
            self.len() as u64,
            cfg.nlist as u64,
            cfg.nprobe as u64,
            cfg.m_sub as u64,
            cfg.nbits as u64,
            cfg.k_half as u64,
            cfg.m_links as u64,
            cfg.ef_construction as u64,
            cfg.ef_search as u64,
            cfg.seed,
            cfg.kmeans_iters as u64,
        ];
        let mut sections = Vec::new();
        match self {
            Index::Flat(i) => i.write_sections(&mut sections),
            Index::Ivf(i) => i.write_sections(&mut sections),
            Index::Pq(i) => i.write_sections(&mut sections),
            Index::IvfPq(i) => i.write_sections(&mut sections),
            Index::Multi(i) => i.write_sections(&mut sections),
            Index::Hnsw(i) => i.write_sections(&mut sections, &mut header),
        }
        let mut c = Container::new(0);
        c.push(Section::u64("header", 1, header.len(), header).expect("header shape"));
        for s in sections {
            c.push(s);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, IndexError> {
        let h = c.require("header")?.as_u64()?;
        if h.len() < 13 {
            return Err(IndexError::Corrupt("header too short".into()));
        }
        let kind = IndexKind::from_code(h[0]).ok_or_else(|| IndexError::Corrupt(format!("unknown kind code {}", h[0])))?;
        let cfg = IndexConfig {
            kind,
            nlist: h[3] as usize,
            nprobe: h[4] as usize,
            m_sub: h[5] as usize,
            nbits: h[6] as u32,
            k_half: h[7] as usize,
            m_links: h[8] as usize,
            ef_construction: h[9] as usize,
            ef_search: h[10] as usize,
            seed: h[11],
            kmeans_iters: h[12] as usize,
        };
        let dim = h[1] as usize;
        let n = h[2] as usize;
        cfg.validate(dim)?;
        let r = SectionReader { c, n, dim };
        let index = match kind {
            IndexKind::Flat => Index::Flat(FlatIndex::read_sections(cfg, &r)?),
            IndexKind::Ivf => Index::Ivf(IvfIndex::read_sections(cfg, &r)?),
            IndexKind::Pq => Index::Pq(PqIndex::read_sections(cfg, &r)?),
            IndexKind::Ivfpq => Index::IvfPq(IvfPqIndex::read_sections(cfg, &r)?),
            IndexKind::Multiindex => Index::Multi(MultiIndex::read_sections(cfg, &r)?),
            IndexKind::Hnsw => Index::Hnsw(HnswIndex::read_sections(cfg, &r, &h[13..])?),
        };
        Ok(index)
    }

    pub fn write(&self, path: &Path) -> Result<(), IndexError> {
        Ok(self.to_container().write(path)?)
    }

    pub fn read(path: &Path) -> Result<Self, IndexError> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Shape-checked access to the sections of a serialized index.
pub(crate) struct SectionReader<'a> {
    c: &'a Container,
    pub(crate) n: usize,
    pub(crate) dim: usize,
}

impl SectionReader<'_> {
    pub(crate) fn f32(&self, role: &str, rows: usize, cols: usize) -> Result<Matrix, IndexError> {
        let s = self.c.require(role)?;
        if s.rows() != rows || s.cols() != cols {
            return Err(IndexError::Corrupt(format!(
                "section {role} is {}x{}, expected {rows}x{cols}",
                s.rows(),
                s.cols()
            )));
        }
        Ok(Matrix::new(rows, cols, s.as_f32()?.to_vec())?)
    }

    pub(crate) fn u64(&self, role: &str, len: Option<usize>) -> Result<Vec<u64>, IndexError> {
        let s = self.c.require(role)?;
        let v = s.as_u64()?;
        if len.is_some_and(|l| l != v.len()) {
            return Err(IndexError::Corrupt(format!("section {role} has {} entries, expected {}", v.len(), len.unwrap())));
        }
        Ok(v.to_vec())
    }

    pub(crate) fn u8(&self, role: &str, len: usize) -> Result<Vec<u8>, IndexError> {
        let v = self.c.require(role)?.as_u8()?;
        if v.len() != len {
            return Err(IndexError::Corrupt(format!("section {role} has {} bytes, expected {len}", v.len())));
        }
        Ok(v.to_vec())
    }

    pub(crate) fn offsets(&self, role: &str, buckets: usize) -> Result<Vec<usize>, IndexError> {
        let v = self.u64(role, Some(buckets + 1))?;
        if v[0] != 0 || v[buckets] as usize != self.n || v.windows(2).any(|w| w[0] > w[1]) {
            return Err(IndexError::Corrupt(format!("section {role} is not a valid offset table")));
        }
        Ok(v.into_iter().map(|x| x as usize).collect())
    }
}

pub(crate) fn offsets_section(role: &str, offsets: &[usize]) -> Section {
    Section::u64(role, offsets.len(), 1, offsets.iter().map(|&o| o as u64).collect()).expect("offset shape")
}

pub(crate) fn matrix_section(role: &str, m: &Matrix) -> Section {
    Section::f32(role, m.rows(), m.cols(), m.as_slice().to_vec()).expect("matrix shape")
}

pub(crate) fn ids_section(ids: &[u64]) -> Section {
    Section::u64("ids", ids.len(), 1, ids.to_vec()).expect("id shape")
}

/// Exact nearest database id for every query, ties to the lower id.
pub fn exact_top1(db: &DescriptorSet, queries: &DescriptorSet) -> Vec<Option<u64>> {
    let flat = FlatIndex::build(db, &IndexConfig::new(IndexKind::Flat));
    (0..queries.len())
        .into_par_iter()
        .map(|i| flat.search_one(queries.row(i), 1).first().map(|h| h.id))
        .collect()
}

/// Fraction of queries whose exact nearest database id appears in the
/// index's top-`k`.
pub fn recall_vs_exact(
    index: &Index,
    db: &DescriptorSet,
    queries: &DescriptorSet,
    k: usize,
    params: &SearchParams,
) -> Result<f64, IndexError> {
    let (results, _) = index.search(queries, k, params)?;
    Ok(recall_against(&results, &exact_top1(db, queries)))
}

/// Fraction of results containing the corresponding exact top-1 id.
pub fn recall_against(results: &[SearchResult], exact: &[Option<u64>]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let found = results
        .iter()
        .zip(exact)
        .filter(|(r, e)| e.is_some_and(|id| r.hits.iter().any(|h| h.id == id)))
        .count();
    found as f64 / results.len() as f64
}
