//! Inverted multi-index: two half-space codebooks whose Cartesian product
//! forms `k_half²` cells, visited by the multi-sequence algorithm in
//! ascending order of summed half distances.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use super::{
    group_rows, ids_section, matrix_section, offsets_section, train_codebook, Footprint, Hit, IndexConfig, IndexError,
    SectionReader, TopK,
};
use crate::dataio::Section;
use crate::descriptor::DescriptorSet;
use crate::numerics::{derive_seed, sq_l2, Matrix};

/// Minimum candidate count gathered before exact re-scoring.
pub const MIN_CANDIDATES: usize = 256;
/// Candidates gathered per requested neighbour.
pub const CANDIDATES_PER_K: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndex {
    pub(crate) cfg: IndexConfig,
    split: usize,
    book_a: Matrix,
    book_b: Matrix,
    /// Ids and vectors stored cell by cell; cell `(a, b)` is `a * k_half + b`.
    ids: Vec<u64>,
    vectors: Matrix,
    offsets: Vec<usize>,
}

/// One cell produced by the traversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellVisit {
    pub a: usize,
    pub b: usize,
    /// Sum of the two half distances.
    pub key: f32,
}

struct Frontier {
    key: f32,
    i: usize,
    j: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    // reversed: BinaryHeap pops the smallest key first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .key
            .total_cmp(&self.key)
            .then(other.i.cmp(&self.i))
            .then(other.j.cmp(&self.j))
    }
}

fn sorted_distances(book: &Matrix, v: &[f32]) -> Vec<(usize, f32)> {
    let mut d: Vec<(usize, f32)> = book.iter_rows().enumerate().map(|(i, c)| (i, sq_l2(v, c))).collect();
    d.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    d
}

impl MultiIndex {
    pub fn build(set: &DescriptorSet, cfg: &IndexConfig) -> Result<Self, IndexError> {
        let dim = set.dim();
        let split = dim / 2;
        let k = cfg.k_half;
        let a = train_codebook(&set.matrix().column_slice(0, split), k, derive_seed(cfg.seed, 0), cfg.kmeans_iters)?;
        let b = train_codebook(&set.matrix().column_slice(split, dim), k, derive_seed(cfg.seed, 1), cfg.kmeans_iters)?;
        let cells: Vec<usize> = a.assignments.iter().zip(&b.assignments).map(|(&x, &y)| x * k + y).collect();
        let (order, offsets) = group_rows(&cells, k * k);
        let (ids, vectors) = set.subset(&order).into_parts();
        Ok(Self {
            cfg: cfg.clone(),
            split,
            book_a: a.centroids,
            book_b: b.centroids,
            ids,
            vectors,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn k_half(&self) -> usize {
        self.book_a.rows()
    }

    pub fn cell_size(&self, a: usize, b: usize) -> usize {
        let c = a * self.k_half() + b;
        self.offsets[c + 1] - self.offsets[c]
    }

    /// Multi-sequence traversal: calls `visit` for cells in non-decreasing
    /// summed-distance order until it returns `false` or all cells are seen.
    fn traverse_with(&self, q: &[f32], mut visit: impl FnMut(CellVisit) -> bool) {
        let da = sorted_distances(&self.book_a, &q[..self.split]);
        let db = sorted_distances(&self.book_b, &q[self.split..]);
        let mut heap = BinaryHeap::new();
        let mut seen = HashSet::new();
        heap.push(Frontier {
            key: da[0].1 + db[0].1,
            i: 0,
            j: 0,
        });
        seen.insert((0, 0));
        while let Some(Frontier { key, i, j }) = heap.pop() {
            if !visit(CellVisit {
                a: da[i].0,
                b: db[j].0,
                key,
            }) {
                return;
            }
            for (ni, nj) in [(i + 1, j), (i, j + 1)] {
                if ni < da.len() && nj < db.len() && seen.insert((ni, nj)) {
                    heap.push(Frontier {
                        key: da[ni].1 + db[nj].1,
                        i: ni,
                        j: nj,
                    });
                }
            }
        }
    }

    /// The first `max_cells` cells in traversal order, including empty ones.
    pub fn traverse(&self, q: &[f32], max_cells: usize) -> Vec<CellVisit> {
        let mut out = Vec::new();
        self.traverse_with(q, |c| {
            out.push(c);
            out.len() < max_cells
        });
        out
    }

    pub fn candidate_cap(k: usize) -> usize {
        (CANDIDATES_PER_K * k).max(MIN_CANDIDATES)
    }

    pub fn search_one(&self, q: &[f32], k: usize) -> Vec<Hit> {
        let cap = Self::candidate_cap(k);
        let kh = self.k_half();
        let mut top = TopK::new(k);
        let mut gathered = 0usize;
        self.traverse_with(q, |c| {
            let cell = c.a * kh + c.b;
            for row in self.offsets[cell]..self.offsets[cell + 1] {
                top.push(self.ids[row], sq_l2(q, self.vectors.row(row)));
            }
            gathered += self.offsets[cell + 1] - self.offsets[cell];
            gathered < cap
        });
        top.into_sorted()
    }

    pub fn footprint(&self) -> Footprint {
        Footprint::multiindex(self.len() as u64, self.dim() as u64, self.k_half() as u64)
    }

    pub(crate) fn write_sections(&self, out: &mut Vec<Section>) {
        out.push(ids_section(&self.ids));
        out.push(matrix_section("vectors", &self.vectors));
        out.push(matrix_section("book_a", &self.book_a));
        out.push(matrix_section("book_b", &self.book_b));
        out.push(offsets_section("celloffs", &self.offsets));
    }

    pub(crate) fn read_sections(cfg: IndexConfig, r: &SectionReader) -> Result<Self, IndexError> {
        let split = r.dim / 2;
        let k = cfg.k_half;
        Ok(Self {
            split,
            book_a: r.f32("book_a", k, split)?,
            book_b: r.f32("book_b", k, r.dim - split)?,
            ids: r.u64("ids", Some(r.n))?,
            vectors: r.f32("vectors", r.n, r.dim)?,
            offsets: r.offsets("celloffs", k * k)?,
            cfg,
        })
    }
}
