//! Inverted file: a k-means coarse partition; queries scan the `nprobe`
//! nearest cells exhaustively.

use super::{
    group_rows, ids_section, matrix_section, nearest_centroids, offsets_section, train_codebook, Footprint, Hit,
    IndexConfig, IndexError, SectionReader, TopK,
};
use crate::dataio::Section;
use crate::descriptor::DescriptorSet;
use crate::numerics::{sq_l2, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub(crate) cfg: IndexConfig,
    coarse: Matrix,
    /// Ids and vectors stored cell by cell.
    ids: Vec<u64>,
    vectors: Matrix,
    offsets: Vec<usize>,
}

impl IvfIndex {
    pub fn build(set: &DescriptorSet, cfg: &IndexConfig) -> Result<Self, IndexError> {
        let book = train_codebook(set.matrix(), cfg.nlist, cfg.seed, cfg.kmeans_iters)?;
        let (order, offsets) = group_rows(&book.assignments, cfg.nlist);
        let reordered = set.subset(&order);
        let (ids, vectors) = reordered.into_parts();
        Ok(Self {
            cfg: cfg.clone(),
            coarse: book.centroids,
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

    pub fn nlist(&self) -> usize {
        self.coarse.rows()
    }

    /// Ids stored in cell `c`.
    pub fn list(&self, c: usize) -> &[u64] {
        &self.ids[self.offsets[c]..self.offsets[c + 1]]
    }

    pub fn search_one(&self, q: &[f32], k: usize, nprobe: usize) -> Vec<Hit> {
        let mut top = TopK::new(k);
        for (cell, _) in nearest_centroids(&self.coarse, q, nprobe) {
            for row in self.offsets[cell]..self.offsets[cell + 1] {
                top.push(self.ids[row], sq_l2(q, self.vectors.row(row)));
            }
        }
        top.into_sorted()
    }

    pub fn footprint(&self) -> Footprint {
        Footprint::ivf(self.len() as u64, self.dim() as u64, self.nlist() as u64)
    }

    pub(crate) fn write_sections(&self, out: &mut Vec<Section>) {
        out.push(ids_section(&self.ids));
        out.push(matrix_section("vectors", &self.vectors));
        out.push(matrix_section("coarse", &self.coarse));
        out.push(offsets_section("listoffs", &self.offsets));
    }

    pub(crate) fn read_sections(cfg: IndexConfig, r: &SectionReader) -> Result<Self, IndexError> {
        Ok(Self {
            coarse: r.f32("coarse", cfg.nlist, r.dim)?,
            offsets: r.offsets("listoffs", cfg.nlist)?,
            ids: r.u64("ids", Some(r.n))?,
            vectors: r.f32("vectors", r.n, r.dim)?,
            cfg,
        })
    }
}
