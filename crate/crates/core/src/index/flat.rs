//! Exhaustive search over raw vectors.

use super::{ids_section, matrix_section, Footprint, Hit, IndexConfig, IndexError, SectionReader, TopK};
use crate::dataio::Section;
use crate::descriptor::DescriptorSet;
use crate::numerics::{sq_l2, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    pub(crate) cfg: IndexConfig,
    ids: Vec<u64>,
    vectors: Matrix,
}

impl FlatIndex {
    pub fn build(set: &DescriptorSet, cfg: &IndexConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            ids: set.ids().to_vec(),
            vectors: set.matrix().clone(),
        }
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

    pub fn search_one(&self, q: &[f32], k: usize) -> Vec<Hit> {
        let mut top = TopK::new(k);
        for (row, &id) in self.vectors.iter_rows().zip(&self.ids) {
            top.push(id, sq_l2(q, row));
        }
        top.into_sorted()
    }

    pub fn footprint(&self) -> Footprint {
        Footprint::flat(self.len() as u64, self.dim() as u64)
    }

    pub(crate) fn write_sections(&self, out: &mut Vec<Section>) {
        out.push(ids_section(&self.ids));
        out.push(matrix_section("vectors", &self.vectors));
    }

    pub(crate) fn read_sections(cfg: IndexConfig, r: &SectionReader) -> Result<Self, IndexError> {
        Ok(Self {
            cfg,
            ids: r.u64("ids", Some(r.n))?,
            vectors: r.f32("vectors", r.n, r.dim)?,
        })
    }
}
