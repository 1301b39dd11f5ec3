//! IVF cells holding PQ codes of residuals to the cell centroid.

use super::pq::PqCodec;
use super::{
    group_rows, ids_section, matrix_section, nearest_centroids, offsets_section, train_codebook, Footprint, Hit,
    IndexConfig, IndexError, SectionReader, TopK,
};
use crate::dataio::Section;
use crate::descriptor::DescriptorSet;
use crate::numerics::{derive_seed, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    pub(crate) cfg: IndexConfig,
    coarse: Matrix,
    codec: PqCodec,
    /// Ids and codes stored cell by cell.
    ids: Vec<u64>,
    codes: Vec<u8>,
    offsets: Vec<usize>,
}

fn residual(v: &[f32], c: &[f32]) -> Vec<f32> {
    v.iter().zip(c).map(|(a, b)| a - b).collect()
}

impl IvfPqIndex {
    pub fn build(set: &DescriptorSet, cfg: &IndexConfig) -> Result<Self, IndexError> {
        let book = train_codebook(set.matrix(), cfg.nlist, cfg.seed, cfg.kmeans_iters)?;
        let n = set.len();
        let dim = set.dim();
        let mut residuals = Vec::with_capacity(n * dim);
        for (i, &cell) in book.assignments.iter().enumerate() {
            residuals.extend(residual(set.row(i), book.centroids.row(cell)));
        }
        let residuals = Matrix::new(n, dim, residuals)?;
        let codec = PqCodec::train(&residuals, cfg.m_sub, cfg.nbits, derive_seed(cfg.seed, 1), cfg.kmeans_iters)?;
        let (order, offsets) = group_rows(&book.assignments, cfg.nlist);
        let cb = codec.code_bytes();
        let mut codes = vec![0u8; n * cb];
        for (slot, &row) in order.iter().enumerate() {
            codec.encode_into(residuals.row(row), &mut codes[slot * cb..(slot + 1) * cb]);
        }
        Ok(Self {
            cfg: cfg.clone(),
            coarse: book.centroids,
            codec,
            ids: order.iter().map(|&r| set.ids()[r]).collect(),
            codes,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.coarse.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn search_one(&self, q: &[f32], k: usize, nprobe: usize) -> Vec<Hit> {
        let cb = self.codec.code_bytes();
        let mut top = TopK::new(k);
        for (cell, _) in nearest_centroids(&self.coarse, q, nprobe) {
            let table = self.codec.adc_table(&residual(q, self.coarse.row(cell)));
            for slot in self.offsets[cell]..self.offsets[cell + 1] {
                let d = self.codec.adc_distance(&table, &self.codes[slot * cb..(slot + 1) * cb]);
                top.push(self.ids[slot], d);
            }
        }
        top.into_sorted()
    }

    pub fn footprint(&self) -> Footprint {
        Footprint::ivfpq(
            self.len() as u64,
            self.dim() as u64,
            self.cfg.nlist as u64,
            self.cfg.m_sub as u64,
            self.cfg.nbits as u64,
        )
    }

    pub(crate) fn write_sections(&self, out: &mut Vec<Section>) {
        out.push(ids_section(&self.ids));
        out.push(matrix_section("coarse", &self.coarse));
        out.push(self.codec.section());
        out.push(Section::u8("codes", self.len(), self.codec.code_bytes(), self.codes.clone()).expect("code shape"));
        out.push(offsets_section("listoffs", &self.offsets));
    }

    pub(crate) fn read_sections(cfg: IndexConfig, r: &SectionReader) -> Result<Self, IndexError> {
        let codec = PqCodec::from_section(r, cfg.m_sub, cfg.nbits)?;
        Ok(Self {
            coarse: r.f32("coarse", cfg.nlist, r.dim)?,
            codes: r.u8("codes", r.n * codec.code_bytes())?,
            ids: r.u64("ids", Some(r.n))?,
            offsets: r.offsets("listoffs", cfg.nlist)?,
            codec,
            cfg,
        })
    }
}
