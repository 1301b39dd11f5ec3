//! Product quantization with asymmetric distance computation (ADC).
//!
//! A vector is split into `m_sub` contiguous subvectors, each replaced by the
//! index of its nearest centroid in a per-subspace codebook of `2^nbits`
//! entries. Queries stay uncompressed: a per-query table of squared distances
//! to every sub-centroid turns scoring into `m_sub` lookups.

use super::{ids_section, train_codebook, Footprint, Hit, IndexConfig, IndexError, SectionReader, TopK};
use crate::dataio::Section;
use crate::descriptor::DescriptorSet;
use crate::numerics::{derive_seed, nearest_row, sq_l2, Matrix};

/// Bytes per encoded vector; 4-bit codes are packed two per byte.
pub fn code_bytes(m_sub: usize, nbits: u32) -> usize {
    (m_sub * nbits as usize).div_ceil(8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodec {
    m_sub: usize,
    nbits: u32,
    dsub: usize,
    /// One `2^nbits × dsub` codebook per subspace.
    books: Vec<Matrix>,
}

impl PqCodec {
    pub fn train(data: &Matrix, m_sub: usize, nbits: u32, seed: u64, iters: usize) -> Result<Self, IndexError> {
        let dim = data.cols();
        let dsub = dim / m_sub;
        let ksub = 1usize << nbits;
        let books = (0..m_sub)
            .map(|m| {
                let slice = data.column_slice(m * dsub, (m + 1) * dsub);
                Ok(train_codebook(&slice, ksub, derive_seed(seed, m as u64), iters)?.centroids)
            })
            .collect::<Result<Vec<_>, IndexError>>()?;
        Ok(Self { m_sub, nbits, dsub, books })
    }

    pub fn m_sub(&self) -> usize {
        self.m_sub
    }

    pub fn ksub(&self) -> usize {
        1 << self.nbits
    }

    pub fn dim(&self) -> usize {
        self.m_sub * self.dsub
    }

    pub fn code_bytes(&self) -> usize {
        code_bytes(self.m_sub, self.nbits)
    }

    pub fn encode_into(&self, v: &[f32], out: &mut [u8]) {
        out.fill(0);
        for m in 0..self.m_sub {
            let (c, _) = nearest_row(&self.books[m], &v[m * self.dsub..(m + 1) * self.dsub]);
            self.put(out, m, c as u8);
        }
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        let mut out = vec![0u8; self.code_bytes()];
        self.encode_into(v, &mut out);
        out
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim());
        for m in 0..self.m_sub {
            out.extend_from_slice(self.books[m].row(self.get(code, m)));
        }
        out
    }

    #[inline]
    fn put(&self, code: &mut [u8], m: usize, c: u8) {
        if self.nbits == 8 {
            code[m] = c;
        } else {
            code[m / 2] |= (c & 0x0f) << ((m % 2) * 4);
        }
    }

    #[inline]
    fn get(&self, code: &[u8], m: usize) -> usize {
        if self.nbits == 8 {
            code[m] as usize
        } else {
            ((code[m / 2] >> ((m % 2) * 4)) & 0x0f) as usize
        }
    }

    /// Squared distances from each query subvector to every sub-centroid,
    /// laid out `m * ksub + c`.
    pub fn adc_table(&self, q: &[f32]) -> Vec<f32> {
        let ksub = self.ksub();
        let mut t = vec![0f32; self.m_sub * ksub];
        for m in 0..self.m_sub {
            let qs = &q[m * self.dsub..(m + 1) * self.dsub];
            for (c, row) in self.books[m].iter_rows().enumerate() {
                t[m * ksub + c] = sq_l2(qs, row);
            }
        }
        t
    }

    #[inline]
    pub fn adc_distance(&self, table: &[f32], code: &[u8]) -> f32 {
        let ksub = self.ksub();
        let mut d = 0f32;
        if self.nbits == 8 {
            for (m, &c) in code.iter().enumerate() {
                d += table[m * ksub + c as usize];
            }
        } else {
            for m in 0..self.m_sub {
                d += table[m * ksub + self.get(code, m)];
            }
        }
        d
    }

    pub(crate) fn section(&self) -> Section {
        let ksub = self.ksub();
        let mut data = Vec::with_capacity(self.m_sub * ksub * self.dsub);
        for b in &self.books {
            data.extend_from_slice(b.as_slice());
        }
        Section::f32("pqbook", self.m_sub * ksub, self.dsub, data).expect("codebook shape")
    }

    pub(crate) fn from_section(r: &SectionReader, m_sub: usize, nbits: u32) -> Result<Self, IndexError> {
        let dsub = r.dim / m_sub;
        let ksub = 1usize << nbits;
        let all = r.f32("pqbook", m_sub * ksub, dsub)?;
        let books = (0..m_sub)
            .map(|m| Matrix::new(ksub, dsub, all.as_slice()[m * ksub * dsub..(m + 1) * ksub * dsub].to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { m_sub, nbits, dsub, books })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex {
    pub(crate) cfg: IndexConfig,
    codec: PqCodec,
    ids: Vec<u64>,
    codes: Vec<u8>,
}

impl PqIndex {
    pub fn build(set: &DescriptorSet, cfg: &IndexConfig) -> Result<Self, IndexError> {
        let codec = PqCodec::train(set.matrix(), cfg.m_sub, cfg.nbits, cfg.seed, cfg.kmeans_iters)?;
        let cb = codec.code_bytes();
        let mut codes = vec![0u8; set.len() * cb];
        for (i, chunk) in codes.chunks_exact_mut(cb).enumerate() {
            codec.encode_into(set.row(i), chunk);
        }
        Ok(Self {
            cfg: cfg.clone(),
            codec,
            ids: set.ids().to_vec(),
            codes,
        })
    }

    pub fn codec(&self) -> &PqCodec {
        &self.codec
    }

    pub fn dim(&self) -> usize {
        self.codec.dim()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Encoded bytes per stored vector.
    pub fn bytes_per_vector(&self) -> usize {
        self.codec.code_bytes()
    }

    pub fn search_one(&self, q: &[f32], k: usize) -> Vec<Hit> {
        let table = self.codec.adc_table(q);
        let mut top = TopK::new(k);
        for (code, &id) in self.codes.chunks_exact(self.codec.code_bytes()).zip(&self.ids) {
            top.push(id, self.codec.adc_distance(&table, code));
        }
        top.into_sorted()
    }

    pub fn footprint(&self) -> Footprint {
        Footprint::pq(self.len() as u64, self.dim() as u64, self.cfg.m_sub as u64, self.cfg.nbits as u64)
    }

    pub(crate) fn write_sections(&self, out: &mut Vec<Section>) {
        out.push(ids_section(&self.ids));
        out.push(self.codec.section());
        let cb = self.codec.code_bytes();
        out.push(Section::u8("codes", self.len(), cb, self.codes.clone()).expect("code shape"));
    }

    pub(crate) fn read_sections(cfg: IndexConfig, r: &SectionReader) -> Result<Self, IndexError> {
        let codec = PqCodec::from_section(r, cfg.m_sub, cfg.nbits)?;
        Ok(Self {
            codes: r.u8("codes", r.n * codec.code_bytes())?,
            ids: r.u64("ids", Some(r.n))?,
            codec,
            cfg,
        })
    }
}
