//! VGBD: a little-endian, sectioned container for bulk numeric arrays.
//!
//! ```text
//! header   magic "VGBD" | version u16 (=1) | flags u16 | section count u32
//! section  role [u8; 8] (ASCII, space padded) | rows u64 | cols u32 | dtype u8
//!          payload: rows*cols elements, row-major, little-endian
//! dtype    0 = f32, 1 = u64, 2 = u8
//! ```

use std::io::Write;
use std::path::Path;

use super::DataError;

pub const MAGIC: &[u8; 4] = b"VGBD";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 12;
const SECTION_HEADER_LEN: usize = 8 + 8 + 4 + 1;

/// Header flag: descriptor rows are L2-normalized.
pub const FLAG_NORMALIZED: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F32(Vec<f32>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl SectionData {
    fn dtype(&self) -> u8 {
        match self {
            SectionData::F32(_) => 0,
            SectionData::U64(_) => 1,
            SectionData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            SectionData::F32(v) => v.len(),
            SectionData::U64(v) => v.len(),
            SectionData::U8(v) => v.len(),
        }
    }

    fn elem_size(dtype: u8) -> Option<usize> {
        match dtype {
            0 => Some(4),
            1 => Some(8),
            2 => Some(1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    role: String,
    rows: u64,
    cols: u32,
    data: SectionData,
}

impl Section {
    pub fn new(role: &str, rows: u64, cols: u32, data: SectionData) -> Result<Self, DataError> {
        if role.is_empty() || role.len() > 8 || !role.bytes().all(|b| b.is_ascii_graphic()) {
            return Err(DataError::Shape(format!(
                "role tag {role:?} must be 1-8 printable ASCII characters"
            )));
        }
        if (rows as u128) * (cols as u128) != data.len() as u128 {
            return Err(DataError::Shape(format!(
                "section {role}: {} elements for {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self {
            role: role.to_string(),
            rows,
            cols,
            data,
        })
    }

    pub fn f32(role: &str, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, DataError> {
        Self::new(role, rows as u64, cols as u32, SectionData::F32(data))
    }

    pub fn u64(role: &str, rows: usize, cols: usize, data: Vec<u64>) -> Result<Self, DataError> {
        Self::new(role, rows as u64, cols as u32, SectionData::U64(data))
    }

    pub fn u8(role: &str, rows: usize, cols: usize, data: Vec<u8>) -> Result<Self, DataError> {
        Self::new(role, rows as u64, cols as u32, SectionData::U8(data))
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn rows(&self) -> usize {
        self.rows as usize
    }

    pub fn cols(&self) -> usize {
        self.cols as usize
    }

    pub fn data(&self) -> &SectionData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32], DataError> {
        match &self.data {
            SectionData::F32(v) => Ok(v),
            _ => Err(self.wrong_type("f32")),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64], DataError> {
        match &self.data {
            SectionData::U64(v) => Ok(v),
            _ => Err(self.wrong_type("u64")),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], DataError> {
        match &self.data {
            SectionData::U8(v) => Ok(v),
            _ => Err(self.wrong_type("u8")),
        }
    }

    fn wrong_type(&self, want: &str) -> DataError {
        DataError::Shape(format!("section {} is not {want}", self.role))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub flags: u16,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(flags: u16) -> Self {
        Self {
            flags,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, s: Section) -> &mut Self {
        self.sections.push(s);
        self
    }

    pub fn section(&self, role: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.role == role)
    }

    pub fn require(&self, role: &str) -> Result<&Section, DataError> {
        self.section(role).ok_or_else(|| DataError::MissingSection(role.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .sections
            .iter()
            .map(|s| SECTION_HEADER_LEN + s.data.len() * SectionData::elem_size(s.data.dtype()).unwrap_or(0))
            .sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            let mut tag = [b' '; 8];
            tag[..s.role.len()].copy_from_slice(s.role.as_bytes());
            out.extend_from_slice(&tag);
            out.extend_from_slice(&s.rows.to_le_bytes());
            out.extend_from_slice(&s.cols.to_le_bytes());
            out.push(s.data.dtype());
            match &s.data {
                SectionData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                SectionData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                SectionData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, None, "magic")?;
        if magic != MAGIC {
            return Err(DataError::format(0, None, "bad magic, not a VGBD file"));
        }
        let version = u16::from_le_bytes(r.array(None, "version")?);
        if version != VERSION {
            return Err(DataError::format(4, None, format!("unsupported version {version}")));
        }
        let flags = u16::from_le_bytes(r.array(None, "flags")?);
        let count = u32::from_le_bytes(r.array(None, "section count")?);
        let mut sections = Vec::with_capacity(count.min(1024) as usize);
        for idx in 0..count {
            let start = r.pos;
            let label = format!("#{idx}");
            let tag: [u8; 8] = r.array(Some(&label), "role tag")?;
            let role = std::str::from_utf8(&tag)
                .map_err(|_| DataError::format(start, Some(&label), "role tag is not ASCII"))?
                .trim_end_matches(' ')
                .to_string();
            let rows = u64::from_le_bytes(r.array(Some(&role), "row count")?);
            let cols = u32::from_le_bytes(r.array(Some(&role), "column count")?);
            let dtype_pos = r.pos;
            let [dtype] = r.array::<1>(Some(&role), "dtype")?;
            let size = SectionData::elem_size(dtype)
                .ok_or_else(|| DataError::format(dtype_pos, Some(&role), format!("unknown dtype {dtype}")))?;
            let n = (rows as u128) * (cols as u128);
            let nbytes = n * size as u128;
            if nbytes > (bytes.len() - r.pos) as u128 {
                return Err(DataError::format(
                    r.pos,
                    Some(&role),
                    format!(
                        "truncated payload: need {nbytes} bytes, {} remain",
                        bytes.len() - r.pos
                    ),
                ));
            }
            let raw = r.take(nbytes as usize, Some(&role), "payload")?;
            let data = match dtype {
                0 => SectionData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => SectionData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => SectionData::U8(raw.to_vec()),
            };
            sections.push(Section { role, rows, cols, data });
        }
        if r.pos != bytes.len() {
            return Err(DataError::format(r.pos, None, "trailing bytes after last section"));
        }
        Ok(Self { flags, sections })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Writes atomically: a temp file in the target directory, then rename.
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        write_atomic(path, &self.to_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DataError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| DataError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| DataError::io(path, e))?;
    tmp.persist(path).map_err(|e| DataError::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: Option<&str>, what: &str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::format(
                self.pos,
                section,
                format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, section: Option<&str>, what: &str) -> Result<[u8; N], DataError> {
        Ok(self.take(N, section, what)?.try_into().unwrap())
    }
}
