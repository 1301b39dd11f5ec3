//! Persistence: the VGBD container, manifests, synthetic datasets and
//! search-result files.

use std::path::Path;

use thiserror::Error;

use crate::descriptor::DescriptorSet;
use crate::numerics::Matrix;

pub mod manifest;
pub mod results;
pub mod synth;
pub mod vgbd;

pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRow, Split};
pub use results::{read_results, write_results};
pub use synth::{synth_generate, synth_images, BBox, ImageSpec, SynthData, SynthImages, SynthSpec};
pub use vgbd::{Container, Section, SectionData};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}{}: {message}", section.as_ref().map(|s| format!(" (section {s})")).unwrap_or_default())]
    Format {
        offset: u64,
        section: Option<String>,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("{0}")]
    Shape(String),
    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },
    #[error("results line {line}: {message}")]
    Results { line: usize, message: String },
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
}

impl DataError {
    pub(crate) fn format(offset: usize, section: Option<&str>, message: impl Into<String>) -> Self {
        DataError::Format {
            offset: offset as u64,
            section: section.map(str::to_string),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub const ROLE_IDS: &str = "ids";
pub const ROLE_DESC: &str = "desc";

/// Container holding a descriptor set: `ids` (u64, n×1) and `desc`
/// (f32, n×dim).
pub fn descriptors_to_container(set: &DescriptorSet) -> Container {
    let flags = if !set.is_empty() && set.is_normalized() {
        vgbd::FLAG_NORMALIZED
    } else {
        0
    };
    let mut c = Container::new(flags);
    c.push(Section::u64(ROLE_IDS, set.len(), 1, set.ids().to_vec()).expect("shape is consistent"));
    c.push(Section::f32(ROLE_DESC, set.len(), set.dim(), set.matrix().as_slice().to_vec()).expect("shape is consistent"));
    c
}

pub fn descriptors_from_container(c: &Container) -> Result<DescriptorSet, DataError> {
    let ids = c.require(ROLE_IDS)?;
    let desc = c.require(ROLE_DESC)?;
    let matrix = Matrix::new(desc.rows(), desc.cols(), desc.as_f32()?.to_vec()).map_err(|e| DataError::Shape(e.to_string()))?;
    DescriptorSet::new(ids.as_u64()?.to_vec(), matrix).map_err(|e| DataError::Shape(e.to_string()))
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<(), DataError> {
    descriptors_to_container(set).write(path)
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet, DataError> {
    descriptors_from_container(&Container::read(path)?)
}
