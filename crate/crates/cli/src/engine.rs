//! Stage implementations shared by the single-step subcommands and the
//! pipeline runner.

use std::path::Path;
use std::time::Instant;

use geoloc::aggregation::{Aggregator, Pooling};
use geoloc::dataio::synth::{images_from_container, images_to_container};
use geoloc::dataio::{descriptors_from_container, descriptors_to_container, Container, Manifest, Section, Split};
use geoloc::geoeval::{GeoPose, PoseTable};
use geoloc::index::{Index, SearchParams, SearchResult, TimingReport};
use geoloc::numerics::{Matrix, PcaModel};
use geoloc::querypipe::{apply_policy, fuse_majority_vote, fuse_mean, fuse_nearest_crop, CropPolicy, Fusion, Image, VOTE_DEPTH};
use geoloc::{Descriptor, DescriptorSet};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliError, CliResult};
use crate::report::hex;

/// Section linking each crop row to `(query id, crop index)`.
pub const ROLE_CROP_OF: &str = "cropof";

/// Descriptors, or images, whose rows are crops of a smaller query set.
#[derive(Debug, Clone, PartialEq)]
pub struct CropMap(pub Vec<(u64, u64)>);

impl CropMap {
    pub fn section(&self) -> Section {
        let flat: Vec<u64> = self.0.iter().flat_map(|&(q, c)| [q, c]).collect();
        Section::u64(ROLE_CROP_OF, self.0.len(), 2, flat).expect("crop map shape")
    }

    pub fn from_container(c: &Container, rows: usize) -> CliResult<Option<Self>> {
        let Some(s) = c.section(ROLE_CROP_OF) else {
            return Ok(None);
        };
        if s.cols() != 2 || s.rows() != rows {
            return Err(CliError::data(format!(
                "crop map is {}x{}, expected {rows}x2",
                s.rows(),
                s.cols()
            )));
        }
        let v = s.as_u64()?;
        Ok(Some(Self(v.chunks_exact(2).map(|p| (p[0], p[1])).collect())))
    }

    /// Crop rows grouped by query, queries in order of first appearance.
    pub fn groups(&self) -> Vec<(u64, Vec<usize>)> {
        let mut out: Vec<(u64, Vec<usize>)> = Vec::new();
        let mut slot = std::collections::HashMap::new();
        for (row, &(q, _)) in self.0.iter().enumerate() {
            let i = *slot.entry(q).or_insert_with(|| {
                out.push((q, Vec::new()));
                out.len() - 1
            });
            out[i].1.push(row);
        }
        out
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn read_container(path: &Path) -> CliResult<Container> {
    Ok(Container::read(path)?)
}

/// Descriptor set plus its crop map, if the file carries one.
pub fn read_queries(path: &Path) -> CliResult<(DescriptorSet, Option<CropMap>)> {
    let c = read_container(path)?;
    let set = descriptors_from_container(&c)?;
    let crops = CropMap::from_container(&c, set.len())?;
    Ok((set, crops))
}

pub fn write_descriptor_file(path: &Path, set: &DescriptorSet, crops: Option<&CropMap>) -> CliResult<()> {
    let mut c = descriptors_to_container(set);
    if let Some(m) = crops {
        c.push(m.section());
    }
    Ok(c.write(path)?)
}

pub fn read_images(path: &Path) -> CliResult<(Vec<u64>, Vec<Image>, Option<CropMap>)> {
    let c = read_container(path)?;
    let (ids, images) = images_from_container(&c)?;
    let crops = CropMap::from_container(&c, ids.len())?;
    Ok((ids, images, crops))
}

pub fn write_image_file(path: &Path, ids: &[u64], images: &[Image], crops: Option<&CropMap>) -> CliResult<()> {
    let mut c = images_to_container(ids, images);
    if let Some(m) = crops {
        c.push(m.section());
    }
    Ok(c.write(path)?)
}

/// Pools every image into a descriptor. Returns the set and the mean
/// extraction time per image in milliseconds.
pub fn aggregate_images(ids: &[u64], images: &[Image], pooling: &Pooling) -> CliResult<(DescriptorSet, f64)> {
    let channels = images.first().map_or(1, |i| i.channels());
    if let Some(bad) = images.iter().find(|i| i.channels() != channels) {
        return Err(CliError::data(format!(
            "mixed channel counts: {} and {}",
            channels,
            bad.channels()
        )));
    }
    let agg = Aggregator::from_pooling(pooling, channels)?;
    let start = Instant::now();
    let rows: Vec<Descriptor> = images
        .par_iter()
        .map(|img| agg.apply(&img.to_feature_map()))
        .collect::<Result<_, _>>()?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let dim = agg.output_dim(channels);
    let mut data = Vec::with_capacity(rows.len() * dim);
    for d in &rows {
        data.extend_from_slice(&d.values);
    }
    let set = DescriptorSet::new(ids.to_vec(), Matrix::new(rows.len(), dim, data)?)?;
    Ok((set, elapsed / images.len().max(1) as f64))
}

/// Applies `policy` to every query image. Crop rows get sequential ids;
/// the crop map links them back to their query.
pub fn crop_queries(
    ids: &[u64],
    images: &[Image],
    policy: CropPolicy,
    db_h: usize,
    db_w: usize,
) -> CliResult<(Vec<u64>, Vec<Image>, CropMap)> {
    let sets: Vec<_> = images
        .par_iter()
        .map(|img| apply_policy(policy, img, db_h, db_w))
        .collect::<Result<_, _>>()?;
    let mut crop_ids = Vec::new();
    let mut crops = Vec::new();
    let mut map = Vec::new();
    for (&qid, set) in ids.iter().zip(sets) {
        for (ci, img) in set.crops.into_iter().enumerate() {
            crop_ids.push(crops.len() as u64);
            crops.push(img);
            map.push((qid, ci as u64));
        }
    }
    Ok((crop_ids, crops, CropMap(map)))
}

/// Searches `queries`; when a crop map is present, crop results are fused
/// into one result per original query.
pub fn search_fused(
    index: &Index,
    queries: &DescriptorSet,
    crops: Option<&CropMap>,
    k: usize,
    params: &SearchParams,
    fusion: Fusion,
) -> CliResult<(Vec<SearchResult>, TimingReport)> {
    let Some(map) = crops else {
        return Ok(index.search(queries, k, params)?);
    };
    let groups = map.groups();
    let start = Instant::now();
    let (results, mut timing) = match fusion {
        Fusion::Mean => {
            let fused: Vec<Descriptor> = groups
                .iter()
                .map(|(_, rows)| {
                    let descs: Vec<Descriptor> = rows.iter().map(|&r| Descriptor::from_raw(queries.row(r).to_vec())).collect();
                    fuse_mean(&descs)
                })
                .collect::<Result<_, _>>()?;
            let dim = queries.dim();
            let data: Vec<f32> = fused.iter().flat_map(|d| d.values.iter().copied()).collect();
            let set = DescriptorSet::new(groups.iter().map(|g| g.0).collect(), Matrix::new(fused.len(), dim, data)?)?;
            index.search(&set, k, params)?
        }
        Fusion::NearestCrop | Fusion::MajorityVote => {
            let depth = if fusion == Fusion::MajorityVote { k.max(VOTE_DEPTH) } else { k };
            let (per_crop, t) = index.search(queries, depth, params)?;
            let fused = groups
                .iter()
                .map(|(qid, rows)| {
                    let crop_results: Vec<SearchResult> = rows.iter().map(|&r| per_crop[r].clone()).collect();
                    let mut r = if fusion == Fusion::MajorityVote {
                        fuse_majority_vote(&crop_results, k)?
                    } else {
                        fuse_nearest_crop(&crop_results, k)?
                    };
                    r.query_id = *qid;
                    Ok(r)
                })
                .collect::<CliResult<Vec<_>>>()?;
            (fused, t)
        }
    };
    let t_m_ms = start.elapsed().as_secs_f64() * 1e3;
    timing.t_m_ms = t_m_ms;
    timing.t_m_per_query_ms = t_m_ms / groups.len().max(1) as f64;
    Ok((results, timing))
}

/// Pose table aligned row-for-row with `ids`, looked up in `split` rows of
/// the manifest.
pub fn aligned_poses(manifest: &Manifest, split: Split, ids: &[u64]) -> CliResult<PoseTable> {
    let table = manifest.poses(split);
    let poses: Vec<GeoPose> = ids
        .iter()
        .map(|&id| {
            table
                .get(id)
                .copied()
                .map_err(|_| CliError::data(format!("id {id} missing from the {split:?} rows of the manifest")))
        })
        .collect::<CliResult<_>>()?;
    Ok(PoseTable::new(ids.to_vec(), poses)?)
}

/// PCA model as a container: `mean` (1×d), `comps` (out×d),
/// `eigvals` (out×1, f64 bit patterns) and `whiten` (1×1).
pub fn pca_to_container(m: &PcaModel) -> Container {
    let mut c = Container::new(0);
    c.push(Section::f32("mean", 1, m.mean.len(), m.mean.clone()).expect("mean shape"));
    c.push(
        Section::f32("comps", m.components.rows(), m.components.cols(), m.components.as_slice().to_vec())
            .expect("components shape"),
    );
    let bits: Vec<u64> = m.eigenvalues.iter().map(|e| e.to_bits()).collect();
    c.push(Section::u64("eigvals", bits.len(), 1, bits).expect("eigvals shape"));
    c.push(Section::u64("whiten", 1, 1, vec![m.whiten as u64]).expect("flag shape"));
    c
}

pub fn pca_from_container(c: &Container) -> CliResult<PcaModel> {
    let mean = c.require("mean")?.as_f32()?.to_vec();
    let comps = c.require("comps")?;
    let components = Matrix::new(comps.rows(), comps.cols(), comps.as_f32()?.to_vec())?;
    let eigenvalues: Vec<f64> = c.require("eigvals")?.as_u64()?.iter().map(|&b| f64::from_bits(b)).collect();
    let whiten = c.require("whiten")?.as_u64()?.first().copied().unwrap_or(0) != 0;
    if components.cols() != mean.len() || eigenvalues.len() != components.rows() {
        return Err(CliError::data("inconsistent PCA model shapes"));
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        whiten,
    })
}
