//! Seeded synthetic geo-localization datasets.
//!
//! Places get uniform centres inside a bounding box. Database items and
//! queries are assigned to places round-robin and scattered uniformly over a
//! disc of diameter `place_spread_m` around the centre, so any two items of
//! one place are at most `place_spread_m` apart. Each place has a unit
//! prototype descriptor; an item's descriptor is the prototype plus
//! per-dimension Gaussian noise, L2-normalized. A `confusion_rate` fraction
//! of places is paired with a distant partner that shares its prototype.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRow, Split};
use super::DataError;
use crate::descriptor::DescriptorSet;
use crate::geoeval::{haversine_m, GeoPose};
use crate::numerics::{derive_seed, l2_normalize_in_place, seeded_rng, Matrix, SeededRng};
use crate::querypipe::{resize_bilinear, Image};

/// Extra separation, beyond the place spread, required between the centres
/// of two places that share a prototype.
pub const CONFUSION_MIN_SEPARATION_M: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for BBox {
    /// Roughly 2.2 km × 1.6 km.
    fn default() -> Self {
        Self {
            lat_min: 45.05,
            lat_max: 45.07,
            lon_min: 7.66,
            lon_max: 7.68,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_db: usize,
    pub n_q: usize,
    pub dim: usize,
    pub n_places: usize,
    pub place_spread_m: f64,
    pub descriptor_noise: f64,
    pub confusion_rate: f64,
    pub bbox: BBox,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_db: 1000,
            n_q: 100,
            dim: 64,
            n_places: 100,
            place_spread_m: 20.0,
            descriptor_noise: 0.05,
            confusion_rate: 0.0,
            bbox: BBox::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Infeasible(m));
        if self.n_places == 0 || self.n_places > self.n_db {
            return bad(format!("n_places {} must lie in 1..={}", self.n_places, self.n_db));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.confusion_rate) {
            return bad(format!("confusion_rate {} outside [0, 1]", self.confusion_rate));
        }
        if !(self.descriptor_noise >= 0.0 && self.descriptor_noise.is_finite()) {
            return bad(format!("descriptor_noise {} must be finite and non-negative", self.descriptor_noise));
        }
        if !(self.place_spread_m >= 0.0 && self.place_spread_m.is_finite()) {
            return bad(format!("place_spread_m {} must be finite and non-negative", self.place_spread_m));
        }
        let b = &self.bbox;
        let ok = |lat: f64, lon: f64| GeoPose::new(lat, lon, None).is_ok();
        if !(ok(b.lat_min, b.lon_min) && ok(b.lat_max, b.lon_max) && b.lat_min <= b.lat_max && b.lon_min <= b.lon_max) {
            return bad(format!("invalid bounding box {b:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub manifest: Manifest,
    pub db: DescriptorSet,
    pub queries: DescriptorSet,
    pub place_centers: Vec<GeoPose>,
    /// Place of each database row.
    pub db_places: Vec<usize>,
    /// Place of each query row.
    pub q_places: Vec<usize>,
    /// Prototype-sharing partner of each place.
    pub partner: Vec<Option<usize>>,
}

struct Layout {
    centers: Vec<GeoPose>,
    partner: Vec<Option<usize>>,
    db_places: Vec<usize>,
    q_places: Vec<usize>,
    db_poses: Vec<GeoPose>,
    q_poses: Vec<GeoPose>,
}

fn scatter(center: &GeoPose, radius_m: f64, rng: &mut SeededRng) -> GeoPose {
    let r = radius_m * rng.random::<f64>().sqrt();
    let a = rng.random::<f64>() * std::f64::consts::TAU;
    let mut p = center.offset_m(r * a.cos(), r * a.sin());
    p.heading_deg = Some(rng.random::<f64>() * 360.0);
    p
}

fn layout(spec: &SynthSpec, rng: &mut SeededRng) -> Result<Layout, DataError> {
    spec.validate()?;
    let b = spec.bbox;
    let centers: Vec<GeoPose> = (0..spec.n_places)
        .map(|_| {
            let lat = b.lat_min + rng.random::<f64>() * (b.lat_max - b.lat_min);
            let lon = b.lon_min + rng.random::<f64>() * (b.lon_max - b.lon_min);
            GeoPose::new(lat, lon, None).expect("inside a validated bbox")
        })
        .collect();

    let wanted = (spec.confusion_rate * (spec.n_places / 2) as f64).round() as usize;
    let mut partner = vec![None; spec.n_places];
    let mut order: Vec<usize> = (0..spec.n_places).collect();
    order.shuffle(rng);
    let min_sep = spec.place_spread_m + CONFUSION_MIN_SEPARATION_M;
    let mut pairs = 0;
    for i in 0..order.len() {
        if pairs == wanted {
            break;
        }
        let a = order[i];
        if partner[a].is_some() {
            continue;
        }
        let found = order[i + 1..].iter().copied().find(|&c| {
            partner[c].is_none() && haversine_m(&centers[a], &centers[c]).expect("valid poses") > min_sep
        });
        if let Some(c) = found {
            partner[a] = Some(c);
            partner[c] = Some(a);
            pairs += 1;
        }
    }
    if pairs < wanted {
        return Err(DataError::Infeasible(format!(
            "only {pairs} of {wanted} confusable place pairs are more than {min_sep} m apart"
        )));
    }

    let radius = spec.place_spread_m / 2.0;
    let db_places: Vec<usize> = (0..spec.n_db).map(|i| i % spec.n_places).collect();
    let q_places: Vec<usize> = (0..spec.n_q).map(|i| i % spec.n_places).collect();
    let db_poses = db_places.iter().map(|&p| scatter(&centers[p], radius, rng)).collect();
    let q_poses = q_places.iter().map(|&p| scatter(&centers[p], radius, rng)).collect();
    Ok(Layout {
        centers,
        partner,
        db_places,
        q_places,
        db_poses,
        q_poses,
    })
}

fn manifest_of(l: &Layout, n_db: usize) -> Manifest {
    let rows = l
        .db_poses
        .iter()
        .enumerate()
        .map(|(i, p)| ManifestRow {
            id: i as u64,
            pose: *p,
            split: Split::Database,
        })
        .chain(l.q_poses.iter().enumerate().map(|(j, p)| ManifestRow {
            id: (n_db + j) as u64,
            pose: *p,
            split: Split::Query,
        }))
        .collect();
    Manifest { rows }
}

/// Place whose prototype a place uses: the lower index of a confused pair.
fn prototype_owner(place: usize, partner: &[Option<usize>]) -> usize {
    partner[place].map_or(place, |p| p.min(place))
}

/// Database ids are `0..n_db`; query ids are `n_db..n_db + n_q`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData, DataError> {
    let mut rng = seeded_rng(spec.seed);
    let l = layout(spec, &mut rng)?;
    let mut protos = Vec::with_capacity(spec.n_places);
    for _ in 0..spec.n_places {
        let mut v: Vec<f32> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize_in_place(&mut v);
        protos.push(v);
    }
    let mut noisy = |places: &[usize]| -> Vec<f32> {
        let mut data = Vec::with_capacity(places.len() * spec.dim);
        for &p in places {
            let proto = &protos[prototype_owner(p, &l.partner)];
            let mut v: Vec<f32> = proto
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (x as f64 + spec.descriptor_noise * z) as f32
                })
                .collect();
            l2_normalize_in_place(&mut v);
            data.extend_from_slice(&v);
        }
        data
    };
    let db_data = noisy(&l.db_places);
    let q_data = noisy(&l.q_places);
    let db = DescriptorSet::new(
        (0..spec.n_db as u64).collect(),
        Matrix::new(spec.n_db, spec.dim, db_data).expect("shape"),
    )
    .expect("unique ids");
    let queries = DescriptorSet::new(
        (spec.n_db as u64..(spec.n_db + spec.n_q) as u64).collect(),
        Matrix::new(spec.n_q, spec.dim, q_data).expect("shape"),
    )
    .expect("unique ids");
    Ok(SynthData {
        manifest: manifest_of(&l, spec.n_db),
        db,
        queries,
        place_centers: l.centers,
        db_places: l.db_places,
        q_places: l.q_places,
        partner: l.partner,
    })
}

/// Image geometry for [`synth_images`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    pub db_h: usize,
    pub db_w: usize,
    pub q_h: usize,
    pub q_w: usize,
    pub channels: usize,
    /// Side of the coarse random grid a place's scene is upsampled from.
    pub scene_grid: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            db_h: 24,
            db_w: 32,
            q_h: 24,
            q_w: 32,
            channels: 16,
            scene_grid: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImages {
    pub manifest: Manifest,
    pub db_ids: Vec<u64>,
    pub q_ids: Vec<u64>,
    pub db: Vec<Image>,
    pub queries: Vec<Image>,
    pub db_places: Vec<usize>,
    pub q_places: Vec<usize>,
}

/// Multi-channel images with the same layout as [`synth_generate`]. Each
/// place owns a smooth random scene; an image is the scene rendered at the
/// requested size plus pixel noise of standard deviation
/// `descriptor_noise`, clamped to `[0, 1]`. `spec.dim` is unused.
pub fn synth_images(spec: &SynthSpec, img: &ImageSpec) -> Result<SynthImages, DataError> {
    if img.channels == 0 || img.scene_grid == 0 || img.db_h == 0 || img.db_w == 0 || img.q_h == 0 || img.q_w == 0 {
        return Err(DataError::Infeasible(format!("image dimensions must be positive: {img:?}")));
    }
    let mut rng = seeded_rng(spec.seed);
    let l = layout(spec, &mut rng)?;
    let mut rng = seeded_rng(derive_seed(spec.seed, 1));
    let g = img.scene_grid;
    let scenes: Vec<Image> = (0..spec.n_places)
        .map(|_| {
            let px = (0..g * g * img.channels).map(|_| rng.random::<f32>()).collect();
            Image::new(g, g, img.channels, px).expect("values in [0, 1)")
        })
        .collect();
    let mut render = |place: usize, h: usize, w: usize| -> Image {
        let base = resize_bilinear(&scenes[prototype_owner(place, &l.partner)], h, w).expect("positive dims");
        let px = base
            .into_pixels()
            .into_iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                ((v as f64 + spec.descriptor_noise * z) as f32).clamp(0.0, 1.0)
            })
            .collect();
        Image::new(h, w, img.channels, px).expect("clamped values")
    };
    let db = l.db_places.iter().map(|&p| render(p, img.db_h, img.db_w)).collect();
    let queries = l.q_places.iter().map(|&p| render(p, img.q_h, img.q_w)).collect();
    Ok(SynthImages {
        manifest: manifest_of(&l, spec.n_db),
        db_ids: (0..spec.n_db as u64).collect(),
        q_ids: (spec.n_db as u64..(spec.n_db + spec.n_q) as u64).collect(),
        db,
        queries,
        db_places: l.db_places,
        q_places: l.q_places,
    })
}

/// Images as a VGBD container: one `image` section per image (rows = H,
/// cols = W·C), preceded by `ids` and a `dims` table of `(H, W, C)` rows.
pub fn images_to_container(ids: &[u64], images: &[Image]) -> super::Container {
    let mut c = super::Container::new(0);
    c.push(super::Section::u64("ids", ids.len(), 1, ids.to_vec()).expect("id shape"));
    let dims: Vec<u64> = images
        .iter()
        .flat_map(|i| [i.height() as u64, i.width() as u64, i.channels() as u64])
        .collect();
    c.push(super::Section::u64("dims", images.len(), 3, dims).expect("dims shape"));
    for i in images {
        c.push(super::Section::f32("image", i.height(), i.width() * i.channels(), i.pixels().to_vec()).expect("image shape"));
    }
    c
}

pub fn images_from_container(c: &super::Container) -> Result<(Vec<u64>, Vec<Image>), DataError> {
    let ids = c.require("ids")?.as_u64()?.to_vec();
    let dims = c.require("dims")?;
    if dims.cols() != 3 || dims.rows() != ids.len() {
        return Err(DataError::Shape("dims table must have one (H, W, C) row per id".into()));
    }
    let dims = dims.as_u64()?;
    let sections: Vec<_> = c.sections.iter().filter(|s| s.role() == "image").collect();
    if sections.len() != ids.len() {
        return Err(DataError::Shape(format!("{} image sections for {} ids", sections.len(), ids.len())));
    }
    let images = sections
        .iter()
        .zip(dims.chunks_exact(3))
        .map(|(s, d)| {
            Image::new(d[0] as usize, d[1] as usize, d[2] as usize, s.as_f32()?.to_vec()).map_err(|e| DataError::Shape(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((ids, images))
}
