//! CSV manifests with header `id,lat,lon,heading,split`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geoeval::{GeoPose, PoseTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: u64,
    pub pose: GeoPose,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    id: String,
    lat: String,
    lon: String,
    heading: String,
    split: String,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            if !seen.insert(r.id) {
                return Err(DataError::Manifest {
                    row: i + 1,
                    message: format!("duplicate id {}", r.id),
                });
            }
            r.pose.validate().map_err(|e| DataError::Manifest {
                row: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(Self { rows })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn poses(&self, split: Split) -> PoseTable {
        let (ids, poses) = self.split(split).map(|r| (r.id, r.pose)).unzip();
        PoseTable::new(ids, poses).expect("manifest rows are validated")
    }

    pub fn parse<R: std::io::Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| DataError::Manifest {
            row: 0,
            message: e.to_string(),
        })?;
        if headers != vec!["id", "lat", "lon", "heading", "split"] {
            return Err(DataError::Manifest {
                row: 0,
                message: format!("expected header id,lat,lon,heading,split, got {}", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = i + 1;
            let err = |message: String| DataError::Manifest { row, message };
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let id: u64 = rec.id.parse().map_err(|_| err(format!("bad id {:?}", rec.id)))?;
            let lat: f64 = rec.lat.parse().map_err(|_| err(format!("bad lat {:?}", rec.lat)))?;
            let lon: f64 = rec.lon.parse().map_err(|_| err(format!("bad lon {:?}", rec.lon)))?;
            let heading = if rec.heading.is_empty() {
                None
            } else {
                Some(rec.heading.parse::<f64>().map_err(|_| err(format!("bad heading {:?}", rec.heading)))?)
            };
            let split = match rec.split.as_str() {
                "database" | "db" => Split::Database,
                "query" | "queries" => Split::Query,
                other => return Err(err(format!("unknown split {other:?}"))),
            };
            let pose = GeoPose::new(lat, lon, heading).map_err(|e| err(e.to_string()))?;
            rows.push(ManifestRow { id, pose, split });
        }
        Self::new(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                id: r.id.to_string(),
                lat: format!("{}", r.pose.lat_deg),
                lon: format!("{}", r.pose.lon_deg),
                heading: r.pose.heading_deg.map(|h| format!("{h}")).unwrap_or_default(),
                split: match r.split {
                    Split::Database => "database",
                    Split::Query => "query",
                }
                .to_string(),
            })
            .expect("in-memory csv write");
        }
        if self.rows.is_empty() {
            return "id,lat,lon,heading,split\n".to_string();
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    Manifest::parse(f)
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<(), DataError> {
    super::vgbd::write_atomic(path, m.to_csv().as_bytes())
}
