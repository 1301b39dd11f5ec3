//! Declarative end-to-end runs. Each stage writes its artifacts into a
//! directory named after a hash of its own config and its upstream hash, so
//! a rerun recomputes only the stages whose inputs changed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use geoloc::aggregation::{LinearHead, Pooling};
use geoloc::dataio::{read_manifest, write_results, ImageSpec, Split, SynthSpec};
use geoloc::geoeval::EvalConfig;
use geoloc::index::{Index, IndexConfig, SearchParams};
use geoloc::numerics::pca_fit;
use geoloc::querypipe::{CropPolicy, Fusion};
use geoloc::DescriptorSet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands::{evaluate, load_json, write_split_manifests};
use crate::engine::{self, CropMap};
use crate::error::{io_error, CliError, CliResult};
use crate::report::{config_hash, RunReport};

/// Projection applied to descriptors after pooling.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Projection {
    #[default]
    None,
    /// PCA fitted on the database descriptors.
    Pca {
        out_dim: usize,
        #[serde(default)]
        whiten: bool,
    },
    /// Seeded random orthogonal linear layer.
    Linear {
        out_dim: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { k: 20 }
    }
}

fn default_pooling() -> Pooling {
    Pooling::Gem {
        p: geoloc::aggregation::GEM_DEFAULT_P,
        eps: geoloc::aggregation::GEM_DEFAULT_EPS,
    }
}

fn default_crop() -> CropPolicy {
    CropPolicy::HardResize
}

fn default_fusion() -> Fusion {
    Fusion::NearestCrop
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default)]
    pub images: ImageSpec,
    #[serde(default = "default_pooling")]
    pub aggregation: Pooling,
    #[serde(default)]
    pub projection: Projection,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default = "default_crop")]
    pub crop_policy: CropPolicy,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    /// JSON pipeline config; see docs/pipeline.schema.json.
    #[arg(long)]
    pub config: PathBuf,
    /// Cache and output directory.
    #[arg(long, default_value = "geoloc-work")]
    pub work_dir: PathBuf,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long)]
    pub ef_search: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub crop_policy: Option<String>,
    #[arg(long)]
    pub fusion: Option<String>,
}

impl PipelineArgs {
    pub fn resolve(&self) -> CliResult<PipelineConfig> {
        let mut c: PipelineConfig = load_json(&self.config)?;
        if let Some(v) = self.nprobe {
            c.index.nprobe = v;
        }
        if let Some(v) = self.ef_search {
            c.index.ef_search = v;
        }
        if let Some(v) = self.k {
            c.search.k = v;
        }
        let usage = |e: geoloc::querypipe::PipeError| CliError::usage(e.to_string());
        if let Some(v) = &self.crop_policy {
            c.crop_policy = v.parse().map_err(usage)?;
        }
        if let Some(v) = &self.fusion {
            c.fusion = v.parse().map_err(usage)?;
        }
        Ok(c)
    }
}

/// One cached stage directory.
struct Stage {
    name: &'static str,
    key: String,
    dir: PathBuf,
    cached: bool,
    ms: f64,
}

const DONE_MARKER: &str = "stage.json";

impl Stage {
    /// Runs `build` into a scratch directory unless a finished directory for
    /// `key` exists; the scratch directory is renamed into place when done.
    fn run(
        cache: &Path,
        name: &'static str,
        key: String,
        build: impl FnOnce(&Path) -> CliResult<()>,
    ) -> CliResult<Self> {
        let dir = cache.join(format!("{name}-{}", &key[..16]));
        let start = Instant::now();
        if dir.join(DONE_MARKER).is_file() {
            return Ok(Self {
                name,
                key,
                dir,
                cached: true,
                ms: 0.0,
            });
        }
        let scratch = cache.join(format!(".{name}-{}-{}", &key[..16], std::process::id()));
        if scratch.exists() {
            std::fs::remove_dir_all(&scratch).map_err(|e| io_error(&scratch, e))?;
        }
        std::fs::create_dir_all(&scratch).map_err(|e| io_error(&scratch, e))?;
        build(&scratch)?;
        let marker = json!({ "stage": name, "key": key }).to_string();
        std::fs::write(scratch.join(DONE_MARKER), marker).map_err(|e| io_error(&scratch, e))?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        }
        std::fs::rename(&scratch, &dir).map_err(|e| io_error(&dir, e))?;
        Ok(Self {
            name,
            key,
            dir,
            cached: false,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

fn project(p: &Projection, db: &DescriptorSet, q: &DescriptorSet) -> CliResult<(DescriptorSet, DescriptorSet)> {
    match *p {
        Projection::None => Ok((db.clone(), q.clone())),
        Projection::Pca { out_dim, whiten } => {
            let m = pca_fit(db, out_dim, whiten)?;
            Ok((m.apply_set(db)?, m.apply_set(q)?))
        }
        Projection::Linear { out_dim, seed } => {
            let head = LinearHead::orthogonal(out_dim, db.dim(), seed)?;
            let apply = |s: &DescriptorSet| -> CliResult<DescriptorSet> {
                let mut data = Vec::with_capacity(s.len() * out_dim);
                for r in s.matrix().iter_rows() {
                    data.extend(head.project(&geoloc::Descriptor::from_raw(r.to_vec()))?.values);
                }
                Ok(DescriptorSet::new(s.ids().to_vec(), geoloc::Matrix::new(s.len(), out_dim, data)?)?)
            };
            Ok((apply(db)?, apply(q)?))
        }
    }
}

pub fn cmd_pipeline(a: &PipelineArgs) -> CliResult<RunReport> {
    let cfg = a.resolve()?;
    cfg.eval.validate()?;
    if cfg.search.k == 0 {
        let mut e = CliError::usage("k must be at least 1");
        e.pointer = Some("/search/k".into());
        return Err(e);
    }
    let mut report = RunReport::new("pipeline", &json!({ "pipeline": cfg, "work_dir": a.work_dir }));
    let cache = a.work_dir.join("cache");
    std::fs::create_dir_all(&cache).map_err(|e| io_error(&cache, e))?;
    let mut stages = Vec::new();

    let data = Stage::run(&cache, "data", config_hash("data", &json!([cfg.synth, cfg.images])), |dir| {
        let imgs = geoloc::dataio::synth_images(&cfg.synth, &cfg.images)?;
        engine::write_image_file(&dir.join("db_images.vgbd"), &imgs.db_ids, &imgs.db, None)?;
        engine::write_image_file(&dir.join("q_images.vgbd"), &imgs.q_ids, &imgs.queries, None)?;
        write_split_manifests(dir, &imgs.manifest)?;
        Ok(())
    })?;

    let mut t_e_ms = None;
    let desc_key = config_hash("descriptors", &json!([data.key, cfg.aggregation, cfg.crop_policy]));
    let desc = Stage::run(&cache, "descriptors", desc_key, |dir| {
        let (ids, images, _) = engine::read_images(&data.path("db_images.vgbd"))?;
        let (db, t_db) = engine::aggregate_images(&ids, &images, &cfg.aggregation)?;
        engine::write_descriptor_file(&dir.join("db.vgbd"), &db, None)?;
        let (qids, qimages, _) = engine::read_images(&data.path("q_images.vgbd"))?;
        let (cids, crops, map) = engine::crop_queries(&qids, &qimages, cfg.crop_policy, cfg.images.db_h, cfg.images.db_w)?;
        let (q, t_q) = engine::aggregate_images(&cids, &crops, &cfg.aggregation)?;
        engine::write_descriptor_file(&dir.join("queries.vgbd"), &q, Some(&map))?;
        t_e_ms = Some((t_db * ids.len() as f64 + t_q * cids.len() as f64) / (ids.len() + cids.len()).max(1) as f64);
        Ok(())
    })?;

    let proj_key = config_hash("projection", &json!([desc.key, cfg.projection]));
    let proj = Stage::run(&cache, "projection", proj_key, |dir| {
        let db = geoloc::dataio::read_descriptors(&desc.path("db.vgbd"))?;
        let (q, map) = engine::read_queries(&desc.path("queries.vgbd"))?;
        let (pdb, pq) = project(&cfg.projection, &db, &q)?;
        engine::write_descriptor_file(&dir.join("db.vgbd"), &pdb, None)?;
        engine::write_descriptor_file(&dir.join("queries.vgbd"), &pq, map.as_ref())
    })?;

    // query-time knobs are excluded so changing them reuses the built index
    let build_cfg = IndexConfig {
        nprobe: IndexConfig::default().nprobe.min(cfg.index.nlist),
        ef_search: IndexConfig::default().ef_search,
        ..cfg.index.clone()
    };
    let index_stage = Stage::run(&cache, "index", config_hash("index", &json!([proj.key, build_cfg])), |dir| {
        let db = geoloc::dataio::read_descriptors(&proj.path("db.vgbd"))?;
        Index::build(&db, &build_cfg)?.write(&dir.join("index.vgbd"))?;
        Ok(())
    })?;

    let params = SearchParams {
        nprobe: Some(cfg.index.nprobe),
        ef_search: Some(cfg.index.ef_search),
    };
    let mut search_timing = None;
    let search_key = config_hash(
        "search",
        &json!([index_stage.key, cfg.index.nprobe, cfg.index.ef_search, cfg.search, cfg.fusion]),
    );
    let search = Stage::run(&cache, "search", search_key, |dir| {
        let index = Index::read(&index_stage.path("index.vgbd"))?;
        let (q, map) = engine::read_queries(&proj.path("queries.vgbd"))?;
        let map: Option<CropMap> = map;
        let (results, timing) = engine::search_fused(&index, &q, map.as_ref(), cfg.search.k, &params, cfg.fusion)?;
        write_results(&dir.join("results.jsonl"), &results)?;
        search_timing = Some(timing);
        Ok(())
    })?;

    let eval_key = config_hash("eval", &json!([search.key, cfg.eval]));
    let eval = Stage::run(&cache, "eval", eval_key, |dir| {
        let results = geoloc::dataio::read_results(&search.path("results.jsonl"))?;
        let m = read_manifest(&data.path("manifest.csv"))?;
        let summary = evaluate(
            &results,
            &m.poses(Split::Query),
            &m.poses(Split::Database),
            &cfg.eval,
            &[1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 75.0, 100.0],
            100,
            Some(dir),
        )?;
        let body = serde_json::to_string_pretty(&summary.report).expect("report serializes") + "\n";
        std::fs::write(dir.join("eval.json"), body).map_err(|e| io_error(dir, e))
    })?;
    let eval_report: geoloc::geoeval::EvalReport = load_json(&eval.path("eval.json"))?;

    stages.extend([data, desc, proj, index_stage, search, eval]);
    let mut digests = serde_json::Map::new();
    for (stage, file) in [
        (4usize, "results.jsonl"),
        (5, "eval.json"),
        (5, "threshold_sweep.csv"),
        (5, "recall_at_n.csv"),
    ] {
        let p = stages[stage].path(file);
        digests.insert(file.to_string(), Value::String(engine::sha256_file(&p)?));
        report.output(&p);
    }
    report.payload = json!({
        "stages": stages.iter().map(|s| json!({ "stage": s.name, "key": s.key })).collect::<Vec<_>>(),
        "recall_at": eval_report.recall_at,
        "upper_bound": eval_report.upper_bound,
        "queries_without_positive": eval_report.queries_without_positive,
        "digests": digests,
    });
    report.timing = json!({
        "stages": stages.iter().map(|s| json!({ "stage": s.name, "cached": s.cached, "ms": s.ms })).collect::<Vec<_>>(),
        "t_e_ms": t_e_ms,
        "search": search_timing.map(|t| match t_e_ms { Some(te) => t.with_extraction(te), None => t }),
    });
    Ok(report)
}
