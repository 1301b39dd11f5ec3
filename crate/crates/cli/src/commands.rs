//! Single-step subcommands. Each returns a [`RunReport`]; output files are
//! written atomically and their SHA-256 digests land in the payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use geoloc::aggregation::{Pooling, GEM_DEFAULT_EPS, GEM_DEFAULT_P};
use geoloc::dataio::{
    read_descriptors, read_manifest, read_results, synth_generate, synth_images, write_manifest, write_results,
    ImageSpec, Manifest, Split, SynthSpec,
};
use geoloc::geoeval::{recall_at_n, recall_curve, threshold_sweep, EvalConfig, DEFAULT_THRESHOLD_M};
use geoloc::index::{exact_top1, recall_against, Index, IndexConfig, IndexKind, SearchParams};
use geoloc::mining::{mine_all, MiningConfig, MiningDb, Strategy};
use geoloc::numerics::{pca_fit, sq_l2};
use geoloc::querypipe::{CropPolicy, Fusion};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::engine;
use crate::error::{io_error, CliError, CliResult};
use crate::report::{write_file, RunReport};

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Loads a JSON config file, reporting schema errors with a JSON pointer.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_json(&text)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(e.path());
        let mut err = CliError::usage(format!("invalid config: {}", e.inner()));
        err.pointer = Some(pointer);
        err
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        s.push('/');
        match seg {
            Segment::Seq { index } => s.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => s.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Unknown => s.push('?'),
        }
    }
    s
}

fn record(report: &mut RunReport, digests: &mut BTreeMap<String, String>, path: &Path) -> CliResult<()> {
    report.output(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    digests.insert(name, engine::sha256_file(path)?);
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// JSON file with a synthetic spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_db: Option<usize>,
    #[arg(long)]
    pub n_q: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_places: Option<usize>,
    /// Scatter diameter of images around a place, in metres.
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fraction of places sharing a descriptor prototype with a far partner.
    #[arg(long)]
    pub confusion: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit multi-channel images instead of descriptors.
    #[arg(long)]
    pub images: bool,
    #[arg(long, default_value_t = 24)]
    pub db_h: usize,
    #[arg(long, default_value_t = 32)]
    pub db_w: usize,
    #[arg(long, default_value_t = 24)]
    pub q_h: usize,
    #[arg(long, default_value_t = 32)]
    pub q_w: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub scene_grid: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl SynthArgs {
    pub fn resolve(&self) -> CliResult<SynthSpec> {
        let mut s: SynthSpec = match &self.spec {
            Some(p) => load_json(p)?,
            None => SynthSpec::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(if let Some(v) = self.$flag { s.$field = v; })*};
        }
        set!(n_db => n_db, n_q => n_q, dim => dim, n_places => n_places, spread => place_spread_m,
             noise => descriptor_noise, confusion => confusion_rate, seed => seed);
        Ok(s)
    }

    fn image_spec(&self) -> ImageSpec {
        ImageSpec {
            db_h: self.db_h,
            db_w: self.db_w,
            q_h: self.q_h,
            q_w: self.q_w,
            channels: self.channels,
            scene_grid: self.scene_grid,
        }
    }
}

pub fn write_split_manifests(dir: &Path, m: &Manifest) -> CliResult<[PathBuf; 3]> {
    let all = dir.join("manifest.csv");
    let db = dir.join("db.csv");
    let q = dir.join("q.csv");
    write_manifest(&all, m)?;
    for (path, split) in [(&db, Split::Database), (&q, Split::Query)] {
        let rows = m.split(split).cloned().collect();
        write_manifest(path, &Manifest::new(rows)?)?;
    }
    Ok([all, db, q])
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<RunReport> {
    let spec = a.resolve()?;
    let img = a.images.then(|| a.image_spec());
    let mut report = RunReport::new("synth", &json!({ "spec": spec, "images": img, "out_dir": a.out_dir }));
    let start = Instant::now();
    let mut digests = BTreeMap::new();
    std::fs::create_dir_all(&a.out_dir).map_err(|e| io_error(&a.out_dir, e))?;
    let manifest = if let Some(img) = img {
        let data = synth_images(&spec, &img)?;
        let db = a.out_dir.join("db_images.vgbd");
        let q = a.out_dir.join("q_images.vgbd");
        engine::write_image_file(&db, &data.db_ids, &data.db, None)?;
        engine::write_image_file(&q, &data.q_ids, &data.queries, None)?;
        record(&mut report, &mut digests, &db)?;
        record(&mut report, &mut digests, &q)?;
        data.manifest
    } else {
        let data = synth_generate(&spec)?;
        let db = a.out_dir.join("db.vgbd");
        let q = a.out_dir.join("queries.vgbd");
        engine::write_descriptor_file(&db, &data.db, None)?;
        engine::write_descriptor_file(&q, &data.queries, None)?;
        record(&mut report, &mut digests, &db)?;
        record(&mut report, &mut digests, &q)?;
        data.manifest
    };
    for p in write_split_manifests(&a.out_dir, &manifest)? {
        record(&mut report, &mut digests, &p)?;
    }
    report.payload = json!({ "n_db": spec.n_db, "n_q": spec.n_q, "digests": digests });
    report.timing = json!({ "wall_ms": ms_since(start) });
    Ok(report)
}

// ---------------------------------------------------------------- aggregate

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMethod {
    Spoc,
    Mac,
    Gem,
    Rmac,
    Netvlad,
}

#[derive(Debug, Args, Serialize)]
pub struct PoolingArgs {
    #[arg(long, value_enum, default_value = "gem")]
    pub pooling: PoolingMethod,
    /// GeM exponent.
    #[arg(long, default_value_t = GEM_DEFAULT_P)]
    pub p: f64,
    #[arg(long, default_value_t = GEM_DEFAULT_EPS)]
    pub eps: f64,
    /// R-MAC scale levels.
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// NetVLAD cluster count.
    #[arg(long, default_value_t = 16)]
    pub clusters: usize,
    #[arg(long, default_value_t = 10.0)]
    pub alpha: f32,
    /// Seed for NetVLAD parameters.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PoolingArgs {
    pub fn pooling(&self) -> Pooling {
        match self.pooling {
            PoolingMethod::Spoc => Pooling::Spoc,
            PoolingMethod::Mac => Pooling::Mac,
            PoolingMethod::Gem => Pooling::Gem { p: self.p, eps: self.eps },
            PoolingMethod::Rmac => Pooling::Rmac { levels: self.levels },
            PoolingMethod::Netvlad => Pooling::Netvlad {
                clusters: self.clusters,
                alpha: self.alpha,
                seed: self.seed,
            },
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AggregateArgs {
    /// Image container (role "image").
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub pooling: PoolingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_aggregate(a: &AggregateArgs) -> CliResult<RunReport> {
    let pooling = a.pooling.pooling();
    let mut report = RunReport::new("aggregate", &json!({ "in": a.input, "pooling": pooling, "out": a.out }));
    let start = Instant::now();
    let (ids, images, crops) = engine::read_images(&a.input)?;
    let (set, t_e_ms) = engine::aggregate_images(&ids, &images, &pooling)?;
    engine::write_descriptor_file(&a.out, &set, crops.as_ref())?;
    let mut digests = BTreeMap::new();
    record(&mut report, &mut digests, &a.out)?;
    report.payload = json!({ "n": set.len(), "dim": set.dim(), "digests": digests });
    report.timing = json!({ "t_e_ms": t_e_ms, "wall_ms": ms_since(start) });
    Ok(report)
}

// ---------------------------------------------------------------- pca

#[derive(Debug, Args, Serialize)]
pub struct PcaArgs {
    /// Descriptors to project.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Descriptors to fit on; defaults to the input.
    #[arg(long, conflicts_with = "model")]
    pub fit: Option<PathBuf>,
    /// Apply a saved model instead of fitting.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    pub out_dim: Option<usize>,
    #[arg(long)]
    pub whiten: bool,
    /// Where to save the fitted model.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_pca(a: &PcaArgs) -> CliResult<RunReport> {
    let mut report = RunReport::new("pca", a);
    let start = Instant::now();
    let (set, crops) = engine::read_queries(&a.input)?;
    let model = match &a.model {
        Some(p) => engine::pca_from_container(&engine::read_container(p)?)?,
        None => {
            let fit = match &a.fit {
                Some(p) => read_descriptors(p)?,
                None => set.clone(),
            };
            pca_fit(&fit, a.out_dim.expect("required by clap"), a.whiten)?
        }
    };
    let out = model.apply_set(&set)?;
    let mut digests = BTreeMap::new();
    engine::write_descriptor_file(&a.out, &out, crops.as_ref())?;
    record(&mut report, &mut digests, &a.out)?;
    if let Some(p) = &a.model_out {
        engine::pca_to_container(&model).write(p)?;
        record(&mut report, &mut digests, p)?;
    }
    report.payload = json!({
        "n": out.len(),
        "input_dim": model.input_dim(),
        "output_dim": model.output_dim(),
        "explained_variance": model.eigenvalues,
        "digests": digests,
    });
    report.timing = json!({ "wall_ms": ms_since(start) });
    Ok(report)
}

// ---------------------------------------------------------------- build-index

#[derive(Debug, Args, Serialize)]
pub struct IndexArgs {
    /// JSON index config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub nlist: Option<usize>,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long)]
    pub m_sub: Option<usize>,
    #[arg(long)]
    pub nbits: Option<u32>,
    #[arg(long)]
    pub k_half: Option<usize>,
    #[arg(long)]
    pub m_links: Option<usize>,
    #[arg(long)]
    pub ef_construction: Option<usize>,
    #[arg(long)]
    pub ef_search: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
}

impl IndexArgs {
    pub fn resolve(&self) -> CliResult<IndexConfig> {
        let mut c: IndexConfig = match &self.config {
            Some(p) => load_json(p)?,
            None => IndexConfig::default(),
        };
        if let Some(k) = &self.kind {
            c.kind = k.parse()?;
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(nlist, nprobe, m_sub, nbits, k_half, m_links, ef_construction, ef_search, seed, kmeans_iters);
        Ok(c)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub index: IndexArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_build_index(a: &BuildIndexArgs) -> CliResult<RunReport> {
    let cfg = a.index.resolve()?;
    let mut report = RunReport::new("build-index", &json!({ "index": cfg, "in": a.input, "out": a.out }));
    let db = read_descriptors(&a.input)?;
    let start = Instant::now();
    let index = Index::build(&db, &cfg)?;
    let build_ms = ms_since(start);
    index.write(&a.out)?;
    let mut digests = BTreeMap::new();
    record(&mut report, &mut digests, &a.out)?;
    report.payload = json!({
        "kind": cfg.kind,
        "n": index.len(),
        "dim": index.dim(),
        "footprint": index.footprint(),
        "memory_bytes": index.memory_bytes(),
        "digests": digests,
    });
    report.timing = json!({ "build_ms": build_ms });
    Ok(report)
}

// ---------------------------------------------------------------- search

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Query descriptors; a crop map in the file triggers fusion.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long)]
    pub ef_search: Option<usize>,
    /// How crop results merge: mean, nearest_crop or majority_vote.
    #[arg(long, default_value = "nearest_crop")]
    pub fusion: String,
    /// Per-image extraction time to fold into t_i, in milliseconds.
    #[arg(long)]
    pub t_e_ms: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_search(a: &SearchArgs) -> CliResult<RunReport> {
    let fusion: Fusion = a.fusion.parse().map_err(|e: geoloc::querypipe::PipeError| CliError::usage(e.to_string()))?;
    let config = json!({
        "index": a.index, "queries": a.queries, "k": a.k, "nprobe": a.nprobe,
        "ef_search": a.ef_search, "fusion": fusion, "out": a.out,
    });
    let mut report = RunReport::new("search", &config);
    let index = Index::read(&a.index)?;
    let (queries, crops) = engine::read_queries(&a.queries)?;
    let params = SearchParams {
        nprobe: a.nprobe,
        ef_search: a.ef_search,
    };
    let (results, mut timing) = engine::search_fused(&index, &queries, crops.as_ref(), a.k, &params, fusion)?;
    if let Some(t) = a.t_e_ms {
        timing = timing.with_extraction(t);
    }
    write_results(&a.out, &results)?;
    let mut digests = BTreeMap::new();
    record(&mut report, &mut digests, &a.out)?;
    report.payload = json!({
        "n_queries": results.len(),
        "fused_from_crops": crops.as_ref().map(|c| c.0.len()),
        "fusion": crops.as_ref().map(|_| fusion),
        "memory_bytes": timing.memory_bytes,
        "digests": digests,
    });
    report.timing = serde_json::to_value(&timing).expect("timing serializes");
    Ok(report)
}

// ---------------------------------------------------------------- preprocess

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// Query image container.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// hard_resize, single_query, central_crop or five_crops.
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub db_h: usize,
    #[arg(long)]
    pub db_w: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_preprocess(a: &PreprocessArgs) -> CliResult<RunReport> {
    let policy: CropPolicy = a.policy.parse().map_err(|e: geoloc::querypipe::PipeError| CliError::usage(e.to_string()))?;
    let mut report = RunReport::new("preprocess", a);
    let start = Instant::now();
    let (ids, images, prior) = engine::read_images(&a.input)?;
    if prior.is_some() {
        return Err(CliError::data("input already holds crops"));
    }
    let (crop_ids, crops, map) = engine::crop_queries(&ids, &images, policy, a.db_h, a.db_w)?;
    engine::write_image_file(&a.out, &crop_ids, &crops, Some(&map))?;
    let mut digests = BTreeMap::new();
    record(&mut report, &mut digests, &a.out)?;
    report.payload = json!({
        "policy": policy,
        "n_queries": ids.len(),
        "n_crops": crops.len(),
        "crop_dims": crops.first().map(|c| c.dims()),
        "digests": digests,
    });
    report.timing = json!({ "wall_ms": ms_since(start) });
    Ok(report)
}

// ---------------------------------------------------------------- mine

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    Full,
    Partial,
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct MineArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub db_manifest: PathBuf,
    #[arg(long)]
    pub q_manifest: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 10)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 10.0)]
    pub positive_radius: f64,
    #[arg(long, default_value_t = 25.0)]
    pub negative_min: f64,
    #[arg(long, default_value_t = 1000)]
    pub partial_sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_mine(a: &MineArgs) -> CliResult<RunReport> {
    let cfg = MiningConfig {
        strategy: match a.strategy {
            StrategyArg::Full => Strategy::Full,
            StrategyArg::Partial => Strategy::Partial,
            StrategyArg::Random => Strategy::Random,
        },
        n_neg: a.n_neg,
        positive_radius_m: a.positive_radius,
        negative_min_m: a.negative_min,
        partial_sample: a.partial_sample,
        seed: a.seed,
    };
    let mut report = RunReport::new("mine", a);
    let start = Instant::now();
    let db = read_descriptors(&a.db)?;
    let (queries, crops) = engine::read_queries(&a.queries)?;
    if crops.is_some() {
        return Err(CliError::data("query file holds crops; mining needs one descriptor per query"));
    }
    let db_poses = engine::aligned_poses(&read_manifest(&a.db_manifest)?, Split::Database, db.ids())?;
    let q_poses = engine::aligned_poses(&read_manifest(&a.q_manifest)?, Split::Query, queries.ids())?;
    let mdb = MiningDb::new(&db, &db_poses)?;
    let mined = mine_all(&queries, &q_poses, &mdb, &cfg)?;
    let row_of: std::collections::HashMap<u64, usize> = db.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let q_row: std::collections::HashMap<u64, usize> = queries.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let hardest: Vec<f64> = mined
        .triplets
        .iter()
        .map(|t| {
            let q = queries.row(q_row[&t.query_id]);
            t.negative_ids
                .iter()
                .map(|id| sq_l2(q, db.row(row_of[id])) as f64)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mean_hardest = if hardest.is_empty() { None } else { Some(hardest.iter().sum::<f64>() / hardest.len() as f64) };
    let mut text = String::new();
    for t in &mined.triplets {
        text.push_str(&serde_json::to_string(t).expect("triplet serializes"));
        text.push('\n');
    }
    write_file(&a.out, text.as_bytes())?;
    let mut digests = BTreeMap::new();
    record(&mut report, &mut digests, &a.out)?;
    report.payload = json!({
        "config": cfg,
        "n_triplets": mined.triplets.len(),
        "without_positive": mined.without_positive,
        "insufficient_pool": mined.insufficient_pool,
        "mean_hardest_negative_sq_dist": mean_hardest,
        "digests": digests,
    });
    report.timing = json!({ "wall_ms": ms_since(start) });
    Ok(report)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub db_manifest: PathBuf,
    #[arg(long)]
    pub q_manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_M)]
    pub threshold: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    pub n: Vec<usize>,
    #[arg(long)]
    pub heading_max: Option<f64>,
    /// Thresholds for the recall@1 sweep, in metres.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,15,20,25,30,40,50,75,100")]
    pub sweep: Vec<f64>,
    /// Largest N for the recall@N curve; clipped to the hits per query.
    #[arg(long, default_value_t = 100)]
    pub n_max: usize,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for threshold_sweep.csv and recall_at_n.csv.
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<RunReport> {
    let cfg = EvalConfig {
        threshold_m: a.threshold,
        n_list: a.n.clone(),
        heading_max_deg: a.heading_max,
    };
    cfg.validate()?;
    let mut report = RunReport::new("eval", a);
    let start = Instant::now();
    let results = read_results(&a.results)?;
    let db = read_manifest(&a.db_manifest)?.poses(Split::Database);
    let qs = read_manifest(&a.q_manifest)?.poses(Split::Query);
    let summary = evaluate(&results, &qs, &db, &cfg, &a.sweep, a.n_max, a.curves_dir.as_deref())?;
    let mut digests = BTreeMap::new();
    write_file(&a.out, format!("{}\n", serde_json::to_string_pretty(&summary.report).expect("report serializes")).as_bytes())?;
    record(&mut report, &mut digests, &a.out)?;
    for p in &summary.curve_files {
        record(&mut report, &mut digests, p)?;
    }
    report.payload = json!({
        "recall_at": summary.report.recall_at,
        "upper_bound": summary.report.upper_bound,
        "queries_without_positive": summary.report.queries_without_positive,
        "heading_unchecked_pairs": summary.report.heading_unchecked_pairs,
        "digests": digests,
    });
    report.timing = json!({ "wall_ms": ms_since(start) });
    Ok(report)
}

pub struct EvalSummary {
    pub report: geoloc::geoeval::EvalReport,
    pub curve_files: Vec<PathBuf>,
}

/// Recall@N report, plus sweep and recall@N curves written as CSV when a
/// directory is given.
pub fn evaluate(
    results: &[geoloc::index::SearchResult],
    queries: &geoloc::geoeval::PoseTable,
    db: &geoloc::geoeval::PoseTable,
    cfg: &EvalConfig,
    sweep: &[f64],
    n_max: usize,
    curves_dir: Option<&Path>,
) -> CliResult<EvalSummary> {
    let report = recall_at_n(results, queries, db, cfg)?;
    let mut curve_files = Vec::new();
    if let Some(dir) = curves_dir {
        let depth = results.iter().map(|r| r.k_requested).max().unwrap_or(1);
        let n_max = n_max.min(depth).max(1);
        let sweep_csv = threshold_sweep(results, queries, db, sweep, cfg.heading_max_deg)?.to_csv();
        let curve_csv = recall_curve(results, queries, db, cfg, n_max)?.curve.to_csv();
        for (name, body) in [("threshold_sweep.csv", sweep_csv), ("recall_at_n.csv", curve_csv)] {
            let p = dir.join(name);
            write_file(&p, body.as_bytes())?;
            curve_files.push(p);
        }
    }
    Ok(EvalSummary { report, curve_files })
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Manifest with database and query poses, for geographic recall.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "flat,ivf,pq,ivfpq,multiindex,hnsw")]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    pub nprobe_sweep: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,64")]
    pub ef_sweep: Vec<usize>,
    #[command(flatten)]
    pub index: IndexArgs,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_M)]
    pub threshold: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    pub n: Vec<usize>,
    /// CSV output, one row per configuration.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<RunReport> {
    let base = a.index.resolve()?;
    let kinds: Vec<IndexKind> = a.kinds.iter().map(|k| k.parse()).collect::<Result<_, _>>()?;
    let eval_cfg = EvalConfig {
        threshold_m: a.threshold,
        n_list: a.n.clone(),
        heading_max_deg: None,
    };
    eval_cfg.validate()?;
    if a.k == 0 {
        return Err(CliError::usage("k must be at least 1"));
    }
    let mut report = RunReport::new("bench", a);
    let db = read_descriptors(&a.db)?;
    let (queries, _) = engine::read_queries(&a.queries)?;
    let geo = match &a.manifest {
        Some(p) => {
            let m = read_manifest(p)?;
            Some((m.poses(Split::Query), m.poses(Split::Database)))
        }
        None => None,
    };
    let exact = exact_top1(&db, &queries);
    let mut header = vec!["kind", "nprobe", "ef_search", "recall_vs_exact"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    if geo.is_some() {
        header.extend(a.n.iter().map(|n| format!("recall@{n}")));
    }
    header.extend(["memory_bytes", "build_ms", "t_m_ms", "t_m_per_query_ms"].map(String::from));
    let mut csv = header.join(",") + "\n";
    let mut rows = Vec::new();
    for kind in kinds {
        let cfg = IndexConfig { kind, ..base.clone() };
        let start = Instant::now();
        let index = Index::build(&db, &cfg)?;
        let build_ms = ms_since(start);
        let sweeps: Vec<SearchParams> = match kind {
            IndexKind::Ivf | IndexKind::Ivfpq => a
                .nprobe_sweep
                .iter()
                .filter(|&&np| np <= cfg.nlist)
                .map(|&np| SearchParams::nprobe(np))
                .collect(),
            IndexKind::Hnsw => a.ef_sweep.iter().map(|&ef| SearchParams::ef_search(ef)).collect(),
            _ => vec![SearchParams::default()],
        };
        for params in sweeps {
            let (results, timing) = index.search(&queries, a.k, &params)?;
            let rve = recall_against(&results, &exact);
            let mut cells = vec![
                kind.name().to_string(),
                params.nprobe.map_or(String::new(), |v| v.to_string()),
                params.ef_search.map_or(String::new(), |v| v.to_string()),
                format!("{rve}"),
            ];
            let mut geo_recall = Value::Null;
            if let Some((qp, dp)) = &geo {
                let r = recall_at_n(&results, qp, dp, &eval_cfg)?;
                cells.extend(a.n.iter().map(|n| format!("{}", r.recall_at[n])));
                geo_recall = serde_json::to_value(&r.recall_at).expect("recall serializes");
            }
            cells.extend([
                timing.memory_bytes.to_string(),
                format!("{build_ms:.3}"),
                format!("{:.3}", timing.t_m_ms),
                format!("{:.6}", timing.t_m_per_query_ms),
            ]);
            csv.push_str(&(cells.join(",") + "\n"));
            rows.push(json!({
                "kind": kind, "nprobe": params.nprobe, "ef_search": params.ef_search,
                "recall_vs_exact": rve, "recall_at": geo_recall, "memory_bytes": timing.memory_bytes,
                "timing": { "build_ms": build_ms, "t_m_ms": timing.t_m_ms },
            }));
        }
    }
    write_file(&a.out, csv.as_bytes())?;
    report.output(&a.out);
    let timing: Vec<Value> = rows.iter_mut().map(|r| r.as_object_mut().unwrap().remove("timing").unwrap()).collect();
    report.payload = json!({ "rows": rows });
    report.timing = json!({ "rows": timing });
    Ok(report)
}
