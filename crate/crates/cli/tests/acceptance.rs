//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use geoloc::aggregation::{gem, gem_pooled, mac, mac_pooled, netvlad, spoc, FeatureMap, Pooling, VladParams};
use geoloc::dataio::{synth_generate, synth_images, ImageSpec, Split, SynthSpec};
use geoloc::geoeval::{
    inject_distractors, recall_at_n, threshold_sweep, EvalConfig, FarPosePolicy, GeoPose, PoseTable,
};
use geoloc::index::{
    exact_top1, recall_against, Footprint, Index, IndexConfig, IndexKind, PqCodec, SearchParams, SearchResult,
};
use geoloc::mining::{mine_all, MiningConfig, MiningDb, Strategy};
use geoloc::numerics::{l2_norm, seeded_rng, sq_l2};
use geoloc::querypipe::{apply_policy, flops_scale, fuse_nearest_crop, CropPolicy, Image};
use geoloc::{DescriptorSet, Matrix};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn uniform_set(n: usize, dim: usize, seed: u64, id0: u64) -> DescriptorSet {
    let mut rng = seeded_rng(seed);
    let data = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    DescriptorSet::new((id0..id0 + n as u64).collect(), Matrix::new(n, dim, data).unwrap()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Median batch matching time over `reps` runs after one warm-up.
fn median_t_m(index: &Index, q: &DescriptorSet, k: usize, params: &SearchParams, reps: usize) -> f64 {
    index.search(q, k, params).unwrap();
    median((0..reps).map(|_| index.search(q, k, params).unwrap().1.t_m_ms).collect())
}

fn same_rankings(a: &[SearchResult], b: &[SearchResult]) -> Result<(), String> {
    for (x, y) in a.iter().zip(b) {
        let ids = |r: &SearchResult| r.hits.iter().map(|h| (h.id, h.sq_dist.to_bits())).collect::<Vec<_>>();
        ensure!(ids(x) == ids(y), "query {}: rankings differ", x.query_id);
    }
    ensure!(a.len() == b.len(), "result counts differ");
    Ok(())
}

// 1 ---------------------------------------------------------------------------

fn pq_memory_factor() -> Outcome {
    let (n, dim) = (1000u64, 128u64);
    let flat = Footprint::flat(n, dim);
    let pq = Footprint::pq(n, dim, 8, 8);
    let raw_per_vector = flat.vectors / n;
    let code_per_vector = pq.codes / n;
    ensure!(raw_per_vector == 512, "raw bytes per vector {raw_per_vector}");
    ensure!(code_per_vector == 8, "code bytes per vector {code_per_vector}");
    ensure!(raw_per_vector.is_multiple_of(code_per_vector) && raw_per_vector / code_per_vector == 64, "ratio not 64");
    // the built index accounts the same way
    let set = uniform_set(n as usize, dim as usize, 1, 0);
    let cfg = IndexConfig {
        kind: IndexKind::Pq,
        kmeans_iters: 5,
        ..IndexConfig::default()
    };
    let idx = Index::build(&set, &cfg).map_err(|e| e.to_string())?;
    let codec_bytes = PqCodec::train(set.matrix(), 8, 8, 0, 2).map_err(|e| e.to_string())?.code_bytes() as u64;
    ensure!(idx.footprint().codes == n * 8 && codec_bytes == 8, "built index stores {} code bytes", idx.footprint().codes);
    Ok(format!("{raw_per_vector} B raw / {code_per_vector} B code = 64"))
}

// 2 ---------------------------------------------------------------------------

fn netvlad_footprint() -> Outcome {
    let (n, dim) = (1_050_000u64, 65_536u64);
    let start = Instant::now();
    let fp = Footprint::estimate(&IndexConfig::new(IndexKind::Flat), n, dim);
    let us = start.elapsed().as_secs_f64() * 1e6;
    let want = 1_050_000u64 * 65_536 * 4;
    ensure!(fp.vectors == want, "vectors {} != {want}", fp.vectors);
    ensure!(fp.codes == 0 && fp.centroids == 0 && fp.links == 0, "flat carries extra structures: {fp:?}");
    Ok(format!(
        "descriptor storage {} B ({:.1} GiB), id table {} B, computed in {us:.1} us",
        fp.vectors,
        fp.vectors as f64 / (1u64 << 30) as f64,
        fp.ids
    ))
}

// 3 ---------------------------------------------------------------------------

fn matching_time_linearity() -> Outcome {
    let q = uniform_set(100, 256, 30, 1_000_000);
    let small = Index::build(&uniform_set(10_000, 256, 31, 0), &IndexConfig::new(IndexKind::Flat)).unwrap();
    let large = Index::build(&uniform_set(20_000, 256, 32, 0), &IndexConfig::new(IndexKind::Flat)).unwrap();
    let p = SearchParams::default();
    let t10 = median_t_m(&small, &q, 1, &p, 5);
    let t20 = median_t_m(&large, &q, 1, &p, 5);
    let ratio = t20 / t10;
    ensure!((1.6..=2.6).contains(&ratio), "ratio {ratio:.3} (t_m {t10:.2} ms vs {t20:.2} ms)");
    Ok(format!("t_m 10k {t10:.2} ms, 20k {t20:.2} ms, ratio {ratio:.3}"))
}

// 4 ---------------------------------------------------------------------------

fn ivf_speed_recall() -> Outcome {
    let data = synth_generate(&SynthSpec {
        n_db: 50_000,
        n_q: 1000,
        dim: 128,
        n_places: 2000,
        seed: 40,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let flat = Index::build(&data.db, &IndexConfig::new(IndexKind::Flat)).unwrap();
    let cfg = IndexConfig {
        kind: IndexKind::Ivf,
        nlist: 256,
        nprobe: 4,
        seed: 41,
        ..IndexConfig::default()
    };
    let ivf = Index::build(&data.db, &cfg).map_err(|e| e.to_string())?;
    let p = SearchParams::default();
    let t_flat = median_t_m(&flat, &data.queries, 1, &p, 3);
    let t_ivf = median_t_m(&ivf, &data.queries, 1, &p, 3);
    let (res, _) = ivf.search(&data.queries, 1, &p).unwrap();
    let recall = recall_against(&res, &exact_top1(&data.db, &data.queries));
    let speedup = t_flat / t_ivf;
    ensure!(speedup >= 5.0 && recall >= 0.90, "speedup {speedup:.1}x, recall {recall:.4}");
    Ok(format!("speedup {speedup:.1}x (flat {t_flat:.1} ms, ivf {t_ivf:.1} ms), recall@1 vs exact {recall:.4}"))
}

// 5 ---------------------------------------------------------------------------

/// Every subvector takes one of `levels` half-integer patterns, so a PQ
/// codebook with at least `levels` centroids reproduces the data exactly.
fn lossless_set(n: usize, dim: usize, m_sub: usize, levels: usize, seed: u64, id0: u64) -> DescriptorSet {
    let dsub = dim / m_sub;
    let mut rng = seeded_rng(seed);
    let protos: Vec<Vec<Vec<f32>>> = (0..m_sub)
        .map(|_| (0..levels).map(|_| (0..dsub).map(|_| rng.random_range(-4i32..=4) as f32 * 0.5).collect()).collect())
        .collect();
    let mut rng = seeded_rng(seed + 1000);
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for p in &protos {
            data.extend_from_slice(&p[rng.random_range(0..levels)]);
        }
    }
    DescriptorSet::new((id0..id0 + n as u64).collect(), Matrix::new(n, dim, data).unwrap()).unwrap()
}

fn exactness() -> Outcome {
    let db = uniform_set(1000, 64, 50, 0);
    let q = uniform_set(100, 64, 51, 10_000);
    let k = 20;
    let (want, _) = Index::build(&db, &IndexConfig::new(IndexKind::Flat)).unwrap().search(&q, k, &SearchParams::default()).unwrap();

    let ivf_cfg = IndexConfig {
        kind: IndexKind::Ivf,
        nlist: 32,
        nprobe: 32,
        seed: 52,
        ..IndexConfig::default()
    };
    let ivf = Index::build(&db, &ivf_cfg).unwrap();
    same_rankings(&ivf.search(&q, k, &SearchParams::nprobe(32)).unwrap().0, &want).map_err(|e| format!("ivf: {e}"))?;

    let hnsw_cfg = IndexConfig {
        kind: IndexKind::Hnsw,
        m_links: 8,
        ef_construction: 40,
        seed: 53,
        ..IndexConfig::default()
    };
    let hnsw = Index::build(&db, &hnsw_cfg).unwrap();
    same_rankings(&hnsw.search(&q, k, &SearchParams::ef_search(1000)).unwrap().0, &want).map_err(|e| format!("hnsw: {e}"))?;

    let ldb = lossless_set(1000, 64, 8, 16, 54, 0);
    let lq = lossless_set(100, 64, 8, 16, 54, 10_000);
    let (lwant, _) = Index::build(&ldb, &IndexConfig::new(IndexKind::Flat)).unwrap().search(&lq, k, &SearchParams::default()).unwrap();
    let pq_cfg = IndexConfig {
        kind: IndexKind::Pq,
        m_sub: 8,
        nbits: 8,
        seed: 55,
        ..IndexConfig::default()
    };
    let pq = Index::build(&ldb, &pq_cfg).unwrap();
    same_rankings(&pq.search(&lq, k, &SearchParams::default()).unwrap().0, &lwant).map_err(|e| format!("pq: {e}"))?;
    Ok("ivf(nprobe=nlist), hnsw(ef=1000>=n), lossless pq: top-20 ids and distances bit-identical to flat".into())
}

// 6 ---------------------------------------------------------------------------

fn flops_scaling() -> Outcome {
    // 0.4 and 0.16 are not representable in binary; the squared product
    // lands within one rounding step of the nearest double to 0.16
    let tol = 1e-15;
    let a = flops_scale(0.4);
    let b = flops_scale(0.8);
    ensure!((a - 0.16).abs() <= tol, "flops_scale(0.4) = {a:.17}");
    ensure!((b - 0.64).abs() <= tol, "flops_scale(0.8) = {b:.17}");
    ensure!(flops_scale(0.5) == 0.25 && flops_scale(1.0) == 1.0, "dyadic ratios must be exact");
    Ok(format!("0.4 -> {a:.17}, 0.8 -> {b:.17} (|err| <= {tol:e}); savings at 80%: {:.2}", 1.0 - b))
}

// 7 ---------------------------------------------------------------------------

fn random_map(rng: &mut impl Rng, lo: f32, hi: f32) -> FeatureMap {
    let c = rng.random_range(1..=12);
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

fn permute_positions(f: &FeatureMap, rng: &mut impl Rng) -> FeatureMap {
    let n = f.positions();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut data = vec![0f32; f.data().len()];
    for c in 0..f.channels() {
        let plane = f.plane(c);
        for (dst, &src) in perm.iter().enumerate() {
            data[c * n + dst] = plane[src];
        }
    }
    FeatureMap::new(f.channels(), f.height(), f.width(), data).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn aggregation_identities() -> Outcome {
    let mut rng = seeded_rng(70);
    let cases = 200;
    let (mut worst_p1, mut worst_pmax, mut worst_perm) = (0f64, 0f64, 0f64);
    for case in 0..cases {
        let f = random_map(&mut rng, 0.0, 3.0);
        let d = max_abs_diff(&gem_pooled(&f, 1.0, 1e-6).unwrap(), &geoloc::aggregation::spoc_pooled(&f))
            .max(max_abs_diff(&gem(&f, 1.0, 1e-6).unwrap().values, &spoc(&f).values));
        worst_p1 = worst_p1.max(d);
        ensure!(d <= 1e-6, "case {case}: gem(p=1) differs from spoc by {d:e}");

        let g = random_map(&mut rng, 0.5, 2.0);
        let d = max_abs_diff(&gem_pooled(&g, 1000.0, 1e-6).unwrap(), &mac_pooled(&g))
            .max(max_abs_diff(&gem(&g, 1000.0, 1e-6).unwrap().values, &mac(&g).values));
        worst_pmax = worst_pmax.max(d);
        ensure!(d <= 1e-2, "case {case}: gem(p=1000) differs from mac by {d:e}");

        let v = random_map(&mut rng, -1.0, 1.0);
        let k = rng.random_range(2..=8);
        let params = VladParams::seeded(k, v.channels(), 10.0, case as u64).unwrap();
        let out = netvlad(&v, &params).unwrap();
        ensure!(out.dim() == k * v.channels(), "case {case}: netvlad dim {} != {}", out.dim(), k * v.channels());
        let norm = l2_norm(&out.values);
        ensure!((norm - 1.0).abs() <= 1e-5, "case {case}: netvlad norm {norm}");

        let p = permute_positions(&v, &mut rng);
        let pooled = |m: &FeatureMap| -> Vec<Vec<f32>> {
            vec![
                spoc(m).values,
                mac(m).values,
                gem(&FeatureMap::new(m.channels(), m.height(), m.width(), m.data().iter().map(|x| x.abs()).collect()).unwrap(), 3.0, 1e-6)
                    .unwrap()
                    .values,
                netvlad(m, &params).unwrap().values,
            ]
        };
        for (a, b) in pooled(&v).iter().zip(pooled(&p)) {
            let d = max_abs_diff(a, &b);
            worst_perm = worst_perm.max(d);
            ensure!(d <= 1e-5, "case {case}: permutation changed a descriptor by {d:e}");
        }
    }
    // the Pooling dispatch agrees with the direct functions
    let f = random_map(&mut rng, 0.0, 1.0);
    let agg = geoloc::aggregation::Aggregator::from_pooling(&Pooling::Mac, f.channels()).unwrap();
    ensure!(agg.apply(&f).unwrap() == mac(&f), "Pooling::Mac dispatch differs from mac");
    Ok(format!(
        "{cases} cases each; max |gem1-spoc| {worst_p1:.1e}, max |gem1000-mac| {worst_pmax:.1e}, max permutation drift {worst_perm:.1e}"
    ))
}

// 8 ---------------------------------------------------------------------------

fn mining_ordering() -> Outcome {
    let data = synth_generate(&SynthSpec {
        n_db: 10_000,
        n_q: 500,
        dim: 64,
        n_places: 1000,
        confusion_rate: 0.2,
        seed: 80,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let db_poses = data.manifest.poses(Split::Database);
    let q_poses = data.manifest.poses(Split::Query);
    let mdb = MiningDb::new(&data.db, &db_poses).map_err(|e| e.to_string())?;
    let run = |strategy: Strategy, sample: usize| {
        let cfg = MiningConfig {
            strategy,
            partial_sample: sample,
            seed: 81,
            ..MiningConfig::default()
        };
        mine_all(&data.queries, &q_poses, &mdb, &cfg).unwrap()
    };
    let full = run(Strategy::Full, 1000);
    let partial = run(Strategy::Partial, 1000);
    let random = run(Strategy::Random, 1000);
    let whole = run(Strategy::Partial, data.db.len());
    ensure!(whole == full, "partial mining over the whole database differs from full mining");

    let row: HashMap<u64, usize> = data.db.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let qrow: HashMap<u64, usize> = data.queries.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let hardest = |r: &geoloc::mining::MiningReport| -> BTreeMap<u64, f64> {
        r.triplets
            .iter()
            .map(|t| {
                let q = data.queries.row(qrow[&t.query_id]);
                let d = t.negative_ids.iter().map(|id| sq_l2(q, data.db.row(row[id])) as f64).fold(f64::INFINITY, f64::min);
                (t.query_id, d)
            })
            .collect()
    };
    let (hf, hp, hr) = (hardest(&full), hardest(&partial), hardest(&random));
    let common: Vec<u64> = hf.keys().filter(|q| hp.contains_key(q) && hr.contains_key(q)).copied().collect();
    ensure!(common.len() >= 400, "only {} queries mined by every strategy", common.len());
    let mean = |h: &BTreeMap<u64, f64>| common.iter().map(|q| h[q]).sum::<f64>() / common.len() as f64;
    let (mf, mp, mr) = (mean(&hf), mean(&hp), mean(&hr));
    ensure!(mf <= mp && mp <= mr, "means full {mf:.4}, partial {mp:.4}, random {mr:.4}");
    Ok(format!(
        "mean hardest-negative sq distance over {} queries: full {mf:.4} <= partial {mp:.4} <= random {mr:.4}; partial(|db|) == full",
        common.len()
    ))
}

// 9 ---------------------------------------------------------------------------

fn metric_suite() -> Outcome {
    // monotonicity on real search output with headings
    let data = synth_generate(&SynthSpec {
        n_db: 3000,
        n_q: 300,
        dim: 32,
        n_places: 300,
        descriptor_noise: 0.3,
        confusion_rate: 0.3,
        seed: 90,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let db = data.manifest.poses(Split::Database);
    let qs = data.manifest.poses(Split::Query);
    let index = Index::build(&data.db, &IndexConfig::new(IndexKind::Flat)).unwrap();
    let (res, _) = index.search(&data.queries, 100, &SearchParams::default()).unwrap();
    let ns: Vec<usize> = (1..=100).collect();
    let cfg = EvalConfig {
        n_list: ns.clone(),
        ..EvalConfig::default()
    };
    let plain = recall_at_n(&res, &qs, &db, &cfg).map_err(|e| e.to_string())?;
    let vals: Vec<f64> = plain.recall_at.values().copied().collect();
    ensure!(vals.windows(2).all(|w| w[0] <= w[1]), "recall not monotone in N");
    ensure!(vals.iter().all(|&r| r <= plain.upper_bound), "recall above the upper bound");
    let sweep: Vec<f64> = (1..=100).map(f64::from).collect();
    let curve = threshold_sweep(&res, &qs, &db, &sweep, None).map_err(|e| e.to_string())?;
    ensure!(curve.recall.windows(2).all(|w| w[0] <= w[1]), "recall not monotone in threshold");
    ensure!(curve.upper_bound.windows(2).all(|w| w[0] <= w[1]), "upper bound not monotone in threshold");
    for limit in [10.0, 45.0, 90.0, 180.0] {
        let h = recall_at_n(&res, &qs, &db, &EvalConfig { heading_max_deg: Some(limit), ..cfg.clone() }).unwrap();
        for n in &ns {
            ensure!(h.recall_at[n] <= plain.recall_at[n], "heading limit {limit} raised recall@{n}");
        }
        ensure!(h.upper_bound <= plain.upper_bound, "heading limit raised the upper bound");
    }

    // planted coverage: exactly 88% of 2000 query sites get a database image
    // within 5 m; the rest have nothing within 50 m
    let n_q = 2000;
    let covered = n_q * 88 / 100;
    let mut rng = seeded_rng(91);
    let mut order: Vec<usize> = (0..n_q).collect();
    order.shuffle(&mut rng);
    let origin = GeoPose::new(45.0, 7.0, None).unwrap();
    let mut q_ids = Vec::new();
    let mut q_poses = Vec::new();
    let mut db_ids = Vec::new();
    let mut db_poses = Vec::new();
    for (slot, &site) in order.iter().enumerate() {
        let (r, c) = ((site / 50) as f64, (site % 50) as f64);
        let q = origin.offset_m(r * 300.0, c * 300.0);
        q_ids.push(100_000 + site as u64);
        q_poses.push(q);
        let (dist, bearing) = if slot < covered {
            (rng.random_range(0.0..4.5), rng.random_range(0.0..std::f64::consts::TAU))
        } else {
            (rng.random_range(60.0..120.0), rng.random_range(0.0..std::f64::consts::TAU))
        };
        db_ids.push(site as u64);
        db_poses.push(q.offset_m(dist * bearing.cos(), dist * bearing.sin()));
    }
    let qt = PoseTable::new(q_ids.clone(), q_poses).unwrap();
    let dt = PoseTable::new(db_ids.clone(), db_poses).unwrap();
    // one hit per query, pointing at its own site's database image
    let results: Vec<SearchResult> = q_ids
        .iter()
        .map(|&q| SearchResult {
            query_id: q,
            hits: vec![geoloc::index::Hit { id: q - 100_000, sq_dist: 0.0 }],
            k_requested: 1,
        })
        .collect();
    let c = threshold_sweep(&results, &qt, &dt, &[5.0], None).unwrap();
    let ub = c.upper_bound[0];
    let planted = covered as f64 / n_q as f64;
    ensure!((ub - planted).abs() <= 0.01, "upper bound {ub:.4} vs planted {planted:.4}");
    ensure!((ub - 0.88).abs() <= 0.01, "upper bound {ub:.4} not within 1% of 0.88");
    Ok(format!(
        "recall monotone in N (1..100) and threshold (1..100 m); heading limits never raise recall; planted upper bound {ub:.4} at 5 m over {n_q} queries"
    ))
}

// 10 --------------------------------------------------------------------------

fn pooled_set(ids: &[u64], images: &[Image]) -> DescriptorSet {
    let agg = geoloc::aggregation::Aggregator::from_pooling(&Pooling::Gem { p: 3.0, eps: 1e-6 }, images[0].channels()).unwrap();
    let rows: Vec<Vec<f32>> = images.iter().map(|i| agg.apply(&i.to_feature_map()).unwrap().values).collect();
    DescriptorSet::new(ids.to_vec(), Matrix::from_rows(&rows).unwrap()).unwrap()
}

fn prepost_equivalence() -> Outcome {
    let spec = SynthSpec {
        n_db: 400,
        n_q: 60,
        n_places: 40,
        descriptor_noise: 0.1,
        seed: 100,
        ..SynthSpec::default()
    };
    let same = synth_images(&spec, &ImageSpec::default()).map_err(|e| e.to_string())?;
    let (h, w) = (ImageSpec::default().db_h, ImageSpec::default().db_w);
    let db = pooled_set(&same.db_ids, &same.db);
    let flat = Index::build(&db, &IndexConfig::new(IndexKind::Flat)).unwrap();
    let mut outputs = Vec::new();
    for policy in [CropPolicy::HardResize, CropPolicy::SingleQuery, CropPolicy::CentralCrop] {
        let crops: Vec<Image> = same
            .queries
            .iter()
            .map(|q| {
                let mut set = apply_policy(policy, q, h, w).unwrap();
                assert_eq!(set.crops.len(), 1);
                set.crops.remove(0)
            })
            .collect();
        for (c, q) in crops.iter().zip(&same.queries) {
            ensure!(c.pixels() == q.pixels() && c.dims() == q.dims(), "{} altered pixels", policy.name());
        }
        let (res, _) = flat.search(&pooled_set(&same.q_ids, &crops), 10, &SearchParams::default()).unwrap();
        outputs.push((policy, res));
    }
    for (p, r) in &outputs[1..] {
        same_rankings(r, &outputs[0].1).map_err(|e| format!("{}: {e}", p.name()))?;
    }

    // five crops of larger queries: fused distances equal the per-id
    // minimum over crops, so they lower-bound every crop distance
    let big = synth_images(&spec, &ImageSpec { q_h: 36, q_w: 48, ..ImageSpec::default() }).map_err(|e| e.to_string())?;
    let k = 10;
    let mut checked = 0;
    for (qid, q) in big.q_ids.iter().zip(&big.queries) {
        let crops = apply_policy(CropPolicy::FiveCrops, q, h, w).unwrap().crops;
        ensure!(crops.len() == 5, "five_crops produced {} crops", crops.len());
        let crop_ids: Vec<u64> = (0..5).collect();
        let (per_crop, _) = flat.search(&pooled_set(&crop_ids, &crops), k, &SearchParams::default()).unwrap();
        let fused = fuse_nearest_crop(&per_crop, k).map_err(|e| e.to_string())?;
        let mut best: HashMap<u64, f32> = HashMap::new();
        for r in &per_crop {
            for hit in &r.hits {
                let e = best.entry(hit.id).or_insert(f32::INFINITY);
                *e = e.min(hit.sq_dist);
            }
        }
        let mut oracle: Vec<(f32, u64)> = best.iter().map(|(&id, &d)| (d, id)).collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        oracle.truncate(k);
        let got: Vec<(f32, u64)> = fused.hits.iter().map(|h| (h.sq_dist, h.id)).collect();
        ensure!(got == oracle, "query {qid}: fused ranking differs from the per-id minimum");
        for r in &per_crop {
            for hit in &r.hits {
                if let Some(f) = fused.hits.iter().find(|f| f.id == hit.id) {
                    ensure!(f.sq_dist <= hit.sq_dist, "query {qid}: fused distance above a crop distance");
                }
            }
            ensure!(fused.hits[0].sq_dist <= r.hits[0].sq_dist, "query {qid}: fused top-1 worse than a crop top-1");
            checked += 1;
        }
    }
    Ok(format!(
        "hard_resize/single_query/central_crop pixel- and ranking-identical on {} queries; nearest-crop bound held on {checked} crop results",
        same.queries.len()
    ))
}

// 11 --------------------------------------------------------------------------

fn distractor_trend() -> Outcome {
    let spec = SynthSpec {
        n_db: 1000,
        n_q: 300,
        dim: 64,
        n_places: 100,
        descriptor_noise: 0.1,
        seed: 110,
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec).map_err(|e| e.to_string())?;
    let db_table = data.manifest.poses(Split::Database);
    let qs = data.manifest.poses(Split::Query);
    let db_poses: Vec<GeoPose> = data.db.ids().iter().map(|&id| *db_table.get(id).unwrap()).collect();

    // look-alike distractors: database descriptors with fresh noise, placed
    // on a ring far outside the evaluation area; the x10 set is a prefix of
    // the x100 set
    let total = 99 * spec.n_db;
    let mut rng = seeded_rng(111);
    let mut rows = Vec::with_capacity(total);
    for _ in 0..total {
        let src = data.db.row(rng.random_range(0..data.db.len()));
        let mut v: Vec<f32> = src.iter().map(|&x| x + rng.random_range(-0.2f32..0.2)).collect();
        geoloc::numerics::l2_normalize_in_place(&mut v);
        rows.push(v);
    }
    let id0 = 10_000_000u64;
    let center = GeoPose::new(45.06, 7.67, None).unwrap();
    let policy = FarPosePolicy::Ring { center, radius_m: 50_000.0 };
    let cfg = EvalConfig::default();
    let mut recalls = Vec::new();
    for scale in [1usize, 10, 100] {
        let n_extra = (scale - 1) * spec.n_db;
        let (db, poses) = if n_extra == 0 {
            (data.db.clone(), db_poses.clone())
        } else {
            let extra = DescriptorSet::new((id0..id0 + n_extra as u64).collect(), Matrix::from_rows(&rows[..n_extra]).unwrap()).unwrap();
            inject_distractors(&data.db, &db_poses, &extra, &policy, &qs, cfg.threshold_m).map_err(|e| e.to_string())?
        };
        let table = PoseTable::new(db.ids().to_vec(), poses).unwrap();
        let index = Index::build(&db, &IndexConfig::new(IndexKind::Flat)).unwrap();
        let (res, _) = index.search(&data.queries, 20, &SearchParams::default()).unwrap();
        let r = recall_at_n(&res, &qs, &table, &cfg).map_err(|e| e.to_string())?;
        recalls.push((scale, db.len(), r.recall_at[&1]));
    }
    let desc = recalls.iter().map(|(s, n, r)| format!("x{s} ({n}): {r:.4}")).collect::<Vec<_>>().join(", ");
    ensure!(recalls.windows(2).all(|w| w[1].2 <= w[0].2), "recall@1 increased: {desc}");
    Ok(format!("recall@1 {desc}"))
}

// 12 --------------------------------------------------------------------------

const PIPELINE_CONFIG: &str = r#"{
  "synth": {"n_db": 400, "n_q": 40, "n_places": 40, "seed": 3, "confusion_rate": 0.2},
  "images": {"q_h": 36, "q_w": 48},
  "aggregation": {"method": "netvlad", "clusters": 4, "seed": 2},
  "projection": {"method": "pca", "out_dim": 16, "whiten": true},
  "index": {"kind": "hnsw", "m_links": 8, "seed": 4},
  "crop_policy": "five_crops",
  "fusion": "majority_vote"
}"#;

fn cli_script() -> Vec<Vec<&'static str>> {
    let s = |x: &'static str| x.split_whitespace().collect::<Vec<_>>();
    vec![
        s("synth --n-db 3000 --n-q 200 --dim 64 --n-places 300 --confusion 0.2 --seed 11 --out-dir data"),
        s("synth --images --n-db 300 --n-q 40 --n-places 30 --q-h 36 --q-w 48 --seed 12 --out-dir img"),
        s("preprocess --in img/q_images.vgbd --policy five_crops --db-h 24 --db-w 32 --out img/crops.vgbd"),
        s("aggregate --in img/db_images.vgbd --pooling netvlad --clusters 8 --seed 3 --out img/db.vgbd"),
        s("aggregate --in img/crops.vgbd --pooling netvlad --clusters 8 --seed 3 --out img/q.vgbd"),
        s("pca --in img/db.vgbd --out-dim 32 --whiten --model-out img/pca.vgbd --out img/db_pca.vgbd"),
        s("pca --in img/q.vgbd --model img/pca.vgbd --out img/q_pca.vgbd"),
        s("build-index --kind hnsw --m-links 8 --seed 5 --in img/db_pca.vgbd --out img/db.hnsw"),
        s("search --index img/db.hnsw --queries img/q_pca.vgbd --fusion majority_vote --out img/res.jsonl"),
        s("build-index --kind ivfpq --nlist 32 --m-sub 8 --nbits 8 --seed 7 --in data/db.vgbd --out data/db.ivfpq"),
        s("build-index --kind multiindex --k-half 16 --seed 7 --in data/db.vgbd --out data/db.mi"),
        s("search --index data/db.ivfpq --queries data/queries.vgbd --nprobe 4 --out data/res.jsonl"),
        s("search --index data/db.mi --queries data/queries.vgbd --k 5 --out data/res_mi.jsonl"),
        s("eval --results data/res.jsonl --db-manifest data/db.csv --q-manifest data/q.csv --heading-max 90 --out data/eval.json --curves-dir data/curves"),
        s("mine --db data/db.vgbd --queries data/queries.vgbd --db-manifest data/db.csv --q-manifest data/q.csv --strategy partial --partial-sample 500 --seed 9 --out data/partial.jsonl"),
        s("mine --db data/db.vgbd --queries data/queries.vgbd --db-manifest data/db.csv --q-manifest data/q.csv --strategy random --seed 9 --out data/random.jsonl"),
        s("bench --db data/db.vgbd --queries data/queries.vgbd --manifest data/manifest.csv --nlist 32 --seed 3 --out data/bench.csv"),
        s("pipeline --config pipeline.json --work-dir work"),
    ]
}

/// Drops wall-clock columns from a bench CSV.
fn strip_bench_timing(csv: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].ends_with("_ms")).collect();
    std::iter::once(header)
        .chain(lines.map(|l| l.split(',').collect()))
        .map(|cells| keep.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
        }
    }
}

/// Runs the script in a fresh directory; returns every produced file with
/// timing removed from reports and bench tables.
fn run_script(threads: Option<&str>) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pipeline.json"), PIPELINE_CONFIG).unwrap();
    for (i, args) in cli_script().iter().enumerate() {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_geoloc"));
        cmd.current_dir(dir.path()).args(args).args(["--report", &format!("reports/{i:02}.json")]);
        if let Some(t) = threads {
            cmd.args(["--threads", t]);
        }
        let out = cmd.output().map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    let mut files = BTreeMap::new();
    collect_files(dir.path(), dir.path(), &mut files);
    for (name, bytes) in files.iter_mut() {
        if name.starts_with("reports/") {
            let mut v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
            v.as_object_mut().unwrap().remove("timing");
            *bytes = serde_json::to_vec(&v).unwrap();
        } else if name.ends_with("bench.csv") {
            *bytes = strip_bench_timing(&String::from_utf8_lossy(bytes)).into_bytes();
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let a = run_script(None)?;
    let b = run_script(None)?;
    let c = run_script(Some("1"))?;
    for (label, other) in [("repeat", &b), ("--threads 1", &c)] {
        ensure!(
            a.keys().eq(other.keys()),
            "{label}: different file sets: {:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            other.keys().collect::<Vec<_>>()
        );
        for (name, bytes) in &a {
            ensure!(bytes == &other[name], "{label}: {name} differs");
        }
    }
    Ok(format!(
        "{} commands, {} output files byte-identical across two runs and --threads 1",
        cli_script().len(),
        a.len()
    ))
}

// -----------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 12] = [
        ("pq memory factor", pq_memory_factor),
        ("netvlad footprint arithmetic", netvlad_footprint),
        ("matching-time linearity", matching_time_linearity),
        ("ivf speed/recall trade", ivf_speed_recall),
        ("exactness equivalences", exactness),
        ("flops/storage scaling", flops_scaling),
        ("aggregation identity suite", aggregation_identities),
        ("mining ordering", mining_ordering),
        ("evaluation metric suite", metric_suite),
        ("pre/post-processing equivalence", prepost_equivalence),
        ("distractor trend", distractor_trend),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let suite = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} failed, total {:.1}s", failed, suite.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
