//! Hierarchical navigable small-world graph.
//!
//! Nodes are inserted in ascending id order with seeded level draws
//! `floor(-ln(u) / ln(m_links))`. Neighbour lists hold at most `m_links`
//! entries above layer 0 and `2 * m_links` at layer 0, chosen with the
//! diversity heuristic and topped up with the nearest pruned candidates.
//! Search descends greedily to layer 0 and runs an `ef`-bounded best-first
//! search there. The best-first loop never stops before it holds `ef`
//! results, so `ef >= n` visits every node reachable from the entry point.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng;

use super::{ids_section, matrix_section, Footprint, Hit, IndexConfig, IndexError, SectionReader};
use crate::dataio::Section;
use crate::descriptor::DescriptorSet;
use crate::numerics::{seeded_rng, sq_l2, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub(crate) cfg: IndexConfig,
    ids: Vec<u64>,
    vectors: Matrix,
    /// `links[node][layer]`, for layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Cand {
    d: f32,
    node: u32,
}

impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d.total_cmp(&other.d).then(self.node.cmp(&other.node))
    }
}

/// Visited marks reused across searches by bumping a generation counter.
struct Visited {
    marks: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            generation: 0,
        }
    }

    fn reset(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.marks.fill(0);
            self.generation = 1;
        }
    }

    /// Marks `i`; returns whether it was unmarked.
    fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.generation {
            false
        } else {
            *m = self.generation;
            true
        }
    }
}

impl HnswIndex {
    pub fn build(set: &DescriptorSet, cfg: &IndexConfig) -> Self {
        let n = set.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| set.ids()[i]);
        let (ids, vectors) = set.subset(&order).into_parts();

        let mut rng = seeded_rng(cfg.seed);
        let mult = 1.0 / (cfg.m_links as f64).ln();
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                // u in (0, 1]
                let u = 1.0 - rng.random::<f64>();
                (-u.ln() * mult).floor() as usize
            })
            .collect();

        let mut index = Self {
            cfg: cfg.clone(),
            ids,
            vectors,
            links: levels.iter().map(|&l| vec![Vec::new(); l + 1]).collect(),
            entry: 0,
            max_level: levels.first().copied().unwrap_or(0),
        };
        let mut visited = Visited::new(n);
        for (node, &level) in levels.iter().enumerate().skip(1) {
            index.insert(node as u32, level, &mut visited);
        }
        index
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.cfg.m_links
        } else {
            self.cfg.m_links
        }
    }

    #[inline]
    fn dist(&self, q: &[f32], node: u32) -> f32 {
        sq_l2(q, self.vectors.row(node as usize))
    }

    fn insert(&mut self, node: u32, level: usize, visited: &mut Visited) {
        let q = self.vectors.row(node as usize).to_vec();
        let mut ep = Cand {
            d: self.dist(&q, self.entry),
            node: self.entry,
        };
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(self.max_level)).rev() {
            let w = self.search_layer(&q, &eps, self.cfg.ef_construction, layer, visited);
            let chosen = self.select(&w, self.cfg.m_links.min(self.cap(layer)));
            self.links[node as usize][layer] = chosen.iter().map(|c| c.node).collect();
            for c in &chosen {
                self.link_back(c.node, node, layer);
            }
            eps = w;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = node;
        }
    }

    fn link_back(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.cap(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = self.vectors.row(from as usize).to_vec();
        let mut cands: Vec<Cand> = self.links[from as usize][layer]
            .iter()
            .map(|&nb| Cand {
                d: self.dist(&base, nb),
                node: nb,
            })
            .collect();
        cands.sort();
        let kept = self.select(&cands, cap);
        self.links[from as usize][layer] = kept.iter().map(|c| c.node).collect();
    }

    /// Diversity heuristic over `cands` (ascending): keep a candidate only if
    /// it is closer to the base than to every kept neighbour, then fill the
    /// remaining slots with the nearest discarded candidates.
    fn select(&self, cands: &[Cand], m: usize) -> Vec<Cand> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in cands {
            if kept.len() >= m {
                break;
            }
            let v = self.vectors.row(c.node as usize);
            if kept.iter().all(|k| sq_l2(v, self.vectors.row(k.node as usize)) > c.d) {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn greedy(&self, q: &[f32], mut cur: Cand, layer: usize) -> Cand {
        loop {
            let mut improved = false;
            for &nb in &self.links[cur.node as usize][layer] {
                let c = Cand {
                    d: self.dist(q, nb),
                    node: nb,
                };
                if c < cur {
                    cur = c;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Best-first search on one layer; returns up to `ef` nodes ascending.
    fn search_layer(&self, q: &[f32], eps: &[Cand], ef: usize, layer: usize, visited: &mut Visited) -> Vec<Cand> {
        visited.reset();
        let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in eps {
            if visited.insert(e.node) {
                frontier.push(Reverse(e));
                best.push(e);
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && best.peek().is_some_and(|w| c > *w) {
                break;
            }
            for &nb in &self.links[c.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand {
                    d: self.dist(q, nb),
                    node: nb,
                };
                if best.len() < ef || best.peek().is_some_and(|w| cand < *w) {
                    frontier.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn level(&self, row: usize) -> usize {
        self.links[row].len() - 1
    }

    pub fn search_one(&self, q: &[f32], k: usize, ef: usize) -> Vec<Hit> {
        if self.ids.is_empty() {
            return Vec::new();
        }
        let mut ep = Cand {
            d: self.dist(q, self.entry),
            node: self.entry,
        };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(q, ep, layer);
        }
        let mut visited = Visited::new(self.len());
        let found = self.search_layer(q, &[ep], ef.max(k), 0, &mut visited);
        let mut hits: Vec<Hit> = found
            .into_iter()
            .map(|c| Hit {
                id: self.ids[c.node as usize],
                sq_dist: c.d,
            })
            .collect();
        hits.sort_by(|a, b| a.sq_dist.total_cmp(&b.sq_dist).then(a.id.cmp(&b.id)));
        hits.truncate(k);
        hits
    }

    /// Vectors and ids as in flat storage, plus link capacity per node
    /// (`2M` at layer 0 and `M` per upper layer, 4 bytes each) and a 4-byte
    /// level per node.
    pub fn footprint(&self) -> Footprint {
        let n = self.len() as u64;
        let m = self.cfg.m_links as u64;
        let link_slots: u64 = self.links.iter().map(|l| 2 * m + (l.len() as u64 - 1) * m).sum();
        Footprint {
            links: link_slots * 4 + n * 4,
            ..Footprint::flat(n, self.dim() as u64)
        }
    }

    pub(crate) fn write_sections(&self, out: &mut Vec<Section>, header: &mut Vec<u64>) {
        header.push(self.entry as u64);
        header.push(self.max_level as u64);
        out.push(ids_section(&self.ids));
        out.push(matrix_section("vectors", &self.vectors));
        // per node: level count, then per layer: degree followed by neighbours
        let mut stream = Vec::new();
        for node in &self.links {
            stream.push(node.len() as u64);
            for layer in node {
                stream.push(layer.len() as u64);
                stream.extend(layer.iter().map(|&x| x as u64));
            }
        }
        let len = stream.len();
        out.push(Section::u64("links", len, 1, stream).expect("link shape"));
    }

    pub(crate) fn read_sections(cfg: IndexConfig, r: &SectionReader, extra: &[u64]) -> Result<Self, IndexError> {
        let corrupt = |m: &str| IndexError::Corrupt(format!("hnsw links: {m}"));
        if extra.len() < 2 {
            return Err(corrupt("missing entry point"));
        }
        let stream = r.u64("links", None)?;
        let mut pos = 0usize;
        let mut next = || -> Result<u64, IndexError> {
            let v = stream.get(pos).copied().ok_or_else(|| corrupt("truncated"))?;
            pos += 1;
            Ok(v)
        };
        let mut links = Vec::with_capacity(r.n);
        for _ in 0..r.n {
            let layers = next()? as usize;
            if layers == 0 {
                return Err(corrupt("node without layers"));
            }
            let mut node = Vec::with_capacity(layers);
            for _ in 0..layers {
                let deg = next()? as usize;
                let mut list = Vec::with_capacity(deg);
                for _ in 0..deg {
                    let nb = next()?;
                    if nb as usize >= r.n {
                        return Err(corrupt("neighbour out of range"));
                    }
                    list.push(nb as u32);
                }
                node.push(list);
            }
            links.push(node);
        }
        let entry = extra[0] as u32;
        let max_level = extra[1] as usize;
        if r.n > 0 && (entry as usize >= r.n || links[entry as usize].len() != max_level + 1) {
            return Err(corrupt("inconsistent entry point"));
        }
        Ok(Self {
            ids: r.u64("ids", Some(r.n))?,
            vectors: r.f32("vectors", r.n, r.dim)?,
            links,
            entry,
            max_level,
            cfg,
        })
    }
}
