//! Search results as JSON lines: `{"query": id, "hits": [[id, sq_dist], ...]}`.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::index::{Hit, SearchResult};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    query: u64,
    hits: Vec<(u64, f32)>,
}

pub fn results_to_jsonl(results: &[SearchResult]) -> String {
    let mut out = String::new();
    for r in results {
        let line = Line {
            query: r.query_id,
            hits: r.hits.iter().map(|h| (h.id, h.sq_dist)).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSON lines; `k_requested` is taken to be the number of hits.
pub fn results_from_jsonl<R: std::io::Read>(reader: R) -> Result<Vec<SearchResult>, DataError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let err = |message: String| DataError::Results { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let hits: Vec<Hit> = parsed.hits.into_iter().map(|(id, sq_dist)| Hit { id, sq_dist }).collect();
        out.push(SearchResult {
            query_id: parsed.query,
            k_requested: hits.len().max(1),
            hits,
        });
    }
    Ok(out)
}

pub fn write_results(path: &Path, results: &[SearchResult]) -> Result<(), DataError> {
    super::vgbd::write_atomic(path, results_to_jsonl(results).as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<SearchResult>, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    results_from_jsonl(f)
}
