//! Plan documents: pretty-printed JSON with the fields
//! `version, b, alpha, G, chunk_rows, chunks[]`, each chunk carrying
//! `row_range, bias, cmax, tmax, group_of, permutation, boundaries`.
//! Groups are 1-based; every array is in channel order except
//! `permutation` (streaming order) and `boundaries` (G+1 offsets).
//!
//! Loading recomputes the groups from the stored statistics and rejects a
//! document whose derived fields disagree.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{ChunkPlan, DecompositionPlan, PlanConfig};
use crate::error::{Error, Result};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    version: u32,
    b: u32,
    alpha: u32,
    #[serde(rename = "G")]
    groups: usize,
    chunk_rows: usize,
    chunks: Vec<ChunkDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChunkDoc {
    row_range: [usize; 2],
    bias: Vec<f64>,
    cmax: Vec<f64>,
    tmax: f64,
    group_of: Vec<usize>,
    permutation: Vec<usize>,
    boundaries: Vec<usize>,
}

pub fn plan_to_string(plan: &DecompositionPlan) -> String {
    let cfg = plan.config();
    let doc = PlanDoc {
        version: PLAN_VERSION,
        b: cfg.bits,
        alpha: cfg.alpha,
        groups: cfg.groups,
        chunk_rows: cfg.chunk_rows,
        chunks: plan
            .chunks()
            .iter()
            .map(|c| ChunkDoc {
                row_range: [c.row_range().start, c.row_range().end],
                bias: c.bias().to_vec(),
                cmax: c.cmax().to_vec(),
                tmax: c.ladder().tmax(),
                group_of: c.group_of().to_vec(),
                permutation: c.permutation().to_vec(),
                boundaries: c.boundaries().to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("plan documents always serialize");
    s.push('\n');
    s
}

pub fn plan_from_str(text: &str) -> Result<DecompositionPlan> {
    let doc: PlanDoc =
        serde_json::from_str(text).map_err(|e| Error::format(format!("plan document: {e}")))?;
    if doc.version != PLAN_VERSION {
        return Err(Error::format(format!("unsupported plan version {}", doc.version)));
    }
    let config = PlanConfig::new(doc.b, doc.alpha, doc.groups, doc.chunk_rows);
    config.validate()?;
    let chunks = doc
        .chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let [start, end] = c.row_range;
            let chunk = ChunkPlan::from_stats(start..end, c.bias, c.cmax, doc.alpha, doc.groups, doc.b)?;
            let consistent = chunk.ladder().tmax() == c.tmax
                && chunk.group_of() == c.group_of.as_slice()
                && chunk.permutation() == c.permutation.as_slice()
                && chunk.boundaries() == c.boundaries.as_slice();
            if consistent {
                Ok(chunk)
            } else {
                Err(Error::format(format!(
                    "chunk {i}: tmax, groups or ordering disagree with its statistics"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    DecompositionPlan::from_chunks(config, chunks)
}

pub fn write_plan(path: impl AsRef<Path>, plan: &DecompositionPlan) -> Result<()> {
    fs::write(path, plan_to_string(plan))?;
    Ok(())
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<DecompositionPlan> {
    plan_from_str(&fs::read_to_string(path)?)
}
