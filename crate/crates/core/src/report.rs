//! Pareto summaries of tradeoff tables and artifact lineage checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::search::{SweepMode, SweepRow};

/// Digests of an artifact's inputs and of the artifact itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Lineage {
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub output: String,
}

impl Lineage {
    pub fn with_input(mut self, name: &str, digest: String) -> Self {
        self.inputs.insert(name.into(), digest);
        self
    }

    /// Fails unless `content` hashes to the recorded output digest.
    pub fn verify_output(&self, content: &[u8]) -> Result<()> {
        let actual = sha256_hex(content);
        if self.output != actual {
            return Err(Error::Lineage(format!(
                "artifact digest {actual} does not match recorded {}",
                self.output
            )));
        }
        Ok(())
    }
}

/// Fails if two lineages disagree on an input they both record.
pub fn check_consistent(lineages: &[Lineage]) -> Result<()> {
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for l in lineages {
        for (k, v) in &l.inputs {
            match seen.get(k.as_str()) {
                Some(prev) if prev != v => {
                    return Err(Error::Lineage(format!("input '{k}' differs between artifacts ({prev} vs {v})")));
                }
                _ => {
                    seen.insert(k, v);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub bucket: usize,
    pub latency_range_ms: [f64; 2],
    pub mode: SweepMode,
    pub target_level: f64,
    pub achieved_level: f64,
    pub test_acc: f64,
    pub latency_ms: f64,
    pub giga_ops: f64,
    /// Unpruned GOps divided by this model's GOps.
    pub gops_ratio: f64,
    /// Parameter-memory reduction versus unpruned, percent.
    pub memory_reduction: f64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub baseline_params: u64,
    pub baseline_giga_ops: f64,
    pub buckets: usize,
    pub points: Vec<ParetoPoint>,
}

/// Best test accuracy in each of `buckets` equal-width latency buckets
/// spanning the measured rows. Ties go to the lower latency.
pub fn pareto_report(rows: &[SweepRow], buckets: usize) -> Result<ParetoReport> {
    if buckets == 0 {
        return Err(Error::Config("bucket count must be positive".into()));
    }
    let base = rows
        .iter()
        .find(|r| r.mode == SweepMode::Unpruned)
        .ok_or_else(|| Error::Schema("tradeoff table has no unpruned row".into()))?;
    let (base_params, base_ops) = match (base.params, base.giga_ops) {
        (Some(p), Some(g)) if p > 0 && g > 0.0 => (p, g),
        _ => return Err(Error::Schema("unpruned row lacks params or giga_ops".into())),
    };
    let measured: Vec<(&SweepRow, f64, f64, f64, u64, f64)> = rows
        .iter()
        .filter_map(|r| {
            Some((r, r.latency_ms?, r.test_acc?, r.giga_ops?, r.params?, r.achieved_level?))
        })
        .collect();
    if measured.is_empty() {
        return Err(Error::Schema("no row carries latency and accuracy".into()));
    }
    let lo = measured.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let hi = measured.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / buckets as f64;
    let bucket_of = |lat: f64| -> usize {
        if width <= 0.0 {
            0
        } else {
            (((lat - lo) / width) as usize).min(buckets - 1)
        }
    };
    let mut best: BTreeMap<usize, &(&SweepRow, f64, f64, f64, u64, f64)> = BTreeMap::new();
    for m in &measured {
        let b = bucket_of(m.1);
        let better = match best.get(&b) {
            None => true,
            Some(cur) => m.2 > cur.2 || (m.2 == cur.2 && m.1 < cur.1),
        };
        if better {
            best.insert(b, m);
        }
    }
    let points = best
        .into_iter()
        .map(|(b, &(r, lat, acc, ops, params, achieved))| ParetoPoint {
            bucket: b,
            latency_range_ms: [lo + b as f64 * width, lo + (b + 1) as f64 * width],
            mode: r.mode,
            target_level: r.target_level,
            achieved_level: achieved,
            test_acc: acc,
            latency_ms: lat,
            giga_ops: ops,
            gops_ratio: base_ops / ops,
            memory_reduction: 100.0 * (1.0 - params as f64 / base_params as f64),
            params,
        })
        .collect();
    Ok(ParetoReport {
        baseline_params: base_params,
        baseline_giga_ops: base_ops,
        buckets,
        points,
    })
}
