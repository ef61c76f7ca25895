//! Threshold sweeps with per-query caching.
//!
//! Each query's preliminary answer, metric value and augmented answer are
//! computed once; every threshold then only re-runs the gate.

use serde::{Deserialize, Serialize};

use super::dataset::{parse_binary_answer, BinaryQARecord, Prediction};
use super::inner_execution;
use super::metrics::pope_metrics;
use crate::adapters::{Adapters, CallStats, Counted};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pipeline::{augmented, preliminary, Indices, PipelineConfig};
use crate::retriever::QueryContext;
use crate::trigger::{decide, TriggerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub retrieval_fraction: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub mean_generation_calls: f64,
}

/// One query evaluated under both branches of the gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedQuery {
    pub record: BinaryQARecord,
    pub metric_value: f64,
    pub plain: Prediction,
    pub plain_calls: CallStats,
    /// Absent when no threshold in the grid triggers this query.
    pub augmented: Option<(Prediction, CallStats)>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("theta grid is empty".into()));
    }
    if grid.iter().any(|t| t.is_nan()) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("theta grid must be sorted and free of NaN".into()));
    }
    Ok(())
}

/// Evaluates both branches for every record, skipping the augmented branch
/// when no threshold up to `max_theta` would trigger.
pub fn cache_queries(
    records: &[BinaryQARecord],
    cfg: &PipelineConfig,
    max_theta: f64,
    indices: &Indices,
    adapters: &Adapters,
    execution: Execution,
) -> Result<Vec<CachedQuery>> {
    if !cfg.trigger.kind.has_metric() {
        return Err(Error::Config(format!("trigger kind {:?} has no metric to sweep", cfg.trigger.kind)));
    }
    if records.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let inner = inner_execution(execution);
    let results = execution.map(records, |r| -> Result<CachedQuery> {
        let ctx = QueryContext::embed(&r.image_uri, &r.question, adapters.embedder.as_ref())?;
        let plain_counter = Counted::new(adapters);
        let pre = preliminary(&ctx, &cfg.trigger, &cfg.fusion, &plain_counter)?;
        let metric_value = pre.metric_value.expect("metric kinds produce a value");
        let augmented = if metric_value < max_theta {
            let c = Counted::new(adapters);
            let a = augmented(&ctx, cfg, indices, &c, &c, &c, inner)?;
            Some((parse_binary_answer(&a.result.trace), c.stats()))
        } else {
            None
        };
        Ok(CachedQuery {
            record: r.clone(),
            metric_value,
            plain: parse_binary_answer(&pre.trace),
            plain_calls: plain_counter.stats(),
            augmented,
        })
    });
    results.into_iter().collect()
}

/// Applies each threshold to cached queries.
pub fn sweep_table(cache: &[CachedQuery], trigger: &TriggerConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    check_grid(grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &theta in grid {
        let cfg = TriggerConfig { theta, ..*trigger };
        let mut records = Vec::with_capacity(cache.len());
        let mut calls = 0u64;
        for q in cache {
            let mut rec = q.record.clone();
            calls += q.plain_calls.generation_calls();
            if decide(q.metric_value, &cfg).triggered {
                let (pred, c) =
                    q.augmented.ok_or_else(|| Error::Config(format!("theta {theta} beyond the cached sweep range")))?;
                rec.predicted = Some(pred);
                rec.retrieval_used = true;
                calls += c.generation_calls();
            } else {
                rec.predicted = Some(q.plain);
            }
            records.push(rec);
        }
        let m = pope_metrics(&records)?;
        rows.push(SweepRow {
            theta,
            retrieval_fraction: m.retrieval_fraction,
            accuracy: m.accuracy,
            f1: m.f1,
            mean_generation_calls: calls as f64 / cache.len().max(1) as f64,
        });
    }
    Ok(rows)
}

/// Retrieval fraction per threshold for fixed metric values.
pub fn fractions(metric_values: &[f64], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|t| metric_values.iter().filter(|m| **m < *t).count() as f64 / metric_values.len().max(1) as f64)
        .collect()
}

/// One row per threshold, with only `theta` varying.
pub fn trigger_sweep(
    records: &[BinaryQARecord],
    cfg: &PipelineConfig,
    grid: &[f64],
    indices: &Indices,
    adapters: &Adapters,
    execution: Execution,
) -> Result<Vec<SweepRow>> {
    check_grid(grid)?;
    let cache = cache_queries(records, cfg, *grid.last().expect("non-empty grid"), indices, adapters, execution)?;
    sweep_table(&cache, &cfg.trigger, grid)
}

/// Most accurate threshold; ties go to the lower retrieval fraction, then the
/// lower threshold.
pub fn grid_search(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().copied().reduce(|best, r| {
        let better = r.accuracy > best.accuracy
            || (r.accuracy == best.accuracy && r.retrieval_fraction < best.retrieval_fraction);
        if better {
            r
        } else {
            best
        }
    })
}

/// `a:b:step` inclusive of both ends, computed as `a + i * step` to avoid drift.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| -> Result<f64> {
        match s.trim() {
            "-inf" => Ok(f64::NEG_INFINITY),
            "inf" | "+inf" => Ok(f64::INFINITY),
            t => t.parse::<f64>().map_err(|_| Error::Parse(format!("bad grid value '{s}'"))),
        }
    };
    match parts.as_slice() {
        [single] => Ok(vec![num(single)?]),
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(a.is_finite() && b.is_finite()) || !(step > 0.0 && step.is_finite()) || b < a {
                return Err(Error::Parse(format!("grid '{spec}' needs finite a <= b and step > 0")));
            }
            let count = ((b - a) / step + 1e-9).floor() as usize;
            let mut grid: Vec<f64> = (0..=count).map(|i| a + i as f64 * step).collect();
            if let Some(last) = grid.last_mut() {
                if (*last - b).abs() < step * 1e-6 {
                    *last = b;
                }
            }
            Ok(grid)
        }
        _ => Err(Error::Parse(format!("grid '{spec}' is not a:b:step"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_count_below_threshold() {
        let f = fractions(&[-1.0, 0.0, 1.0], &[-0.5, 0.5, 1.5]);
        assert_eq!(f, [1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(fractions(&[-1.0, 0.0, 1.0], &[f64::NEG_INFINITY, f64::INFINITY]), [0.0, 1.0]);
    }

    #[test]
    fn grids() {
        let g = parse_grid("0:1:0.05").unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(parse_grid("-2:2:0.2").unwrap().len(), 21);
        assert_eq!(parse_grid("0.3").unwrap(), [0.3]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("a:b").is_err());
        assert!(check_grid(&[0.2, 0.1]).is_err());
        assert!(check_grid(&[]).is_err());
    }

    #[test]
    fn grid_search_prefers_cheaper_ties() {
        let row = |theta, retrieval_fraction, accuracy| SweepRow {
            theta,
            retrieval_fraction,
            accuracy,
            f1: 0.0,
            mean_generation_calls: 0.0,
        };
        let rows = [row(0.0, 0.1, 0.7), row(0.1, 0.4, 0.95), row(0.2, 0.5, 0.95), row(0.3, 0.9, 0.9)];
        assert_eq!(grid_search(&rows).unwrap().theta, 0.1);
        assert!(grid_search(&[]).is_none());
    }
}
