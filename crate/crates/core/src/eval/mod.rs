//! Dataset evaluation, metric computation, threshold sweeps and reports.

pub mod dataset;
pub mod metrics;
pub mod report;
pub mod sweep;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapters, CallStats};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pipeline::{run_query, Indices, PipelineConfig};
use crate::retriever::QueryContext;

pub use dataset::{parse_binary_answer, BinaryQARecord, Gold, Prediction};
pub use metrics::{mme_scores, pope_metrics, MetricReport, MmeScores};
pub use report::{emit_report, emit_sweep, ReportFormat, ReportRow};
pub use sweep::{grid_search, trigger_sweep, SweepRow};

/// Per-query results of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub records: Vec<BinaryQARecord>,
    pub calls: Vec<CallStats>,
    pub metric_values: Vec<f64>,
}

impl EvalRun {
    pub fn report(&self) -> Result<MetricReport> {
        pope_metrics(&self.records)
    }

    pub fn row(&self, label: impl Into<String>) -> Result<ReportRow> {
        let n = self.calls.len().max(1) as f64;
        Ok(ReportRow {
            label: label.into(),
            report: self.report()?,
            mean_generation_calls: self.calls.iter().map(|c| c.generation_calls() as f64).sum::<f64>() / n,
            mean_backend_calls: self.calls.iter().map(|c| c.total() as f64).sum::<f64>() / n,
        })
    }
}

/// Splits parallelism between queries and the work inside one query.
pub(crate) fn inner_execution(outer: Execution) -> Execution {
    if outer.is_parallel() {
        Execution::Sequential
    } else {
        outer
    }
}

/// Runs every record through the pipeline. Queries run in parallel under
/// `execution`; results keep dataset order.
pub fn evaluate(
    records: &[BinaryQARecord],
    cfg: &PipelineConfig,
    indices: &Indices,
    adapters: &Adapters,
    execution: Execution,
) -> Result<EvalRun> {
    if records.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    cfg.validate()?;
    let inner = inner_execution(execution);
    let outcomes = execution.map(records, |r| {
        let ctx = QueryContext::embed(&r.image_uri, &r.question, adapters.embedder.as_ref())?;
        run_query(&ctx, cfg, indices, adapters, inner)
    });
    let mut run = EvalRun { records: Vec::with_capacity(records.len()), calls: Vec::new(), metric_values: Vec::new() };
    for (r, outcome) in records.iter().zip(outcomes) {
        let o = outcome?;
        let mut rec = r.clone();
        rec.predicted = Some(parse_binary_answer(&o.result.trace));
        rec.retrieval_used = o.result.retrieval_used;
        run.records.push(rec);
        run.calls.push(o.calls);
        run.metric_values.push(o.decision.metric_value);
    }
    Ok(run)
}
