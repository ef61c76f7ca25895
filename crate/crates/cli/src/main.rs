use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use ara_core::adapters::mock::MockWorld;
use ara_core::adapters::server::BackendServer;
use ara_core::adapters::Adapters;
use ara_core::config::{parse_trigger_kind, EngineConfig};
use ara_core::eval::dataset::load_binary_dataset;
use ara_core::eval::sweep::parse_grid;
use ara_core::eval::{emit_report, emit_sweep, evaluate, trigger_sweep, ReportFormat, ReportRow};
use ara_core::exec::Execution;
use ara_core::fusion::FusionMode;
use ara_core::index::{load_knowledge_base, KeyField, VectorIndex};
use ara_core::pipeline::{run_query, Indices, PipelineConfig};
use ara_core::rerank::RerankMethod;
use ara_core::retriever::{QueryContext, RetrievalModality};
use ara_core::synth::{generate, SynthSpec};
use ara_core::trigger::TriggerKind;
use ara_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ara", version, about = "Retrieval-augmented answering over pluggable vision-language backends")]
struct Cli {
    /// Cap on concurrent queries; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Append a generation timestamp to reports.
    #[arg(long, global = true)]
    timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Key {
    Image,
    Caption,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Confidence,
    Query,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum Knob {
    Modality,
    Fusion,
    Rerank,
    K,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Md => ReportFormat::Markdown,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(clap::Args)]
struct Overrides {
    /// Trigger kind: confidence, query, image, always or never.
    #[arg(long)]
    trigger: Option<String>,
    /// Trigger threshold; accepts -inf and inf.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(t) = &self.trigger {
            cfg.trigger.kind = parse_trigger_kind(t)?;
            if self.theta.is_none() {
                cfg.trigger.theta = cfg.trigger.kind.default_theta();
            }
        }
        if let Some(t) = &self.theta {
            if t.contains(':') {
                return Err(Error::Config(format!("theta takes one value, got '{t}'")));
            }
            cfg.trigger.theta = parse_grid(t)?[0];
        }
        cfg.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a vector index from a knowledge base.
    BuildIndex {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        key: Key,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one query.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        query: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a binary dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        report: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep the trigger threshold.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// `a:b:step` or a single value.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long, value_enum, default_value = "md")]
        report: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vary one knob with everything else fixed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        vary: Knob,
        #[arg(long, value_enum, default_value = "md")]
        report: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic fixture, knowledge bases, dataset and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        images: usize,
        /// Fraction of positive questions about blind-spot entities.
        #[arg(long, default_value_t = 0.4)]
        blind_fraction: f64,
    },
    /// Serve mock backends over the wire protocol.
    ServeMock {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8470")]
        addr: String,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
}

struct Engine {
    cfg: EngineConfig,
    adapters: Adapters,
    indices: Indices,
    execution: Execution,
}

impl Engine {
    fn load(path: &Path, jobs: Option<usize>) -> Result<Self> {
        let mut cfg = EngineConfig::load(path)?;
        if jobs.is_some() {
            cfg.jobs = jobs;
        }
        Ok(Self { adapters: cfg.adapters()?, indices: cfg.indices()?, execution: cfg.execution(), cfg })
    }
}

fn describe(cfg: &PipelineConfig) -> String {
    let t = &cfg.trigger;
    let trigger = match t.kind {
        TriggerKind::Always => "always".to_owned(),
        TriggerKind::Never => "never".to_owned(),
        k => format!("{} theta={}", trigger_name(k), t.theta),
    };
    let mut label = format!(
        "{trigger} {} {} {} k={}/{}/{}",
        cfg.modality.label(),
        cfg.rerank.name(),
        cfg.fusion.mode.name(),
        cfg.k_coarse,
        cfg.k_fine,
        cfg.truncate_n
    );
    if cfg.modality.low_reliability() {
        label.push_str(" (low reliability)");
    }
    label
}

fn trigger_name(k: TriggerKind) -> &'static str {
    match k {
        TriggerKind::ConfidenceAware => "confidence",
        TriggerKind::QueryAware => "query",
        TriggerKind::ImageAware => "image",
        TriggerKind::Always => "always",
        TriggerKind::Never => "never",
    }
}

fn emit(text: String, out: Option<&Path>, timestamps: bool) -> Result<()> {
    let mut text = text;
    if timestamps {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        text.push_str(&format!("generated at unix {secs}\n"));
    }
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn variants(base: &PipelineConfig, knob: Knob) -> Vec<PipelineConfig> {
    match knob {
        Knob::Modality => {
            RetrievalModality::ALL.iter().map(|&modality| PipelineConfig { modality, ..base.clone() }).collect()
        }
        Knob::Fusion => FusionMode::ALL
            .iter()
            .map(|&mode| {
                let mut c = base.clone();
                c.fusion.mode = mode;
                c
            })
            .collect(),
        Knob::Rerank => [RerankMethod::None, RerankMethod::CaptionSimilarity, RerankMethod::K_RECIPROCAL_DEFAULT]
            .iter()
            .map(|&rerank| PipelineConfig { rerank, ..base.clone() })
            .collect(),
        Knob::K => (1..=5)
            .map(|k| PipelineConfig {
                k_coarse: base.k_coarse.max(k),
                k_fine: base.k_fine.max(k),
                truncate_n: k,
                ..base.clone()
            })
            .collect(),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let ts = cli.timestamps;
    match cli.command {
        Command::BuildIndex { input, key, out } => {
            let key = match key {
                Key::Image => KeyField::ImageEmbedding,
                Key::Caption => KeyField::CaptionEmbedding,
            };
            let index = VectorIndex::build(load_knowledge_base(&input)?, key)?;
            index.save(&out)?;
            println!("built {} entries, dim {}", index.len(), index.dim());
        }
        Command::Run { config, image, query, overrides } => {
            let e = Engine::load(&config, cli.jobs)?;
            let mut cfg = e.cfg.pipeline.clone();
            overrides.apply(&mut cfg)?;
            let ctx = QueryContext::embed(&image, &query, e.adapters.embedder.as_ref())?;
            let o = run_query(&ctx, &cfg, &e.indices, &e.adapters, e.execution)?;
            let mut out = String::new();
            out.push_str(&format!("answer: {}\n", o.result.trace.text()));
            out.push_str(&format!("retrieval_used: {}\n", o.result.retrieval_used));
            out.push_str(&format!("metric: {}\n", o.decision.metric_value));
            out.push_str(&format!("coarse: {}\n", o.coarse_ids.join(" ")));
            if let Some((entity, ids)) = &o.fine {
                out.push_str(&format!("fine[{entity}]: {}\n", ids.join(" ")));
            }
            if o.result.degraded {
                out.push_str("degraded: coarse only\n");
            }
            emit(out, None, ts)?;
        }
        Command::Eval { config, dataset, report, out, overrides } => {
            let e = Engine::load(&config, cli.jobs)?;
            let mut cfg = e.cfg.pipeline.clone();
            overrides.apply(&mut cfg)?;
            let records = load_binary_dataset(&dataset)?;
            let run = evaluate(&records, &cfg, &e.indices, &e.adapters, e.execution)?;
            emit(emit_report(&[run.row(describe(&cfg))?], report.into())?, out.as_deref(), ts)?;
        }
        Command::Sweep { config, dataset, metric, grid, report, out } => {
            let e = Engine::load(&config, cli.jobs)?;
            let mut cfg = e.cfg.pipeline.clone();
            cfg.trigger.kind = match metric {
                Metric::Confidence => TriggerKind::ConfidenceAware,
                Metric::Query => TriggerKind::QueryAware,
                Metric::Image => TriggerKind::ImageAware,
            };
            let records = load_binary_dataset(&dataset)?;
            let rows = trigger_sweep(&records, &cfg, &parse_grid(&grid)?, &e.indices, &e.adapters, e.execution)?;
            emit(emit_sweep(&rows, report.into())?, out.as_deref(), ts)?;
        }
        Command::Ablate { config, dataset, vary, report, out, overrides } => {
            let e = Engine::load(&config, cli.jobs)?;
            let mut base = e.cfg.pipeline.clone();
            overrides.apply(&mut base)?;
            let records = load_binary_dataset(&dataset)?;
            let mut rows: Vec<ReportRow> = Vec::new();
            for cfg in variants(&base, vary) {
                let run = evaluate(&records, &cfg, &e.indices, &e.adapters, e.execution)?;
                rows.push(run.row(describe(&cfg))?);
            }
            emit(emit_report(&rows, report.into())?, out.as_deref(), ts)?;
        }
        Command::Synth { out, seed, images, blind_fraction } => {
            let spec = SynthSpec { seed, images, blind_fraction, ..SynthSpec::default() };
            let s = generate(&spec)?;
            let paths = s.write(&out)?;
            println!(
                "wrote {} images, {} coarse entries, {} fine entries, {} questions; config {}",
                s.world.images().count(),
                s.coarse_kb.len(),
                s.fine_kb.len(),
                s.dataset.len(),
                paths.config.display()
            );
        }
        Command::ServeMock { fixture, addr, threads } => {
            let world = MockWorld::load(&fixture)?;
            let server = BackendServer::start(Adapters::mock(world.into()), &addr, threads)?;
            println!("serving on {}", server.url());
            server.join();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
