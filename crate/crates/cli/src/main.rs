//! `kvdepth`: generate, bench, cost, diagnose, detect-loops and verify.
//!
//! Exit codes: 0 success, 2 configuration error, 3 verification failure,
//! 4 I/O error. Log verbosity comes from `KVDEPTH_LOG` (e.g. `info`).

use clap::{Args, Parser, Subcommand};
use kvdepth::bench::{run_sweep, write_report, ReportMeta, SweepConfig};
use kvdepth::cost::{cost_table, write_cost_csv, CostPreset, ProxyWeights};
use kvdepth::diagnostics::{average_stats, layer_stats, peak_summary, CategorySummary, DiagnosticsReport};
use kvdepth::engine::{generate, CaptureOptions};
use kvdepth::kv::KvGeometry;
use kvdepth::loops::{loop_report, read_predictions};
use kvdepth::trace::TraceFile;
use kvdepth::verify::{run_battery, VerifyConfig};
use kvdepth::{Exec, Model, ModelConfig, VisibilityPolicy, BOS_ID};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "kvdepth", version, about = "Layer-wise KV-visibility inference lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy generation with an optional attention/hidden-state trace.
    Generate(GenerateArgs),
    /// Timed prompt-length sweep with KV and compute accounting.
    Bench(BenchArgs),
    /// Closed-form KV memory and compute table.
    Cost(CostArgs),
    /// Layer-wise statistics from generation traces.
    Diagnose(DiagnoseArgs),
    /// Suffix repetition-loop detection over prediction files.
    DetectLoops(LoopArgs),
    /// Engine-versus-oracle equivalence and mask enumeration battery.
    Verify(VerifyArgs),
}

/// Settings shared by commands that build a model. Values from `--config`
/// are overridden by flags.
#[derive(Args)]
struct ModelArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load weights from a checkpoint instead of seeding fresh ones.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for weight init and synthetic prompts [default: 123].
    #[arg(long)]
    seed: Option<u64>,
    /// Run kernels on one thread.
    #[arg(long)]
    sequential: bool,
}

/// JSON run configuration; every field is optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: Option<ModelConfig>,
    checkpoint: Option<PathBuf>,
    seed: Option<u64>,
    policy: Option<String>,
    policies: Option<Vec<String>>,
    prompt_file: Option<PathBuf>,
    prompt_text: Option<String>,
    prompt_len: Option<usize>,
    prompt_lens: Option<Vec<usize>>,
    max_new: Option<usize>,
    repeats: Option<usize>,
    capture_attention: Option<bool>,
    capture_hidden: Option<bool>,
    category: Option<String>,
    out: Option<PathBuf>,
}

const DEFAULT_SEED: u64 = 123;

impl ModelArgs {
    fn run_config(&self) -> Result<RunConfig> {
        match &self.config {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let f = File::open(p).map_err(io_err(p))?;
                serde_json::from_reader(BufReader::new(f)).map_err(|e| config_err(format!("{}: {e}", p.display())))
            }
        }
    }

    fn seed(&self, rc: &RunConfig) -> u64 {
        self.seed.or(rc.seed).unwrap_or(DEFAULT_SEED)
    }

    fn model(&self, rc: &RunConfig) -> Result<Model> {
        let exec = if self.sequential { Exec::Sequential } else { Exec::Parallel };
        let model = match self.checkpoint.as_ref().or(rc.checkpoint.as_ref()) {
            Some(p) => Model::load_checkpoint(p).map_err(|e| match e {
                kvdepth::model::ModelError::Io(source) => CliError::Io { path: p.display().to_string(), source },
                other => config_err(format!("{}: {other}", p.display())),
            })?,
            None => {
                let mut cfg = rc.model.clone().unwrap_or_default();
                cfg.init_seed = self.seed(rc);
                Model::new(cfg).map_err(config_err)?
            }
        };
        Ok(model.with_exec(exec))
    }
}

fn parse_policy(s: &str) -> Result<VisibilityPolicy> {
    s.parse().map_err(config_err)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn stdout_err(e: io::Error) -> CliError {
    CliError::Io { path: "<output>".into(), source: e }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Visibility policy, e.g. `full`, `speed+bos:6`, `selfonly:4:posthoc`.
    #[arg(long)]
    policy: Option<String>,
    /// Prompt read as raw bytes from a file.
    #[arg(long, conflicts_with_all = ["prompt_text", "prompt_len"])]
    prompt_file: Option<PathBuf>,
    /// Prompt given inline; encoded as UTF-8 bytes.
    #[arg(long, conflicts_with = "prompt_len")]
    prompt_text: Option<String>,
    /// Synthetic prompt of this many tokens (BoS plus seeded bytes).
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Tokens to generate [default: 32].
    #[arg(long)]
    max_new: Option<usize>,
    /// Record head-averaged attention rows per layer.
    #[arg(long)]
    capture_attention: bool,
    /// Record per-layer hidden states.
    #[arg(long)]
    capture_hidden: bool,
    /// Category label stored in the trace metadata.
    #[arg(long)]
    category: Option<String>,
    /// Trace destination (JSONL); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the model weights to this checkpoint.
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
}

fn byte_prompt(bytes: &[u8]) -> Vec<u32> {
    std::iter::once(BOS_ID).chain(bytes.iter().map(|&b| b as u32)).collect()
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let rc = a.model.run_config()?;
    let seed = a.model.seed(&rc);
    let model = a.model.model(&rc)?;
    let policy = parse_policy(a.policy.as_deref().or(rc.policy.as_deref()).unwrap_or("full"))?;
    let prompt = if let Some(p) = a.prompt_file.as_ref().or(if a.prompt_text.is_none() && a.prompt_len.is_none() { rc.prompt_file.as_ref() } else { None }) {
        byte_prompt(&std::fs::read(p).map_err(io_err(p))?)
    } else if let Some(t) = a.prompt_text.as_ref().or(if a.prompt_len.is_none() { rc.prompt_text.as_ref() } else { None }) {
        byte_prompt(t.as_bytes())
    } else {
        let len = a.prompt_len.or(rc.prompt_len).unwrap_or(64);
        kvdepth::bench::synthetic_prompt(len, seed)
    };
    let max_new = a.max_new.or(rc.max_new).unwrap_or(32);
    let capture = CaptureOptions {
        attention: a.capture_attention || rc.capture_attention.unwrap_or(false),
        hidden: a.capture_hidden || rc.capture_hidden.unwrap_or(false),
    };
    if let Some(p) = &a.save_checkpoint {
        model.save_checkpoint(p).map_err(|e| match e {
            kvdepth::model::ModelError::Io(source) => CliError::Io { path: p.display().to_string(), source },
            other => config_err(other),
        })?;
    }
    let trace = generate(&model, &policy, &prompt, max_new, capture).map_err(config_err)?;
    let file = TraceFile::from_trace(&trace, seed, model.config().fingerprint(), a.category.or(rc.category))
        .map_err(config_err)?;
    let out_path = a.out.or(rc.out);
    let mut out = open_out(out_path.as_deref())?;
    file.write_jsonl(&mut out).map_err(|e| match e {
        kvdepth::trace::TraceError::Io(source) => CliError::Io { path: "<trace>".into(), source },
        other => config_err(other),
    })?;
    out.flush().map_err(stdout_err)?;
    log::info!("generated {} tokens under {policy}", trace.generated.len());
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Policy to time; repeatable. A full-attention baseline is always added
    /// [default: speed+bos at three quarters depth].
    #[arg(long = "policy")]
    policies: Vec<String>,
    /// Prompt length; repeatable [default: 1024 2048 4096].
    #[arg(long = "len")]
    lens: Vec<usize>,
    /// Continuation length [default: 128].
    #[arg(long)]
    max_new: Option<usize>,
    /// Timed runs per cell after one warm-up [default: 5].
    #[arg(long)]
    repeats: Option<usize>,
    /// CSV report path; a JSON companion is written next to it.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let rc = a.model.run_config()?;
    let model = a.model.model(&rc)?;
    let l = model.config().n_layers;
    let names = if !a.policies.is_empty() {
        a.policies.clone()
    } else {
        rc.policies.clone().unwrap_or_else(|| vec![format!("speed+bos:{}", (3 * l / 4).max(1))])
    };
    let policies = names.iter().map(|s| parse_policy(s)).collect::<Result<Vec<_>>>()?;
    for p in &policies {
        p.validate(l).map_err(config_err)?;
    }
    let sweep = SweepConfig {
        prompt_lens: if a.lens.is_empty() { rc.prompt_lens.clone().unwrap_or(vec![1024, 2048, 4096]) } else { a.lens.clone() },
        policies,
        max_new: a.max_new.or(rc.max_new).unwrap_or(128),
        repeats: a.repeats.or(rc.repeats).unwrap_or(5),
        seed: a.model.seed(&rc),
    };
    let rows = run_sweep(&model, &sweep).map_err(config_err)?;
    write_report(&rows, &ReportMeta::new(&model, &sweep), &a.out).map_err(|e| match e {
        kvdepth::bench::BenchError::Io(source) => CliError::Io { path: a.out.display().to_string(), source },
        other => config_err(other),
    })?;
    for r in &rows {
        println!("{:>6} {:<16} ttft {:>10.3} ms  x{:.2}  kv -{:.1}%", r.prompt_len, r.policy, r.ttft.mean_ms, r.ttft_speedup, r.kv_reduction_pct);
    }
    Ok(())
}

#[derive(Args)]
struct CostArgs {
    /// 32 layers, 8 KV heads of width 128, bf16, one anchor, 128 decode
    /// tokens and 8B-scale FLOP prices.
    #[arg(long)]
    paper_preset: bool,
    /// Layer count [default: 8, or 32 with the preset].
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    d_head: Option<usize>,
    /// Bytes per stored scalar.
    #[arg(long)]
    bytes: Option<usize>,
    /// Anchor tokens per prompt (0 or 1).
    #[arg(long)]
    anchors: Option<u64>,
    /// Decode-phase tokens held in the cache.
    #[arg(long)]
    decode: Option<u64>,
    /// Price only processed layer-tokens instead of FLOPs.
    #[arg(long)]
    layer_tokens: bool,
    /// Prompt length; repeatable.
    #[arg(long = "len")]
    lens: Vec<u64>,
    /// Policy; repeatable [default: full and speed+bos at L/2, 5L/8, 3L/4, 7L/8].
    #[arg(long = "policy")]
    policies: Vec<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    let base = if a.paper_preset {
        CostPreset::llama_8b()
    } else {
        let cfg = ModelConfig::default();
        CostPreset {
            n_layers: cfg.n_layers,
            anchors: 1,
            decode: 128,
            geometry: cfg.kv_geometry(2),
            weights: kvdepth::bench::proxy_weights(&cfg),
        }
    };
    let preset = CostPreset {
        n_layers: a.layers.unwrap_or(base.n_layers),
        anchors: a.anchors.unwrap_or(base.anchors),
        decode: a.decode.unwrap_or(base.decode),
        geometry: KvGeometry::new(
            a.kv_heads.unwrap_or(base.geometry.n_kv_heads),
            a.d_head.unwrap_or(base.geometry.d_head),
            a.bytes.unwrap_or(base.geometry.bytes_per_scalar),
        ),
        weights: if a.layer_tokens { ProxyWeights::layer_tokens() } else { base.weights },
    };
    if preset.n_layers == 0 || preset.anchors > 1 {
        return Err(config_err("need at least one layer and at most one anchor"));
    }
    let l = preset.n_layers;
    let names: Vec<String> = if a.policies.is_empty() {
        std::iter::once("full".to_string())
            .chain([l / 2, 5 * l / 8, 3 * l / 4, 7 * l / 8].into_iter().filter(|&k| k >= 1).map(|k| format!("speed+bos:{k}")))
            .collect()
    } else {
        a.policies.clone()
    };
    let policies = names.iter().map(|s| parse_policy(s)).collect::<Result<Vec<_>>>()?;
    for p in &policies {
        p.validate(l).map_err(config_err)?;
    }
    let lens = if a.lens.is_empty() { (10..=17).map(|e| 1u64 << e).collect() } else { a.lens.clone() };
    let rows = cost_table(&preset, &lens, &policies).map_err(config_err)?;
    let mut out = open_out(a.out.as_deref())?;
    write_cost_csv(&mut out, &rows).map_err(stdout_err)?;
    out.flush().map_err(stdout_err)?;
    Ok(())
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Trace files from `generate --capture-attention --capture-hidden`.
    /// Traces are grouped by their category label, or by file name.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Summary JSON destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct DiagnoseOutput<'a> {
    meta: serde_json::Value,
    #[serde(flatten)]
    report: &'a DiagnosticsReport,
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    let mut groups: Vec<(String, Vec<Vec<kvdepth::diagnostics::LayerStats>>)> = Vec::new();
    let mut policies = std::collections::BTreeSet::new();
    let mut seeds = std::collections::BTreeSet::new();
    for path in &a.traces {
        let f = File::open(path).map_err(io_err(path))?;
        let t = TraceFile::read_jsonl(BufReader::new(f)).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let stats = layer_stats(&t.meta.prompt, &t.steps()).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let label = t.meta.category.clone().unwrap_or_else(|| {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        policies.insert(t.meta.policy.clone());
        seeds.insert(t.meta.seed);
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push(stats),
            None => groups.push((label, vec![stats])),
        }
    }
    let mut categories = Vec::new();
    for (category, runs) in groups {
        let layers = average_stats(&runs).map_err(config_err)?;
        let peaks = peak_summary(&layers).map_err(|e| config_err(format!("{category}: {e}")))?;
        categories.push(CategorySummary { category, generations: runs.len(), layers, peaks });
    }
    let report = DiagnosticsReport::new(categories);
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seeds,
        "policy": policies,
        "inputs": a.traces,
    });
    let mut out = open_out(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &DiagnoseOutput { meta, report: &report }).map_err(|e| stdout_err(e.into()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(stdout_err)?;
    Ok(())
}

#[derive(Args)]
struct LoopArgs {
    /// Prediction files, one `{"id": .., "text": ..}` object per line.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Verdict JSONL destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_detect_loops(a: LoopArgs) -> Result<()> {
    let mut out = open_out(a.out.as_deref())?;
    let mut emit = |v: serde_json::Value| -> Result<()> {
        serde_json::to_writer(&mut out, &v).map_err(|e| stdout_err(e.into()))?;
        writeln!(out).map_err(stdout_err)
    };
    emit(serde_json::json!({"meta": {"version": env!("CARGO_PKG_VERSION"), "inputs": a.inputs}}))?;
    for path in &a.inputs {
        let f = File::open(path).map_err(io_err(path))?;
        let preds = read_predictions(BufReader::new(f)).map_err(|e| match e {
            kvdepth::loops::LoopError::Io(source) => CliError::Io { path: path.display().to_string(), source },
            other => config_err(format!("{}: {other}", path.display())),
        })?;
        let report = loop_report(&preds).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        emit(serde_json::json!({
            "file": path,
            "examples": report.examples,
            "flagged": report.flagged,
            "loop_rate": (report.loop_rate * 10.0).round() / 10.0,
        }))?;
        for v in &report.verdicts {
            let mut rec = serde_json::to_value(v).map_err(|e| stdout_err(e.into()))?;
            rec["file"] = serde_json::json!(path);
            emit(rec)?;
        }
        eprintln!("{}: LoopRate {:.1}% ({} of {})", path.display(), report.loop_rate, report.flagged, report.examples);
    }
    out.flush().map_err(stdout_err)
}

#[derive(Args)]
struct VerifyArgs {
    /// Randomized equivalence trials.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Longest random prompt.
    #[arg(long, default_value_t = 128)]
    max_prompt: usize,
    /// Longest random continuation.
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Mutation check: run the engine with its cutoff shifted by this many
    /// layers while the oracle keeps the true one. Any nonzero value should
    /// make verification fail.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    inject_cutoff_offset: i64,
    /// Skip the exhaustive mask enumeration.
    #[arg(long)]
    no_masks: bool,
    /// Run trials one at a time.
    #[arg(long)]
    sequential: bool,
    /// Full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    if a.trials == 0 && a.no_masks {
        return Err(config_err("nothing to verify"));
    }
    if a.max_prompt == 0 || a.max_new == 0 {
        return Err(config_err("--max-prompt and --max-new must be positive"));
    }
    let cfg = VerifyConfig {
        trials: a.trials,
        seed: a.seed,
        max_prompt: a.max_prompt,
        max_new: a.max_new,
        cutoff_offset: a.inject_cutoff_offset,
        enumerate_masks: !a.no_masks,
        ..VerifyConfig::default()
    };
    println!("verify seed={} trials={} cutoff_offset={}", cfg.seed, cfg.trials, cfg.cutoff_offset);
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let report = run_battery(&cfg, exec);
    let failed = report.failed_trials();
    let worst = report.trials.iter().map(|t| t.max_logit_diff).fold(0.0f32, f32::max);
    println!("equivalence: {} trials, {} failed, max logit diff {:.3e}", report.trials.len(), failed, worst);
    for t in report.trials.iter().filter(|t| !t.passed()).take(5) {
        println!(
            "  trial {} {} L={} prompt={} new={}: tokens_match={} diff={:.3e} kv={}/{} upper_body={}{}",
            t.index, t.policy, t.n_layers, t.prompt_len, t.max_new, t.tokens_match, t.max_logit_diff,
            t.kv_bytes, t.expected_bytes, t.upper_body_entries,
            t.error.as_deref().map(|e| format!(" error={e}")).unwrap_or_default()
        );
    }
    for (name, m) in [("decode masks", &report.decode_masks), ("training masks", &report.training_masks)] {
        if let Some(m) = m {
            println!("{name}: {} cases, {} failed", m.cases, m.failures);
            for e in &m.examples {
                println!("  {e}");
            }
        }
    }
    if let Some(p) = &a.json {
        let f = File::create(p).map_err(io_err(p))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &report).map_err(|e| CliError::Io { path: p.display().to_string(), source: e.into() })?;
    }
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::Verify(format!("{failed} trial(s) failed")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KVDEPTH_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::DetectLoops(a) => cmd_detect_loops(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
