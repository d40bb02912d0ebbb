//! Prompt-length sweep with repeated timing, KV accounting and report
//! emission.
//!
//! Each (length, policy) cell runs once untimed, then `repeats` timed
//! generations; timed runs rotate through the policies. TTFT covers prefill through the first token's logits; TPOT
//! is the remaining decode time divided by the number of decode steps.

use crate::cost::{
    bytes_speed, gib, layer_token_proxy, reduction_pct, round_to, speedup_ratio, CostInputs, ProxyWeights,
};
use crate::engine::{generate, CaptureOptions, EngineError, KvSummary};
use crate::model::{Model, ModelConfig, BOS_ID};
use crate::policy::{PolicyKind, VisibilityPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("timer resolution {resolution:?} is coarser than 1us and a run took only {run:?}")]
    TimerResolution { resolution: Duration, run: Duration },
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("prompt length must be at least 1")]
    EmptyPrompt,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub prompt_lens: Vec<usize>,
    pub policies: Vec<VisibilityPolicy>,
    pub max_new: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            prompt_lens: vec![1024, 2048, 4096],
            policies: vec![VisibilityPolicy::full()],
            max_new: 128,
            repeats: 5,
            seed: 123,
        }
    }
}

/// BoS followed by `len - 1` seeded random bytes.
pub fn synthetic_prompt(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::once(BOS_ID).chain((1..len).map(|_| rng.random_range(0..256u32))).take(len).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1).
    pub std_ms: f64,
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl DurationStats {
    pub fn from_samples(samples: &[Duration]) -> Self {
        let ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let std = if ms.len() > 1 { (ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        let mut sorted = ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 };
        Self { mean_ms: mean, std_ms: std, median_ms: median, samples_ms: ms }
    }

    pub fn mean(&self) -> Duration {
        Duration::from_secs_f64(self.mean_ms / 1e3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub prompt_len: usize,
    pub policy: String,
    pub ttft: DurationStats,
    /// Absent when `max_new` is 1.
    pub tpot: Option<DurationStats>,
    pub ttft_speedup: f64,
    pub tpot_speedup: Option<f64>,
    pub kv: KvSummary,
    pub active_kv_bytes: u64,
    pub kv_gib: f64,
    pub kv_reduction_pct: f64,
    pub proxy_units: u128,
    pub proxy_reduction_pct: f64,
}

/// Smallest nonzero step observed between consecutive clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn check_timing(resolution: Duration, run: Duration) -> Result<(), BenchError> {
    if run < Duration::from_millis(1) && resolution > Duration::from_micros(1) {
        return Err(BenchError::TimerResolution { resolution, run });
    }
    Ok(())
}

/// Cost inputs matching what a run over `prompt_len` tokens with `max_new`
/// outputs leaves in the cache: the anchor (if any), the remaining prompt
/// body before the trigger, and the trigger plus every fed-back token.
pub fn realized_inputs(config: &ModelConfig, policy: &VisibilityPolicy, kv: &KvSummary) -> CostInputs {
    CostInputs {
        n_layers: config.n_layers,
        cutoff: policy.effective_cutoff(config.n_layers),
        prefill_body: kv.prefill_body as u64,
        anchors: kv.anchors as u64,
        decode: kv.decode as u64,
        geometry: config.kv_geometry(crate::engine::ACCOUNTING_BYTES_PER_SCALAR),
    }
}

pub fn proxy_weights(config: &ModelConfig) -> ProxyWeights {
    ProxyWeights::for_architecture(
        config.d_model as u64,
        config.n_heads as u64,
        config.n_kv_heads as u64,
        config.d_head as u64,
        config.d_ff as u64,
        config.vocab_size as u64,
    )
}

/// Runs the sweep. A full-attention baseline is added per length when the
/// policy list lacks one; it comes first within each length.
pub fn run_sweep(model: &Model, cfg: &SweepConfig) -> Result<Vec<BenchRow>, BenchError> {
    if cfg.repeats == 0 {
        return Err(BenchError::NoRepeats);
    }
    let mut policies = cfg.policies.clone();
    let full = match policies.iter().position(|p| p.kind == PolicyKind::FullAttn) {
        Some(i) => policies.remove(i),
        None => VisibilityPolicy::full(),
    };
    policies.insert(0, full);
    let resolution = timer_resolution();
    let weights = proxy_weights(model.config());
    let mut rows = Vec::new();
    for &len in &cfg.prompt_lens {
        if len == 0 {
            return Err(BenchError::EmptyPrompt);
        }
        let prompt = synthetic_prompt(len, cfg.seed);
        for policy in &policies {
            generate(model, policy, &prompt, cfg.max_new, CaptureOptions::default())?;
        }
        // round-robin so slow drift in machine load hits every policy alike
        let mut ttft = vec![Vec::with_capacity(cfg.repeats); policies.len()];
        let mut tpot = vec![Vec::with_capacity(cfg.repeats); policies.len()];
        let mut kvs = vec![None; policies.len()];
        for _ in 0..cfg.repeats {
            for (i, policy) in policies.iter().enumerate() {
                let t = generate(model, policy, &prompt, cfg.max_new, CaptureOptions::default())?;
                check_timing(resolution, t.timing.ttft)?;
                ttft[i].push(t.timing.ttft);
                if t.timing.decode_steps > 0 {
                    check_timing(resolution, t.timing.decode)?;
                    tpot[i].push(t.timing.decode / t.timing.decode_steps as u32);
                }
                kvs[i] = t.kv;
            }
        }
        let mut baseline: Option<(u64, Duration, Option<Duration>)> = None;
        for (i, policy) in policies.iter().enumerate() {
            let kv = kvs[i].expect("engine reports cache composition");
            let inputs = realized_inputs(model.config(), policy, &kv);
            let active = bytes_speed(&inputs);
            debug_assert_eq!(active, kv.bytes);
            let proxy = layer_token_proxy(&inputs, &weights);
            let ttft = DurationStats::from_samples(&ttft[i]);
            let tpot = (!tpot[i].is_empty()).then(|| DurationStats::from_samples(&tpot[i]));
            let (base_bytes, base_ttft, base_tpot) =
                *baseline.get_or_insert((active, ttft.mean(), tpot.as_ref().map(DurationStats::mean)));
            rows.push(BenchRow {
                prompt_len: len,
                policy: policy.to_string(),
                ttft_speedup: speedup_ratio(base_ttft, ttft.mean()).unwrap_or(f64::NAN),
                tpot_speedup: base_tpot.zip(tpot.as_ref()).and_then(|(b, v)| speedup_ratio(b, v.mean()).ok()),
                ttft,
                tpot,
                kv,
                active_kv_bytes: active,
                kv_gib: gib(active),
                kv_reduction_pct: reduction_pct(base_bytes as f64, active as f64),
                proxy_units: proxy.speed_units,
                proxy_reduction_pct: proxy.reduction_pct,
            });
            log::info!("bench len={len} policy={policy} ttft={:.3}ms", rows.last().unwrap().ttft.mean_ms);
        }
    }
    Ok(rows)
}

/// One line of the CSV report, at the precision it is printed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub prompt_len: usize,
    pub policy: String,
    pub ttft_ms_mean: String,
    pub ttft_ms_std: String,
    pub ttft_speedup: String,
    pub tpot_ms_mean: String,
    pub tpot_ms_std: String,
    pub tpot_speedup: String,
    pub kv_gib: String,
    pub kv_reduction_pct: String,
    pub proxy_reduction_pct: String,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "prompt_len",
    "policy",
    "ttft_ms_mean",
    "ttft_ms_std",
    "ttft_speedup",
    "tpot_ms_mean",
    "tpot_ms_std",
    "tpot_speedup",
    "kv_gib",
    "kv_reduction_pct",
    "proxy_reduction_pct",
];

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

impl From<&BenchRow> for CsvRow {
    fn from(r: &BenchRow) -> Self {
        Self {
            prompt_len: r.prompt_len,
            policy: r.policy.clone(),
            ttft_ms_mean: format!("{:.3}", r.ttft.mean_ms),
            ttft_ms_std: format!("{:.3}", r.ttft.std_ms),
            ttft_speedup: format!("{:.2}", r.ttft_speedup),
            tpot_ms_mean: opt(r.tpot.as_ref().map(|t| t.mean_ms), 3),
            tpot_ms_std: opt(r.tpot.as_ref().map(|t| t.std_ms), 3),
            tpot_speedup: opt(r.tpot_speedup, 2),
            kv_gib: format!("{:.6}", r.kv_gib),
            kv_reduction_pct: format!("{:.1}", round_to(r.kv_reduction_pct, 1)),
            proxy_reduction_pct: format!("{:.1}", round_to(r.proxy_reduction_pct, 1)),
        }
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_csv<R: Read>(input: R) -> Result<Vec<CsvRow>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub version: String,
    pub config_fingerprint: String,
    pub config: ModelConfig,
    pub sweep: SweepConfig,
    pub parallel: bool,
    pub timer_resolution_ns: u128,
}

impl ReportMeta {
    pub fn new(model: &Model, sweep: &SweepConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            config_fingerprint: model.config().fingerprint(),
            config: model.config().clone(),
            sweep: sweep.clone(),
            parallel: model.exec().is_parallel(),
            timer_resolution_ns: timer_resolution().as_nanos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: ReportMeta,
    pub rows: Vec<BenchRow>,
}

/// Writes `<stem>.csv` and the full-precision `<stem>.json` next to it.
pub fn write_report(rows: &[BenchRow], meta: &ReportMeta, csv_path: &Path) -> Result<(), BenchError> {
    let csv_rows: Vec<CsvRow> = rows.iter().map(CsvRow::from).collect();
    write_csv(std::fs::File::create(csv_path)?, &csv_rows)?;
    let json = std::fs::File::create(csv_path.with_extension("json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(json), &Report { meta: meta.clone(), rows: rows.to_vec() })?;
    Ok(())
}
