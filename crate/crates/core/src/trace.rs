//! JSONL dump of a generation: one metadata line, then one record per
//! decode-phase step.

use crate::diagnostics::{attention_mass_by_bucket, BucketMasses, DiagError, SpanMap};
use crate::engine::{GenerationTrace, KvSummary, StepCapture};
use crate::model::BOS_ID;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Diagnostics(#[from] DiagError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub version: String,
    pub seed: u64,
    pub policy: String,
    pub model_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub prompt: Vec<u32>,
    pub max_new: usize,
    pub ttft_ms: f64,
    pub decode_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv: Option<KvSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub token: u32,
    #[serde(flatten)]
    pub capture: StepCapture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_buckets: Option<Vec<BucketMasses>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_norms: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: TraceMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

impl TraceFile {
    pub fn from_trace(
        trace: &GenerationTrace,
        seed: u64,
        model_fingerprint: String,
        category: Option<String>,
    ) -> Result<Self, TraceError> {
        let bos = trace.prompt.first() == Some(&BOS_ID);
        let mut records = Vec::with_capacity(trace.steps.len());
        for (step, (capture, &token)) in trace.steps.iter().zip(&trace.generated).enumerate() {
            let attn_buckets = match &capture.attention {
                Some(rows) => {
                    let span = SpanMap::for_prompt(trace.prompt.len(), bos, capture.position);
                    Some(rows.iter().map(|r| attention_mass_by_bucket(r, &span)).collect::<Result<_, _>>()?)
                }
                None => None,
            };
            let hidden_norms = capture.hidden.as_ref().map(|states| {
                states.iter().map(|h| h.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()).collect()
            });
            records.push(TraceRecord { step, token, capture: capture.clone(), attn_buckets, hidden_norms });
        }
        Ok(Self {
            meta: TraceMeta {
                version: env!("CARGO_PKG_VERSION").into(),
                seed,
                policy: trace.policy.to_string(),
                model_fingerprint,
                category,
                prompt: trace.prompt.clone(),
                max_new: trace.generated.len(),
                ttft_ms: trace.timing.ttft.as_secs_f64() * 1e3,
                decode_ms: trace.timing.decode.as_secs_f64() * 1e3,
                kv: trace.kv,
            },
            records,
        })
    }

    pub fn steps(&self) -> Vec<StepCapture> {
        self.records.iter().map(|r| r.capture.clone()).collect()
    }

    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> Result<(), TraceError> {
        let io = |e: serde_json::Error| TraceError::Io(e.into());
        serde_json::to_writer(&mut *out, &MetaLine { meta: self.meta.clone() }).map_err(io)?;
        writeln!(out)?;
        for r in &self.records {
            serde_json::to_writer(&mut *out, r).map_err(io)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, TraceError> {
        let mut meta = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let json = |source| TraceError::Json { line: i + 1, source };
            if meta.is_none() {
                meta = Some(serde_json::from_str::<MetaLine>(&line).map_err(json)?.meta);
            } else {
                records.push(serde_json::from_str(&line).map_err(json)?);
            }
        }
        Ok(Self { meta: meta.ok_or(TraceError::Empty)?, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{generate, CaptureOptions};
    use crate::model::{Model, ModelConfig};
    use crate::policy::VisibilityPolicy;

    fn trace(capture: CaptureOptions) -> GenerationTrace {
        let cfg = ModelConfig { n_layers: 4, d_model: 32, n_heads: 4, n_kv_heads: 2, d_head: 8, d_ff: 48, ..Default::default() };
        let model = Model::new(cfg).unwrap();
        generate(&model, &VisibilityPolicy::speed(2, true), &[BOS_ID, 5, 6, 7, 8], 4, capture).unwrap()
    }

    #[test]
    fn round_trip_with_captures() {
        let t = trace(CaptureOptions::all());
        let file = TraceFile::from_trace(&t, 123, "abc".into(), Some("math".into())).unwrap();
        let mut buf = Vec::new();
        file.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("{\"meta\":"));
        let back = TraceFile::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.records[0].capture.position, 4);
        let buckets = back.records[1].attn_buckets.as_ref().unwrap();
        assert_eq!(buckets.len(), 4);
        assert!(buckets.iter().all(|b| (b.total() - 1.0).abs() < 1e-5));
        assert_eq!(back.records[0].hidden_norms.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn plain_records_carry_tokens_only() {
        let t = trace(CaptureOptions::default());
        let file = TraceFile::from_trace(&t, 1, "x".into(), None).unwrap();
        let mut buf = Vec::new();
        file.write_jsonl(&mut buf).unwrap();
        let second = String::from_utf8(buf).unwrap().lines().nth(1).unwrap().to_string();
        assert_eq!(second, format!("{{\"step\":0,\"token\":{},\"position\":4}}", t.generated[0]));
    }

    #[test]
    fn bad_input() {
        assert!(matches!(TraceFile::read_jsonl("".as_bytes()), Err(TraceError::Empty)));
        assert!(matches!(TraceFile::read_jsonl("{\"meta\": 3}".as_bytes()), Err(TraceError::Json { line: 1, .. })));
    }
}
