//! Prefill and decode under a visibility policy, plus the masked full-depth
//! reference used to check them.
//!
//! The engine materializes only what the policy keeps: non-anchor prompt
//! tokens run through layers `1..=K` as one batch and are then dropped; the
//! BoS anchor (when enabled) and the trigger token (the last prompt position,
//! whose full-depth state yields the first generated token) continue through
//! `K+1..=L`. Every generated token runs all `L` layers and is cached at all
//! of them.
//!
//! [`reference_generate`] never truncates anything. It recomputes the whole
//! sequence at every layer on every step and enforces the policy with
//! teacher-forcing masks alone.

use crate::kv::{KvError, KvGeometry, LayeredKvCache};
use crate::model::{AttentionMask, DenseMask, Model, ModelError, BOS_ID};
use crate::policy::{
    build_decode_mask, build_training_mask, key_visible, Band, PolicyError, TokenClass, TokenRef,
    VisibilityPolicy,
};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Bytes per scalar used for KV accounting (bf16), independent of the f32
/// compute precision.
pub const ACCOUNTING_BYTES_PER_SCALAR: usize = 2;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("policy {0} anchors on BoS but the prompt does not start with the BoS id")]
    MissingBos(VisibilityPolicy),
    #[error("max_new must be at least 1")]
    ZeroMaxNew,
    #[error("cache was built for policy {cache} but decode was asked to run {requested}")]
    PolicyMismatch { cache: VisibilityPolicy, requested: VisibilityPolicy },
    #[error("cache has no prefill state")]
    EmptyCache,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureOptions {
    pub attention: bool,
    pub hidden: bool,
}

impl CaptureOptions {
    pub fn all() -> Self {
        Self { attention: true, hidden: true }
    }
}

/// What was recorded for one decode-phase query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepCapture {
    pub position: usize,
    /// One head-averaged row per layer, indexed by absolute key position
    /// `0..=position`; keys that were not visible carry 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f32>>>,
    /// Embedding followed by each layer's output: `L + 1` states.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    pub token: u32,
    pub capture: StepCapture,
}

/// Greedy argmax with ties broken toward the lowest id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Visibility rows computed on the fly from the policy predicate.
struct PolicyMask<'a> {
    policy: &'a VisibilityPolicy,
    band: Band,
    keys: Vec<TokenRef>,
    queries: &'a [TokenRef],
}

impl AttentionMask for PolicyMask<'_> {
    fn fill_row(&self, query: usize, row: &mut [bool]) {
        let q = self.queries[query];
        for (slot, &k) in row.iter_mut().zip(&self.keys) {
            *slot = key_visible(self.policy, self.band, q, k);
        }
    }
}

fn positional_row(row: &[f32], keys: &[TokenRef], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; width];
    for (w, k) in row.iter().zip(keys) {
        out[k.position] = *w;
    }
    out
}

fn finish(model: &Model, hidden: &[f32]) -> Result<(Vec<f32>, u32), EngineError> {
    let normed = model.final_norm(hidden)?;
    let logits = model.logits(&normed)?;
    let token = argmax(&logits);
    Ok((logits, token))
}

#[derive(Debug, Clone)]
pub struct Prefilled {
    pub cache: LayeredKvCache,
    /// Logits and greedy token produced by the trigger's full-depth state.
    pub output: StepOutput,
}

/// Shallow prefill: the full prompt through `1..=K`, then only the anchor
/// and trigger rows through `K+1..=L`.
pub fn prefill(
    model: &Model,
    policy: &VisibilityPolicy,
    prompt: &[u32],
    capture: CaptureOptions,
) -> Result<Prefilled, EngineError> {
    let cfg = model.config();
    let n_layers = cfg.n_layers;
    policy.validate(n_layers)?;
    if prompt.is_empty() {
        return Err(EngineError::EmptyPrompt);
    }
    if policy.anchor_bos && prompt[0] != BOS_ID {
        return Err(EngineError::MissingBos(*policy));
    }
    let classes = policy.classify_prompt(prompt.len());
    let mut tokens: Vec<TokenRef> =
        classes.iter().enumerate().map(|(i, &c)| TokenRef::new(i, c)).collect();
    let trigger = prompt.len() - 1;
    let cutoff = policy.effective_cutoff(n_layers);
    let mut cache = LayeredKvCache::new(n_layers, *policy, cfg.kv_geometry(ACCOUNTING_BYTES_PER_SCALAR));

    let mut h = model.embed(prompt)?;
    let mut attn_rows = Vec::new();
    let mut hidden_states = Vec::new();
    if capture.hidden {
        hidden_states.push(h.row(trigger).to_vec());
    }

    for layer in 1..=n_layers {
        if layer == cutoff + 1 {
            // upper band: only rows the policy materializes keep going
            let keep: Vec<usize> = (0..tokens.len())
                .filter(|&i| policy.materializes(tokens[i].class, layer, n_layers))
                .collect();
            h = h.select_rows(&keep);
            tokens = keep.iter().map(|&i| tokens[i]).collect();
        }
        let band = policy.band(layer, n_layers);
        let cached = cache.read_band(layer)?;
        let mut keys: Vec<TokenRef> = cached.tokens.to_vec();
        keys.extend_from_slice(&tokens);
        let mask = PolicyMask { policy, band, keys, queries: &tokens };
        let out = model.layer_forward(layer, &h, &tokens, cached, &mask, capture.attention)?;
        let last = tokens.len() - 1;
        if let Some(rows) = &out.attn {
            attn_rows.push(positional_row(&rows[last], &mask.keys, prompt.len()));
        }
        for (i, t) in tokens.iter().enumerate() {
            let stored = if t.class.is_decode() { TokenRef::new(t.position, TokenClass::DecodeHistory) } else { *t };
            cache.append_slices(layer, stored, out.keys.row(i), out.values.row(i))?;
        }
        h = out.hidden;
        if capture.hidden {
            hidden_states.push(h.row(last).to_vec());
        }
    }

    debug_assert_eq!(tokens.last().map(|t| t.position), Some(trigger));
    let (logits, token) = finish(model, h.row(h.rows() - 1))?;
    let capture = StepCapture {
        position: trigger,
        attention: capture.attention.then_some(attn_rows),
        hidden: capture.hidden.then_some(hidden_states),
    };
    Ok(Prefilled { cache, output: StepOutput { logits, token, capture } })
}

/// One full-depth decode step for `token`, placed right after the last
/// cached position.
pub fn decode_step(
    model: &Model,
    policy: &VisibilityPolicy,
    cache: &mut LayeredKvCache,
    token: u32,
    capture: CaptureOptions,
) -> Result<StepOutput, EngineError> {
    if cache.policy() != policy {
        return Err(EngineError::PolicyMismatch { cache: *cache.policy(), requested: *policy });
    }
    let n_layers = model.config().n_layers;
    let position = cache
        .read_band(1)?
        .tokens
        .last()
        .map(|t| t.position + 1)
        .ok_or(EngineError::EmptyCache)?;
    let query = TokenRef::new(position, TokenClass::DecodeCurrent);
    let queries = [query];
    let mut h = model.embed(&[token])?;
    let mut attn_rows = Vec::new();
    let mut hidden_states = Vec::new();
    if capture.hidden {
        hidden_states.push(h.row(0).to_vec());
    }
    for layer in 1..=n_layers {
        let cached = cache.read_band(layer)?;
        let row = build_decode_mask(policy, layer, n_layers, cached.tokens, query)?;
        let out = model.layer_forward(layer, &h, &queries, cached, &DenseMask(vec![row]), capture.attention)?;
        if let Some(rows) = &out.attn {
            let mut keys = cached.tokens.to_vec();
            keys.push(query);
            attn_rows.push(positional_row(&rows[0], &keys, position + 1));
        }
        let stored = TokenRef::new(position, TokenClass::DecodeHistory);
        cache.append_slices(layer, stored, out.keys.row(0), out.values.row(0))?;
        h = out.hidden;
        if capture.hidden {
            hidden_states.push(h.row(0).to_vec());
        }
    }
    let (logits, next) = finish(model, h.row(0))?;
    Ok(StepOutput {
        logits,
        token: next,
        capture: StepCapture {
            position,
            attention: capture.attention.then_some(attn_rows),
            hidden: capture.hidden.then_some(hidden_states),
        },
    })
}

/// Realized cache composition after a run, read from layer 1 (which holds
/// every processed token).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvSummary {
    pub prefill_body: usize,
    pub anchors: usize,
    pub decode: usize,
    pub entries: u64,
    pub bytes: u64,
}

impl KvSummary {
    pub fn of(cache: &LayeredKvCache) -> Self {
        let (prefill_body, anchors, decode) = cache.class_counts(1);
        Self { prefill_body, anchors, decode, entries: cache.total_entries(), bytes: cache.bytes_used() }
    }

    pub fn bytes_with(&self, geometry: KvGeometry) -> u64 {
        self.entries * geometry.bytes_per_entry()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    /// Prefill through the first generated token's logits.
    pub ttft: Duration,
    /// All decode steps after the first token.
    pub decode: Duration,
    pub decode_steps: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub policy: VisibilityPolicy,
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    /// Logits behind each generated token.
    pub logits: Vec<Vec<f32>>,
    pub steps: Vec<StepCapture>,
    pub timing: PhaseTiming,
    pub kv: Option<KvSummary>,
}

/// Greedy generation of exactly `max_new` tokens (no EOS at this scale).
pub fn generate(
    model: &Model,
    policy: &VisibilityPolicy,
    prompt: &[u32],
    max_new: usize,
    capture: CaptureOptions,
) -> Result<GenerationTrace, EngineError> {
    Ok(generate_with_cache(model, policy, prompt, max_new, capture)?.0)
}

/// [`generate`], also handing back the final cache.
pub fn generate_with_cache(
    model: &Model,
    policy: &VisibilityPolicy,
    prompt: &[u32],
    max_new: usize,
    capture: CaptureOptions,
) -> Result<(GenerationTrace, LayeredKvCache), EngineError> {
    if max_new == 0 {
        return Err(EngineError::ZeroMaxNew);
    }
    let start = Instant::now();
    let Prefilled { mut cache, output } = prefill(model, policy, prompt, capture)?;
    let ttft = start.elapsed();

    let mut generated = vec![output.token];
    let mut logits = vec![output.logits];
    let mut steps = vec![output.capture];
    let decode_start = Instant::now();
    while generated.len() < max_new {
        let last = *generated.last().expect("non-empty");
        let out = decode_step(model, policy, &mut cache, last, capture)?;
        generated.push(out.token);
        logits.push(out.logits);
        steps.push(out.capture);
    }
    let timing = PhaseTiming { ttft, decode: decode_start.elapsed(), decode_steps: max_new - 1 };
    let trace = GenerationTrace {
        policy: *policy,
        prompt: prompt.to_vec(),
        generated,
        logits,
        steps,
        timing,
        kv: Some(KvSummary::of(&cache)),
    };
    Ok((trace, cache))
}

/// Oracle generation: every token at every layer, policy enforced only
/// through teacher-forcing masks, whole sequence recomputed per step.
pub fn reference_generate(
    model: &Model,
    policy: &VisibilityPolicy,
    prompt: &[u32],
    max_new: usize,
    capture: CaptureOptions,
) -> Result<GenerationTrace, EngineError> {
    let cfg = model.config();
    let n_layers = cfg.n_layers;
    policy.validate(n_layers)?;
    if max_new == 0 {
        return Err(EngineError::ZeroMaxNew);
    }
    if prompt.is_empty() {
        return Err(EngineError::EmptyPrompt);
    }
    if policy.anchor_bos && prompt[0] != BOS_ID {
        return Err(EngineError::MissingBos(*policy));
    }
    let classes = policy.classify_prompt(prompt.len());
    let n_prefill = classes.iter().take_while(|c| c.is_prefill()).count();
    let prefill_classes = &classes[..n_prefill];

    let start = Instant::now();
    let mut seq = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_new);
    let mut logits = Vec::with_capacity(max_new);
    let mut steps = Vec::with_capacity(max_new);
    let mut ttft = Duration::ZERO;
    for step in 0..max_new {
        let n = seq.len();
        let mask = build_training_mask(policy, n_layers, prefill_classes, n - n_prefill);
        let refs: Vec<TokenRef> = (0..n)
            .map(|i| TokenRef::new(i, if i < n_prefill { prefill_classes[i] } else { TokenClass::DecodeHistory }))
            .collect();
        let mut h: Matrix = model.embed(&seq)?;
        let mut attn_rows = Vec::new();
        let mut hidden_states = Vec::new();
        if capture.hidden {
            hidden_states.push(h.row(n - 1).to_vec());
        }
        for layer in 1..=n_layers {
            let rows = DenseMask(mask.for_layer(layer).to_vec());
            let empty = crate::kv::BandView::empty(cfg.kv_width());
            let out = model.layer_forward(layer, &h, &refs, empty, &rows, capture.attention)?;
            if let Some(a) = &out.attn {
                attn_rows.push(a[n - 1].clone());
            }
            h = out.hidden;
            if capture.hidden {
                hidden_states.push(h.row(n - 1).to_vec());
            }
        }
        let (l, token) = finish(model, h.row(n - 1))?;
        if step == 0 {
            ttft = start.elapsed();
        }
        steps.push(StepCapture {
            position: n - 1,
            attention: capture.attention.then_some(attn_rows),
            hidden: capture.hidden.then_some(hidden_states),
        });
        logits.push(l);
        generated.push(token);
        seq.push(token);
    }
    let timing = PhaseTiming { ttft, decode: start.elapsed() - ttft, decode_steps: max_new - 1 };
    Ok(GenerationTrace { policy: *policy, prompt: prompt.to_vec(), generated, logits, steps, timing, kv: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::par::Exec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(n_layers: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            n_layers,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            d_ff: 48,
            init_seed: seed,
            ..ModelConfig::default()
        };
        Model::new(cfg).unwrap()
    }

    fn prompt(len: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![BOS_ID];
        p.extend((1..len).map(|_| rng.random_range(0..256u32)));
        p
    }

    fn max_abs(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn shallow_prefill_keeps_anchor_and_trigger_above_cutoff() {
        let model = small_model(4, 1);
        let policy = VisibilityPolicy::speed(2, true);
        let pre = prefill(&model, &policy, &[BOS_ID, 10, 20, 30], CaptureOptions::default()).unwrap();
        for layer in 1..=2 {
            assert_eq!(pre.cache.read_band(layer).unwrap().positions().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        }
        for layer in 3..=4 {
            let band = pre.cache.read_band(layer).unwrap();
            assert_eq!(band.positions().collect::<Vec<_>>(), vec![0, 3]);
            assert_eq!(band.tokens[0].class, TokenClass::BosAnchor);
            assert_eq!(band.tokens[1].class, TokenClass::DecodeHistory);
        }
    }

    #[test]
    fn anchor_free_prefill_drops_bos_above_cutoff() {
        let model = small_model(4, 1);
        let pre = prefill(&model, &VisibilityPolicy::speed(2, false), &[BOS_ID, 10, 20, 30], CaptureOptions::default())
            .unwrap();
        assert_eq!(pre.cache.read_band(3).unwrap().positions().collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn cutoff_at_depth_matches_full_attention() {
        let model = small_model(5, 2);
        let p = prompt(20, 3);
        let full = generate(&model, &VisibilityPolicy::full(), &p, 6, CaptureOptions::default()).unwrap();
        for anchored in [false, true] {
            let deg = generate(&model, &VisibilityPolicy::speed(5, anchored), &p, 6, CaptureOptions::default()).unwrap();
            assert_eq!(full.generated, deg.generated);
            assert_eq!(full.logits, deg.logits);
        }
    }

    #[test]
    fn lower_band_matches_full_attention() {
        let model = small_model(6, 4);
        let p = prompt(24, 5);
        let full = prefill(&model, &VisibilityPolicy::full(), &p, CaptureOptions::default()).unwrap();
        for policy in [VisibilityPolicy::speed(3, true), VisibilityPolicy::self_only(3, false)] {
            let pre = prefill(&model, &policy, &p, CaptureOptions::default()).unwrap();
            for layer in 1..=3 {
                let (a, b) = (full.cache.read_band(layer).unwrap(), pre.cache.read_band(layer).unwrap());
                assert_eq!(a.len(), b.len());
                for i in 0..a.len() {
                    assert!(max_abs(a.key(i), b.key(i)) <= 1e-6);
                    assert!(max_abs(a.value(i), b.value(i)) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn positions_are_never_renumbered() {
        let model = small_model(4, 6);
        let p = prompt(10, 7);
        let (_, cache) =
            generate_with_cache(&model, &VisibilityPolicy::speed(2, true), &p, 5, CaptureOptions::default()).unwrap();
        assert_eq!(cache.read_band(1).unwrap().positions().collect::<Vec<_>>(), (0..14).collect::<Vec<_>>());
        assert_eq!(
            cache.read_band(4).unwrap().positions().collect::<Vec<_>>(),
            [0, 9, 10, 11, 12, 13].to_vec()
        );
    }

    #[test]
    fn every_fed_back_token_reaches_all_layers() {
        let model = small_model(5, 8);
        let policy = VisibilityPolicy::self_only(2, false);
        let (trace, cache) = generate_with_cache(&model, &policy, &prompt(12, 9), 7, CaptureOptions::default()).unwrap();
        assert_eq!(trace.generated.len(), 7);
        for layer in 1..=5 {
            let decode = cache.read_band(layer).unwrap().tokens.iter().filter(|t| t.class.is_decode()).count();
            assert_eq!(decode, 7);
        }
        let kv = trace.kv.unwrap();
        assert_eq!((kv.prefill_body, kv.anchors, kv.decode), (11, 0, 7));
    }

    fn naive_full_greedy(model: &Model, prompt: &[u32], max_new: usize) -> (Vec<u32>, Vec<Vec<f32>>) {
        let mut seq = prompt.to_vec();
        let (mut toks, mut logits) = (Vec::new(), Vec::new());
        for _ in 0..max_new {
            let n = seq.len();
            let refs: Vec<TokenRef> = (0..n).map(|i| TokenRef::new(i, TokenClass::PrefillBody)).collect();
            let causal = DenseMask((0..n).map(|q| (0..n).map(|k| k <= q).collect()).collect());
            let mut h = model.embed(&seq).unwrap();
            for layer in 1..=model.config().n_layers {
                let empty = crate::kv::BandView::empty(model.config().kv_width());
                h = model.layer_forward(layer, &h, &refs, empty, &causal, false).unwrap().hidden;
            }
            let l = model.logits(&model.final_norm(h.row(n - 1)).unwrap()).unwrap();
            let t = argmax(&l);
            toks.push(t);
            logits.push(l);
            seq.push(t);
        }
        (toks, logits)
    }

    #[test]
    fn full_attention_matches_naive_recompute() {
        let model = small_model(4, 10);
        let p = prompt(16, 11);
        let trace = generate(&model, &VisibilityPolicy::full(), &p, 8, CaptureOptions::default()).unwrap();
        let (toks, logits) = naive_full_greedy(&model, &p, 8);
        assert_eq!(trace.generated, toks);
        for (a, b) in trace.logits.iter().zip(&logits) {
            assert!(max_abs(a, b) <= 1e-5);
        }
    }

    #[test]
    fn upper_band_rows_follow_the_policy() {
        let model = small_model(4, 12);
        let p = prompt(9, 13);
        let cap = CaptureOptions { attention: true, hidden: false };
        let t = generate(&model, &VisibilityPolicy::self_only(2, false), &p, 3, cap).unwrap();
        for step in &t.steps {
            let rows = step.attention.as_ref().unwrap();
            assert_eq!(rows.len(), 4);
            for row in &rows[2..] {
                assert_eq!(row[step.position], 1.0);
            }
        }
        let t = generate(&model, &VisibilityPolicy::speed(2, false), &p, 2, cap).unwrap();
        let second = &t.steps[1];
        let row = &second.attention.as_ref().unwrap()[3];
        let support: Vec<usize> = (0..row.len()).filter(|&i| row[i] > 0.0).collect();
        assert_eq!(support, vec![8, 9]);
        for step in &t.steps {
            for row in step.attention.as_ref().unwrap() {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn hidden_capture_has_one_state_per_layer_plus_embedding() {
        let model = small_model(4, 14);
        let cap = CaptureOptions { attention: false, hidden: true };
        let t = generate(&model, &VisibilityPolicy::speed(2, true), &prompt(6, 1), 3, cap).unwrap();
        let r = reference_generate(&model, &VisibilityPolicy::speed(2, true), &prompt(6, 1), 3, cap).unwrap();
        for (a, b) in t.steps.iter().zip(&r.steps) {
            let (ha, hb) = (a.hidden.as_ref().unwrap(), b.hidden.as_ref().unwrap());
            assert_eq!(ha.len(), 5);
            for (x, y) in ha.iter().zip(hb) {
                assert!(max_abs(x, y) <= 1e-5);
            }
        }
    }

    #[test]
    fn single_step_and_determinism() {
        let model = small_model(4, 15);
        let p = prompt(8, 2);
        let policy = VisibilityPolicy::speed(3, true);
        let a = generate(&model, &policy, &p, 1, CaptureOptions::all()).unwrap();
        assert_eq!(a.generated.len(), 1);
        assert_eq!(a.timing.decode_steps, 0);
        let b = generate(&model, &policy, &p, 1, CaptureOptions::all()).unwrap();
        assert_eq!(a.generated, b.generated);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn bos_only_prompt() {
        let model = small_model(4, 16);
        for policy in [VisibilityPolicy::speed(2, true), VisibilityPolicy::speed(2, false), VisibilityPolicy::full()] {
            let a = generate(&model, &policy, &[BOS_ID], 4, CaptureOptions::default()).unwrap();
            let b = reference_generate(&model, &policy, &[BOS_ID], 4, CaptureOptions::default()).unwrap();
            assert_eq!(a.generated, b.generated);
        }
    }

    #[test]
    fn errors() {
        let model = small_model(4, 17);
        let opts = CaptureOptions::default();
        assert!(matches!(generate(&model, &VisibilityPolicy::full(), &[], 1, opts), Err(EngineError::EmptyPrompt)));
        assert!(matches!(
            generate(&model, &VisibilityPolicy::speed(2, true), &[1, 2], 1, opts),
            Err(EngineError::MissingBos(_))
        ));
        assert!(matches!(generate(&model, &VisibilityPolicy::full(), &[1], 0, opts), Err(EngineError::ZeroMaxNew)));
        assert!(generate(&model, &VisibilityPolicy::speed(5, false), &[1], 1, opts).is_err());
        let mut pre = prefill(&model, &VisibilityPolicy::speed(2, false), &[1, 2], opts).unwrap();
        assert!(matches!(
            decode_step(&model, &VisibilityPolicy::speed(3, false), &mut pre.cache, 5, opts),
            Err(EngineError::PolicyMismatch { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn engine_matches_reference_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..12 {
            let l = rng.random_range(4..=6);
            let model = small_model(l, trial);
            let k = rng.random_range(1..=l);
            let policy = match trial % 4 {
                0 => VisibilityPolicy::speed(k, false),
                1 => VisibilityPolicy::speed(k, true),
                2 => VisibilityPolicy::self_only(k, false),
                _ => VisibilityPolicy::self_only(k, true),
            };
            let p = prompt(rng.random_range(1..=40), trial + 1000);
            let n = rng.random_range(1..=8);
            let a = generate(&model, &policy, &p, n, CaptureOptions::default()).unwrap();
            let b = reference_generate(&model, &policy, &p, n, CaptureOptions::default()).unwrap();
            assert_eq!(a.generated, b.generated, "trial {trial} {policy}");
            for (x, y) in a.logits.iter().zip(&b.logits) {
                assert!(max_abs(x, y) <= 1e-4, "trial {trial} {policy}");
            }
        }
    }

    #[test]
    fn execution_mode_does_not_change_results() {
        let model = small_model(4, 18);
        let seq = model.clone().with_exec(Exec::Sequential);
        let p = prompt(30, 4);
        let policy = VisibilityPolicy::speed(2, true);
        let a = generate(&model, &policy, &p, 5, CaptureOptions::all()).unwrap();
        let b = generate(&seq, &policy, &p, 5, CaptureOptions::all()).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.steps, b.steps);
    }
}
