//! Randomized and exhaustive checks of the engine against its oracles.
//!
//! * Equivalence: `generate` and `reference_generate` on random small models
//!   and policies must agree on every greedy token, with per-step logits
//!   within [`LOGIT_TOLERANCE`].
//! * Counting: the cache after each trial holds exactly the bytes the closed
//!   form predicts from the prompt length and output count, and no prompt
//!   body entries above the cutoff.
//! * Mask enumeration: every decode and training mask on a small grid equals
//!   its set-theoretic definition.
//!
//! `cutoff_offset` shifts the cutoff used by the engine only, which must make
//! the battery fail; it exists to show the checks can fail.

use crate::cost::{bytes_speed, CostInputs};
use crate::engine::{generate_with_cache, reference_generate, CaptureOptions, EngineError, ACCOUNTING_BYTES_PER_SCALAR};
use crate::model::{Model, ModelConfig, BOS_ID};
use crate::par::{self, Exec};
use crate::policy::{
    build_decode_mask, build_training_mask, visible_set, PolicyKind, TokenClass, TokenRef, VisibilityPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const LOGIT_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_prompt: usize,
    pub max_new: usize,
    pub cutoff_offset: i64,
    pub enumerate_masks: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 123,
            min_layers: 4,
            max_layers: 8,
            max_prompt: 128,
            max_new: 32,
            cutoff_offset: 0,
            enumerate_masks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub index: usize,
    pub config: ModelConfig,
    pub policy: VisibilityPolicy,
    pub prompt: Vec<u32>,
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub index: usize,
    pub n_layers: usize,
    pub policy: String,
    pub prompt_len: usize,
    pub max_new: usize,
    pub tokens_match: bool,
    pub max_logit_diff: f32,
    pub kv_bytes: u64,
    pub expected_bytes: u64,
    pub upper_body_entries: usize,
    pub error: Option<String>,
}

impl TrialOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && self.tokens_match
            && self.max_logit_diff <= LOGIT_TOLERANCE
            && self.kv_bytes == self.expected_bytes
            && self.upper_body_entries == 0
    }
}

fn pick_policy(rng: &mut ChaCha8Rng, n_layers: usize) -> VisibilityPolicy {
    let k = rng.random_range(1..=n_layers);
    match rng.random_range(0..4) {
        0 => VisibilityPolicy::speed(k, false),
        1 => VisibilityPolicy::speed(k, true),
        2 => VisibilityPolicy::self_only(k, false),
        _ => VisibilityPolicy::self_only(k, true),
    }
}

/// Deterministic trial draws for `cfg.seed`.
pub fn draw_trials(cfg: &VerifyConfig) -> Vec<TrialSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.trials)
        .map(|index| {
            let n_layers = rng.random_range(cfg.min_layers..=cfg.max_layers);
            let n_heads = 4;
            let n_kv_heads = [1, 2, 4][rng.random_range(0..3)];
            let config = ModelConfig {
                n_layers,
                d_model: 32,
                n_heads,
                n_kv_heads,
                d_head: 8,
                d_ff: 48,
                init_seed: rng.random(),
                ..ModelConfig::default()
            };
            let policy = pick_policy(&mut rng, n_layers);
            let len = rng.random_range(1..=cfg.max_prompt);
            let prompt = std::iter::once(BOS_ID).chain((1..len).map(|_| rng.random_range(0..256u32))).collect();
            let max_new = rng.random_range(1..=cfg.max_new);
            TrialSpec { index, config, policy, prompt, max_new }
        })
        .collect()
}

/// `(N, a, T)` a run must leave behind: prompt body before the trigger,
/// anchors, and the trigger plus every fed-back token.
pub fn expected_counts(policy: &VisibilityPolicy, prompt_len: usize, max_new: usize) -> (u64, u64, u64) {
    let classes = policy.classify_prompt(prompt_len);
    let count = |f: fn(TokenClass) -> bool| classes.iter().filter(|&&c| f(c)).count() as u64;
    let body = count(|c| c == TokenClass::PrefillBody);
    let anchors = count(|c| c == TokenClass::BosAnchor);
    let decode = count(TokenClass::is_decode) + max_new as u64 - 1;
    (body, anchors, decode)
}

fn shifted(policy: &VisibilityPolicy, n_layers: usize, offset: i64) -> VisibilityPolicy {
    if offset == 0 {
        return *policy;
    }
    let k = policy.effective_cutoff(n_layers) as i64 + offset;
    policy.with_cutoff(k.clamp(1, n_layers as i64) as usize)
}

pub fn run_trial(spec: &TrialSpec, cutoff_offset: i64) -> Result<TrialOutcome, EngineError> {
    let model = Model::new(spec.config.clone())?.with_exec(Exec::Sequential);
    let l = spec.config.n_layers;
    let engine_policy = shifted(&spec.policy, l, cutoff_offset);
    let opts = CaptureOptions::default();
    let (fast, cache) = generate_with_cache(&model, &engine_policy, &spec.prompt, spec.max_new, opts)?;
    let slow = reference_generate(&model, &spec.policy, &spec.prompt, spec.max_new, opts)?;

    let max_logit_diff = fast
        .logits
        .iter()
        .zip(&slow.logits)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0f32, f32::max);
    let (n, a, t) = expected_counts(&spec.policy, spec.prompt.len(), spec.max_new);
    let expected_bytes = bytes_speed(&CostInputs {
        n_layers: l,
        cutoff: spec.policy.effective_cutoff(l),
        prefill_body: n,
        anchors: a,
        decode: t,
        geometry: spec.config.kv_geometry(ACCOUNTING_BYTES_PER_SCALAR),
    });
    let k = spec.policy.effective_cutoff(l);
    let upper_body_entries = (k + 1..=l).map(|layer| cache.class_counts(layer).0).sum();
    Ok(TrialOutcome {
        index: spec.index,
        n_layers: l,
        policy: spec.policy.to_string(),
        prompt_len: spec.prompt.len(),
        max_new: spec.max_new,
        tokens_match: fast.generated == slow.generated,
        max_logit_diff,
        kv_bytes: cache.bytes_used(),
        expected_bytes,
        upper_body_entries,
        error: None,
    })
}

/// Runs every trial, spreading trials across threads when `exec` allows.
pub fn run_equivalence(cfg: &VerifyConfig, exec: Exec) -> Vec<TrialOutcome> {
    let specs = draw_trials(cfg);
    par::map_indices(exec, specs.len(), |i| {
        let s = &specs[i];
        run_trial(s, cfg.cutoff_offset).unwrap_or_else(|e| TrialOutcome {
            index: s.index,
            n_layers: s.config.n_layers,
            policy: s.policy.to_string(),
            prompt_len: s.prompt.len(),
            max_new: s.max_new,
            tokens_match: false,
            max_logit_diff: f32::INFINITY,
            kv_bytes: 0,
            expected_bytes: 0,
            upper_body_entries: 0,
            error: Some(e.to_string()),
        })
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskCheck {
    pub cases: usize,
    pub failures: usize,
    /// The first few mismatches, for the report.
    pub examples: Vec<String>,
}

impl MaskCheck {
    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.examples.len() < 5 {
                self.examples.push(what());
            }
        }
    }
}

/// Every policy family, plus full attention, at cutoff `k`.
pub fn policy_grid(k: usize) -> [VisibilityPolicy; 5] {
    [
        VisibilityPolicy::full(),
        VisibilityPolicy::speed(k, false),
        VisibilityPolicy::speed(k, true),
        VisibilityPolicy::self_only(k, false),
        VisibilityPolicy::self_only(k, true),
    ]
}

/// Decode masks over both the whole history and the per-layer materialized
/// keys, compared with `visible_set`.
pub fn enumerate_decode_masks(max_layers: usize, max_prompt: usize, max_decode: usize) -> MaskCheck {
    let mut check = MaskCheck::default();
    for l in 1..=max_layers {
        for k in 1..=l {
            for policy in policy_grid(k) {
                for p in 1..=max_prompt {
                    for d in 0..=max_decode {
                        let mut history: Vec<TokenRef> = policy
                            .classify_prompt(p)
                            .into_iter()
                            .enumerate()
                            .map(|(i, c)| {
                                TokenRef::new(i, if c.is_decode() { TokenClass::DecodeHistory } else { c })
                            })
                            .collect();
                        history.extend((0..d).map(|i| TokenRef::new(p + i, TokenClass::DecodeHistory)));
                        let query = TokenRef::new(p + d, TokenClass::DecodeCurrent);
                        for layer in 1..=l {
                            let expect = visible_set(&policy, layer, l, query, &history);
                            let stored: Vec<TokenRef> = history
                                .iter()
                                .copied()
                                .filter(|t| policy.materializes(t.class, layer, l))
                                .collect();
                            for keys in [&history, &stored] {
                                let got = build_decode_mask(&policy, layer, l, keys, query).map(|row| {
                                    keys.iter()
                                        .chain(std::iter::once(&query))
                                        .zip(row)
                                        .filter(|(_, v)| *v)
                                        .map(|(t, _)| t.position)
                                        .collect::<BTreeSet<_>>()
                                });
                                check.record(got.as_ref() == Ok(&expect), || {
                                    format!("{policy} L={l} layer={layer} prompt={p} decode={d}: {got:?} vs {expect:?}")
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    check
}

/// Training masks against the teacher-forcing visibility rule: target `t`
/// sees prompt, anchors, earlier targets and itself in the lower band; in
/// the upper band the prompt body drops out (and, for self-only, earlier
/// targets too). Prompt rows are causal below the cutoff and see anchors and
/// themselves above it.
pub fn enumerate_training_masks(max_layers: usize, max_prompt: usize, max_targets: usize) -> MaskCheck {
    let mut check = MaskCheck::default();
    for l in 1..=max_layers {
        for k in 1..=l {
            for policy in policy_grid(k) {
                for p in 1..=max_prompt {
                    let classes: Vec<TokenClass> = (0..p)
                        .map(|i| if i == 0 && policy.anchor_bos { TokenClass::BosAnchor } else { TokenClass::PrefillBody })
                        .collect();
                    let anchors: BTreeSet<usize> = if policy.anchor_bos { BTreeSet::from([0]) } else { BTreeSet::new() };
                    for m in 1..=max_targets {
                        let mask = build_training_mask(&policy, l, &classes, m);
                        for layer in 1..=l {
                            let upper = layer > policy.effective_cutoff(l);
                            for (i, row) in mask.for_layer(layer).iter().enumerate() {
                                let causal: BTreeSet<usize> = (0..=i).collect();
                                let expect: BTreeSet<usize> = if !upper {
                                    causal
                                } else if i < p {
                                    anchors.iter().copied().filter(|&a| a <= i).chain([i]).collect()
                                } else {
                                    let earlier_targets = p..i;
                                    match policy.kind {
                                        PolicyKind::FullAttn => causal,
                                        PolicyKind::Speed => anchors.iter().copied().chain(earlier_targets).chain([i]).collect(),
                                        PolicyKind::SelfOnly => anchors.iter().copied().chain([i]).collect(),
                                    }
                                };
                                let got: BTreeSet<usize> = (0..row.len()).filter(|&j| row[j]).collect();
                                check.record(got == expect, || {
                                    format!("{policy} L={l} layer={layer} prompt={p} targets={m} row={i}: {got:?} vs {expect:?}")
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    check
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub trials: Vec<TrialOutcome>,
    pub decode_masks: Option<MaskCheck>,
    pub training_masks: Option<MaskCheck>,
}

impl VerifyReport {
    pub fn failed_trials(&self) -> usize {
        self.trials.iter().filter(|t| !t.passed()).count()
    }

    pub fn passed(&self) -> bool {
        self.failed_trials() == 0
            && self.decode_masks.as_ref().is_none_or(|m| m.failures == 0)
            && self.training_masks.as_ref().is_none_or(|m| m.failures == 0)
    }
}

pub fn run_battery(cfg: &VerifyConfig, exec: Exec) -> VerifyReport {
    VerifyReport {
        config: *cfg,
        trials: run_equivalence(cfg, exec),
        decode_masks: cfg.enumerate_masks.then(|| enumerate_decode_masks(6, 5, 4)),
        training_masks: cfg.enumerate_masks.then(|| enumerate_training_masks(6, 5, 4)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trials: usize) -> VerifyConfig {
        VerifyConfig { trials, max_prompt: 24, max_new: 6, enumerate_masks: false, ..Default::default() }
    }

    #[test]
    fn draws_are_deterministic_and_sized() {
        let cfg = small(5);
        let a = draw_trials(&cfg);
        assert_eq!(a.len(), 5);
        assert_eq!(a, draw_trials(&cfg));
        for s in &a {
            assert!((4..=8).contains(&s.config.n_layers));
            assert!(s.prompt.len() <= 24 && s.max_new <= 6);
            assert_eq!(s.prompt[0], BOS_ID);
        }
    }

    #[test]
    fn clean_battery_passes() {
        let r = run_battery(&small(8), Exec::Parallel);
        assert_eq!(r.trials.len(), 8);
        assert!(r.passed(), "{:?}", r.trials);
    }

    #[test]
    fn shifted_cutoff_is_caught() {
        let r = run_battery(&VerifyConfig { cutoff_offset: 1, ..small(20) }, Exec::Sequential);
        assert!(!r.passed());
        let r = run_battery(&VerifyConfig { cutoff_offset: -1, ..small(20) }, Exec::Sequential);
        assert!(!r.passed());
    }

    #[test]
    fn counts_for_edge_prompts() {
        let bos = VisibilityPolicy::speed(2, true);
        assert_eq!(expected_counts(&bos, 10, 4), (8, 1, 4));
        assert_eq!(expected_counts(&bos, 1, 4), (0, 1, 3));
        assert_eq!(expected_counts(&VisibilityPolicy::speed(2, false), 1, 4), (0, 0, 4));
        assert_eq!(expected_counts(&VisibilityPolicy::speed(2, false), 10, 1), (9, 0, 1));
    }

    #[test]
    fn small_mask_grids_agree() {
        let d = enumerate_decode_masks(3, 3, 2);
        assert!(d.cases > 0 && d.failures == 0, "{:?}", d.examples);
        let t = enumerate_training_masks(3, 3, 2);
        assert!(t.cases > 0 && t.failures == 0, "{:?}", t.examples);
    }
}
