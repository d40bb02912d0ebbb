//! Layer-wise KV visibility.
//!
//! Layers are 1-based. Layers `1..=K` form the lower band, where every query
//! sees its whole causal past. Above the cutoff, non-anchor prefill tokens are
//! never materialized, so decode-phase queries see only the BoS anchor (when
//! enabled), earlier decode-phase tokens (unless `SelfOnly`), and themselves.
//!
//! Two independent routes live here: [`visible_set`] builds the visible
//! positions as unions of token classes, while [`key_visible`] is the per-key
//! predicate the engine and the mask builders use. Tests enumerate small
//! grids to keep them in agreement.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("cannot parse policy {0:?}; expected full, speed:K, speed+bos:K, selfonly:K or selfonly+bos:K with optional :posthoc")]
    Parse(String),
    #[error("cutoff {cutoff} outside 1..={layers}")]
    CutoffOutOfRange { cutoff: usize, layers: usize },
    #[error("layer {layer} outside 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("key ordering mismatch: {0}")]
    KeyOrder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    /// The BoS token `s` kept full-depth as an anchor.
    BosAnchor,
    /// A non-anchor prompt token (an element of `X`, or `s` when anchor-free).
    PrefillBody,
    /// A decode-phase token earlier than the current query.
    DecodeHistory,
    /// The decode-phase token currently being processed.
    DecodeCurrent,
}

impl TokenClass {
    pub fn is_decode(self) -> bool {
        matches!(self, TokenClass::DecodeHistory | TokenClass::DecodeCurrent)
    }

    pub fn is_prefill(self) -> bool {
        !self.is_decode()
    }
}

/// A token as seen by the mask builders: absolute position plus class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub position: usize,
    pub class: TokenClass,
}

impl TokenRef {
    pub fn new(position: usize, class: TokenClass) -> Self {
        Self { position, class }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FullAttn,
    Speed,
    SelfOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VisibilityPolicy {
    pub kind: PolicyKind,
    pub anchor_bos: bool,
    /// Highest layer holding non-anchor prefill KV. `None` for full attention.
    pub cutoff: Option<usize>,
    /// Visibility applied to weights trained with full attention. The masks
    /// are the same; the flag is carried through to reports.
    pub post_hoc: bool,
}

impl VisibilityPolicy {
    pub fn full() -> Self {
        Self { kind: PolicyKind::FullAttn, anchor_bos: false, cutoff: None, post_hoc: false }
    }

    pub fn speed(cutoff: usize, anchor_bos: bool) -> Self {
        Self { kind: PolicyKind::Speed, anchor_bos, cutoff: Some(cutoff), post_hoc: false }
    }

    pub fn self_only(cutoff: usize, anchor_bos: bool) -> Self {
        Self { kind: PolicyKind::SelfOnly, anchor_bos, cutoff: Some(cutoff), post_hoc: false }
    }

    pub fn with_post_hoc(mut self, post_hoc: bool) -> Self {
        self.post_hoc = post_hoc;
        self
    }

    /// Same policy with a different cutoff; full attention is unchanged.
    pub fn with_cutoff(mut self, cutoff: usize) -> Self {
        if self.kind != PolicyKind::FullAttn {
            self.cutoff = Some(cutoff);
        }
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), PolicyError> {
        if let Some(k) = self.cutoff {
            if k == 0 || k > n_layers {
                return Err(PolicyError::CutoffOutOfRange { cutoff: k, layers: n_layers });
            }
        }
        Ok(())
    }

    /// `K`, with full attention treated as `K = L`.
    pub fn effective_cutoff(&self, n_layers: usize) -> usize {
        match self.kind {
            PolicyKind::FullAttn => n_layers,
            _ => self.cutoff.unwrap_or(n_layers).min(n_layers),
        }
    }

    /// Band of a 1-based layer. The cutoff layer itself is lower.
    pub fn band(&self, layer: usize, n_layers: usize) -> Band {
        if layer <= self.effective_cutoff(n_layers) {
            Band::Lower
        } else {
            Band::Upper
        }
    }

    fn is_anchor(&self, class: TokenClass) -> bool {
        self.anchor_bos && class == TokenClass::BosAnchor
    }

    /// Whether a token of `class` gets a KV entry at `layer`.
    pub fn materializes(&self, class: TokenClass, layer: usize, n_layers: usize) -> bool {
        match self.band(layer, n_layers) {
            Band::Lower => true,
            Band::Upper => class.is_decode() || self.is_anchor(class),
        }
    }

    /// Token classes for a prompt under this policy. Position 0 is the anchor
    /// when BoS anchoring is on; the final prompt position is the trigger
    /// whose full-depth state yields the first generated token, so it is
    /// decode-classified. A one-token anchored prompt stays an anchor (it is
    /// full-depth either way).
    pub fn classify_prompt(&self, prompt_len: usize) -> Vec<TokenClass> {
        (0..prompt_len)
            .map(|i| {
                if i == 0 && self.anchor_bos {
                    TokenClass::BosAnchor
                } else if i + 1 == prompt_len {
                    TokenClass::DecodeCurrent
                } else {
                    TokenClass::PrefillBody
                }
            })
            .collect()
    }
}

impl fmt::Display for VisibilityPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            PolicyKind::FullAttn => "full",
            PolicyKind::Speed => "speed",
            PolicyKind::SelfOnly => "selfonly",
        };
        write!(f, "{base}")?;
        if self.anchor_bos {
            write!(f, "+bos")?;
        }
        if let Some(k) = self.cutoff {
            write!(f, ":{k}")?;
        }
        if self.post_hoc {
            write!(f, ":posthoc")?;
        }
        Ok(())
    }
}

impl FromStr for VisibilityPolicy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PolicyError::Parse(s.to_string());
        let mut parts: Vec<&str> = s.trim().split(':').collect();
        let post_hoc = parts.len() > 1 && parts.last() == Some(&"posthoc");
        if post_hoc {
            parts.pop();
        }
        match parts.as_slice() {
            ["full"] if !post_hoc => Ok(Self::full()),
            [name, k] => {
                let cutoff: usize = k.parse().map_err(|_| err())?;
                if cutoff == 0 {
                    return Err(err());
                }
                let policy = match *name {
                    "speed" => Self::speed(cutoff, false),
                    "speed+bos" => Self::speed(cutoff, true),
                    "selfonly" => Self::self_only(cutoff, false),
                    "selfonly+bos" => Self::self_only(cutoff, true),
                    _ => return Err(err()),
                };
                Ok(policy.with_post_hoc(post_hoc))
            }
            _ => Err(err()),
        }
    }
}

impl Serialize for VisibilityPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VisibilityPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Visible positions for `query` at `layer`, built from token-class unions.
///
/// Decode queries see `X ∪ {s} ∪ D<t ∪ {d_t}` in the lower band. In the upper
/// band, `Speed` keeps `D<t ∪ {d_t}` plus `{s}` when anchored, and `SelfOnly`
/// keeps `{d_t}` plus `{s}` when anchored. Prefill queries see their causal
/// past in the lower band and only anchors plus themselves above it.
/// Entries of `history` at or after the query position are ignored.
pub fn visible_set(
    policy: &VisibilityPolicy,
    layer: usize,
    n_layers: usize,
    query: TokenRef,
    history: &[TokenRef],
) -> BTreeSet<usize> {
    let past: Vec<TokenRef> =
        history.iter().copied().filter(|t| t.position < query.position).collect();
    let of = |pred: &dyn Fn(TokenClass) -> bool| -> BTreeSet<usize> {
        past.iter().filter(|t| pred(t.class)).map(|t| t.position).collect()
    };
    let anchors = if policy.anchor_bos {
        of(&|c| c == TokenClass::BosAnchor)
    } else {
        BTreeSet::new()
    };
    // without anchoring, the BoS token is just another prompt token
    let prompt_body = of(&|c| c == TokenClass::PrefillBody || (!policy.anchor_bos && c == TokenClass::BosAnchor));
    let decode_history = of(&|c| c.is_decode());
    let me = BTreeSet::from([query.position]);

    let union = |sets: &[&BTreeSet<usize>]| -> BTreeSet<usize> {
        sets.iter().flat_map(|s| s.iter().copied()).collect()
    };

    match policy.band(layer, n_layers) {
        Band::Lower => union(&[&prompt_body, &anchors, &decode_history, &me]),
        Band::Upper if query.class.is_decode() => match policy.kind {
            PolicyKind::FullAttn => union(&[&prompt_body, &anchors, &decode_history, &me]),
            PolicyKind::Speed => union(&[&anchors, &decode_history, &me]),
            PolicyKind::SelfOnly => union(&[&anchors, &me]),
        },
        Band::Upper => union(&[&anchors, &me]),
    }
}

/// Per-key visibility predicate: may `query` attend to `key` at this band?
pub fn key_visible(policy: &VisibilityPolicy, band: Band, query: TokenRef, key: TokenRef) -> bool {
    if key.position > query.position {
        return false;
    }
    if key.position == query.position {
        return true;
    }
    match band {
        Band::Lower => true,
        Band::Upper => {
            let anchor = policy.is_anchor(key.class);
            if !query.class.is_decode() {
                return anchor;
            }
            match policy.kind {
                PolicyKind::FullAttn => true,
                PolicyKind::Speed => anchor || key.class.is_decode(),
                PolicyKind::SelfOnly => anchor,
            }
        }
    }
}

/// Decode-time visibility row over `keys` (cached entries, strictly
/// increasing positions, all before the query) followed by the query itself.
pub fn build_decode_mask(
    policy: &VisibilityPolicy,
    layer: usize,
    n_layers: usize,
    keys: &[TokenRef],
    query: TokenRef,
) -> Result<Vec<bool>, PolicyError> {
    if layer == 0 || layer > n_layers {
        return Err(PolicyError::LayerOutOfRange { layer, layers: n_layers });
    }
    for w in keys.windows(2) {
        if w[1].position <= w[0].position {
            return Err(PolicyError::KeyOrder(format!(
                "position {} follows {}",
                w[1].position, w[0].position
            )));
        }
    }
    if let Some(last) = keys.last() {
        if last.position >= query.position {
            return Err(PolicyError::KeyOrder(format!(
                "cached position {} is not before query position {}",
                last.position, query.position
            )));
        }
    }
    let band = policy.band(layer, n_layers);
    let mut row: Vec<bool> = keys.iter().map(|&k| key_visible(policy, band, query, k)).collect();
    row.push(true);
    Ok(row)
}

/// Square visibility masks over `prompt ++ targets` for one training example,
/// one per band. Row `i`, column `j` is true when token `i` may read token
/// `j`'s KV at that band.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMask {
    pub lower: Vec<Vec<bool>>,
    pub upper: Vec<Vec<bool>>,
    pub cutoff: usize,
}

impl TrainingMask {
    pub fn for_layer(&self, layer: usize) -> &[Vec<bool>] {
        if layer <= self.cutoff {
            &self.lower
        } else {
            &self.upper
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

/// Teacher-forcing masks: prompt rows follow the prefill rule, target rows
/// the decode rule. `prompt_classes` should only hold prefill classes.
pub fn build_training_mask(
    policy: &VisibilityPolicy,
    n_layers: usize,
    prompt_classes: &[TokenClass],
    targets: usize,
) -> TrainingMask {
    let tokens = training_tokens(prompt_classes, targets);
    let build = |band: Band| -> Vec<Vec<bool>> {
        tokens
            .iter()
            .map(|&q| tokens.iter().map(|&k| key_visible(policy, band, q, k)).collect())
            .collect()
    };
    TrainingMask {
        lower: build(Band::Lower),
        upper: build(Band::Upper),
        cutoff: policy.effective_cutoff(n_layers),
    }
}

pub(crate) fn training_tokens(prompt_classes: &[TokenClass], targets: usize) -> Vec<TokenRef> {
    let p = prompt_classes.len();
    prompt_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| TokenRef::new(i, c))
        .chain((0..targets).map(|t| TokenRef::new(p + t, TokenClass::DecodeHistory)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenClass::*;

    fn refs(classes: &[TokenClass]) -> Vec<TokenRef> {
        classes.iter().enumerate().map(|(i, &c)| TokenRef::new(i, c)).collect()
    }

    #[test]
    fn parse_and_print_round_trip() {
        for s in ["full", "speed:24", "speed+bos:24", "selfonly:3", "selfonly+bos:28", "speed+bos:6:posthoc"] {
            let p: VisibilityPolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        for bad in ["", "speed", "speed:0", "speed:x", "full:3", "full:posthoc", "bos:3", "speed:3:4"] {
            assert!(bad.parse::<VisibilityPolicy>().is_err(), "{bad}");
        }
    }

    #[test]
    fn validate_cutoff() {
        assert!(VisibilityPolicy::speed(8, true).validate(8).is_ok());
        assert!(VisibilityPolicy::speed(9, true).validate(8).is_err());
        assert!(VisibilityPolicy::full().validate(2).is_ok());
    }

    #[test]
    fn cutoff_layer_is_lower_band() {
        let p = VisibilityPolicy::speed(3, false);
        assert_eq!(p.band(3, 6), Band::Lower);
        assert_eq!(p.band(4, 6), Band::Upper);
        assert!(p.materializes(PrefillBody, 3, 6));
        assert!(!p.materializes(PrefillBody, 4, 6));
    }

    #[test]
    fn full_attention_sees_whole_past() {
        let hist = refs(&[BosAnchor, PrefillBody, PrefillBody, DecodeHistory]);
        let q = TokenRef::new(4, DecodeCurrent);
        for layer in 1..=4 {
            let v = visible_set(&VisibilityPolicy::full(), layer, 4, q, &hist);
            assert_eq!(v, (0..=4).collect());
        }
    }

    #[test]
    fn speed_bos_upper_band() {
        // prompt [s, x1, x2], history [d1], query d2
        let hist = refs(&[BosAnchor, PrefillBody, PrefillBody, DecodeHistory]);
        let q = TokenRef::new(4, DecodeCurrent);
        let v = visible_set(&VisibilityPolicy::speed(2, true), 3, 4, q, &hist);
        assert_eq!(v, BTreeSet::from([0, 3, 4]));
        let v = visible_set(&VisibilityPolicy::self_only(2, false), 3, 4, q, &hist);
        assert_eq!(v, BTreeSet::from([4]));
        let v = visible_set(&VisibilityPolicy::self_only(2, true), 3, 4, q, &hist);
        assert_eq!(v, BTreeSet::from([0, 4]));
    }

    #[test]
    fn anchor_free_lower_band_is_full() {
        let hist = refs(&[PrefillBody, PrefillBody, PrefillBody, DecodeHistory]);
        let q = TokenRef::new(4, DecodeCurrent);
        let v = visible_set(&VisibilityPolicy::speed(2, false), 2, 4, q, &hist);
        assert_eq!(v, (0..=4).collect());
    }

    #[test]
    fn decode_mask_rejects_bad_ordering() {
        let p = VisibilityPolicy::speed(2, true);
        let q = TokenRef::new(5, DecodeCurrent);
        let keys = [TokenRef::new(2, PrefillBody), TokenRef::new(1, PrefillBody)];
        assert!(matches!(build_decode_mask(&p, 1, 4, &keys, q), Err(PolicyError::KeyOrder(_))));
        let keys = [TokenRef::new(5, PrefillBody)];
        assert!(matches!(build_decode_mask(&p, 1, 4, &keys, q), Err(PolicyError::KeyOrder(_))));
        assert!(build_decode_mask(&p, 0, 4, &[], q).is_err());
    }

    #[test]
    fn full_decode_mask_all_true() {
        let keys = refs(&[BosAnchor, PrefillBody, DecodeHistory]);
        let row = build_decode_mask(&VisibilityPolicy::full(), 4, 4, &keys, TokenRef::new(3, DecodeCurrent))
            .unwrap();
        assert_eq!(row, vec![true; 4]);
    }

    #[test]
    fn training_mask_examples() {
        // prompt [s, x1], targets [y1, y2]
        let p = VisibilityPolicy::speed(1, true);
        let m = build_training_mask(&p, 2, &[BosAnchor, PrefillBody], 2);
        assert_eq!(m.upper[3], vec![true, false, true, true]);
        assert_eq!(m.lower[3], vec![true, true, true, true]);

        let p = VisibilityPolicy::speed(1, false);
        let m = build_training_mask(&p, 2, &[PrefillBody, PrefillBody], 2);
        assert_eq!(m.upper[2], vec![false, false, true, false]);
    }

    #[test]
    fn training_mask_degenerates_at_full_depth() {
        let p = VisibilityPolicy::speed(4, true);
        let m = build_training_mask(&p, 4, &[BosAnchor, PrefillBody, PrefillBody], 3);
        assert_eq!(m.for_layer(4), m.lower.as_slice());
        for (i, row) in m.lower.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, j <= i);
            }
        }
    }

    #[test]
    fn classify_prompt_marks_anchor_and_trigger() {
        let p = VisibilityPolicy::speed(2, true);
        assert_eq!(p.classify_prompt(4), vec![BosAnchor, PrefillBody, PrefillBody, DecodeCurrent]);
        assert_eq!(p.classify_prompt(1), vec![BosAnchor]);
        let p = VisibilityPolicy::speed(2, false);
        assert_eq!(p.classify_prompt(3), vec![PrefillBody, PrefillBody, DecodeCurrent]);
        assert_eq!(p.classify_prompt(1), vec![DecodeCurrent]);
    }
}
