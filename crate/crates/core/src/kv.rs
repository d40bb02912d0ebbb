//! Layered KV cache with policy-driven materialization and byte accounting.

use crate::policy::{TokenClass, TokenRef, VisibilityPolicy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("layer {layer} outside 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("position {position} appended after {last} at layer {layer}")]
    OutOfOrder { layer: usize, position: usize, last: usize },
    #[error("entry width {got}, cache expects {expected}")]
    Width { got: usize, expected: usize },
}

/// Shape that determines bytes per cached token per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvGeometry {
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub bytes_per_scalar: usize,
}

impl KvGeometry {
    pub fn new(n_kv_heads: usize, d_head: usize, bytes_per_scalar: usize) -> Self {
        Self { n_kv_heads, d_head, bytes_per_scalar }
    }

    pub fn width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// `B_KV = 2 · n_kv · d_head · b`: key plus value for one token at one layer.
    pub fn bytes_per_entry(&self) -> u64 {
        2 * (self.n_kv_heads * self.d_head * self.bytes_per_scalar) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub position: usize,
    pub class: TokenClass,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

/// One layer's entries, stored column-wise.
#[derive(Debug, Clone, Default)]
struct Band {
    tokens: Vec<TokenRef>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Borrowed view over one layer's materialized entries.
#[derive(Debug, Clone, Copy)]
pub struct BandView<'a> {
    pub tokens: &'a [TokenRef],
    keys: &'a [f32],
    values: &'a [f32],
    width: usize,
}

impl<'a> BandView<'a> {
    pub fn empty(width: usize) -> Self {
        Self { tokens: &[], keys: &[], values: &[], width }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// All keys, row-major, `len() * width()` values.
    pub fn keys_flat(&self) -> &'a [f32] {
        self.keys
    }

    pub fn values_flat(&self) -> &'a [f32] {
        self.values
    }

    pub fn key(&self, i: usize) -> &'a [f32] {
        &self.keys[i * self.width..(i + 1) * self.width]
    }

    pub fn value(&self, i: usize) -> &'a [f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + 'a {
        self.tokens.iter().map(|t| t.position)
    }

    pub fn entry(&self, i: usize) -> KvEntry {
        KvEntry {
            position: self.tokens[i].position,
            class: self.tokens[i].class,
            key: self.key(i).to_vec(),
            value: self.value(i).to_vec(),
        }
    }
}

/// Per-layer append-only cache. Non-anchor prefill entries above the cutoff
/// are refused; everything else is kept at every layer.
#[derive(Debug, Clone)]
pub struct LayeredKvCache {
    policy: VisibilityPolicy,
    geometry: KvGeometry,
    bands: Vec<Band>,
}

impl LayeredKvCache {
    pub fn new(n_layers: usize, policy: VisibilityPolicy, geometry: KvGeometry) -> Self {
        Self { policy, geometry, bands: vec![Band::default(); n_layers] }
    }

    pub fn n_layers(&self) -> usize {
        self.bands.len()
    }

    pub fn policy(&self) -> &VisibilityPolicy {
        &self.policy
    }

    pub fn geometry(&self) -> KvGeometry {
        self.geometry
    }

    pub fn cutoff(&self) -> usize {
        self.policy.effective_cutoff(self.n_layers())
    }

    fn band_index(&self, layer: usize) -> Result<usize, KvError> {
        if layer == 0 || layer > self.bands.len() {
            return Err(KvError::LayerOutOfRange { layer, layers: self.bands.len() });
        }
        Ok(layer - 1)
    }

    /// Appends at a 1-based layer. Returns `Ok(false)` when the policy does
    /// not materialize this class at this layer; nothing is stored then.
    pub fn append(&mut self, layer: usize, entry: KvEntry) -> Result<bool, KvError> {
        self.append_slices(layer, TokenRef::new(entry.position, entry.class), &entry.key, &entry.value)
    }

    pub fn append_slices(
        &mut self,
        layer: usize,
        token: TokenRef,
        key: &[f32],
        value: &[f32],
    ) -> Result<bool, KvError> {
        let idx = self.band_index(layer)?;
        let width = self.geometry.width();
        for got in [key.len(), value.len()] {
            if got != width {
                return Err(KvError::Width { got, expected: width });
            }
        }
        let band = &self.bands[idx];
        if let Some(last) = band.tokens.last() {
            if token.position <= last.position {
                return Err(KvError::OutOfOrder { layer, position: token.position, last: last.position });
            }
        }
        if !self.policy.materializes(token.class, layer, self.bands.len()) {
            return Ok(false);
        }
        let band = &mut self.bands[idx];
        band.tokens.push(token);
        band.keys.extend_from_slice(key);
        band.values.extend_from_slice(value);
        Ok(true)
    }

    /// Materialized entries at a 1-based layer, in position order.
    pub fn read_band(&self, layer: usize) -> Result<BandView<'_>, KvError> {
        let b = &self.bands[self.band_index(layer)?];
        Ok(BandView {
            tokens: &b.tokens,
            keys: &b.keys,
            values: &b.values,
            width: self.geometry.width(),
        })
    }

    pub fn entries_at(&self, layer: usize) -> usize {
        self.bands.get(layer.wrapping_sub(1)).map_or(0, |b| b.tokens.len())
    }

    pub fn total_entries(&self) -> u64 {
        self.bands.iter().map(|b| b.tokens.len() as u64).sum()
    }

    /// Bytes of all materialized entries, priced with an arbitrary geometry.
    pub fn bytes_used_with(&self, geometry: KvGeometry) -> u64 {
        self.total_entries() * geometry.bytes_per_entry()
    }

    /// Bytes of all materialized entries under the cache's own geometry.
    pub fn bytes_used(&self) -> u64 {
        self.bytes_used_with(self.geometry)
    }

    /// Counts per class at one layer: (body, anchor, decode).
    pub fn class_counts(&self, layer: usize) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        if let Ok(view) = self.read_band(layer) {
            for t in view.tokens {
                match t.class {
                    TokenClass::PrefillBody => c.0 += 1,
                    TokenClass::BosAnchor => c.1 += 1,
                    _ => c.2 += 1,
                }
            }
        }
        c
    }

    pub fn dump(&self) -> CacheDump {
        let per_entry = self.geometry.bytes_per_entry();
        let layers = self
            .bands
            .iter()
            .enumerate()
            .map(|(i, b)| LayerDump {
                layer: i + 1,
                entries: b.tokens.len(),
                bytes: b.tokens.len() as u64 * per_entry,
            })
            .collect();
        CacheDump {
            policy: self.policy.to_string(),
            cutoff: self.cutoff(),
            geometry: self.geometry,
            bytes_per_entry: per_entry,
            layers,
            total_bytes: self.bytes_used(),
        }
    }
}

/// JSON debug dump of per-layer counts and bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDump {
    pub policy: String,
    pub cutoff: usize,
    pub geometry: KvGeometry,
    pub bytes_per_entry: u64,
    pub layers: Vec<LayerDump>,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    pub layer: usize,
    pub entries: usize,
    pub bytes: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenClass::*;

    fn entry(position: usize, class: TokenClass, width: usize) -> KvEntry {
        KvEntry { position, class, key: vec![position as f32; width], value: vec![-(position as f32); width] }
    }

    #[test]
    fn append_respects_cutoff() {
        let g = KvGeometry::new(1, 2, 2);
        let mut c = LayeredKvCache::new(4, VisibilityPolicy::speed(2, true), g);
        assert!(c.append(2, entry(1, PrefillBody, 2)).unwrap());
        assert!(!c.append(3, entry(1, PrefillBody, 2)).unwrap());
        assert!(c.append(4, entry(0, BosAnchor, 2)).unwrap());
        assert!(c.append(4, entry(5, DecodeHistory, 2)).unwrap());
        assert_eq!(c.entries_at(3), 0);
        assert_eq!(c.entries_at(4), 2);
    }

    #[test]
    fn append_rejects_out_of_order_and_bad_layers() {
        let g = KvGeometry::new(1, 2, 2);
        let mut c = LayeredKvCache::new(2, VisibilityPolicy::full(), g);
        c.append(1, entry(3, PrefillBody, 2)).unwrap();
        assert!(matches!(c.append(1, entry(3, PrefillBody, 2)), Err(KvError::OutOfOrder { .. })));
        assert!(matches!(c.append(1, entry(2, PrefillBody, 2)), Err(KvError::OutOfOrder { .. })));
        assert!(matches!(c.append(0, entry(9, PrefillBody, 2)), Err(KvError::LayerOutOfRange { .. })));
        assert!(matches!(c.append(3, entry(9, PrefillBody, 2)), Err(KvError::LayerOutOfRange { .. })));
        assert!(matches!(c.append(1, entry(9, PrefillBody, 3)), Err(KvError::Width { .. })));
    }

    #[test]
    fn read_band_after_speed_prefill() {
        let g = KvGeometry::new(1, 2, 2);
        let p = VisibilityPolicy::speed(1, true);
        let mut c = LayeredKvCache::new(2, p, g);
        assert!(c.read_band(2).unwrap().is_empty());
        for (pos, class) in [(0, BosAnchor), (1, PrefillBody), (2, PrefillBody)] {
            for layer in 1..=2 {
                c.append(layer, entry(pos, class, 2)).unwrap();
            }
        }
        let low = c.read_band(1).unwrap();
        assert_eq!(low.positions().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(low.entry(2), entry(2, PrefillBody, 2));
        let high = c.read_band(2).unwrap();
        assert_eq!(high.positions().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn bytes_used_counts_entries() {
        let g = KvGeometry::new(2, 4, 2);
        assert_eq!(g.bytes_per_entry(), 32);
        let mut c = LayeredKvCache::new(3, VisibilityPolicy::speed(1, false), g);
        assert_eq!(c.bytes_used(), 0);
        for layer in 1..=3 {
            c.append(layer, entry(0, PrefillBody, 8)).unwrap();
            c.append(layer, entry(1, DecodeHistory, 8)).unwrap();
        }
        assert_eq!(c.total_entries(), 4);
        assert_eq!(c.bytes_used(), 128);
        let d = c.dump();
        assert_eq!(d.layers.iter().map(|l| l.entries).collect::<Vec<_>>(), vec![2, 1, 1]);
        assert_eq!(d.total_bytes, 128);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<CacheDump>(&json).unwrap(), d);
    }

    /// Long-context accounting with tiny vectors, priced at the 8B geometry.
    fn long_context_bytes(cutoff: usize) -> u64 {
        let p = VisibilityPolicy::speed(cutoff, true);
        let mut c = LayeredKvCache::new(32, p, KvGeometry::new(1, 1, 2));
        let kv = [0.0f32];
        let mut push = |pos: usize, class: TokenClass| {
            for layer in 1..=32 {
                c.append_slices(layer, TokenRef::new(pos, class), &kv, &kv).unwrap();
            }
        };
        push(0, BosAnchor);
        for pos in 1..131_072 {
            push(pos, PrefillBody);
        }
        for pos in 131_072..131_072 + 128 {
            push(pos, DecodeHistory);
        }
        c.bytes_used_with(KvGeometry::new(8, 128, 2))
    }

    #[test]
    fn long_context_gib() {
        let speed = long_context_bytes(24) as f64 / GIB;
        let full = long_context_bytes(32) as f64 / GIB;
        assert_eq!(format!("{speed:.3}"), "12.016");
        assert_eq!(format!("{full:.3}"), "16.016");
    }
}
