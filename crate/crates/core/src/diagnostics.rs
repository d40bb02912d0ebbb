//! Layer-wise statistics over captured decode-time attention and hidden
//! states.
//!
//! Entropies are in nats. Straightening is angle-based: the curvature at
//! layer `l` is the mean angle between consecutive residual-stream steps
//! `h_l - h_{l-1}` and `h_{l+1} - h_l`, with the embedding as `h_0`, and the
//! score is the drop in curvature relative to the first layer where it can
//! be measured.

use crate::engine::StepCapture;
use crate::model::BOS_ID;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROW_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum DiagError {
    #[error("attention row sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("attention row has {row} entries but the span map covers {span}")]
    SpanTooShort { row: usize, span: usize },
    #[error("straightening needs at least 3 states per position, got {0}")]
    TooFewStates(usize),
    #[error("need at least 2 layers, got {0}")]
    TooFewLayers(usize),
    #[error("steps disagree on layer count")]
    Ragged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    User,
    Bos,
    DecodeHistory,
    Other,
}

/// Assigns every key position to one bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMap(pub Vec<Bucket>);

impl SpanMap {
    /// Layout for the byte-level engine: BoS at 0, the prompt body as user
    /// content, the trigger (last prompt position) as template/other, earlier
    /// generated tokens as decode history and the query itself as other.
    pub fn for_prompt(prompt_len: usize, starts_with_bos: bool, query: usize) -> Self {
        let trigger = prompt_len.saturating_sub(1);
        let buckets = (0..=query)
            .map(|p| match p {
                _ if p == query => Bucket::Other,
                0 if starts_with_bos => Bucket::Bos,
                _ if p < trigger => Bucket::User,
                _ if p == trigger => Bucket::Other,
                _ => Bucket::DecodeHistory,
            })
            .collect();
        Self(buckets)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positions(&self, bucket: Bucket) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] == bucket).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketMasses {
    pub user: f64,
    pub bos: f64,
    pub decode_history: f64,
    pub other: f64,
}

impl BucketMasses {
    pub fn total(&self) -> f64 {
        self.user + self.bos + self.decode_history + self.other
    }

    fn add(&mut self, o: &BucketMasses) {
        self.user += o.user;
        self.bos += o.bos;
        self.decode_history += o.decode_history;
        self.other += o.other;
    }

    fn scale(&mut self, s: f64) {
        self.user *= s;
        self.bos *= s;
        self.decode_history *= s;
        self.other *= s;
    }
}

pub fn attention_mass_by_bucket(row: &[f32], span: &SpanMap) -> Result<BucketMasses, DiagError> {
    if row.len() > span.len() {
        return Err(DiagError::SpanTooShort { row: row.len(), span: span.len() });
    }
    let total: f64 = row.iter().map(|&a| a as f64).sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(DiagError::NotNormalized(total));
    }
    let mut m = BucketMasses::default();
    for (&a, b) in row.iter().zip(&span.0) {
        let slot = match b {
            Bucket::User => &mut m.user,
            Bucket::Bos => &mut m.bos,
            Bucket::DecodeHistory => &mut m.decode_history,
            Bucket::Other => &mut m.other,
        };
        *slot += a as f64;
    }
    Ok(m)
}

/// Entropy of the row renormalized over `user`; `None` when the user
/// positions carry no mass.
pub fn conditional_prompt_entropy(row: &[f64], user: &[usize]) -> Option<f64> {
    let mass: f64 = user.iter().filter_map(|&i| row.get(i)).sum();
    if mass <= 0.0 {
        return None;
    }
    let h = user
        .iter()
        .filter_map(|&i| row.get(i))
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            let p = a / mass;
            -p * p.ln()
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

fn angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0).acos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Straightening {
    /// `curvature[l - 1]` is the mean angle at layer `l`; the last layer has
    /// no outgoing step and is always `None`.
    pub curvature: Vec<Option<f64>>,
    pub score: Vec<Option<f64>>,
}

/// `trajectories[p][s]` is state `s` of position `p`, state 0 being the
/// embedding and state `l` the output of layer `l`.
pub fn trajectory_straightening(trajectories: &[Vec<Vec<f32>>]) -> Result<Straightening, DiagError> {
    let n_states = trajectories.first().map_or(0, Vec::len);
    if n_states < 3 {
        return Err(DiagError::TooFewStates(n_states));
    }
    if trajectories.iter().any(|t| t.len() != n_states) {
        return Err(DiagError::Ragged);
    }
    let n_layers = n_states - 1;
    let mut curvature = vec![None; n_layers];
    for (l, slot) in curvature.iter_mut().enumerate().take(n_layers - 1) {
        let layer = l + 1;
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in trajectories {
            let before: Vec<f64> = t[layer].iter().zip(&t[layer - 1]).map(|(a, b)| *a as f64 - *b as f64).collect();
            let after: Vec<f64> = t[layer + 1].iter().zip(&t[layer]).map(|(a, b)| *a as f64 - *b as f64).collect();
            if let Some(theta) = angle(&before, &after) {
                sum += theta;
                count += 1;
            }
        }
        if count > 0 {
            *slot = Some(sum / count as f64);
        }
    }
    let reference = curvature.iter().flatten().next().copied();
    let score = curvature.iter().map(|c| Some(reference? - (*c)?)).collect();
    Ok(Straightening { curvature, score })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub masses: BucketMasses,
    pub entropy: Option<f64>,
    pub straightening: Option<f64>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let (mx, my) = (x[..n].iter().sum::<f64>() / n as f64, y[..n].iter().sum::<f64>() / n as f64);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakSummary {
    pub prompt_peak_layer: usize,
    pub decode_peak_layer: usize,
    pub entropy_min_layer: Option<usize>,
    pub straightening_peak_layer: Option<usize>,
    pub ent_minus_str: Option<i64>,
    pub correlation: Option<f64>,
}

fn arg_best(stats: &[LayerStats], key: impl Fn(&LayerStats) -> Option<f64>, better: impl Fn(f64, f64) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for s in stats {
        if let Some(v) = key(s) {
            if best.is_none_or(|(_, b)| better(v, b)) {
                best = Some((s.layer, v));
            }
        }
    }
    best.map(|(l, _)| l)
}

/// Peaks over 1-based layers; ties go to the lowest layer.
pub fn peak_summary(stats: &[LayerStats]) -> Result<PeakSummary, DiagError> {
    if stats.len() < 2 {
        return Err(DiagError::TooFewLayers(stats.len()));
    }
    let gt = |a: f64, b: f64| a > b;
    let prompt_peak_layer = arg_best(stats, |s| Some(s.masses.user), gt).expect("non-empty");
    let decode_peak_layer = arg_best(stats, |s| Some(s.masses.decode_history), gt).expect("non-empty");
    let entropy_min_layer = arg_best(stats, |s| s.entropy, |a, b| a < b);
    let straightening_peak_layer = arg_best(stats, |s| s.straightening, gt);
    let ent_minus_str = entropy_min_layer.zip(straightening_peak_layer).map(|(e, s)| e as i64 - s as i64);
    let (xs, ys): (Vec<f64>, Vec<f64>) = stats
        .iter()
        .filter_map(|s| Some((s.straightening?, -s.entropy?)))
        .unzip();
    Ok(PeakSummary {
        prompt_peak_layer,
        decode_peak_layer,
        entropy_min_layer,
        straightening_peak_layer,
        ent_minus_str,
        correlation: pearson(&xs, &ys),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub count: usize,
    pub delta_mean: f64,
    pub delta_std: f64,
    pub exact: f64,
    pub within_1: f64,
    pub within_2: f64,
}

/// Summary of entropy-min minus straightening-peak offsets across
/// categories; `delta_std` is the population deviation.
pub fn alignment_stats(deltas: &[i64]) -> Option<AlignmentStats> {
    if deltas.is_empty() {
        return None;
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().map(|&d| d as f64).sum::<f64>() / n;
    let var = deltas.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / n;
    let frac = |w: i64| deltas.iter().filter(|d| d.abs() <= w).count() as f64 / n;
    Some(AlignmentStats { count: deltas.len(), delta_mean: mean, delta_std: var.sqrt(), exact: frac(0), within_1: frac(1), within_2: frac(2) })
}

/// Per-layer statistics for one generation.
///
/// Bucket masses are averaged over steps. Entropy is taken from the
/// step-averaged row (zero-padded to the longest step), restricted to the
/// user span. Straightening treats every captured step as one trajectory.
pub fn layer_stats(prompt: &[u32], steps: &[StepCapture]) -> Result<Vec<LayerStats>, DiagError> {
    let bos = prompt.first() == Some(&BOS_ID);
    let rows: Vec<&Vec<Vec<f32>>> = steps.iter().filter_map(|s| s.attention.as_ref()).collect();
    let hidden: Vec<Vec<Vec<f32>>> = steps.iter().filter_map(|s| s.hidden.clone()).collect();
    let n_layers = rows
        .first()
        .map(|r| r.len())
        .or_else(|| hidden.first().map(|h| h.len().saturating_sub(1)))
        .unwrap_or(0);
    if rows.iter().any(|r| r.len() != n_layers) {
        return Err(DiagError::Ragged);
    }
    let mut stats: Vec<LayerStats> = (1..=n_layers).map(|layer| LayerStats { layer, ..Default::default() }).collect();

    if !rows.is_empty() {
        let width = steps.iter().map(|s| s.position + 1).max().unwrap_or(0);
        let user = SpanMap::for_prompt(prompt.len(), bos, width.saturating_sub(1)).positions(Bucket::User);
        for (l, st) in stats.iter_mut().enumerate() {
            let mut mean_row = vec![0.0f64; width];
            for (step, r) in steps.iter().filter(|s| s.attention.is_some()).zip(&rows) {
                let span = SpanMap::for_prompt(prompt.len(), bos, step.position);
                st.masses.add(&attention_mass_by_bucket(&r[l], &span)?);
                for (acc, &a) in mean_row.iter_mut().zip(&r[l]) {
                    *acc += a as f64;
                }
            }
            let inv = 1.0 / rows.len() as f64;
            st.masses.scale(inv);
            mean_row.iter_mut().for_each(|a| *a *= inv);
            st.entropy = conditional_prompt_entropy(&mean_row, &user);
        }
    }
    if !hidden.is_empty() {
        let s = trajectory_straightening(&hidden)?;
        for (st, v) in stats.iter_mut().zip(s.score) {
            st.straightening = v;
        }
    }
    Ok(stats)
}

/// Averages per-generation layer statistics of one category. Optional
/// fields are averaged over the generations where they are present.
pub fn average_stats(runs: &[Vec<LayerStats>]) -> Result<Vec<LayerStats>, DiagError> {
    let n_layers = runs.first().map_or(0, Vec::len);
    if runs.iter().any(|r| r.len() != n_layers) {
        return Err(DiagError::Ragged);
    }
    let mean_opt = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok((0..n_layers)
        .map(|l| {
            let mut masses = BucketMasses::default();
            for r in runs {
                masses.add(&r[l].masses);
            }
            masses.scale(1.0 / runs.len() as f64);
            LayerStats {
                layer: l + 1,
                masses,
                entropy: mean_opt(runs.iter().filter_map(|r| r[l].entropy).collect()),
                straightening: mean_opt(runs.iter().filter_map(|r| r[l].straightening).collect()),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: String,
    pub generations: usize,
    pub layers: Vec<LayerStats>,
    pub peaks: PeakSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub entropy_unit: String,
    pub categories: Vec<CategorySummary>,
    pub alignment: Option<AlignmentStats>,
}

impl DiagnosticsReport {
    pub fn new(categories: Vec<CategorySummary>) -> Self {
        let deltas: Vec<i64> = categories.iter().filter_map(|c| c.peaks.ent_minus_str).collect();
        Self { entropy_unit: "nats".into(), alignment: alignment_stats(&deltas), categories }
    }
}
