//! Token-selection policies.
//!
//! Every policy keeps the `recent` newest indices of each head
//! unconditionally and fills the rest of the head's capacity with the
//! highest-scoring older indices (ties toward the lower index). Policies
//! differ in where the scores come from and how capacity is split:
//!
//! * AudioKV: observation-window scores, optionally spectrally smoothed,
//!   with a head-wise [`BudgetPlan`].
//! * SnapKV: pooled observation-window scores, one capacity for all heads.
//! * PyramidKV: SnapKV scoring under a layer-decaying plan.
//! * H2O: attention mass accumulated over every step seen so far.
//! * AdaKV: heads of a layer compete for one shared layer budget.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::BudgetPlan;
use crate::error::{Error, Result};
use crate::par;
use crate::scoring::top_k_by;
use crate::spectral::{sss, SssConfig};
use crate::trace::AttentionTrace;

pub const DEFAULT_OBSERVATION_WIDTH: usize = 32;
pub const DEFAULT_POOL_WIDTH: usize = 7;

/// Mean attention of the last few decoding steps, per head, over the
/// context of the newest step. Positions a shorter row did not cover
/// count as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    num_layers: usize,
    num_heads: usize,
    context_len: usize,
    pub width: usize,
    aggregated: Vec<f64>,
}

impl ObservationWindow {
    /// `rows` is layer-major, one row of `context_len` scores per head.
    pub fn from_rows(
        num_layers: usize,
        num_heads: usize,
        width: usize,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if rows.len() != num_layers * num_heads || rows.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows for {num_layers}x{num_heads} heads",
                rows.len()
            )));
        }
        let context_len = rows[0].len();
        if rows.iter().any(|r| r.len() != context_len) {
            return Err(Error::DimensionMismatch("ragged score rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "aggregated scores must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            num_layers,
            num_heads,
            context_len,
            width: width.max(1),
            aggregated: rows.into_iter().flatten().collect(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn row(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.num_heads + head) * self.context_len;
        &self.aggregated[start..start + self.context_len]
    }

    /// Keeps only the first `len` positions of every row.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.context_len);
        let aggregated = self
            .aggregated
            .chunks(self.context_len)
            .flat_map(|r| r[..len].iter().copied())
            .collect();
        Self {
            context_len: len,
            aggregated,
            ..self.clone()
        }
    }
}

pub fn build_observation_window(trace: &AttentionTrace, width: usize) -> Result<ObservationWindow> {
    if width == 0 || width > trace.num_steps() {
        return Err(Error::InvalidConfig(format!(
            "observation width {width} not in 1..={}",
            trace.num_steps()
        )));
    }
    let (layers, heads) = (trace.num_layers(), trace.num_heads());
    let ctx = trace.final_context_len();
    let first = trace.num_steps() - width;
    let aggregated = par::map_range(layers * heads, |id| {
        let (layer, head) = (id / heads, id % heads);
        let mut acc = vec![0.0f64; ctx];
        for step in first..trace.num_steps() {
            for (a, &v) in acc.iter_mut().zip(trace.row(step, layer, head)) {
                *a += f64::from(v);
            }
        }
        acc.iter_mut().for_each(|a| *a /= width as f64);
        acc
    });
    Ok(ObservationWindow {
        num_layers: layers,
        num_heads: heads,
        context_len: ctx,
        width,
        aggregated: aggregated.into_iter().flatten().collect(),
    })
}

/// Summary of the plan a result was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub mode: String,
    pub budget: usize,
    pub window: usize,
    pub base: usize,
}

impl From<&BudgetPlan> for PlanSummary {
    fn from(plan: &BudgetPlan) -> Self {
        Self {
            mode: plan.mode.name().to_string(),
            budget: plan.global_budget,
            window: plan.window,
            base: plan.base,
        }
    }
}

/// Retained token indices per head, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionResult {
    pub policy: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_len: usize,
    pub recent: usize,
    pub plan: PlanSummary,
    /// Layer-major per-head capacities the selection ran under.
    pub capacities: Vec<usize>,
    /// Layer-major per-head retained indices.
    pub retained: Vec<Vec<usize>>,
}

impl EvictionResult {
    pub fn retained_of(&self, layer: usize, head: usize) -> &[usize] {
        &self.retained[layer * self.num_heads + head]
    }

    pub fn total_retained(&self) -> usize {
        self.retained.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::output(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

/// Keeps the newest `recent` indices plus the best-scoring older ones, up to
/// `capacity` in total.
pub fn select_head(scores: &[f64], capacity: usize, recent: usize) -> Vec<usize> {
    let len = scores.len();
    if capacity >= len {
        return (0..len).collect();
    }
    let recent_start = len.saturating_sub(recent);
    let older_slots = capacity.saturating_sub(len - recent_start);
    let mut kept = top_k_by(recent_start, older_slots, |i| scores[i]);
    kept.extend(recent_start..len);
    kept
}

fn check_capacity(layer: usize, head: usize, capacity: usize, recent: usize, len: usize) -> Result<()> {
    if capacity < recent.min(len) {
        return Err(Error::CapacityBelowRecent {
            layer,
            head,
            capacity,
            recent,
        });
    }
    Ok(())
}

fn check_dims(window: &ObservationWindow, plan: &BudgetPlan) -> Result<()> {
    if window.num_layers != plan.num_layers() || window.num_heads != plan.num_heads() {
        return Err(Error::DimensionMismatch(format!(
            "window is {}x{}, plan is {}x{}",
            window.num_layers,
            window.num_heads,
            plan.num_layers(),
            plan.num_heads()
        )));
    }
    Ok(())
}

/// Per-head selection with a score transform applied to each aggregated row.
fn select_per_head<F>(
    policy: &str,
    window: &ObservationWindow,
    plan: &BudgetPlan,
    recent: usize,
    transform: F,
) -> Result<EvictionResult>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    check_dims(window, plan)?;
    let heads = window.num_heads;
    let retained = par::try_map_range(window.num_layers * heads, |id| {
        let (layer, head) = (id / heads, id % heads);
        let capacity = plan.capacity(layer, head);
        check_capacity(layer, head, capacity, recent, window.context_len)?;
        let scores = transform(window.row(layer, head));
        Ok(select_head(&scores, capacity, recent))
    })?;
    Ok(EvictionResult {
        policy: policy.to_string(),
        num_layers: window.num_layers,
        num_heads: heads,
        context_len: window.context_len,
        recent,
        plan: plan.into(),
        capacities: plan.capacities().to_vec(),
        retained,
    })
}

pub fn select_audiokv(
    window: &ObservationWindow,
    plan: &BudgetPlan,
    sss_cfg: Option<&SssConfig>,
    recent: usize,
) -> Result<EvictionResult> {
    let name = if sss_cfg.is_some() { "AudioKV" } else { "AudioKV-noSSS" };
    select_audiokv_named(name, window, plan, sss_cfg, recent)
}

pub(crate) fn select_audiokv_named(
    name: &str,
    window: &ObservationWindow,
    plan: &BudgetPlan,
    sss_cfg: Option<&SssConfig>,
    recent: usize,
) -> Result<EvictionResult> {
    if let Some(cfg) = sss_cfg {
        cfg.validate()?;
    }
    select_per_head(name, window, plan, recent, |row| match sss_cfg {
        Some(cfg) => sss(row, cfg),
        None => row.to_vec(),
    })
}

/// Centered moving average with zero padding; the divisor is always `width`.
pub fn pool_scores(row: &[f64], width: usize) -> Vec<f64> {
    if width <= 1 {
        return row.to_vec();
    }
    let half = width / 2;
    let mut prefix = Vec::with_capacity(row.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in row {
        acc += v;
        prefix.push(acc);
    }
    (0..row.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(row.len());
            (prefix[hi] - prefix[lo]) / width as f64
        })
        .collect()
}

fn check_pool(pool_width: usize) -> Result<()> {
    if pool_width == 0 || pool_width.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "pool width {pool_width} must be odd and positive"
        )));
    }
    Ok(())
}

pub fn select_snapkv(
    window: &ObservationWindow,
    capacity_per_head: usize,
    pool_width: usize,
    recent: usize,
) -> Result<EvictionResult> {
    select_snapkv_with_sss(window, capacity_per_head, pool_width, None, recent)
}

/// SnapKV with the pooled scores additionally passed through spectral
/// smoothing when `sss_cfg` is given.
pub fn select_snapkv_with_sss(
    window: &ObservationWindow,
    capacity_per_head: usize,
    pool_width: usize,
    sss_cfg: Option<&SssConfig>,
    recent: usize,
) -> Result<EvictionResult> {
    check_pool(pool_width)?;
    if let Some(cfg) = sss_cfg {
        cfg.validate()?;
    }
    let plan = BudgetPlan::uniform(window.num_layers, window.num_heads, capacity_per_head);
    let name = if sss_cfg.is_some() { "SnapKV+SSS" } else { "SnapKV" };
    select_per_head(name, window, &plan, recent, |row| {
        let pooled = pool_scores(row, pool_width);
        match sss_cfg {
            Some(cfg) => sss(&pooled, cfg),
            None => pooled,
        }
    })
}

/// SnapKV scoring under a (typically pyramid-shaped) per-head plan.
pub fn select_pyramidkv(
    window: &ObservationWindow,
    plan: &BudgetPlan,
    pool_width: usize,
    recent: usize,
) -> Result<EvictionResult> {
    check_pool(pool_width)?;
    select_per_head("PyramidKV", window, plan, recent, |row| {
        pool_scores(row, pool_width)
    })
}

/// Heavy hitters: attention mass summed over every step of `trace`.
pub fn select_h2o(
    trace: &AttentionTrace,
    capacity_per_head: usize,
    recent: usize,
) -> Result<EvictionResult> {
    let (layers, heads) = (trace.num_layers(), trace.num_heads());
    let ctx = trace.final_context_len();
    let rows = par::map_range(layers * heads, |id| {
        let (layer, head) = (id / heads, id % heads);
        let mut acc = vec![0.0f64; ctx];
        for step in 0..trace.num_steps() {
            for (a, &v) in acc.iter_mut().zip(trace.row(step, layer, head)) {
                *a += f64::from(v);
            }
        }
        acc
    });
    let window = ObservationWindow::from_rows(layers, heads, trace.num_steps(), rows)?;
    let plan = BudgetPlan::uniform(layers, heads, capacity_per_head);
    select_per_head("H2O", &window, &plan, recent, <[f64]>::to_vec)
}

/// Heads of a layer share `layer_budget`: after every head's recent window,
/// the remaining slots go to the globally best (score, head, index) triples
/// of the layer, ties toward the lower head then the lower index.
pub fn select_adakv(
    window: &ObservationWindow,
    layer_budget: usize,
    recent: usize,
) -> Result<EvictionResult> {
    let (layers, heads, len) = (window.num_layers, window.num_heads, window.context_len);
    let recent_kept = recent.min(len);
    if layer_budget < heads * recent_kept {
        return Err(Error::CapacityBelowRecent {
            layer: 0,
            head: 0,
            capacity: layer_budget / heads,
            recent,
        });
    }
    let recent_start = len - recent_kept;
    let per_layer = par::map_range(layers, |layer| {
        let slots = layer_budget - heads * recent_kept;
        let candidates = heads * recent_start;
        let key = |c: usize| window.row(layer, c / recent_start.max(1))[c % recent_start.max(1)];
        let chosen = if recent_start == 0 {
            Vec::new()
        } else {
            top_k_by(candidates, slots, key)
        };
        let mut kept: Vec<Vec<usize>> = vec![Vec::new(); heads];
        for c in chosen {
            kept[c / recent_start].push(c % recent_start);
        }
        for head_kept in &mut kept {
            head_kept.extend(recent_start..len);
        }
        kept
    });
    let retained: Vec<Vec<usize>> = per_layer.into_iter().flatten().collect();
    let capacities = retained.iter().map(Vec::len).collect();
    Ok(EvictionResult {
        policy: "AdaKV".into(),
        num_layers: layers,
        num_heads: heads,
        context_len: len,
        recent,
        plan: PlanSummary {
            mode: "adaptive".into(),
            budget: layer_budget * layers,
            window: recent,
            base: 0,
        },
        capacities,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{AudioPrefix, DecodingStep};

    fn window_of(rows: Vec<Vec<f64>>, layers: usize) -> ObservationWindow {
        let heads = rows.len() / layers;
        ObservationWindow::from_rows(layers, heads, 1, rows).unwrap()
    }

    #[test]
    fn window_pads_shorter_rows_with_zeros() {
        let steps = vec![
            DecodingStep::new(0, "", 2, vec![1.0, 0.0]),
            DecodingStep::new(1, "", 3, vec![0.0, 0.5, 0.5]),
        ];
        let trace =
            AttentionTrace::new(1, 1, steps, AudioPrefix { start: 0, len: 1 }, 1.0).unwrap();
        let w = build_observation_window(&trace, 2).unwrap();
        assert_eq!(w.row(0, 0), [0.5, 0.25, 0.25]);
        let last = build_observation_window(&trace, 1).unwrap();
        assert_eq!(last.row(0, 0), [0.0, 0.5, 0.5]);
        assert!(build_observation_window(&trace, 3).is_err());
    }

    #[test]
    fn select_head_keeps_recent_and_best_older() {
        let scores = [0.9, 0.1, 0.5, 0.3, 0.0, 0.0];
        assert_eq!(select_head(&scores, 4, 2), [0, 2, 4, 5]);
        assert_eq!(select_head(&scores, 6, 2), [0, 1, 2, 3, 4, 5]);
        assert_eq!(select_head(&scores, 2, 2), [4, 5]);
    }

    #[test]
    fn capacity_below_recent_is_an_error() {
        let w = window_of(vec![vec![0.1; 10]], 1);
        let plan = BudgetPlan::uniform(1, 1, 3);
        assert!(matches!(
            select_audiokv(&w, &plan, None, 4),
            Err(Error::CapacityBelowRecent { capacity: 3, recent: 4, .. })
        ));
    }

    #[test]
    fn full_capacity_keeps_everything() {
        let w = window_of(vec![vec![0.3, 0.1, 0.6], vec![0.2, 0.2, 0.6]], 1);
        let plan = BudgetPlan::uniform(1, 2, 3);
        let r = select_audiokv(&w, &plan, Some(&SssConfig::default()), 1).unwrap();
        assert!(r.retained.iter().all(|k| k == &[0, 1, 2]));
        let r = select_snapkv(&w, 3, 3, 1).unwrap();
        assert!(r.retained.iter().all(|k| k == &[0, 1, 2]));
    }

    #[test]
    fn pooling() {
        assert_eq!(pool_scores(&[1.0, 2.0], 1), [1.0, 2.0]);
        let pooled = pool_scores(&[0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0], 3);
        assert_eq!(pooled, [0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pooled_impulse_lifts_neighbors() {
        let mut row = vec![0.01; 20];
        row[8] = 1.0;
        row[2] = 0.2;
        let w = window_of(vec![row], 1);
        let r = select_snapkv(&w, 3, 3, 0).unwrap();
        assert_eq!(r.retained_of(0, 0), [7, 8, 9]);
        assert!(select_snapkv(&w, 3, 4, 0).is_err());
    }

    #[test]
    fn snapkv_without_pooling_is_plain_topk() {
        let w = window_of(vec![vec![0.5, 0.1, 0.4, 0.3, 0.2]], 1);
        assert_eq!(select_snapkv(&w, 3, 1, 1).unwrap().retained_of(0, 0), [0, 2, 4]);
    }

    #[test]
    fn h2o_single_step_is_topk_plus_recent() {
        let steps = vec![DecodingStep::new(0, "", 5, vec![0.4, 0.1, 0.3, 0.15, 0.05])];
        let trace =
            AttentionTrace::new(1, 1, steps, AudioPrefix { start: 0, len: 1 }, 1.0).unwrap();
        assert_eq!(select_h2o(&trace, 3, 1).unwrap().retained_of(0, 0), [0, 2, 4]);
    }

    #[test]
    fn adakv_identical_heads_split_evenly() {
        let row = vec![0.5, 0.4, 0.3, 0.2, 0.1, 0.0];
        let w = window_of(vec![row.clone(), row], 1);
        let r = select_adakv(&w, 6, 1).unwrap();
        assert_eq!(r.retained_of(0, 0), [0, 1, 5]);
        assert_eq!(r.retained_of(0, 1), [0, 1, 5]);
    }

    #[test]
    fn adakv_dominant_head_takes_the_shared_slots() {
        let weak = vec![0.1; 6];
        let strong = vec![1.0; 6];
        let w = window_of(vec![weak, strong], 1);
        let r = select_adakv(&w, 6, 1).unwrap();
        assert_eq!(r.retained_of(0, 0), [5]);
        assert_eq!(r.retained_of(0, 1), [0, 1, 2, 3, 5]);
        let all = select_adakv(&w, 12, 1).unwrap();
        assert!(all.retained.iter().all(|k| k.len() == 6));
    }

    #[test]
    fn result_json_round_trip() {
        let w = window_of(vec![vec![0.5, 0.1, 0.4]], 1);
        let r = select_snapkv(&w, 2, 1, 1).unwrap();
        let back: EvictionResult = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
