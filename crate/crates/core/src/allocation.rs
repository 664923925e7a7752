//! Head-wise KV budget allocation.
//!
//! `Combined` reserves a local window `w` plus a flat base `r` for every head
//! and splits what remains in proportion to the head scores.
//! `ProportionalFloor` splits the whole budget by score while never letting a
//! head drop under `w`. `Uniform` and `Pyramid` ignore scores and back the
//! baselines.
//!
//! Every mode hands out exactly the global budget: shares are floored and the
//! leftover units go one each to the highest-priority heads.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::HeadScoreMatrix;

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_BASE_FRACTION: f64 = 0.5;
pub const DEFAULT_PYRAMID_DECAY: f64 = 0.8;

// Shares within this distance below an integer are treated as that integer,
// so rescaled scores floor identically.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllocationMode {
    Combined,
    ProportionalFloor,
    Uniform,
    Pyramid { decay: f64 },
}

impl AllocationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AllocationMode::Combined => "combined",
            AllocationMode::ProportionalFloor => "proportional_floor",
            AllocationMode::Uniform => "uniform",
            AllocationMode::Pyramid { .. } => "pyramid",
        }
    }
}

impl fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AllocationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(AllocationMode::Combined),
            "proportional_floor" | "proportional-floor" => Ok(AllocationMode::ProportionalFloor),
            "uniform" => Ok(AllocationMode::Uniform),
            "pyramid" => Ok(AllocationMode::Pyramid {
                decay: DEFAULT_PYRAMID_DECAY,
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown allocation mode {other:?}"
            ))),
        }
    }
}

/// Per-head token capacities under one global budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    num_layers: usize,
    num_heads: usize,
    capacities: Vec<usize>,
    pub window: usize,
    pub base: usize,
    pub global_budget: usize,
    pub mode: AllocationMode,
}

impl BudgetPlan {
    /// Same capacity for every head.
    pub fn uniform(num_layers: usize, num_heads: usize, capacity: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            capacities: vec![capacity; num_layers * num_heads],
            window: 0,
            base: 0,
            global_budget: capacity * num_layers * num_heads,
            mode: AllocationMode::Uniform,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn capacity(&self, layer: usize, head: usize) -> usize {
        self.capacities[layer * self.num_heads + head]
    }

    /// Flat layer-major capacities.
    pub fn capacities(&self) -> &[usize] {
        &self.capacities
    }

    pub fn total(&self) -> usize {
        self.capacities.iter().sum()
    }

    /// Caps every head at `context_len` and moves the overflow to heads that
    /// still have room, highest `priority` first (ties toward the lower
    /// head). The total is preserved unless every head is full.
    pub fn clipped(&self, context_len: usize, priority: &[f64]) -> Self {
        let mut capacities = self.capacities.clone();
        let mut overflow = 0;
        for c in &mut capacities {
            if *c > context_len {
                overflow += *c - context_len;
                *c = context_len;
            }
        }
        for i in by_descending(priority) {
            if overflow == 0 {
                break;
            }
            let room = context_len - capacities[i];
            let moved = room.min(overflow);
            capacities[i] += moved;
            overflow -= moved;
        }
        Self {
            capacities,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let file = PlanFile {
            window: self.window,
            base: self.base,
            budget: self.global_budget,
            mode: self.mode.name().to_string(),
            decay: match self.mode {
                AllocationMode::Pyramid { decay } => Some(decay),
                _ => None,
            },
            capacities: self
                .capacities
                .chunks(self.num_heads)
                .map(<[usize]>::to_vec)
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("plan serializes")
    }

    pub fn from_json(json: &str) -> std::result::Result<Self, String> {
        let file: PlanFile = serde_json::from_str(json).map_err(|e| e.to_string())?;
        let mut mode: AllocationMode = file.mode.parse().map_err(|e: Error| e.to_string())?;
        if let (AllocationMode::Pyramid { decay }, Some(d)) = (&mut mode, file.decay) {
            *decay = d;
        }
        let num_layers = file.capacities.len();
        let num_heads = file.capacities.first().map_or(0, Vec::len);
        if num_layers == 0 || num_heads == 0 || file.capacities.iter().any(|r| r.len() != num_heads)
        {
            return Err("capacities must form a non-empty rectangular matrix".into());
        }
        Ok(Self {
            num_layers,
            num_heads,
            capacities: file.capacities.into_iter().flatten().collect(),
            window: file.window,
            base: file.base,
            global_budget: file.budget,
            mode,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::output(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|m| Error::parse(path, m))
    }
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    window: usize,
    base: usize,
    budget: usize,
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decay: Option<f64>,
    capacities: Vec<Vec<usize>>,
}

/// Per-head base allocation `r` for a fractional setting: `fraction` of the
/// budget spread evenly over all heads.
pub fn resolve_base(fraction: f64, budget: usize, total_heads: usize) -> usize {
    if total_heads == 0 {
        return 0;
    }
    (fraction * budget as f64 / total_heads as f64).floor() as usize
}

/// Floors `total * w_i / sum(w)` and hands the leftover units one each in
/// `priority` order. Zero total weight splits evenly.
fn distribute(total: usize, weights: &[f64], priority: &[usize]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let mut out: Vec<usize> = if sum > 0.0 {
        weights
            .iter()
            .map(|&w| {
                let share = total as f64 * (w / sum);
                ((share + SNAP).floor() as usize).min(total)
            })
            .collect()
    } else {
        vec![total / n; n]
    };
    // Guard against the snap overshooting.
    while out.iter().sum::<usize>() > total {
        let i = *priority.iter().rev().find(|&&i| out[i] > 0).expect("positive entry");
        out[i] -= 1;
    }
    let mut leftover = total - out.iter().sum::<usize>();
    for &i in priority.iter().cycle() {
        if leftover == 0 {
            break;
        }
        out[i] += 1;
        leftover -= 1;
    }
    out
}

fn by_descending(values: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..values.len()).collect();
    ids.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    ids
}

pub fn allocate(
    scores: &HeadScoreMatrix,
    budget: usize,
    window: usize,
    base: usize,
    mode: AllocationMode,
) -> Result<BudgetPlan> {
    let (layers, heads) = (scores.num_layers(), scores.num_heads());
    let n = layers * heads;
    if n == 0 {
        return Err(Error::InvalidConfig("no heads to allocate".into()));
    }
    let s = scores.as_slice();
    let floor_per_head = match mode {
        AllocationMode::Combined => window + base,
        _ => window,
    };
    let required = n * floor_per_head;
    if budget < required {
        return Err(Error::BudgetTooSmall { budget, required });
    }
    let capacities = match mode {
        AllocationMode::Combined => {
            let priority = by_descending(s);
            distribute(budget - required, s, &priority)
                .into_iter()
                .map(|extra| floor_per_head + extra)
                .collect()
        }
        AllocationMode::ProportionalFloor => proportional_with_floor(s, budget, window),
        AllocationMode::Uniform => {
            let order: Vec<usize> = (0..n).collect();
            distribute(budget, &vec![1.0; n], &order)
        }
        AllocationMode::Pyramid { decay } => {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "pyramid decay {decay} outside (0, 1]"
                )));
            }
            pyramid_capacities(layers, heads, budget, window, decay)
        }
    };
    Ok(BudgetPlan {
        num_layers: layers,
        num_heads: heads,
        capacities,
        window,
        base: if mode == AllocationMode::Combined { base } else { 0 },
        global_budget: budget,
        mode,
    })
}

// Heads whose proportional share falls under the window are pinned at the
// window and the rest is re-split among the others until no share is short.
fn proportional_with_floor(s: &[f64], budget: usize, window: usize) -> Vec<usize> {
    let n = s.len();
    let mut pinned = vec![false; n];
    loop {
        let free_heads: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
        let free = budget - (n - free_heads.len()) * window;
        let sum: f64 = free_heads.iter().map(|&i| s[i]).sum();
        let share = |i: usize| -> f64 {
            if sum > 0.0 {
                free as f64 * (s[i] / sum)
            } else {
                free as f64 / free_heads.len() as f64
            }
        };
        let short: Vec<usize> = free_heads
            .iter()
            .copied()
            .filter(|&i| share(i) + SNAP < window as f64)
            .collect();
        if short.is_empty() {
            let weights: Vec<f64> = free_heads
                .iter()
                .map(|&i| if sum > 0.0 { s[i] } else { 1.0 })
                .collect();
            let sub_scores: Vec<f64> = free_heads.iter().map(|&i| s[i]).collect();
            let priority = by_descending(&sub_scores);
            let split = distribute(free, &weights, &priority);
            let mut out = vec![window; n];
            for (&i, c) in free_heads.iter().zip(split) {
                out[i] = c;
            }
            return out;
        }
        for i in short {
            pinned[i] = true;
        }
    }
}

fn pyramid_capacities(
    layers: usize,
    heads: usize,
    budget: usize,
    window: usize,
    decay: f64,
) -> Vec<usize> {
    let surplus = budget - layers * heads * window;
    let mut per_layer = pyramid_schedule(layers, surplus / layers, decay);
    for extra in per_layer.iter_mut().take(surplus % layers) {
        *extra += 1;
    }
    let order: Vec<usize> = (0..heads).collect();
    per_layer
        .into_iter()
        .flat_map(|total| {
            distribute(total, &vec![1.0; heads], &order)
                .into_iter()
                .map(|c| c + window)
        })
        .collect()
}

/// Geometrically decaying per-layer budgets (`decay^layer`), rescaled so
/// they sum to `num_layers * per_layer_budget`. Rounding leftovers go to
/// the largest fractional remainders, ties toward the lower layer.
pub fn pyramid_schedule(num_layers: usize, per_layer_budget: usize, decay: f64) -> Vec<usize> {
    if num_layers == 0 {
        return Vec::new();
    }
    let total = num_layers * per_layer_budget;
    let weights: Vec<f64> = (0..num_layers).map(|l| decay.powi(l as i32)).collect();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let remainders: Vec<f64> = exact.iter().map(|x| x - (x + SNAP).floor()).collect();
    distribute(total, &weights, &by_descending(&remainders))
}

/// Fraction of the full cache (`heads * context_length`) a plan keeps.
pub fn effective_retention_ratio(plan: &BudgetPlan, context_length: usize) -> f64 {
    let kept: usize = plan
        .capacities
        .iter()
        .map(|&c| c.min(context_length))
        .sum();
    kept as f64 / (plan.capacities.len() * context_length) as f64
}
