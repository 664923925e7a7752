//! Trace replay and retention metrics.
//!
//! A trace is split at an eviction step `e`. The `observation_width` steps
//! before `e` feed the policies; every step from `e` on is the future
//! horizon. Quality is measured against future attention restricted to the
//! context that existed at eviction time.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, resolve_base, AllocationMode, BudgetPlan};
use crate::error::{Error, Result};
use crate::eviction::{
    build_observation_window, select_adakv, select_audiokv, select_h2o, select_pyramidkv,
    select_snapkv_with_sss, EvictionResult, ObservationWindow,
};
use crate::par;
use crate::scoring::{top_k_by, HeadScoreMatrix};
use crate::spectral::{sss, SssConfig};
use crate::trace::AttentionTrace;

pub const DEFAULT_ENTROPY_BINS: usize = 10;
/// Keys and values are stored separately.
pub const KV_PAIR_FACTOR: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvGeometry {
    pub head_dim: usize,
    pub bytes_per_element: usize,
}

impl Default for KvGeometry {
    fn default() -> Self {
        Self {
            head_dim: 128,
            bytes_per_element: 2,
        }
    }
}

impl KvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.bytes_per_element == 0 {
            return Err(Error::InvalidConfig(format!(
                "KV geometry needs positive sizes, got head_dim={} bytes={}",
                self.head_dim, self.bytes_per_element
            )));
        }
        Ok(())
    }

    pub fn bytes_per_token(&self) -> u64 {
        KV_PAIR_FACTOR * self.head_dim as u64 * self.bytes_per_element as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub policy: String,
    pub retention_ratio: f64,
    pub oracle_overlap: f64,
    pub coverage_entropy: f64,
    pub mass_retained: f64,
    pub memory_bytes: u64,
}

/// Summed attention of the future steps over the first `context_len`
/// indices, per head.
pub fn future_window(
    trace: &AttentionTrace,
    context_len: usize,
    horizon: usize,
) -> Result<ObservationWindow> {
    let first = trace
        .steps()
        .iter()
        .position(|s| s.context_len() > context_len)
        .ok_or_else(|| Error::Horizon(format!("no step extends a context of {context_len}")))?;
    let available = trace.num_steps() - first;
    if horizon == 0 || horizon > available {
        return Err(Error::Horizon(format!(
            "horizon {horizon} not in 1..={available}"
        )));
    }
    let heads = trace.num_heads();
    let rows = par::map_range(trace.num_layers() * heads, |id| {
        let (layer, head) = (id / heads, id % heads);
        let mut acc = vec![0.0f64; context_len];
        for step in first..first + horizon {
            for (a, &v) in acc.iter_mut().zip(trace.row(step, layer, head)) {
                *a += f64::from(v);
            }
        }
        acc
    });
    ObservationWindow::from_rows(trace.num_layers(), heads, horizon, rows)
}

fn check_result_dims(result: &EvictionResult, window: &ObservationWindow) -> Result<()> {
    if result.num_layers != window.num_layers()
        || result.num_heads != window.num_heads()
        || result.context_len != window.context_len()
    {
        return Err(Error::DimensionMismatch(format!(
            "result is {}x{} over {} tokens, scores are {}x{} over {}",
            result.num_layers,
            result.num_heads,
            result.context_len,
            window.num_layers(),
            window.num_heads(),
            window.context_len()
        )));
    }
    Ok(())
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// Per head: how much of the hindsight-best set of the same size was kept.
/// The oracle set is the top-|retained| indices by attention summed over
/// the next `horizon` steps.
pub fn oracle_overlap(result: &EvictionResult, trace: &AttentionTrace, horizon: usize) -> Result<f64> {
    let future = future_window(trace, result.context_len, horizon)?;
    check_result_dims(result, &future)?;
    let heads = result.num_heads;
    let per_head = par::map_range(result.num_layers * heads, |id| {
        let (layer, head) = (id / heads, id % heads);
        let kept = result.retained_of(layer, head);
        if kept.is_empty() {
            return 1.0;
        }
        let row = future.row(layer, head);
        let oracle = top_k_by(row.len(), kept.len(), |i| row[i]);
        intersection_len(kept, &oracle) as f64 / oracle.len() as f64
    });
    Ok(mean(per_head.into_iter()))
}

// Both inputs ascending.
fn intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Share of each head's score mass that falls on retained indices, averaged
/// over heads. A head with no mass at all counts as fully retained.
pub fn retained_mass(result: &EvictionResult, window: &ObservationWindow) -> Result<f64> {
    check_result_dims(result, window)?;
    let heads = result.num_heads;
    let per_head = (0..result.num_layers * heads).map(|id| {
        let (layer, head) = (id / heads, id % heads);
        let row = window.row(layer, head);
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        let kept: f64 = result.retained_of(layer, head).iter().map(|&i| row[i]).sum();
        (kept / total).min(1.0)
    });
    Ok(mean(per_head))
}

/// Natural-log entropy of `indices` bucketed into `bins` equal-width bins
/// over `[0, context_len)`.
pub fn index_entropy(indices: &[usize], context_len: usize, bins: usize) -> f64 {
    if indices.is_empty() || context_len == 0 || bins == 0 {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &i in indices {
        counts[(i * bins / context_len).min(bins - 1)] += 1;
    }
    let n = indices.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn coverage_entropy(result: &EvictionResult, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!("entropy needs at least 2 bins, got {bins}")));
    }
    let heads = result.num_heads;
    Ok(mean((0..result.num_layers * heads).map(|id| {
        index_entropy(
            result.retained_of(id / heads, id % heads),
            result.context_len,
            bins,
        )
    })))
}

/// Mean over heads of the coverage entropy of each head's top-`k` indices,
/// scored raw or after spectral smoothing.
pub fn topk_entropy(
    window: &ObservationWindow,
    k: usize,
    sss_cfg: Option<&SssConfig>,
    bins: usize,
) -> f64 {
    let heads = window.num_heads();
    let per_head = par::map_range(window.num_layers() * heads, |id| {
        let row = window.row(id / heads, id % heads);
        let scores = match sss_cfg {
            Some(cfg) => sss(row, cfg),
            None => row.to_vec(),
        };
        let top = top_k_by(scores.len(), k, |i| scores[i]);
        index_entropy(&top, window.context_len(), bins)
    });
    mean(per_head.into_iter())
}

pub fn memory_footprint(result: &EvictionResult, geom: &KvGeometry) -> u64 {
    result.total_retained() as u64 * geom.bytes_per_token()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    AudioKv,
    AudioKvNoSss,
    SnapKvSss,
    SnapKv,
    PyramidKv,
    H2o,
    AdaKv,
}

impl Policy {
    /// The four-way ablation grid, strongest first.
    pub const ABLATION: [Policy; 4] = [
        Policy::AudioKv,
        Policy::AudioKvNoSss,
        Policy::SnapKvSss,
        Policy::SnapKv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::AudioKv => "AudioKV",
            Policy::AudioKvNoSss => "AudioKV-noSSS",
            Policy::SnapKvSss => "SnapKV+SSS",
            Policy::SnapKv => "SnapKV",
            Policy::PyramidKv => "PyramidKV",
            Policy::H2o => "H2O",
            Policy::AdaKv => "AdaKV",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Policy::AudioKv,
            Policy::AudioKvNoSss,
            Policy::SnapKvSss,
            Policy::SnapKv,
            Policy::PyramidKv,
            Policy::H2o,
            Policy::AdaKv,
        ];
        all.into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub observation_width: usize,
    /// Eviction step; `None` picks the middle of the trace.
    pub eviction_step: Option<usize>,
    /// Future steps scored; `None` uses all of them.
    pub horizon: Option<usize>,
    /// Local window kept by every policy and reserved by the plans.
    pub window: usize,
    pub base_fraction: f64,
    pub pool_width: usize,
    pub allocation: AllocationMode,
    pub sss: SssConfig,
    pub entropy_bins: usize,
    pub geometry: KvGeometry,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            observation_width: crate::eviction::DEFAULT_OBSERVATION_WIDTH,
            eviction_step: None,
            horizon: None,
            window: crate::allocation::DEFAULT_WINDOW,
            base_fraction: crate::allocation::DEFAULT_BASE_FRACTION,
            pool_width: crate::eviction::DEFAULT_POOL_WIDTH,
            allocation: AllocationMode::Combined,
            sss: SssConfig::default(),
            entropy_bins: DEFAULT_ENTROPY_BINS,
            geometry: KvGeometry::default(),
        }
    }
}

/// Everything the policies see at the eviction point.
pub struct EvictionPoint {
    pub step: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub observed: AttentionTrace,
    pub window: ObservationWindow,
    pub future: ObservationWindow,
}

impl EvictionPoint {
    pub fn new(trace: &AttentionTrace, cfg: &SimulationConfig) -> Result<Self> {
        let steps = trace.num_steps();
        if steps < 2 {
            return Err(Error::Horizon(format!(
                "a trace of {steps} step(s) leaves nothing to observe or predict"
            )));
        }
        let step = cfg.eviction_step.unwrap_or(steps / 2);
        if step == 0 || step >= steps {
            return Err(Error::Horizon(format!(
                "eviction step {step} not in 1..{steps}"
            )));
        }
        let observed = trace.truncated(step)?;
        let width = cfg.observation_width.clamp(1, step);
        let window = build_observation_window(&observed, width)?;
        let context_len = window.context_len();
        let horizon = cfg.horizon.unwrap_or(steps - step);
        let future = future_window(trace, context_len, horizon)?;
        Ok(Self {
            step,
            context_len,
            horizon,
            observed,
            window,
            future,
        })
    }

    /// Global token budget for a retention ratio.
    pub fn budget(&self, ratio: f64) -> usize {
        let full = self.window.num_layers() * self.window.num_heads() * self.context_len;
        ((ratio * full as f64) + 1e-9).floor() as usize
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "retention ratio {ratio} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Head-wise plan for a ratio, clipped to the context.
pub fn audiokv_plan(
    point: &EvictionPoint,
    scores: &HeadScoreMatrix,
    ratio: f64,
    cfg: &SimulationConfig,
) -> Result<BudgetPlan> {
    check_ratio(ratio)?;
    let budget = point.budget(ratio);
    let heads = scores.num_layers() * scores.num_heads();
    let base = resolve_base(cfg.base_fraction, budget, heads);
    let plan = allocate(scores, budget, cfg.window, base, cfg.allocation)?;
    Ok(plan.clipped(point.context_len, scores.as_slice()))
}

pub fn run_policy(
    policy: Policy,
    point: &EvictionPoint,
    scores: &HeadScoreMatrix,
    ratio: f64,
    cfg: &SimulationConfig,
) -> Result<EvictionResult> {
    check_ratio(ratio)?;
    let window = &point.window;
    if scores.num_layers() != window.num_layers() || scores.num_heads() != window.num_heads() {
        return Err(Error::DimensionMismatch(format!(
            "scores are {}x{}, trace is {}x{}",
            scores.num_layers(),
            scores.num_heads(),
            window.num_layers(),
            window.num_heads()
        )));
    }
    let budget = point.budget(ratio);
    let heads = window.num_layers() * window.num_heads();
    let per_head = budget / heads;
    match policy {
        Policy::AudioKv | Policy::AudioKvNoSss => {
            let plan = audiokv_plan(point, scores, ratio, cfg)?;
            let sss_cfg = (policy == Policy::AudioKv).then_some(&cfg.sss);
            select_audiokv(window, &plan, sss_cfg, cfg.window)
        }
        Policy::SnapKv => select_snapkv_with_sss(window, per_head, cfg.pool_width, None, cfg.window),
        Policy::SnapKvSss => {
            select_snapkv_with_sss(window, per_head, cfg.pool_width, Some(&cfg.sss), cfg.window)
        }
        Policy::PyramidKv => {
            let plan = allocate(
                scores,
                budget,
                cfg.window,
                0,
                AllocationMode::Pyramid {
                    decay: crate::allocation::DEFAULT_PYRAMID_DECAY,
                },
            )?
            .clipped(point.context_len, &vec![0.0; heads]);
            select_pyramidkv(window, &plan, cfg.pool_width, cfg.window)
        }
        Policy::H2o => select_h2o(&point.observed, per_head, cfg.window),
        Policy::AdaKv => select_adakv(window, budget / window.num_layers(), cfg.window),
    }
}

fn report(
    policy: Policy,
    point: &EvictionPoint,
    trace: &AttentionTrace,
    scores: &HeadScoreMatrix,
    ratio: f64,
    cfg: &SimulationConfig,
) -> Result<RetentionReport> {
    let result = run_policy(policy, point, scores, ratio, cfg)?;
    Ok(RetentionReport {
        policy: policy.name().to_string(),
        retention_ratio: ratio,
        oracle_overlap: oracle_overlap(&result, trace, point.horizon)?,
        coverage_entropy: coverage_entropy(&result, cfg.entropy_bins)?,
        mass_retained: retained_mass(&result, &point.future)?,
        memory_bytes: memory_footprint(&result, &cfg.geometry),
    })
}

/// One report per (ratio, policy), ratio-major in the given order.
pub fn run_comparison(
    trace: &AttentionTrace,
    scores: &HeadScoreMatrix,
    policies: &[Policy],
    ratios: &[f64],
    cfg: &SimulationConfig,
) -> Result<Vec<RetentionReport>> {
    if policies.is_empty() || ratios.is_empty() {
        return Ok(Vec::new());
    }
    cfg.geometry.validate()?;
    ratios.iter().try_for_each(|&r| check_ratio(r))?;
    let point = EvictionPoint::new(trace, cfg)?;
    let pairs: Vec<(f64, Policy)> = ratios
        .iter()
        .flat_map(|&r| policies.iter().map(move |&p| (r, p)))
        .collect();
    par::try_map_range(pairs.len(), |i| {
        let (ratio, policy) = pairs[i];
        report(policy, &point, trace, scores, ratio, cfg)
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    policy: &'a str,
    ratio: String,
    overlap: String,
    mass: String,
    entropy: String,
    bytes: u64,
}

pub fn reports_to_csv(reports: &[RetentionReport]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in reports {
        writer
            .serialize(CsvRow {
                policy: &r.policy,
                ratio: format!("{:.4}", r.retention_ratio),
                overlap: format!("{:.6}", r.oracle_overlap),
                mass: format!("{:.6}", r.mass_retained),
                entropy: format!("{:.6}", r.coverage_entropy),
                bytes: r.memory_bytes,
            })
            .expect("in-memory CSV write");
    }
    if reports.is_empty() {
        writer
            .write_record(["policy", "ratio", "overlap", "mass", "entropy", "bytes"])
            .expect("in-memory CSV write");
    }
    let bytes = writer.into_inner().expect("in-memory CSV flush");
    String::from_utf8(bytes).expect("CSV is UTF-8")
}

pub fn write_reports(
    reports: &[RetentionReport],
    csv_path: &Path,
    json_path: Option<&Path>,
) -> Result<()> {
    let mut file = fs::File::create(csv_path).map_err(|e| Error::output(csv_path, e))?;
    file.write_all(reports_to_csv(reports).as_bytes())
        .map_err(|e| Error::output(csv_path, e))?;
    if let Some(path) = json_path {
        let json = serde_json::to_string_pretty(reports).expect("reports serialize");
        fs::write(path, json).map_err(|e| Error::output(path, e))?;
    }
    Ok(())
}
