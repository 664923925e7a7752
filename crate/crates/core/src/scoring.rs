//! Offline identification of audio-critical heads.
//!
//! For every word-aligned decoding step, each head's top-K attended indices
//! are intersected with the audio span of the word being generated. The
//! fraction of hits, averaged over all aligned steps, is the head's score.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::trace::{word_to_audio_span, AttentionTrace, AudioSpan, WordAlignment, WordStepMap};

pub const DEFAULT_TOP_K: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopKConfig {
    pub k: usize,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self { k: DEFAULT_TOP_K }
    }
}

/// Indices of the `k` largest keys among `0..n`, returned in ascending
/// index order. Ties go to the lower index.
pub fn top_k_by<F>(n: usize, k: usize, key: F) -> Vec<usize>
where
    F: Fn(usize) -> f64,
{
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| -> Ordering { key(*b).total_cmp(&key(*a)).then(a.cmp(b)) };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, cmp);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn topk_indices(row: &[f32], k: usize) -> Vec<usize> {
    top_k_by(row.len(), k, |i| f64::from(row[i]))
}

/// Share of the top-K set that falls inside `span`. `topk` may hold fewer
/// than `k` entries (short rows); the denominator stays `k`.
pub fn step_hit_ratio(topk: &[usize], span: AudioSpan, k: usize) -> f64 {
    let hits = topk.iter().filter(|&&i| span.contains(i)).count();
    hits as f64 / k as f64
}

/// Per-head audio-grounding scores, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreMatrix {
    num_layers: usize,
    num_heads: usize,
    pub num_samples: usize,
    scores: Vec<f64>,
}

impl HeadScoreMatrix {
    pub fn zeros(num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            num_samples: 0,
            scores: vec![0.0; num_layers * num_heads],
        }
    }

    pub fn from_scores(
        num_layers: usize,
        num_heads: usize,
        num_samples: usize,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if scores.len() != num_layers * num_heads {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for {num_layers}x{num_heads} heads",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidConfig(format!("head score {bad} outside [0, 1]")));
        }
        Ok(Self {
            num_layers,
            num_heads,
            num_samples,
            scores,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.num_heads + head]
    }

    /// Flat layer-major view.
    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    /// Flat head ids (`layer * num_heads + head`) ordered by descending
    /// score, ties toward the lower id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.scores.len()).collect();
        ids.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        ids
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: HeadScoreFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        file.into_matrix().map_err(|e| Error::parse(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::output(path, e))
    }

    pub fn to_json(&self) -> String {
        let file = HeadScoreFile {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            num_samples: self.num_samples,
            scores: self
                .scores
                .chunks(self.num_heads)
                .map(<[f64]>::to_vec)
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("scores serialize")
    }
}

#[derive(Serialize, Deserialize)]
struct HeadScoreFile {
    num_layers: usize,
    num_heads: usize,
    num_samples: usize,
    scores: Vec<Vec<f64>>,
}

impl HeadScoreFile {
    fn into_matrix(self) -> Result<HeadScoreMatrix> {
        if self.scores.len() != self.num_layers
            || self.scores.iter().any(|r| r.len() != self.num_heads)
        {
            return Err(Error::DimensionMismatch(format!(
                "score rows do not form a {}x{} matrix",
                self.num_layers, self.num_heads
            )));
        }
        HeadScoreMatrix::from_scores(
            self.num_layers,
            self.num_heads,
            self.num_samples,
            self.scores.into_iter().flatten().collect(),
        )
    }
}

/// Averages per-step hit ratios over every word-aligned step. Each step is
/// judged against the span of its own word; unaligned steps do not count.
pub fn score_heads(
    trace: &AttentionTrace,
    words: &[WordAlignment],
    map: &WordStepMap,
    cfg: TopKConfig,
) -> Result<HeadScoreMatrix> {
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("top-K needs k >= 1".into()));
    }
    let mut samples: Vec<(usize, AudioSpan)> = Vec::with_capacity(map.num_steps());
    for entry in &map.entries {
        let word = words.get(entry.word_index).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "word {} not in a list of {}",
                entry.word_index,
                words.len()
            ))
        })?;
        let span = word_to_audio_span(word, trace)?;
        for &step in &entry.steps {
            if step >= trace.num_steps() {
                return Err(Error::DimensionMismatch(format!(
                    "step {step} beyond a trace of {} steps",
                    trace.num_steps()
                )));
            }
            samples.push((step, span));
        }
    }
    let (layers, heads) = (trace.num_layers(), trace.num_heads());
    if samples.is_empty() {
        return Ok(HeadScoreMatrix::zeros(layers, heads));
    }
    let scores = par::map_range(layers * heads, |id| {
        let (layer, head) = (id / heads, id % heads);
        let total: f64 = samples
            .iter()
            .map(|&(step, span)| {
                let top = topk_indices(trace.row(step, layer, head), cfg.k);
                step_hit_ratio(&top, span, cfg.k)
            })
            .sum();
        total / samples.len() as f64
    });
    Ok(HeadScoreMatrix {
        num_layers: layers,
        num_heads: heads,
        num_samples: samples.len(),
        scores,
    })
}

/// Sample-weighted mean of two score matrices. Two zero-sample matrices
/// merge to an all-zero one.
pub fn merge_scores(a: &HeadScoreMatrix, b: &HeadScoreMatrix) -> Result<HeadScoreMatrix> {
    if a.num_layers != b.num_layers || a.num_heads != b.num_heads {
        return Err(Error::DimensionMismatch(format!(
            "cannot merge {}x{} with {}x{}",
            a.num_layers, a.num_heads, b.num_layers, b.num_heads
        )));
    }
    let total = a.num_samples + b.num_samples;
    if a.num_samples == 0 && b.num_samples == 0 {
        return Ok(HeadScoreMatrix::zeros(a.num_layers, a.num_heads));
    }
    if b.num_samples == 0 {
        return Ok(a.clone());
    }
    if a.num_samples == 0 {
        return Ok(b.clone());
    }
    let (wa, wb) = (a.num_samples as f64, b.num_samples as f64);
    let scores = a
        .scores
        .iter()
        .zip(&b.scores)
        .map(|(&x, &y)| ((x * wa + y * wb) / total as f64).clamp(0.0, 1.0))
        .collect();
    Ok(HeadScoreMatrix {
        num_layers: a.num_layers,
        num_heads: a.num_heads,
        num_samples: total,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{AudioPrefix, DecodingStep, WordSteps};
    use std::collections::BTreeSet;

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.5, 0.4], 2), [1, 2]);
        assert_eq!(topk_indices(&[0.1, 0.5, 0.4], 5), [0, 1, 2]);
        assert_eq!(topk_indices(&[0.25; 4], 2), [0, 1]);
    }

    #[test]
    fn hit_ratio_examples() {
        let span = AudioSpan {
            start_index: 30,
            end_index: 40,
        };
        assert!((step_hit_ratio(&[35, 36, 90], span, 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(step_hit_ratio(&[30, 40], span, 2), 1.0);
        assert_eq!(step_hit_ratio(&[1, 2, 41], span, 3), 0.0);
    }

    fn two_step_trace() -> AttentionTrace {
        // Audio prefix covers indices 0..4 over 4 s. Step 0 puts both top-2
        // picks inside [0, 1]; step 1 puts only one inside [2, 3].
        let steps = vec![
            DecodingStep::new(0, "ab", 6, vec![0.4, 0.3, 0.1, 0.1, 0.05, 0.05]),
            DecodingStep::new(1, " cd", 7, vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5]),
        ];
        AttentionTrace::new(1, 1, steps, AudioPrefix { start: 0, len: 4 }, 4.0).unwrap()
    }

    #[test]
    fn score_is_mean_of_step_ratios() {
        let trace = two_step_trace();
        let words = vec![
            WordAlignment::new("ab", 0.0, 1.5, 1.0),
            WordAlignment::new("cd", 2.0, 3.9, 1.0),
        ];
        let map = WordStepMap {
            entries: vec![
                WordSteps {
                    word_index: 0,
                    steps: BTreeSet::from([0]),
                },
                WordSteps {
                    word_index: 1,
                    steps: BTreeSet::from([1]),
                },
            ],
        };
        let m = score_heads(&trace, &words, &map, TopKConfig { k: 2 }).unwrap();
        assert_eq!(m.num_samples, 2);
        assert!((m.get(0, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_map_scores_zero() {
        let m = score_heads(
            &two_step_trace(),
            &[],
            &WordStepMap::default(),
            TopKConfig::default(),
        )
        .unwrap();
        assert_eq!(m.num_samples, 0);
        assert_eq!(m.as_slice(), &[0.0]);
    }

    #[test]
    fn default_k_is_24() {
        assert_eq!(TopKConfig::default().k, 24);
    }

    #[test]
    fn merge_is_sample_weighted() {
        let a = HeadScoreMatrix::from_scores(1, 1, 1, vec![0.2]).unwrap();
        let b = HeadScoreMatrix::from_scores(1, 1, 3, vec![0.8]).unwrap();
        let m = merge_scores(&a, &b).unwrap();
        assert_eq!(m.num_samples, 4);
        assert!((m.get(0, 0) - 0.65).abs() < 1e-15);
        assert_eq!(merge_scores(&a, &HeadScoreMatrix::zeros(1, 1)).unwrap(), a);
        assert_eq!(merge_scores(&a, &b).unwrap(), merge_scores(&b, &a).unwrap());
        assert!(matches!(
            merge_scores(&a, &HeadScoreMatrix::zeros(1, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn json_round_trip_and_shape_check() {
        let m = HeadScoreMatrix::from_scores(2, 2, 7, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let file: HeadScoreFile = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(file.scores, vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
        assert_eq!(file.into_matrix().unwrap(), m);
        let ragged = r#"{"num_layers":2,"num_heads":2,"num_samples":1,"scores":[[0.1],[0.2,0.3]]}"#;
        let file: HeadScoreFile = serde_json::from_str(ragged).unwrap();
        assert!(file.into_matrix().is_err());
    }
}
