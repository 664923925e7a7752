//! Attention traces, word alignments and the mapping between them.
//!
//! A trace records, for every decoding step, the attention distribution of
//! the newly generated token over all earlier token indices, for every
//! (layer, head). The on-disk layout is a small little-endian binary format:
//!
//! ```text
//! "AKVT" | u32 version=1 | u32 layers | u32 heads | u32 steps | u32 a0
//!        | u32 n_audio | f64 total_duration_s
//! per step: u32 L_t | layers*heads*L_t f32 (layer-major, head-major, index-minor)
//! ```
//!
//! Alignments are WhisperX-style word lists, and the generated token texts
//! live in a JSON sidecar (an array of strings, one per step) because the
//! binary format carries attention only.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"AKVT";
pub const TRACE_VERSION: u32 = 1;
/// Allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

const HEADER_LEN: usize = 4 + 4 * 6 + 8;

/// Location of the audio prefix inside the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioPrefix {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodingStep {
    pub step_index: usize,
    pub generated_token_text: String,
    context_len: usize,
    attention: Vec<f32>,
}

impl DecodingStep {
    /// `attention` is laid out layer-major, head-major, index-minor and must
    /// hold `layers * heads * context_len` values.
    pub fn new(
        step_index: usize,
        generated_token_text: impl Into<String>,
        context_len: usize,
        attention: Vec<f32>,
    ) -> Self {
        Self {
            step_index,
            generated_token_text: generated_token_text.into(),
            context_len,
            attention,
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn attention(&self) -> &[f32] {
        &self.attention
    }

    fn row(&self, layer: usize, head: usize, num_heads: usize) -> &[f32] {
        let start = (layer * num_heads + head) * self.context_len;
        &self.attention[start..start + self.context_len]
    }
}

/// A validated, immutable attention trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    num_layers: usize,
    num_heads: usize,
    steps: Vec<DecodingStep>,
    audio: AudioPrefix,
    total_duration_s: f64,
}

impl AttentionTrace {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        steps: Vec<DecodingStep>,
        audio: AudioPrefix,
        total_duration_s: f64,
    ) -> Result<Self> {
        let trace = Self {
            num_layers,
            num_heads,
            steps,
            audio,
            total_duration_s,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::Format(format!(
                "trace needs at least one layer and one head, got {}x{}",
                self.num_layers, self.num_heads
            )));
        }
        if self.steps.is_empty() {
            return Err(Error::Format("trace has no decoding steps".into()));
        }
        if !self.total_duration_s.is_finite() || self.total_duration_s < 0.0 {
            return Err(Error::Format(format!(
                "total duration {} is not a finite non-negative number",
                self.total_duration_s
            )));
        }
        let mut prev: Option<&DecodingStep> = None;
        for step in &self.steps {
            if step.context_len == 0 {
                return Err(Error::Format(format!(
                    "step {} has an empty context",
                    step.step_index
                )));
            }
            let expected = self.num_layers * self.num_heads * step.context_len;
            if step.attention.len() != expected {
                return Err(Error::Format(format!(
                    "step {} carries {} attention values, expected {expected}",
                    step.step_index,
                    step.attention.len()
                )));
            }
            if let Some(p) = prev {
                if step.step_index <= p.step_index {
                    return Err(Error::Integrity(format!(
                        "step index {} does not increase after {}",
                        step.step_index, p.step_index
                    )));
                }
                if step.context_len <= p.context_len {
                    return Err(Error::Integrity(format!(
                        "context length {} at step {} does not increase after {}",
                        step.context_len, step.step_index, p.context_len
                    )));
                }
            }
            for layer in 0..self.num_layers {
                for head in 0..self.num_heads {
                    let row = step.row(layer, head, self.num_heads);
                    let mut sum = 0.0f64;
                    for &v in row {
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::Integrity(format!(
                                "step {} ({layer}, {head}) holds invalid probability {v}",
                                step.step_index
                            )));
                        }
                        sum += f64::from(v);
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::Integrity(format!(
                            "step {} ({layer}, {head}) sums to {sum}",
                            step.step_index
                        )));
                    }
                }
            }
            prev = Some(step);
        }
        let min_ctx = self.steps[0].context_len;
        if self.audio.start + self.audio.len > min_ctx {
            return Err(Error::Integrity(format!(
                "audio prefix [{}, {}) exceeds the shortest context {min_ctx}",
                self.audio.start,
                self.audio.start + self.audio.len
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[DecodingStep] {
        &self.steps
    }

    pub fn audio(&self) -> AudioPrefix {
        self.audio
    }

    pub fn total_duration_s(&self) -> f64 {
        self.total_duration_s
    }

    /// Context length of the final step.
    pub fn final_context_len(&self) -> usize {
        self.steps.last().map_or(0, |s| s.context_len)
    }

    pub fn row(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        self.steps[step].row(layer, head, self.num_heads)
    }

    /// The first `num_steps` steps as a trace of their own.
    pub fn truncated(&self, num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > self.steps.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot keep {num_steps} of {} steps",
                self.steps.len()
            )));
        }
        Ok(Self {
            steps: self.steps[..num_steps].to_vec(),
            ..self.clone()
        })
    }

    /// Attaches generated token texts (one per step).
    pub fn with_token_texts<S: Into<String>>(mut self, texts: Vec<S>) -> Result<Self> {
        if texts.len() != self.steps.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} token texts for {} steps",
                texts.len(),
                self.steps.len()
            )));
        }
        for (step, text) in self.steps.iter_mut().zip(texts) {
            step.generated_token_text = text.into();
        }
        Ok(self)
    }

    pub fn token_texts(&self) -> Vec<&str> {
        self.steps
            .iter()
            .map(|s| s.generated_token_text.as_str())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.steps.iter().map(|s| 4 + 4 * s.attention.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(TRACE_MAGIC);
        for v in [
            TRACE_VERSION,
            self.num_layers as u32,
            self.num_heads as u32,
            self.steps.len() as u32,
            self.audio.start as u32,
            self.audio.len as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.total_duration_s.to_le_bytes());
        for step in &self.steps {
            out.extend_from_slice(&(step.context_len as u32).to_le_bytes());
            for v in &step.attention {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != TRACE_MAGIC {
            return Err(Error::Format("bad magic, expected AKVT".into()));
        }
        let version = cur.u32()?;
        if version != TRACE_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let num_layers = cur.u32()? as usize;
        let num_heads = cur.u32()? as usize;
        let num_steps = cur.u32()? as usize;
        let a0 = cur.u32()? as usize;
        let n_audio = cur.u32()? as usize;
        let total_duration_s = cur.f64()?;
        if num_layers == 0 || num_heads == 0 || num_steps == 0 {
            return Err(Error::Format(format!(
                "zero dimension in header: {num_layers} layers, {num_heads} heads, {num_steps} steps"
            )));
        }
        let per_row = num_layers
            .checked_mul(num_heads)
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        let mut steps = Vec::with_capacity(num_steps.min(1 << 16));
        for step_index in 0..num_steps {
            let context_len = cur.u32()? as usize;
            let count = per_row
                .checked_mul(context_len)
                .ok_or_else(|| Error::Format("step dimensions overflow".into()))?;
            let raw = cur.take(count.checked_mul(4).ok_or_else(|| {
                Error::Format("step dimensions overflow".into())
            })?)?;
            let attention = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            steps.push(DecodingStep::new(step_index, "", context_len, attention));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last step",
                bytes.len() - cur.pos
            )));
        }
        Self::new(
            num_layers,
            num_heads,
            steps,
            AudioPrefix {
                start: a0,
                len: n_audio,
            },
            total_duration_s,
        )
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated trace at byte {}", self.bytes.len()))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(b);
        Ok(f64::from_le_bytes(arr))
    }
}

/// Reads and validates a trace file. Token texts are left empty; see
/// [`load_token_texts`].
pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AttentionTrace::from_bytes(&bytes)
}

pub fn write_trace(path: impl AsRef<Path>, trace: &AttentionTrace) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace.to_bytes()).map_err(|e| Error::output(path, e))
}

/// `foo.akvt` -> `foo.<suffix>`, used for the alignment and token sidecars.
pub fn sidecar_path(trace_path: &Path, suffix: &str) -> PathBuf {
    let stem = trace_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    trace_path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn load_token_texts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn write_token_texts(path: impl AsRef<Path>, texts: &[&str]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(texts).expect("strings serialize");
    fs::write(path, json).map_err(|e| Error::output(path, e))
}

/// One aligned word with its time boundaries and alignment confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    #[serde(rename = "word")]
    pub text: String,
    #[serde(rename = "start")]
    pub t_start: f64,
    #[serde(rename = "end")]
    pub t_end: f64,
    #[serde(rename = "score")]
    pub confidence: f64,
}

impl WordAlignment {
    pub fn new(text: impl Into<String>, t_start: f64, t_end: f64, confidence: f64) -> Self {
        Self {
            text: text.into(),
            t_start,
            t_end,
            confidence,
        }
    }
}

// WhisperX omits timing for tokens it could not align (digits, symbols).
#[derive(Deserialize)]
struct RawWord {
    word: String,
    start: Option<f64>,
    end: Option<f64>,
    score: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawAlignment {
    Words(Vec<RawWord>),
    Transcript { word_segments: Vec<RawWord> },
}

/// Parses WhisperX word output: either a bare array of words or a full
/// transcript object carrying `word_segments`. Words without timing or
/// score are dropped since they cannot anchor an audio span.
pub fn parse_alignment(json: &str) -> std::result::Result<Vec<WordAlignment>, String> {
    let raw: RawAlignment = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let words = match raw {
        RawAlignment::Words(w) => w,
        RawAlignment::Transcript { word_segments } => word_segments,
    };
    let mut out = Vec::with_capacity(words.len());
    for w in words {
        let (Some(start), Some(end), Some(score)) = (w.start, w.end, w.score) else {
            continue;
        };
        if !(start.is_finite() && end.is_finite() && score.is_finite()) {
            return Err(format!("word {:?} has non-finite fields", w.word));
        }
        if start < 0.0 || end < start {
            return Err(format!(
                "word {:?} has invalid bounds [{start}, {end}]",
                w.word
            ));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("word {:?} has confidence {score}", w.word));
        }
        out.push(WordAlignment::new(w.word, start, end, score));
    }
    Ok(out)
}

pub fn load_alignment(path: impl AsRef<Path>) -> Result<Vec<WordAlignment>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text).map_err(|m| Error::parse(path, m))
}

pub fn write_alignment(path: impl AsRef<Path>, words: &[WordAlignment]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(words).expect("words serialize");
    fs::write(path, json).map_err(|e| Error::output(path, e))
}

/// Keeps the words whose confidence reaches `tau`, in their original order.
pub fn filter_words(words: &[WordAlignment], tau: f64) -> Vec<WordAlignment> {
    words
        .iter()
        .filter(|w| w.confidence >= tau)
        .cloned()
        .collect()
}

/// Inclusive range of audio token indices covered by one word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioSpan {
    pub start_index: usize,
    pub end_index: usize,
}

impl AudioSpan {
    pub fn contains(&self, index: usize) -> bool {
        (self.start_index..=self.end_index).contains(&index)
    }

    pub fn len(&self) -> usize {
        self.end_index - self.start_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maps word timestamps onto audio token indices assuming audio tokens are
/// spread uniformly over the clip. Both ends are clamped into the prefix.
pub fn word_to_audio_span(word: &WordAlignment, trace: &AttentionTrace) -> Result<AudioSpan> {
    audio_span(word, trace.audio(), trace.total_duration_s())
}

pub fn audio_span(word: &WordAlignment, audio: AudioPrefix, duration_s: f64) -> Result<AudioSpan> {
    if duration_s.is_nan() || duration_s <= 0.0 {
        return Err(Error::DegenerateSpan(format!(
            "total duration {duration_s} s"
        )));
    }
    if audio.len == 0 {
        return Err(Error::DegenerateSpan("trace has no audio tokens".into()));
    }
    let n = audio.len as f64;
    let last = audio.len - 1;
    // t * n / T rather than t / T * n keeps exact products exact.
    let offset = |t: f64| -> usize {
        let raw = (t.max(0.0) * n / duration_s).floor();
        (raw as usize).min(last)
    };
    let start = offset(word.t_start);
    let end = offset(word.t_end).max(start);
    Ok(AudioSpan {
        start_index: audio.start + start,
        end_index: audio.start + end,
    })
}

/// Decoding steps that generated one reference word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSteps {
    pub word_index: usize,
    pub steps: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordStepMap {
    pub entries: Vec<WordSteps>,
}

impl WordStepMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of word-aligned steps.
    pub fn num_steps(&self) -> usize {
        self.entries.iter().map(|e| e.steps.len()).sum()
    }

    pub fn steps_of(&self, word_index: usize) -> Option<&BTreeSet<usize>> {
        self.entries
            .iter()
            .find(|e| e.word_index == word_index)
            .map(|e| &e.steps)
    }
}

fn normalize(text: &str) -> String {
    text.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect()
}

/// Greedy left-to-right alignment of generated tokens to reference words.
///
/// Token texts are concatenated, case-folded and stripped of punctuation,
/// then split on whitespace. A token belongs to the generated word its
/// first character falls in. Each reference word is searched for from the
/// current position onward; a hit advances the position past it and a miss
/// skips the reference word. Matching never backtracks.
pub fn align_generated_to_words(steps: &[DecodingStep], words: &[WordAlignment]) -> WordStepMap {
    let texts: Vec<&str> = steps
        .iter()
        .map(|s| s.generated_token_text.as_str())
        .collect();
    align_texts_to_words(&texts, words)
}

pub fn align_texts_to_words(texts: &[&str], words: &[WordAlignment]) -> WordStepMap {
    // Generated words as (text, owning steps).
    let mut gen_words: Vec<(String, BTreeSet<usize>)> = Vec::new();
    let mut in_word = false;
    for (step, text) in texts.iter().enumerate() {
        let mut claimed = false;
        for c in normalize(text).chars() {
            if c.is_whitespace() {
                in_word = false;
                continue;
            }
            if !in_word {
                gen_words.push((String::new(), BTreeSet::new()));
                in_word = true;
            }
            let current = gen_words.last_mut().expect("pushed above");
            current.0.push(c);
            if !claimed {
                current.1.insert(step);
                claimed = true;
            }
        }
    }

    let mut entries = Vec::new();
    let mut cursor = 0;
    for (word_index, word) in words.iter().enumerate() {
        let target: String = normalize(&word.text)
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        if target.is_empty() {
            continue;
        }
        let Some(offset) = gen_words[cursor..].iter().position(|(t, _)| *t == target) else {
            continue;
        };
        let hit = cursor + offset;
        cursor = hit + 1;
        let steps = &gen_words[hit].1;
        if !steps.is_empty() {
            entries.push(WordSteps {
                word_index,
                steps: steps.clone(),
            });
        }
    }
    WordStepMap { entries }
}
