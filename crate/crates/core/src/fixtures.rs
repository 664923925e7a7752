//! Deterministic synthetic traces with matching word alignments.
//!
//! A fixture context is laid out as `[sink | audio | prompt | generated]`.
//! Each decoding step emits one sub-word chunk of a pseudo word; word `i`
//! owns a contiguous slice of the audio prefix. Rows are built from a few
//! additive components (background noise, sink, local tail, and
//! profile-specific structure) and normalized to probabilities.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, AudioPrefix, DecodingStep, WordAlignment};

/// Seconds of audio per audio token.
pub const SECONDS_PER_AUDIO_TOKEN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// A few heads track the audio span of the word being generated; the
    /// rest attend to the prompt.
    SpecializedHeads,
    /// Persistent broad plateaus plus narrow transient clusters that only
    /// appear during the first part of decoding.
    SpikePlateau,
    /// Every head shares the same attention rows.
    Uniform,
}

impl Profile {
    pub const ALL: [Profile; 3] = [
        Profile::SpecializedHeads,
        Profile::SpikePlateau,
        Profile::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::SpecializedHeads => "specialized-heads",
            Profile::SpikePlateau => "spike-plateau",
            Profile::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown profile {s:?}, expected one of specialized-heads, spike-plateau, uniform"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub profile: Profile,
    pub seed: u64,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Number of planted audio heads.
    pub audio_heads: usize,
    pub sink_len: usize,
    pub audio_len: usize,
    pub prompt_len: usize,
    pub num_words: usize,
    pub num_steps: usize,
    /// Share of words given a confidence below 0.95.
    pub low_confidence_share: f64,
    /// Steps before this index carry the transient clusters.
    pub transient_steps: usize,
    pub noise: f64,
    pub sink_level: f64,
    pub tail_level: f64,
    pub focus_level: f64,
    pub plateau_jitter: f64,
    pub cluster_len: usize,
    pub cluster_level: f64,
    /// Width of the prompt segment a text head keeps attending to.
    pub text_segment_len: usize,
}

impl FixtureSpec {
    pub fn new(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::SpecializedHeads => Self {
                profile,
                seed,
                num_layers: 4,
                num_heads: 10,
                audio_heads: 4,
                sink_len: 4,
                audio_len: 260,
                prompt_len: 32,
                num_words: 10,
                num_steps: 20,
                low_confidence_share: 0.2,
                transient_steps: 0,
                noise: 0.05,
                sink_level: 2.0,
                tail_level: 2.0,
                focus_level: 4.0,
                plateau_jitter: 0.0,
                cluster_len: 0,
                cluster_level: 0.0,
                text_segment_len: 32,
            },
            Profile::SpikePlateau => Self {
                profile,
                seed,
                num_layers: 4,
                num_heads: 10,
                audio_heads: 10,
                sink_len: 4,
                audio_len: 128,
                prompt_len: 92,
                num_words: 16,
                num_steps: 64,
                low_confidence_share: 0.2,
                transient_steps: 32,
                noise: 0.05,
                sink_level: 2.0,
                tail_level: 2.0,
                focus_level: 0.5,
                plateau_jitter: 0.1,
                cluster_len: 24,
                cluster_level: 1.3,
                text_segment_len: 20,
            },
            Profile::Uniform => Self {
                profile,
                seed,
                num_layers: 4,
                num_heads: 10,
                audio_heads: 0,
                sink_len: 4,
                audio_len: 128,
                prompt_len: 32,
                num_words: 8,
                num_steps: 16,
                low_confidence_share: 0.2,
                transient_steps: 0,
                noise: 0.05,
                sink_level: 2.0,
                tail_level: 2.0,
                focus_level: 0.0,
                plateau_jitter: 0.0,
                cluster_len: 0,
                cluster_level: 0.0,
                text_segment_len: 32,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_layers == 0 || self.num_heads == 0 {
            return bad("fixture needs at least one layer and one head".into());
        }
        if self.audio_heads > self.num_layers * self.num_heads {
            return bad(format!("{} audio heads exceed the head count", self.audio_heads));
        }
        if self.audio_len == 0 || self.num_words == 0 || self.num_words > self.audio_len {
            return bad(format!(
                "{} words cannot tile {} audio tokens",
                self.num_words, self.audio_len
            ));
        }
        if self.num_steps < self.num_words {
            return bad(format!(
                "{} steps cannot emit {} words",
                self.num_steps, self.num_words
            ));
        }
        if !(0.0..=1.0).contains(&self.low_confidence_share) {
            return bad("low-confidence share outside [0, 1]".into());
        }
        Ok(())
    }

    /// Heads with planted audio focus, as flat `layer * heads + head` ids.
    /// They are spread evenly over the flattened head grid.
    pub fn planted_heads(&self) -> Vec<usize> {
        let total = self.num_layers * self.num_heads;
        (0..self.audio_heads)
            .map(|i| i * total / self.audio_heads.max(1) + total / (2 * self.audio_heads.max(1)))
            .collect()
    }
}

/// A generated trace together with its reference words.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub trace: AttentionTrace,
    pub words: Vec<WordAlignment>,
    pub planted_heads: Vec<usize>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "sa", "tu", "vel", "no", "pri", "da", "zor", "el", "mun", "ti",
    "bra", "os",
];

fn pseudo_word(rng: &mut ChaCha8Rng, chunks: usize) -> Vec<String> {
    (0..chunks)
        .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())].to_string())
        .collect()
}

/// Splits `total` into `parts` sizes of at least `min` each, spreading the
/// remainder at random.
fn split_evenly(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut sizes = vec![total / parts; parts];
    for _ in 0..total % parts {
        let i = rng.random_range(0..parts);
        sizes[i] += 1;
    }
    sizes
}

/// Static per-head structure drawn once before the steps are generated.
struct HeadShape {
    audio: bool,
    plateau_start: usize,
    plateau: Vec<f64>,
    cluster_start: usize,
    cluster: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn head_shape(spec: &FixtureSpec, rng: &mut ChaCha8Rng, audio: bool) -> HeadShape {
    let audio_start = spec.sink_len;
    let prompt_start = spec.sink_len + spec.audio_len;
    let (plateau_start, plateau_len) = match (spec.profile, audio) {
        (Profile::SpikePlateau, true) | (Profile::Uniform, _) => (audio_start, spec.audio_len),
        (_, false) => {
            let len = spec.text_segment_len.min(spec.prompt_len);
            let start = prompt_start + rng.random_range(0..=spec.prompt_len - len);
            (start, len)
        }
        (Profile::SpecializedHeads, true) => (audio_start, 0),
    };
    let plateau = (0..plateau_len)
        .map(|_| (1.0 + spec.plateau_jitter * normal(rng)).max(0.05))
        .collect();
    // Only planted heads carry clusters, placed outside their plateau.
    let (region_start, region_len) = if audio {
        (prompt_start, spec.prompt_len)
    } else {
        (audio_start, spec.audio_len)
    };
    let cluster_len = if audio { spec.cluster_len.min(region_len) } else { 0 };
    let cluster_start = region_start + rng.random_range(0..=region_len - cluster_len);
    let cluster = (0..cluster_len)
        .map(|_| spec.cluster_level * (1.0 + 0.1 * normal(rng)).max(0.0))
        .collect();
    HeadShape {
        audio,
        plateau_start,
        plateau,
        cluster_start,
        cluster,
    }
}

fn build_row(
    spec: &FixtureSpec,
    rng: &mut ChaCha8Rng,
    shape: &HeadShape,
    context_len: usize,
    step: usize,
    focus: (usize, usize),
) -> Vec<f32> {
    let mut row: Vec<f64> = (0..context_len)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            spec.noise * e
        })
        .collect();
    for v in &mut row[..spec.sink_len] {
        *v += spec.sink_level;
    }
    for (j, v) in row.iter_mut().rev().take(4).enumerate() {
        *v += spec.tail_level * 0.7f64.powi(j as i32);
    }
    for (i, p) in shape.plateau.iter().enumerate() {
        row[shape.plateau_start + i] += p;
    }
    if shape.audio {
        for v in &mut row[focus.0..=focus.1] {
            *v += spec.focus_level;
        }
    }
    if step < spec.transient_steps {
        for (i, c) in shape.cluster.iter().enumerate() {
            row[shape.cluster_start + i] += c;
        }
    }
    let sum: f64 = row.iter().sum();
    row.iter().map(|v| (v / sum) as f32).collect()
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_heads = spec.num_layers * spec.num_heads;

    // Words: audio slices, chunk counts, texts and confidences.
    let spans = split_evenly(&mut rng, spec.audio_len, spec.num_words);
    let chunk_counts = split_evenly(&mut rng, spec.num_steps - spec.num_words, spec.num_words)
        .into_iter()
        .map(|c| c + 1)
        .collect::<Vec<_>>();
    let low_count = (spec.low_confidence_share * spec.num_words as f64).round() as usize;
    let mut low = vec![false; spec.num_words];
    let mut marked = 0;
    while marked < low_count {
        let i = rng.random_range(0..spec.num_words);
        if !low[i] {
            low[i] = true;
            marked += 1;
        }
    }
    let mut words = Vec::with_capacity(spec.num_words);
    let mut texts: Vec<String> = Vec::with_capacity(spec.num_steps);
    let mut step_focus: Vec<(usize, usize)> = Vec::with_capacity(spec.num_steps);
    let mut offset = 0;
    for w in 0..spec.num_words {
        let chunks = pseudo_word(&mut rng, chunk_counts[w]);
        let (first, last) = (offset, offset + spans[w] - 1);
        offset += spans[w];
        let confidence = if low[w] {
            rng.random_range(0.30..0.90)
        } else {
            rng.random_range(0.96..=1.0)
        };
        let confidence = (confidence * 1000.0f64).round() / 1000.0;
        // Half-token offsets keep the time-to-index mapping away from
        // rounding boundaries.
        words.push(WordAlignment::new(
            chunks.concat(),
            (first as f64 + 0.5) * SECONDS_PER_AUDIO_TOKEN,
            (last as f64 + 0.5) * SECONDS_PER_AUDIO_TOKEN,
            confidence,
        ));
        for (i, chunk) in chunks.into_iter().enumerate() {
            texts.push(if i == 0 { format!(" {chunk}") } else { chunk });
            step_focus.push((spec.sink_len + first, spec.sink_len + last));
        }
    }

    let planted = if spec.profile == Profile::Uniform {
        Vec::new()
    } else {
        spec.planted_heads()
    };
    let shapes: Vec<HeadShape> = (0..total_heads)
        .map(|id| head_shape(spec, &mut rng, planted.contains(&id)))
        .collect();

    let base_ctx = spec.sink_len + spec.audio_len + spec.prompt_len + 1;
    let mut steps = Vec::with_capacity(spec.num_steps);
    for (t, focus) in step_focus.iter().enumerate() {
        let ctx = base_ctx + t;
        let attention: Vec<f32> = if spec.profile == Profile::Uniform {
            let row = build_row(spec, &mut rng, &shapes[0], ctx, t, *focus);
            (0..total_heads).flat_map(|_| row.iter().copied()).collect()
        } else {
            shapes
                .iter()
                .flat_map(|shape| build_row(spec, &mut rng, shape, ctx, t, *focus))
                .collect()
        };
        steps.push(DecodingStep::new(t, texts[t].clone(), ctx, attention));
    }
    let trace = AttentionTrace::new(
        spec.num_layers,
        spec.num_heads,
        steps,
        AudioPrefix {
            start: spec.sink_len,
            len: spec.audio_len,
        },
        spec.audio_len as f64 * SECONDS_PER_AUDIO_TOKEN,
    )?;
    Ok(Fixture {
        trace,
        words,
        planted_heads: planted,
    })
}
