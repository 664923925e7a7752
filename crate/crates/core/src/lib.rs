//! Trace-driven KV-cache eviction with audio-aware head budgets and
//! spectral score smoothing.
//!
//! The pipeline: load an [`AttentionTrace`] and its word alignment, score
//! how strongly each head tracks the audio of the word being generated,
//! turn the scores into a per-head [`BudgetPlan`], select retained tokens
//! per head (optionally after spectral smoothing of the importance
//! signal), and measure what each policy keeps against future attention.

pub mod allocation;
pub mod cli;
pub mod error;
pub mod eviction;
pub mod fixtures;
pub mod par;
pub mod scoring;
pub mod simulator;
pub mod spectral;
pub mod trace;

pub use allocation::{allocate, AllocationMode, BudgetPlan};
pub use error::{Error, Result};
pub use eviction::{EvictionResult, ObservationWindow};
pub use scoring::{score_heads, HeadScoreMatrix, TopKConfig};
pub use simulator::{run_comparison, KvGeometry, Policy, RetentionReport, SimulationConfig};
pub use spectral::{sss, SssConfig};
pub use trace::{AttentionTrace, AudioSpan, DecodingStep, WordAlignment, WordStepMap};
