//! Command-line front end.
//!
//! Settings resolve as command-line flag, then `--config` JSON file, then
//! built-in default. Exit status is 0 on success, 2 for bad input or usage
//! and 1 for failures inside the pipeline.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, resolve_base, AllocationMode};
use crate::error::{Error, Result};
use crate::eviction::DEFAULT_OBSERVATION_WIDTH;
use crate::fixtures::{generate, FixtureSpec, Profile};
use crate::scoring::{score_heads, HeadScoreMatrix, TopKConfig, DEFAULT_TOP_K};
use crate::simulator::{
    memory_footprint, oracle_overlap, retained_mass, coverage_entropy, run_comparison,
    run_policy, write_reports, EvictionPoint, Policy, SimulationConfig,
};
use crate::spectral::{sss, SssConfig, Transition};
use crate::trace::{
    align_generated_to_words, filter_words, load_alignment, load_token_texts, load_trace,
    sidecar_path, write_alignment, write_token_texts, write_trace, AttentionTrace,
    WordAlignment,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const ALIGNMENT_SUFFIX: &str = "alignment.json";
pub const TOKENS_SUFFIX: &str = "tokens.json";

/// Resolved settings shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trace_path: Option<PathBuf>,
    pub alignment_path: Option<PathBuf>,
    pub scores_path: Option<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub tau: f64,
    pub top_k: usize,
    pub window: usize,
    pub base_fraction: f64,
    pub cutoff_ratio: f64,
    pub mix_alpha: f64,
    pub retention_ratios: Vec<f64>,
    pub seed: u64,
    pub allocation: String,
    pub observation_width: usize,
    pub pool_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            trace_path: None,
            alignment_path: None,
            scores_path: None,
            output_path: None,
            tau: 0.95,
            top_k: DEFAULT_TOP_K,
            window: crate::allocation::DEFAULT_WINDOW,
            base_fraction: crate::allocation::DEFAULT_BASE_FRACTION,
            cutoff_ratio: 0.7,
            mix_alpha: 0.5,
            retention_ratios: vec![0.4, 0.6, 0.8],
            seed: 0,
            allocation: "combined".into(),
            observation_width: DEFAULT_OBSERVATION_WIDTH,
            pool_width: crate::eviction::DEFAULT_POOL_WIDTH,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.top_k == 0 {
            return bad("top-k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.base_fraction) {
            return bad(format!("base fraction {} outside [0, 1]", self.base_fraction));
        }
        self.sss().validate()?;
        if self.retention_ratios.is_empty() {
            return bad("no retention ratios given".into());
        }
        if let Some(r) = self.retention_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("retention ratio {r} outside (0, 1]"));
        }
        self.allocation_mode()?;
        Ok(())
    }

    pub fn sss(&self) -> SssConfig {
        SssConfig::new(self.cutoff_ratio, self.mix_alpha)
    }

    pub fn allocation_mode(&self) -> Result<AllocationMode> {
        self.allocation.parse()
    }

    pub fn simulation(&self) -> Result<SimulationConfig> {
        Ok(SimulationConfig {
            observation_width: self.observation_width,
            window: self.window,
            base_fraction: self.base_fraction,
            pool_width: self.pool_width,
            allocation: self.allocation_mode()?,
            sss: self.sss(),
            ..SimulationConfig::default()
        })
    }

    fn trace_path(&self) -> Result<&Path> {
        self.trace_path
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--trace is required".into()))
    }

    fn output_path(&self) -> Result<&Path> {
        self.output_path
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--output is required".into()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "audiokv", version, about = "Audio-aware KV-cache eviction on attention traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic trace with its alignment and token sidecars.
    GenFixture {
        #[arg(long, default_value = "specialized-heads")]
        profile: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score every head by how often its top-K lands on the current word's audio.
    ScoreHeads(CommonArgs),
    /// Spectrally smooth every column of a CSV file.
    Smooth {
        /// Input CSV, one signal per column.
        #[arg(long)]
        input: PathBuf,
        /// Roll-off width in bins; 0 gives a hard cutoff.
        #[arg(long)]
        transition: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Turn head scores into a per-head budget plan.
    Allocate {
        /// Context length the retention ratio applies to.
        #[arg(long)]
        context_len: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one policy at the first retention ratio and save what it keeps.
    Simulate {
        #[arg(long, default_value = "AudioKV")]
        policy: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the four-way ablation across retention ratios and write a CSV report.
    Compare {
        /// Also write the reports as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON file with run settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub alignment: Option<PathBuf>,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub base_fraction: Option<f64>,
    #[arg(long)]
    pub cutoff_ratio: Option<f64>,
    #[arg(long)]
    pub mix_alpha: Option<f64>,
    /// Comma-separated ratios in (0, 1].
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub retention_ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// combined, proportional-floor, uniform or pyramid.
    #[arg(long)]
    pub allocation: Option<String>,
    #[arg(long)]
    pub observation_width: Option<usize>,
    #[arg(long)]
    pub pool_width: Option<usize>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { cfg.$target = v.clone().into(); })*
            };
        }
        take!(
            trace => trace_path,
            alignment => alignment_path,
            scores => scores_path,
            output => output_path,
            tau => tau,
            top_k => top_k,
            window => window,
            base_fraction => base_fraction,
            cutoff_ratio => cutoff_ratio,
            mix_alpha => mix_alpha,
            retention_ratios => retention_ratios,
            seed => seed,
            allocation => allocation,
            observation_width => observation_width,
            pool_width => pool_width,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    crate::par::init_from_env();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenFixture { profile, common } => cmd_gen_fixture(&profile, &common.resolve()?),
        Command::ScoreHeads(common) => cmd_score_heads(&common.resolve()?),
        Command::Smooth {
            input,
            transition,
            common,
        } => cmd_smooth(&input, transition, &common.resolve()?),
        Command::Allocate {
            context_len,
            common,
        } => cmd_allocate(context_len, &common.resolve()?),
        Command::Simulate { policy, common } => cmd_simulate(&policy, &common.resolve()?),
        Command::Compare { json, common } => cmd_compare(json.as_deref(), &common.resolve()?),
    }
}

pub fn cmd_gen_fixture(profile: &str, cfg: &RunConfig) -> Result<()> {
    let profile: Profile = profile.parse()?;
    let out = cfg.output_path()?;
    let fixture = generate(&FixtureSpec::new(profile, cfg.seed))?;
    write_trace(out, &fixture.trace)?;
    write_alignment(sidecar_path(out, ALIGNMENT_SUFFIX), &fixture.words)?;
    write_token_texts(sidecar_path(out, TOKENS_SUFFIX), &fixture.trace.token_texts())?;
    println!(
        "wrote {} ({profile}, seed {}, {} steps)",
        out.display(),
        cfg.seed,
        fixture.trace.num_steps()
    );
    Ok(())
}

/// Loads a trace and attaches token texts from its sidecar.
pub fn load_trace_with_texts(path: &Path) -> Result<AttentionTrace> {
    let trace = load_trace(path)?;
    let tokens = sidecar_path(path, TOKENS_SUFFIX);
    let texts = load_token_texts(&tokens)?;
    trace
        .with_token_texts(texts)
        .map_err(|e| Error::parse(&tokens, e))
}

fn load_words(cfg: &RunConfig, trace_path: &Path) -> Result<Vec<WordAlignment>> {
    let path = cfg
        .alignment_path
        .clone()
        .unwrap_or_else(|| sidecar_path(trace_path, ALIGNMENT_SUFFIX));
    load_alignment(path)
}

fn compute_scores(cfg: &RunConfig, trace_path: &Path, trace: &AttentionTrace) -> Result<HeadScoreMatrix> {
    let words = filter_words(&load_words(cfg, trace_path)?, cfg.tau);
    let map = align_generated_to_words(trace.steps(), &words);
    score_heads(trace, &words, &map, TopKConfig { k: cfg.top_k })
}

pub fn cmd_score_heads(cfg: &RunConfig) -> Result<()> {
    let trace_path = cfg.trace_path()?;
    let out = cfg.output_path()?;
    let trace = load_trace_with_texts(trace_path)?;
    let scores = compute_scores(cfg, trace_path, &trace)?;
    scores.save(out)?;
    for layer in 0..scores.num_layers() {
        let row: Vec<f64> = (0..scores.num_heads()).map(|h| scores.get(layer, h)).collect();
        let (best, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (h, &s)| if s > acc.1 { (h, s) } else { acc });
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        println!("layer {layer}: mean {mean:.4}, max {max:.4} (head {best})");
    }
    println!("{} aligned steps -> {}", scores.num_samples, out.display());
    Ok(())
}

fn read_columns(path: &Path) -> Result<(Option<csv::StringRecord>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, format!("{other:?}")),
        })?;
    let mut header = None;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if line == 0 => {
                header = Some(record);
                continue;
            }
            Err(e) => return Err(Error::parse(path, format!("line {}: {e}", line + 1))),
        };
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::parse(path, format!("line {}: non-finite value {v}", line + 1)));
        }
        if columns.is_empty() {
            columns = vec![Vec::new(); values.len()];
        }
        for (col, v) in columns.iter_mut().zip(values) {
            col.push(v);
        }
    }
    Ok((header, columns))
}

pub fn cmd_smooth(input: &Path, transition: Option<usize>, cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_path()?;
    let (header, columns) = read_columns(input)?;
    let mut sss_cfg = cfg.sss();
    if let Some(bins) = transition {
        sss_cfg.transition = Transition::Bins(bins);
    }
    let smoothed: Vec<Vec<f64>> = crate::par::map_slice(&columns, |c| sss(c, &sss_cfg));
    let mut writer = csv::Writer::from_path(out).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::output(out, io),
        other => Error::parse(out, format!("{other:?}")),
    })?;
    let write_err = |e: csv::Error| Error::parse(out, e);
    if let Some(h) = header {
        writer.write_record(&h).map_err(write_err)?;
    }
    let rows = smoothed.first().map_or(0, Vec::len);
    for i in 0..rows {
        writer
            .write_record(smoothed.iter().map(|c| c[i].to_string()))
            .map_err(write_err)?;
    }
    writer.flush().map_err(|e| Error::output(out, e))?;
    println!("smoothed {} column(s) of {rows} value(s) -> {}", smoothed.len(), out.display());
    Ok(())
}

fn load_or_score(cfg: &RunConfig, trace_path: &Path, trace: &AttentionTrace) -> Result<HeadScoreMatrix> {
    match &cfg.scores_path {
        Some(path) => HeadScoreMatrix::load(path),
        None => compute_scores(cfg, trace_path, trace),
    }
}

pub fn cmd_allocate(context_len: usize, cfg: &RunConfig) -> Result<()> {
    let scores_path = cfg
        .scores_path
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--scores is required".into()))?;
    let out = cfg.output_path()?;
    let scores = HeadScoreMatrix::load(scores_path)?;
    let ratio = cfg.retention_ratios[0];
    let heads = scores.num_layers() * scores.num_heads();
    let budget = (ratio * (heads * context_len) as f64 + 1e-9).floor() as usize;
    let base = resolve_base(cfg.base_fraction, budget, heads);
    let plan = allocate(&scores, budget, cfg.window, base, cfg.allocation_mode()?)?
        .clipped(context_len, scores.as_slice());
    plan.save(out)?;
    println!(
        "budget {budget} over {heads} heads ({} mode) -> {}",
        plan.mode,
        out.display()
    );
    Ok(())
}

pub fn cmd_simulate(policy: &str, cfg: &RunConfig) -> Result<()> {
    let policy: Policy = policy.parse()?;
    let trace_path = cfg.trace_path()?;
    let out = cfg.output_path()?;
    let trace = load_trace_with_texts(trace_path)?;
    let scores = load_or_score(cfg, trace_path, &trace)?;
    let sim = cfg.simulation()?;
    let point = EvictionPoint::new(&trace, &sim)?;
    let ratio = cfg.retention_ratios[0];
    let result = run_policy(policy, &point, &scores, ratio, &sim)?;
    result.save(out)?;
    println!(
        "{} at ratio {ratio}: overlap {:.4}, mass {:.4}, entropy {:.4}, {} bytes -> {}",
        policy.name(),
        oracle_overlap(&result, &trace, point.horizon)?,
        retained_mass(&result, &point.future)?,
        coverage_entropy(&result, sim.entropy_bins)?,
        memory_footprint(&result, &sim.geometry),
        out.display()
    );
    Ok(())
}

pub fn cmd_compare(json: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let trace_path = cfg.trace_path()?;
    let out = cfg.output_path()?;
    let trace = load_trace_with_texts(trace_path)?;
    let scores = load_or_score(cfg, trace_path, &trace)?;
    let sim = cfg.simulation()?;
    let reports = run_comparison(&trace, &scores, &Policy::ABLATION, &cfg.retention_ratios, &sim)?;
    write_reports(&reports, out, json)?;
    for r in &reports {
        println!(
            "{:<14} {:.2}  overlap {:.4}  mass {:.4}  entropy {:.4}",
            r.policy, r.retention_ratio, r.oracle_overlap, r.mass_retained, r.coverage_entropy
        );
    }
    Ok(())
}
