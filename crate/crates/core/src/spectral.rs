//! Spectral score smoothing.
//!
//! A per-head importance signal is moved to the frequency domain with a
//! real-input DFT, the smallest prefix of bins holding a configurable share
//! of the spectral energy is kept (with an optional raised-cosine roll-off
//! past the cutoff), the result is transformed back, and finally blended
//! with the raw signal.
//!
//! Conventions: the forward transform is unnormalized and the inverse is
//! scaled by `1/L`, so `irfft(rfft(x), x.len()) == x`.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::par;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let fft = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        fft.process(buf);
    });
}

/// Non-redundant half of the DFT of a real signal: `len / 2 + 1` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub original_length: usize,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Per-bin energy `|X_k|^2`.
    pub fn energies(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.norm_sqr()).collect()
    }
}

pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

pub fn rfft(signal: &[f64]) -> Spectrum {
    let n = signal.len();
    if n == 0 {
        return Spectrum {
            bins: Vec::new(),
            original_length: 0,
        };
    }
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf.truncate(half_len(n));
    // Exact zeros where the symmetry of a real input demands them.
    buf[0].im = 0.0;
    if n.is_multiple_of(2) {
        buf[n / 2].im = 0.0;
    }
    Spectrum {
        bins: buf,
        original_length: n,
    }
}

pub fn irfft(spectrum: &Spectrum, n: usize) -> Result<Vec<f64>> {
    if n != spectrum.original_length {
        return Err(Error::LengthMismatch {
            expected: spectrum.original_length,
            requested: n,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = half_len(n);
    if spectrum.bins.len() != half {
        return Err(Error::DimensionMismatch(format!(
            "{} bins for a length-{n} signal, expected {half}",
            spectrum.bins.len()
        )));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..half].copy_from_slice(&spectrum.bins);
    for (k, slot) in full.iter_mut().enumerate().skip(half) {
        *slot = spectrum.bins[n - k].conj();
    }
    fft_in_place(&mut full, true);
    let scale = 1.0 / n as f64;
    Ok(full.iter().map(|c| c.re * scale).collect())
}

/// Smallest bin index `k` such that bins `0..=k` hold at least
/// `cutoff_ratio` of the total energy. A ratio of 1 or an all-zero spectrum
/// keeps every bin.
pub fn energy_cutoff(spectrum: &Spectrum, cutoff_ratio: f64) -> usize {
    let last = spectrum.len().saturating_sub(1);
    if cutoff_ratio >= 1.0 {
        return last;
    }
    let cumulative: Vec<f64> = spectrum
        .bins
        .iter()
        .scan(0.0, |acc, b| {
            *acc += b.norm_sqr();
            Some(*acc)
        })
        .collect();
    let total = cumulative.last().copied().unwrap_or(0.0);
    if total <= 0.0 {
        return last;
    }
    let target = total * cutoff_ratio;
    cumulative.iter().position(|&c| c >= target).unwrap_or(last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMask {
    pub weights: Vec<f64>,
    pub cutoff_index: usize,
}

/// Keeps bins `0..=cutoff_index`, rolls off over the next `transition_bins`
/// bins with a half cosine, and zeroes the rest.
pub fn build_mask(cutoff_index: usize, len: usize, transition_bins: usize) -> SpectralMask {
    let cutoff_index = cutoff_index.min(len.saturating_sub(1));
    let weights = (0..len)
        .map(|i| {
            if i <= cutoff_index {
                1.0
            } else if i - cutoff_index <= transition_bins {
                let phase = (i - cutoff_index) as f64 / transition_bins as f64;
                0.5 * (1.0 + (PI * phase).cos())
            } else {
                0.0
            }
        })
        .collect();
    SpectralMask {
        weights,
        cutoff_index,
    }
}

/// Width of the cosine roll-off band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    /// `max(2, ceil(0.05 * bins))`.
    Auto,
    /// Fixed width; 0 gives a hard cutoff.
    Bins(usize),
}

impl Transition {
    pub fn resolve(self, num_bins: usize) -> usize {
        match self {
            Transition::Auto => default_transition_bins(num_bins),
            Transition::Bins(b) => b,
        }
    }
}

pub fn default_transition_bins(num_bins: usize) -> usize {
    ((0.05 * num_bins as f64).ceil() as usize).max(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SssConfig {
    /// Share of spectral energy kept by the low-pass cutoff, in (0, 1].
    pub cutoff_ratio: f64,
    /// Weight of the smoothed signal in the final blend, in [0, 1].
    pub mix_alpha: f64,
    pub transition: Transition,
}

impl Default for SssConfig {
    fn default() -> Self {
        Self {
            cutoff_ratio: 0.7,
            mix_alpha: 0.5,
            transition: Transition::Auto,
        }
    }
}

impl SssConfig {
    pub fn new(cutoff_ratio: f64, mix_alpha: f64) -> Self {
        Self {
            cutoff_ratio,
            mix_alpha,
            ..Self::default()
        }
    }

    /// Brick-wall variant without a roll-off band.
    pub fn hard(cutoff_ratio: f64, mix_alpha: f64) -> Self {
        Self {
            cutoff_ratio,
            mix_alpha,
            transition: Transition::Bins(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_ratio > 0.0 && self.cutoff_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cutoff ratio {} outside (0, 1]",
                self.cutoff_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_alpha) {
            return Err(Error::InvalidConfig(format!(
                "mixing ratio {} outside [0, 1]",
                self.mix_alpha
            )));
        }
        Ok(())
    }
}

/// Low-pass filters `signal` and blends it with the original:
/// `(1 - alpha) * x + alpha * irfft(rfft(x) * mask)`.
pub fn sss(signal: &[f64], config: &SssConfig) -> Vec<f64> {
    let n = signal.len();
    if n <= 1 || config.mix_alpha == 0.0 {
        return signal.to_vec();
    }
    let mut spectrum = rfft(signal);
    let cutoff = energy_cutoff(&spectrum, config.cutoff_ratio);
    let mask = build_mask(cutoff, spectrum.len(), config.transition.resolve(spectrum.len()));
    for (bin, w) in spectrum.bins.iter_mut().zip(&mask.weights) {
        *bin *= *w;
    }
    let smoothed = irfft(&spectrum, n).expect("spectrum built from this signal");
    let alpha = config.mix_alpha;
    signal
        .iter()
        .zip(&smoothed)
        .map(|(&x, &s)| (1.0 - alpha) * x + alpha * s)
        .collect()
}

/// Applies [`sss`] to every row independently.
pub fn sss_rows(rows: &[Vec<f64>], config: &SssConfig) -> Vec<Vec<f64>> {
    par::map_slice(rows, |row| sss(row, config))
}
