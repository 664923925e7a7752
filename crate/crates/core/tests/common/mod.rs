#![allow(dead_code)]

use audiokv::fixtures::Fixture;
use audiokv::scoring::{score_heads, HeadScoreMatrix, TopKConfig};
use audiokv::trace::{align_generated_to_words, filter_words};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

/// Direct O(L^2) DFT of a real signal, first `L/2 + 1` bins.
pub fn naive_rfft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n / 2 + 1)
        .map(|k| {
            x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, &v)| {
                let angle = -2.0 * PI * (k * t % n) as f64 / n as f64;
                acc + Complex64::from_polar(v, angle)
            })
        })
        .collect()
}

/// Direct inverse of a half spectrum back to `n` real samples.
pub fn naive_irfft(bins: &[Complex64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for k in 0..n {
                let b = if k < bins.len() { bins[k] } else { bins[n - k].conj() };
                let angle = 2.0 * PI * (k * t % n) as f64 / n as f64;
                acc += (b * Complex64::from_polar(1.0, angle)).re;
            }
            acc / n as f64
        })
        .collect()
}

/// Smoothing pipeline rebuilt on the direct transforms.
pub fn oracle_sss(x: &[f64], ratio: f64, alpha: f64, transition: Option<usize>) -> Vec<f64> {
    let n = x.len();
    if n <= 1 || alpha == 0.0 {
        return x.to_vec();
    }
    let mut bins = naive_rfft(x);
    let energies: Vec<f64> = bins.iter().map(|b| b.norm_sqr()).collect();
    let total: f64 = energies.iter().sum();
    let last = bins.len() - 1;
    let cutoff = if ratio >= 1.0 || total <= 0.0 {
        last
    } else {
        let mut acc = 0.0;
        let mut k = last;
        for (i, e) in energies.iter().enumerate() {
            acc += e;
            if acc >= ratio * total {
                k = i;
                break;
            }
        }
        k
    };
    let width = transition.unwrap_or_else(|| ((0.05 * bins.len() as f64).ceil() as usize).max(2));
    for (i, b) in bins.iter_mut().enumerate() {
        let weight = if i <= cutoff {
            1.0
        } else if i - cutoff <= width {
            0.5 * (1.0 + (PI * (i - cutoff) as f64 / width as f64).cos())
        } else {
            0.0
        };
        *b *= weight;
    }
    let smooth = naive_irfft(&bins, n);
    x.iter()
        .zip(&smooth)
        .map(|(&a, &s)| (1.0 - alpha) * a + alpha * s)
        .collect()
}

pub fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_scores(fixture: &Fixture, tau: f64, k: usize) -> HeadScoreMatrix {
    let words = filter_words(&fixture.words, tau);
    let map = align_generated_to_words(fixture.trace.steps(), &words);
    score_heads(&fixture.trace, &words, &map, TopKConfig { k }).expect("fixture scores")
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}
