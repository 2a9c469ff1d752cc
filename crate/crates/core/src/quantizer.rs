//! Quantization: additive-noise training proxy, mean-shifted rounding and
//! integer symbolization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DcicError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// `v + u`, `u ~ U(-0.5, 0.5)`; training only.
    Noise,
    /// `round(v - mu) + mu`.
    Round,
    /// `round(v - mu)` as integers.
    Symbols,
}

/// Output of [`quantize`]: reals for `Noise`/`Round`, integers for `Symbols`.
#[derive(Clone, Debug, PartialEq)]
pub enum Quantized {
    Real(Vec<f64>),
    Symbols(Vec<i32>),
}

/// Round half away from zero (`f64::round` semantics).
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// `mu` may hold one value per element or a single broadcast value (or be
/// empty for a zero mean).
fn mean_at(mu: &[f64], i: usize) -> f64 {
    match mu.len() {
        0 => 0.0,
        1 => mu[0],
        _ => mu[i],
    }
}

fn check_mean(v: usize, mu: usize) -> Result<()> {
    if mu > 1 && mu != v {
        return Err(DcicError::Shape(format!("mean of {mu} elements does not broadcast to {v}")));
    }
    Ok(())
}

pub fn quantize(v: &[f64], mu: &[f64], mode: QuantMode, seed: Option<u64>) -> Result<Quantized> {
    check_mean(v.len(), mu.len())?;
    Ok(match mode {
        QuantMode::Noise => {
            let seed = seed.ok_or_else(|| DcicError::Precondition("noise quantization needs a seed".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Quantized::Real(add_noise(v, &mut rng))
        }
        QuantMode::Round => {
            Quantized::Real(v.iter().enumerate().map(|(i, &x)| round_to_mean(x, mean_at(mu, i))).collect())
        }
        QuantMode::Symbols => Quantized::Symbols(symbols(v, mu)?),
    })
}

/// `v + U(-0.5, 0.5)` drawn from `rng`.
pub fn add_noise(v: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    v.iter().map(|&x| x + rng.gen_range(-0.5..0.5)).collect()
}

#[inline]
pub fn round_to_mean(v: f64, mu: f64) -> f64 {
    round_half_away(v - mu) + mu
}

/// `round(v - mu)`; values whose symbols overflow `i32` are rejected.
pub fn symbols(v: &[f64], mu: &[f64]) -> Result<Vec<i32>> {
    check_mean(v.len(), mu.len())?;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = round_half_away(x - mean_at(mu, i));
            if s.is_finite() && s.abs() <= i32::MAX as f64 {
                Ok(s as i32)
            } else {
                Err(DcicError::Encode(format!("value {x} cannot be symbolized")))
            }
        })
        .collect()
}

pub fn dequantize(symbols: &[i32], mu: &[f64]) -> Result<Vec<f64>> {
    check_mean(symbols.len(), mu.len())?;
    Ok(symbols.iter().enumerate().map(|(i, &s)| s as f64 + mean_at(mu, i)).collect())
}
