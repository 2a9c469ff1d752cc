//! Probability models for the four latents: the discretized conditional
//! Gaussian, the learned factorized density for hyper-latents, rate
//! estimation and integer CDF tables for the coder.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{DcicError, Result};
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::real::{normal_cdf, Real};
use crate::tensor::Tensor;
use crate::transforms::{Builder, SIGMA_MIN};

/// Lower clamp on every likelihood.
pub const P_FLOOR: f64 = 1.0 / 32768.0;
/// Coder precision in bits.
pub const PRECISION: u32 = 16;
/// Largest symbol magnitude a table may cover.
pub const MAX_RANGE: u16 = 1 << 14;
/// Granularity at which scales are rounded before building tables.
pub const SCALE_STEPS: f64 = 256.0;

/// Per-element `(mu, sigma)` of a conditional Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor<f64>,
    pub sigma: Tensor<f64>,
}

impl GaussianParams {
    pub fn new(mu: Tensor<f64>, sigma: Tensor<f64>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(DcicError::Shape(format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape())));
        }
        if let Some(s) = sigma.data().iter().find(|&&s| !(s >= SIGMA_MIN) || !s.is_finite()) {
            return Err(DcicError::Precondition(format!("sigma {s} below the minimum {SIGMA_MIN}")));
        }
        if !mu.all_finite() {
            return Err(DcicError::Precondition("non-finite mean".into()));
        }
        Ok(GaussianParams { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Unfloored mass of the unit interval around `v` under `N(mu, sigma^2)`.
///
/// Evaluated on the side where both CDF arguments are non-positive so the
/// difference keeps relative precision in the tails.
pub fn gaussian_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    let d = (v - mu).abs();
    normal_cdf((0.5 - d) / sigma) - normal_cdf((-0.5 - d) / sigma)
}

/// Floored discretized Gaussian likelihood of each `v_hat`.
pub fn gaussian_likelihood(v_hat: &[f64], params: &GaussianParams) -> Result<Vec<f64>> {
    if v_hat.len() != params.len() {
        return Err(DcicError::Shape(format!("{} values vs {} Gaussian parameters", v_hat.len(), params.len())));
    }
    Ok(v_hat
        .iter()
        .zip(params.mu.data().iter().zip(params.sigma.data()))
        .map(|(&v, (&m, &s))| gaussian_mass(v, m, s).max(P_FLOOR))
        .collect())
}

/// Differentiable discretized Gaussian likelihood with the floor applied.
pub fn gaussian_likelihood_var<T: Real>(tape: &mut Tape<T>, v: Var, mu: Var, sigma: Var) -> Var {
    let diff = tape.sub(v, mu);
    let d = tape.abs(diff);
    let neg = tape.scale(d, -1.0);
    let hi = tape.offset(neg, 0.5);
    let lo = tape.offset(neg, -0.5);
    let hi = tape.div(hi, sigma);
    let lo = tape.div(lo, sigma);
    let chi = tape.normal_cdf(hi);
    let clo = tape.normal_cdf(lo);
    let p = tape.sub(chi, clo);
    tape.lower_bound(p, P_FLOOR)
}

/// Total information content `sum(-log2 p)` in bits.
pub fn rate_bits(p: &[f64]) -> f64 {
    p.iter().map(|&v| -v.log2()).sum()
}

/// Differentiable `sum(-log2 p)`.
pub fn rate_bits_var<T: Real>(tape: &mut Tape<T>, p: Var) -> Var {
    let l = tape.log(p);
    let s = tape.sum(l);
    tape.scale(s, -std::f64::consts::LOG2_E)
}

const DENSITY_FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
/// Overall scale of the density at initialization.
pub const DENSITY_INIT_SCALE: f64 = 2.0;

/// Per-channel learned monotone CDF: a chain of `K = 4` small dense layers
/// with softplus-positive matrices and tanh gates.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

impl FactorizedDensity {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, channels: usize) -> Self {
        let mut rng = bld.rng(group, "density");
        let layers = DENSITY_FILTERS.len() - 1;
        let scale = DENSITY_INIT_SCALE.powf(1.0 / layers as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..layers {
            let (fin, fout) = (DENSITY_FILTERS[i], DENSITY_FILTERS[i + 1]);
            let init = crate::autograd::softplus_inv(1.0 / scale / fout as f64);
            matrices.push(bld.add(group, &format!("matrix{i}"), Tensor::full(&[channels, fout, fin], T::lit(init))));
            biases.push(bld.add(group, &format!("bias{i}"), uniform(&mut rng, &[channels, fout], 0.5)));
            if i + 1 < layers {
                factors.push(bld.add(group, &format!("factor{i}"), Tensor::zeros(&[channels, fout])));
            }
        }
        FactorizedDensity { channels, matrices, biases, factors }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// CDF logits for `x: [C, 1, M]`, returned with the same shape.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for i in 0..self.matrices.len() {
            let m = tape.softplus(p[self.matrices[i]]);
            h = tape.batch_matmul(m, h);
            h = tape.add_group(h, p[self.biases[i]]);
            if i < self.factors.len() {
                let f = tape.tanh(p[self.factors[i]]);
                let t = tape.tanh(h);
                let g = tape.mul_group(t, f);
                h = tape.add(h, g);
            }
        }
        h
    }

    /// Floored likelihood of `z: (C, H, W)` (any rank with leading `C`).
    pub fn likelihood_var<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        let shape = tape.shape(z).to_vec();
        assert_eq!(shape[0], self.channels, "density channel count");
        let m = tape.value(z).len() / self.channels;
        let flat = tape.reshape(z, &[self.channels, 1, m]);
        let lo_in = tape.offset(flat, -0.5);
        let hi_in = tape.offset(flat, 0.5);
        let lower = self.logits(tape, p, lo_in);
        let upper = self.logits(tape, p, hi_in);
        // Evaluate on the side where both logits are negative.
        let sign: Vec<T> = tape
            .value(lower)
            .data()
            .iter()
            .zip(tape.value(upper).data())
            .map(|(&l, &u)| {
                if l + u > T::zero() {
                    -T::one()
                } else {
                    T::one()
                }
            })
            .collect();
        let sign = tape.constant(Tensor::new(&[self.channels, 1, m], sign).expect("sign shape"));
        let su = tape.mul(upper, sign);
        let sl = tape.mul(lower, sign);
        let cu = tape.sigmoid(su);
        let cl = tape.sigmoid(sl);
        let diff = tape.sub(cu, cl);
        let pr = tape.abs(diff);
        let pr = tape.lower_bound(pr, P_FLOOR);
        tape.reshape(pr, &shape)
    }

    /// CDF value of channel `c` at each point of `t`.
    pub fn cdf<T: Real>(&self, store: &ParamStore<T>, c: usize, t: &[f64]) -> Vec<f64> {
        let mut tape = Tape::<T>::inference();
        let p = store.bind(&mut tape);
        let mut all = vec![0.0; self.channels * t.len()];
        all[c * t.len()..(c + 1) * t.len()].copy_from_slice(t);
        let x = tape.constant(Tensor::new(&[self.channels, 1, t.len()], all.iter().map(|&v| T::lit(v)).collect()).unwrap());
        let l = self.logits(&mut tape, &p, x);
        tape.value(l).data()[c * t.len()..(c + 1) * t.len()].iter().map(|&v| sigmoid(v.as_f64())).collect()
    }

    /// Unfloored mass of every integer in `[-range, range]` for each channel,
    /// channel-major.
    pub fn integer_pmf<T: Real>(&self, store: &ParamStore<T>, range: usize) -> Vec<Vec<f64>> {
        let k = 2 * range + 1;
        let mut tape = Tape::<T>::inference();
        let p = store.bind(&mut tape);
        let mut lo = Vec::with_capacity(self.channels * k);
        for _ in 0..self.channels {
            lo.extend((0..k).map(|i| T::lit(i as f64 - range as f64 - 0.5)));
        }
        let hi: Vec<T> = lo.iter().map(|&v| v + T::one()).collect();
        let lo = tape.constant(Tensor::new(&[self.channels, 1, k], lo).unwrap());
        let hi = tape.constant(Tensor::new(&[self.channels, 1, k], hi).unwrap());
        let ll = self.logits(&mut tape, &p, lo);
        let lu = self.logits(&mut tape, &p, hi);
        let (lv, uv) = (tape.value(ll).data(), tape.value(lu).data());
        (0..self.channels)
            .map(|c| {
                (0..k)
                    .map(|i| {
                        let (l, u) = (lv[c * k + i].as_f64(), uv[c * k + i].as_f64());
                        let s = if l + u > 0.0 { -1.0 } else { 1.0 };
                        (sigmoid(s * u) - sigmoid(s * l)).abs()
                    })
                    .collect()
            })
            .collect()
    }

    /// Floored likelihood of a hyper-latent `(C, H, W)`.
    pub fn likelihood<T: Real>(&self, store: &ParamStore<T>, z: &Tensor<f64>) -> Result<Vec<f64>> {
        if z.shape().first() != Some(&self.channels) {
            return Err(DcicError::Shape(format!("density has {} channels, input {:?}", self.channels, z.shape())));
        }
        let mut tape = Tape::<T>::inference();
        let p = store.bind(&mut tape);
        let zv = tape.constant(z.cast());
        let l = self.likelihood_var(&mut tape, &p, zv);
        Ok(tape.value(l).to_f64_vec())
    }
}

/// Integer cumulative table over `[-range, range]` plus a trailing escape
/// slot. Slot `i` covers `[cdf[i], cdf[i + 1])`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    range: u16,
    precision: u32,
}

impl CdfTable {
    /// Quantizes slot masses (the escape slot last) onto `2^precision`.
    pub fn from_masses(masses: &[f64], range: u16, precision: u32) -> Result<Self> {
        if !(12..=16).contains(&precision) {
            return Err(DcicError::Precondition(format!("precision {precision} outside [12, 16]")));
        }
        let slots = 2 * range as usize + 2;
        if masses.len() != slots {
            return Err(DcicError::Precondition(format!("{} masses for {slots} slots", masses.len())));
        }
        let total = 1u64 << precision;
        if slots as u64 > total {
            return Err(DcicError::Precondition(format!("range {range} too large for {precision}-bit tables")));
        }
        // Symbol slots get at least the likelihood floor, the escape slot one
        // unit. The rounding surplus or deficit is spread over the other slots
        // in proportion to their mass above the floor; the mode keeps its own.
        let floor_units = ((P_FLOOR * total as f64) as i64).max(1);
        let min_units = |i: usize| if i + 1 == slots { 1 } else { floor_units };
        let mut freq: Vec<i64> =
            (0..slots).map(|i| ((masses[i].max(0.0) * total as f64).round() as i64).max(min_units(i))).collect();
        let mode = (0..slots).max_by_key(|&i| (freq[i], std::cmp::Reverse(i))).unwrap();
        let diff = total as i64 - freq.iter().sum::<i64>();
        let spare: Vec<i64> = (0..slots).map(|i| if i == mode { 0 } else { freq[i] - min_units(i) }).collect();
        let pool: i64 = spare.iter().sum();
        if pool > 0 && diff >= -pool {
            let (mut acc, mut given) = (0i128, 0i64);
            for i in 0..slots {
                acc += spare[i] as i128;
                let upto = ((2 * acc * diff as i128 + pool as i128).div_euclid(2 * pool as i128)) as i64;
                freq[i] += upto - given;
                given = upto;
            }
        } else {
            freq[mode] += diff;
        }
        if freq.iter().enumerate().any(|(i, &f)| f < min_units(i)) {
            return Err(DcicError::Precondition(format!("range {range} too large for {precision}-bit tables")));
        }
        let mut cum = vec![0i64; slots + 1];
        for i in 0..slots {
            cum[i + 1] = cum[i] + freq[i];
        }
        debug_assert_eq!(cum[0], 0);
        Ok(CdfTable { cdf: cum.into_iter().map(|v| v as u32).collect(), range, precision })
    }

    pub fn range(&self) -> u16 {
        self.range
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    /// Cumulative entries; `len = 2 * range + 3`.
    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn num_slots(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn escape_slot(&self) -> usize {
        self.num_slots() - 1
    }

    /// Slot of a symbol, or `None` when it lies outside `[-range, range]`.
    pub fn slot(&self, symbol: i32) -> Option<usize> {
        let r = self.range as i32;
        (-r..=r).contains(&symbol).then(|| (symbol + r) as usize)
    }

    pub fn symbol(&self, slot: usize) -> i32 {
        slot as i32 - self.range as i32
    }

    /// `(start, frequency)` of a slot.
    pub fn interval(&self, slot: usize) -> (u32, u32) {
        (self.cdf[slot], self.cdf[slot + 1] - self.cdf[slot])
    }

    /// Mass of `symbol` in table units.
    pub fn mass(&self, symbol: i32) -> Option<u32> {
        self.slot(symbol).map(|s| self.interval(s).1)
    }
}

/// Rounds a scale to the table grid; the key both coder sides share.
pub fn scale_key(sigma: f64) -> u32 {
    (sigma.max(SIGMA_MIN) * SCALE_STEPS).round() as u32
}

/// Table for mean-shifted symbols `round(v - mu)` under `N(0, sigma^2)`.
pub fn build_gaussian_table(sigma: f64, range: u16, precision: u32) -> Result<CdfTable> {
    if !(sigma >= SIGMA_MIN) || !sigma.is_finite() {
        return Err(DcicError::Precondition(format!("degenerate scale {sigma} (minimum {SIGMA_MIN})")));
    }
    let sigma = scale_key(sigma) as f64 / SCALE_STEPS;
    let r = range as i32;
    let mut masses: Vec<f64> = (-r..=r).map(|k| gaussian_mass(k as f64, 0.0, sigma)).collect();
    let inside: f64 = masses.iter().sum();
    masses.push((1.0 - inside).max(0.0));
    CdfTable::from_masses(&masses, range, precision)
}

/// Table for one factorized-density channel from its integer pmf.
pub fn build_factorized_table(pmf: &[f64], range: u16, precision: u32) -> Result<CdfTable> {
    if pmf.len() != 2 * range as usize + 1 {
        return Err(DcicError::Precondition(format!("pmf of {} entries for range {range}", pmf.len())));
    }
    let mut masses = pmf.to_vec();
    let inside: f64 = masses.iter().sum();
    masses.push((1.0 - inside).max(0.0));
    CdfTable::from_masses(&masses, range, precision)
}

/// Memoized Gaussian tables keyed by `(rounded sigma, range)`.
#[derive(Default)]
pub struct GaussianTables {
    cache: HashMap<(u32, u16), Arc<CdfTable>>,
}

impl GaussianTables {
    pub fn get(&mut self, sigma: f64, range: u16) -> Result<Arc<CdfTable>> {
        let key = (scale_key(sigma), range);
        if let Some(t) = self.cache.get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(build_gaussian_table(sigma, range, PRECISION)?);
        self.cache.insert(key, t.clone());
        Ok(t)
    }

    /// One table per element of `params`.
    pub fn for_params(&mut self, params: &GaussianParams, range: u16) -> Result<Vec<Arc<CdfTable>>> {
        params.sigma.data().iter().map(|&s| self.get(s, range)).collect()
    }
}
