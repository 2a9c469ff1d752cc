//! Quality metrics, BD-rate, rate-distortion curve files and latent
//! diagnostics (channel energy and bit allocation).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::codec::BitstreamContainer;
use crate::error::{DcicError, Result};
use crate::model::Segment;
use crate::real::Real;
use crate::tensor::{FeatureMap, Tensor};

/// Returned by [`psnr`] for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

fn same_shape<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DcicError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error on the 8-bit scale.
pub fn mse_8bit(x: &FeatureMap<f64>, x_hat: &FeatureMap<f64>) -> Result<f64> {
    same_shape(x, x_hat)?;
    let n = x.data().len() as f64;
    Ok(x.data().iter().zip(x_hat.data()).map(|(a, b)| ((a - b) * 255.0).powi(2)).sum::<f64>() / n)
}

/// `10 log10(255^2 / MSE)` with both images scaled to `[0, 255]`.
pub fn psnr(x: &FeatureMap<f64>, x_hat: &FeatureMap<f64>) -> Result<f64> {
    Ok(psnr_from_mse(mse_8bit(x, x_hat)?))
}

pub fn psnr_from_mse(mse_8bit: f64) -> f64 {
    if mse_8bit == 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (255.0f64 * 255.0 / mse_8bit).log10()
    }
}

const SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Number of scales usable at this size (five at full size).
pub fn ms_ssim_scales(height: usize, width: usize) -> usize {
    let side = height.min(width);
    (1..=5).rev().find(|&k| side >> (k - 1) >= SSIM_WINDOW).unwrap_or(0)
}

/// Per-channel spatial mean of `(C, H, W)` as `[C, 1, 1]`.
fn channel_means<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let (c, h, w) = tape.value(x).dims3();
    let flat = tape.reshape(x, &[c, 1, h * w]);
    let ones = tape.constant(Tensor::full(&[c, h * w, 1], T::lit(1.0 / (h * w) as f64)));
    tape.batch_matmul(flat, ones)
}

/// Differentiable MS-SSIM of two `(C, H, W)` maps in `[0, 1]`, averaged
/// over channels. Fewer than five scales are used (weights renormalized)
/// when the images are too small.
pub fn ms_ssim_var<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (c, h, w) = tape.value(a).dims3();
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(DcicError::Analysis(format!("images of {h}x{w} are smaller than the {SSIM_WINDOW}-tap window")));
    }
    if scales < 5 {
        log::warn!("MS-SSIM on {h}x{w} uses {scales} scales instead of 5");
    }
    let wsum: f64 = SSIM_WEIGHTS[..scales].iter().sum();
    let taps = ssim_taps();
    let (mut a, mut b) = (a, b);
    let mut prod: Option<Var> = None;
    for k in 0..scales {
        let mu_a = tape.blur_valid(a, &taps);
        let mu_b = tape.blur_valid(b, &taps);
        let aa = tape.square(a);
        let bb = tape.square(b);
        let ab = tape.mul(a, b);
        let e_aa = tape.blur_valid(aa, &taps);
        let e_bb = tape.blur_valid(bb, &taps);
        let e_ab = tape.blur_valid(ab, &taps);
        let mu_a2 = tape.square(mu_a);
        let mu_b2 = tape.square(mu_b);
        let mu_ab = tape.mul(mu_a, mu_b);
        let var_a = tape.sub(e_aa, mu_a2);
        let var_b = tape.sub(e_bb, mu_b2);
        let cov = tape.sub(e_ab, mu_ab);
        let cs_num = tape.scale(cov, 2.0);
        let cs_num = tape.offset(cs_num, SSIM_C2);
        let cs_den = tape.add(var_a, var_b);
        let cs_den = tape.offset(cs_den, SSIM_C2);
        let cs_map = tape.div(cs_num, cs_den);
        let term = if k + 1 < scales {
            cs_map
        } else {
            let l_num = tape.scale(mu_ab, 2.0);
            let l_num = tape.offset(l_num, SSIM_C1);
            let l_den = tape.add(mu_a2, mu_b2);
            let l_den = tape.offset(l_den, SSIM_C1);
            let l_map = tape.div(l_num, l_den);
            tape.mul(l_map, cs_map)
        };
        let per_channel = channel_means(tape, term);
        let pos = tape.relu(per_channel);
        let powed = tape.powf(pos, SSIM_WEIGHTS[k] / wsum);
        prod = Some(match prod {
            None => powed,
            Some(p) => tape.mul(p, powed),
        });
        if k + 1 < scales {
            a = tape.avg_pool2(a);
            b = tape.avg_pool2(b);
        }
    }
    let per_channel = prod.expect("at least one scale");
    debug_assert_eq!(tape.value(per_channel).len(), c);
    Ok(tape.mean(per_channel))
}

pub fn ms_ssim(x: &FeatureMap<f64>, x_hat: &FeatureMap<f64>) -> Result<f64> {
    same_shape(x, x_hat)?;
    let mut tape = Tape::<f64>::inference();
    let a = tape.constant(x.tensor().clone());
    let b = tape.constant(x_hat.tensor().clone());
    let v = ms_ssim_var(&mut tape, a, b)?;
    Ok(tape.scalar(v))
}

/// `-10 log10(1 - MS-SSIM)`.
pub fn ms_ssim_db(v: f64) -> f64 {
    -10.0 * (1.0 - v).max(1e-12).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Points are sorted by rate; rates must be positive and distinct.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        let label = label.into();
        if points.len() < 2 {
            return Err(DcicError::Analysis(format!("curve {label} needs at least 2 points")));
        }
        if points.iter().any(|p| !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.quality.is_finite()) {
            return Err(DcicError::Analysis(format!("curve {label} has non-positive or non-finite entries")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(DcicError::Analysis(format!("curve {label} rates are not strictly increasing")));
        }
        Ok(RdCurve { label, points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn quality_range(&self) -> (f64, f64) {
        let q = self.points.iter().map(|p| p.quality);
        (q.clone().fold(f64::INFINITY, f64::min), q.fold(f64::NEG_INFINITY, f64::max))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BdInterpolation {
    /// Least-squares cubic in quality (needs at least 4 points).
    #[default]
    Cubic,
    /// Monotone piecewise-cubic Hermite (needs at least 2 points and
    /// quality strictly increasing with rate).
    Pchip,
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve, method: BdInterpolation) -> Result<f64> {
    let (a_lo, a_hi) = anchor.quality_range();
    let (t_lo, t_hi) = test.quality_range();
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi > lo) {
        return Err(DcicError::Analysis(format!(
            "quality ranges do not overlap: {} [{a_lo}, {a_hi}] vs {} [{t_lo}, {t_hi}]",
            anchor.label, test.label
        )));
    }
    let ia = integrate_log_rate(anchor, lo, hi, method)?;
    let it = integrate_log_rate(test, lo, hi, method)?;
    Ok(((it - ia) / (hi - lo)).exp_m1() * 100.0)
}

fn integrate_log_rate(c: &RdCurve, lo: f64, hi: f64, method: BdInterpolation) -> Result<f64> {
    let q: Vec<f64> = c.points.iter().map(|p| p.quality).collect();
    let r: Vec<f64> = c.points.iter().map(|p| p.bpp.ln()).collect();
    match method {
        BdInterpolation::Cubic => {
            if q.len() < 4 {
                return Err(DcicError::Analysis(format!("cubic BD-rate needs 4 points, {} has {}", c.label, q.len())));
            }
            let mean = q.iter().sum::<f64>() / q.len() as f64;
            let spread = q.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max).max(1e-12);
            let t: Vec<f64> = q.iter().map(|v| (v - mean) / spread).collect();
            let coef = polyfit(&t, &r, 3)?;
            let prim = |x: f64| {
                let u = (x - mean) / spread;
                spread * coef.iter().enumerate().map(|(k, a)| a * u.powi(k as i32 + 1) / (k as f64 + 1.0)).sum::<f64>()
            };
            Ok(prim(hi) - prim(lo))
        }
        BdInterpolation::Pchip => {
            let mut pairs: Vec<(f64, f64)> = q.into_iter().zip(r).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pairs.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(DcicError::Analysis(format!("curve {} quality is not strictly monotone", c.label)));
            }
            let interp = Pchip::new(&pairs);
            let n = 2000;
            let h = (hi - lo) / n as f64;
            let mut s = interp.eval(lo) + interp.eval(hi);
            for i in 1..n {
                s += interp.eval(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            Ok(s * h / 3.0)
        }
    }
}

/// Least-squares polynomial coefficients, lowest degree first.
fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let m = degree + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&xi, &yi) in x.iter().zip(y) {
        for r in 0..m {
            for c in 0..m {
                a[r][c] += xi.powi((r + c) as i32);
            }
            a[r][m] += yi * xi.powi(r as i32);
        }
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if a[piv][col].abs() < 1e-12 {
            return Err(DcicError::Analysis("degenerate curve for polynomial fit".into()));
        }
        a.swap(col, piv);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Ok((0..m).map(|i| a[i][m] / a[i][i]).collect())
}

/// Fritsch-Carlson monotone cubic interpolant, linear beyond the ends.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(pts: &[(f64, f64)]) -> Self {
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![delta[0]; 2];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = Self::end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = Self::end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Pchip { x, y, d }
    }

    fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s).powi(2),
            s * (1.0 - s).powi(2),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }
}

/// One line of an R-D curve file.
#[derive(Clone, Debug, PartialEq)]
pub struct RdRecord {
    pub label: String,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Tab-separated `label bpp psnr ms_ssim`, `#` starts a comment line.
pub fn write_rd_records(records: &[RdRecord]) -> String {
    let mut s = String::from("# label\tbpp\tpsnr\tms_ssim\n");
    for r in records {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.8}", r.label, r.bpp, r.psnr, r.ms_ssim);
    }
    s
}

pub fn parse_rd_records(text: &str) -> Result<Vec<RdRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(DcicError::Parse(format!("line {}: expected 4 tab-separated fields", i + 1)));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| DcicError::Parse(format!("line {}: {e}", i + 1)));
        out.push(RdRecord { label: f[0].to_string(), bpp: num(f[1])?, psnr: num(f[2])?, ms_ssim: num(f[3])? });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityMetric {
    Psnr,
    MsSsim,
    MsSsimDb,
}

/// Curves grouped by label.
pub fn curves_from_records(records: &[RdRecord], metric: QualityMetric) -> Result<Vec<RdCurve>> {
    let mut groups: BTreeMap<&str, Vec<RdPoint>> = BTreeMap::new();
    for r in records {
        let quality = match metric {
            QualityMetric::Psnr => r.psnr,
            QualityMetric::MsSsim => r.ms_ssim,
            QualityMetric::MsSsimDb => ms_ssim_db(r.ms_ssim),
        };
        groups.entry(&r.label).or_default().push(RdPoint { bpp: r.bpp, quality });
    }
    groups.into_iter().map(|(l, p)| RdCurve::new(l, p)).collect()
}

/// Per-channel mean squared activation, sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyProfile {
    /// `(channel, energy)` pairs, highest energy first.
    pub ranked: Vec<(usize, f64)>,
    /// Spatial map of the highest-energy channel.
    pub top_map: FeatureMap<f64>,
}

impl EnergyProfile {
    pub fn energies(&self) -> Vec<f64> {
        self.ranked.iter().map(|r| r.1).collect()
    }
}

pub fn channel_energy(latent: &FeatureMap<f64>) -> EnergyProfile {
    let (c, h, w) = latent.dims();
    let mut ranked: Vec<(usize, f64)> = (0..c)
        .map(|ch| (ch, latent.channel(ch).iter().map(|v| v * v).sum::<f64>() / (h * w) as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = ranked[0].0;
    let top_map = FeatureMap::new(1, h, w, latent.channel(top).to_vec()).expect("non-empty map");
    EnergyProfile { ranked, top_map }
}

/// Bits and bit fractions per segment in bitstream order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub bits: [u64; 4],
    pub fractions: [f64; 4],
    pub pixels: u64,
}

impl AllocationReport {
    /// Share of the structure prior and its hyper-latent.
    pub fn prior_share(&self) -> f64 {
        self.fractions[Segment::Prior.index()] + self.fractions[Segment::HyperS.index()]
    }

    pub fn detail_share(&self) -> f64 {
        self.fractions[Segment::Detail.index()] + self.fractions[Segment::HyperY.index()]
    }

    /// Pixel-weighted average of per-image fractions.
    pub fn aggregate(reports: &[AllocationReport]) -> Result<AllocationReport> {
        let pixels: u64 = reports.iter().map(|r| r.pixels).sum();
        if pixels == 0 {
            return Err(DcicError::Analysis("no images to aggregate".into()));
        }
        let mut bits = [0u64; 4];
        let mut fractions = [0.0; 4];
        for r in reports {
            for k in 0..4 {
                bits[k] += r.bits[k];
                fractions[k] += r.fractions[k] * r.pixels as f64 / pixels as f64;
            }
        }
        Ok(AllocationReport { bits, fractions, pixels })
    }
}

pub fn bit_allocation(b: &BitstreamContainer) -> Result<AllocationReport> {
    let bits = b.segment_bits();
    let total: u64 = bits.iter().sum();
    if total == 0 {
        return Err(DcicError::Analysis("container carries no payload bits".into()));
    }
    let mut fractions = bits.map(|v| v as f64 / total as f64);
    // Make the sum exactly one up to rounding of the last term.
    let rest: f64 = fractions[..3].iter().sum();
    if bits[3] > 0 {
        fractions[3] = 1.0 - rest;
    }
    Ok(AllocationReport { bits, fractions, pixels: b.width as u64 * b.height as u64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let x = random_image(1, 8, 8);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_IDENTICAL);
        assert!((psnr_from_mse(1.0) - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((psnr_from_mse(1.0) - 48.1308).abs() < 1e-4);
        assert_eq!(psnr_from_mse(255.0 * 255.0), 0.0);
        assert!(psnr(&x, &random_image(1, 8, 4)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let x = random_image(2, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<f64> = (0..x.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.001, 0.01, 0.05, 0.2] {
            let y = FeatureMap::new(3, 16, 16, x.data().iter().zip(&base).map(|(a, n)| a + amp * n).collect()).unwrap();
            let p = psnr(&x, &y).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ms_ssim_examples() {
        let x = random_image(4, 64, 64);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inv = FeatureMap::new(3, 64, 64, x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ms_ssim(&x, &inv).unwrap() < 1.0);
        let y = random_image(5, 64, 64);
        assert!((ms_ssim(&x, &y).unwrap() - ms_ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert_eq!(ms_ssim_scales(256, 256), 5);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert!(ms_ssim(&random_image(6, 8, 8), &random_image(7, 8, 8)).is_err());
    }

    fn curve(label: &str, scale: f64) -> RdCurve {
        let pts = [(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.2)]
            .iter()
            .map(|&(b, q)| RdPoint { bpp: b * scale, quality: q })
            .collect();
        RdCurve::new(label, pts).unwrap()
    }

    #[test]
    fn bd_rate_closed_forms() {
        for m in [BdInterpolation::Cubic, BdInterpolation::Pchip] {
            let a = curve("a", 1.0);
            assert!(bd_rate(&a, &a, m).unwrap().abs() < 1e-9);
            assert!((bd_rate(&a, &curve("b", 2.0), m).unwrap() - 100.0).abs() < 0.1);
            assert!((bd_rate(&a, &curve("c", 0.5), m).unwrap() + 50.0).abs() < 0.1);
        }
    }

    #[test]
    fn bd_rate_antisymmetry_on_smooth_curves() {
        let a = curve("a", 1.0);
        let pts = [(0.13, 28.3), (0.24, 30.9), (0.45, 33.1), (0.85, 35.6)]
            .iter()
            .map(|&(b, q)| RdPoint { bpp: b, quality: q })
            .collect();
        let b = RdCurve::new("b", pts).unwrap();
        let ab = bd_rate(&a, &b, BdInterpolation::Cubic).unwrap();
        let ba = bd_rate(&b, &a, BdInterpolation::Cubic).unwrap();
        assert!((ab - (-ba / (1.0 + ba / 100.0))).abs() < 0.5);
    }

    #[test]
    fn bd_rate_errors() {
        let a = curve("a", 1.0);
        let far = RdCurve::new("far", vec![RdPoint { bpp: 1.0, quality: 50.0 }, RdPoint { bpp: 2.0, quality: 52.0 }, RdPoint { bpp: 3.0, quality: 53.0 }, RdPoint { bpp: 4.0, quality: 54.0 }]).unwrap();
        let err = bd_rate(&a, &far, BdInterpolation::Cubic).unwrap_err().to_string();
        assert!(err.contains("do not overlap"));
        let three = RdCurve::new("t", curve("t", 1.0).points()[..3].to_vec()).unwrap();
        assert!(bd_rate(&three, &three, BdInterpolation::Cubic).is_err());
        assert!(bd_rate(&three, &three, BdInterpolation::Pchip).unwrap().abs() < 1e-9);
        assert!(RdCurve::new("x", vec![RdPoint { bpp: 1.0, quality: 1.0 }]).is_err());
    }

    #[test]
    fn rd_records_round_trip() {
        let recs = vec![
            RdRecord { label: "full".into(), bpp: 0.25, psnr: 31.5, ms_ssim: 0.95 },
            RdRecord { label: "full".into(), bpp: 0.5, psnr: 33.5, ms_ssim: 0.97 },
        ];
        assert_eq!(parse_rd_records(&write_rd_records(&recs)).unwrap(), recs);
        assert!(parse_rd_records("a\t1\t2").is_err());
    }

    #[test]
    fn energy_profile_contract() {
        assert!(channel_energy(&FeatureMap::zeros(4, 3, 3)).energies().iter().all(|&e| e == 0.0));
        let mut m = FeatureMap::zeros(5, 2, 2);
        m.set(3, 1, 0, 2.0);
        let p = channel_energy(&m);
        assert_eq!(p.ranked[0].0, 3);
        assert_eq!(p.top_map.data(), &[0.0, 0.0, 2.0, 0.0]);
        let x = random_image(9, 6, 6);
        let e = channel_energy(&x).energies();
        assert!(e.windows(2).all(|w| w[0] >= w[1]) && e.iter().all(|&v| v >= 0.0));
        let mut shuffled = x.clone();
        shuffled.data_mut()[..36].reverse();
        let (a, b) = (channel_energy(&shuffled).energies(), channel_energy(&x).energies());
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12));
    }
}
