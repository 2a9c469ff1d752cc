//! Desk-scale directional experiment: the full conditional model against a
//! flag-matched plain hyperprior baseline, plus the no-conditional-transform
//! ablation, over a small seed set and a synthetic corpus.
//!
//! Results are written to `results.json` after every run so an interrupted
//! experiment resumes where it stopped.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{bd_rate, bit_allocation, AllocationReport, BdInterpolation, RdCurve, RdPoint};
use crate::checkpoint;
use crate::codec::Codec;
use crate::error::{DcicError, Result};
use crate::image_io::{list_images, load_image, save_image};
use crate::tensor::FeatureMap;
use crate::training::{checkpoint_meta, evaluate_model_noisy, train, Corpus, EvalSummary, TrainConfig, TrainOptions};
use crate::transforms::ConditioningFlags;

pub const FULL: &str = "full";
pub const BASELINE: &str = "baseline";
pub const NO_CONDITIONAL_TRANSFORMS: &str = "w/o conditional transforms";

/// Draws a smooth procedural RGB image: a colour gradient, a few flat or
/// shaded shapes, an oriented texture patch and mild sensor noise.
pub fn synthetic_image(rng: &mut impl Rng, height: usize, width: usize) -> FeatureMap<f64> {
    let mut img = FeatureMap::zeros(3, height, width);
    let c0: [f64; 3] = rng.gen();
    let c1: [f64; 3] = rng.gen();
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = ((height * height + width * width) as f64).sqrt();
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f64 * ca + y as f64 * sa) / diag + 1.0) * 0.5;
            for c in 0..3 {
                img.set(c, y, x, c0[c] * (1.0 - t) + c1[c] * t);
            }
        }
    }
    let shapes = rng.gen_range(3..9);
    for _ in 0..shapes {
        let color: [f64; 3] = rng.gen();
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let ry = rng.gen_range(3.0..(height as f64 / 3.0).max(4.0));
        let rx = rng.gen_range(3.0..(width as f64 / 3.0).max(4.0));
        let ellipse = rng.gen_bool(0.5);
        let shade = rng.gen_range(-0.3..0.3);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        img.set(c, y, x, (color[c] + shade * dy).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    if rng.gen_bool(0.6) {
        let freq = rng.gen_range(0.15..0.8);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(0.05..0.2);
        let (y0, x0) = (rng.gen_range(0..height / 2), rng.gen_range(0..width / 2));
        let (h, w) = (rng.gen_range(height / 4..=height / 2), rng.gen_range(width / 4..=width / 2));
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                let v = amp * (freq * (x as f64 * theta.cos() + y as f64 * theta.sin())).sin();
                for c in 0..3 {
                    let p = img.get(c, y, x);
                    img.set(c, y, x, (p + v).clamp(0.0, 1.0));
                }
            }
        }
    }
    let sigma = rng.gen_range(0.0..0.02);
    for v in img.data_mut() {
        let n: f64 = rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5;
        *v = (*v + sigma * 2.0 * n).clamp(0.0, 1.0);
    }
    crate::image_io::quantize_8bit(&img)
}

/// Writes `train/` and `eval/` folders of PNG images.
pub fn write_synthetic_corpus(dir: &Path, train: usize, train_size: usize, eval: usize, eval_size: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (sub, n, size) in [("train", train, train_size), ("eval", eval, eval_size)] {
        let d = dir.join(sub);
        fs::create_dir_all(&d)?;
        for i in 0..n {
            save_image(&d.join(format!("{i:05}.png")), &synthetic_image(&mut rng, size, size))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    /// Lambda at which the no-conditional-transform ablation is trained.
    pub ablation_lambda: f64,
    pub base: TrainConfig,
    pub train_crops: usize,
    pub eval_images: usize,
    pub eval_size: usize,
    pub corpus_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            lambdas: vec![0.003, 0.01, 0.05],
            ablation_lambda: 0.01,
            base: TrainConfig { steps: 20_000, batch_size: 1, eval_every: 0, log_every: 500, ..TrainConfig::default() },
            train_crops: 500,
            eval_images: 8,
            eval_size: 128,
            corpus_seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: String,
    pub seed: u64,
    pub lambda: f64,
}

impl RunSpec {
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.variant, self.seed, self.lambda)
    }

    pub fn flags(&self) -> ConditioningFlags {
        match self.variant.as_str() {
            BASELINE => ConditioningFlags::BASELINE,
            NO_CONDITIONAL_TRANSFORMS => ConditioningFlags { condition_ga: false, condition_gs: false, ..ConditioningFlags::FULL },
            _ => ConditioningFlags::FULL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: RunSpec,
    /// Training loss of the first step.
    pub initial_loss: f64,
    /// Rounded-latent evaluation before the first step.
    pub initial_eval: EvalSummary,
    pub eval: EvalSummary,
    /// Final evaluation with the additive-noise proxy instead of rounding.
    pub eval_noisy: EvalSummary,
    pub seconds: f64,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: Option<ExperimentConfig>,
    pub runs: Vec<RunResult>,
}

impl ExperimentResults {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DcicError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DcicError::Config(e.to_string()))?;
        checkpoint::write_atomic(path, text.as_bytes())
    }

    pub fn find(&self, spec: &RunSpec) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.spec.key() == spec.key())
    }
}

impl ExperimentConfig {
    /// Every run in execution order: seeds, then lambdas from lowest, then
    /// variants, with the ablation interleaved at its lambda.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        let mut lambdas = self.lambdas.clone();
        lambdas.sort_by(f64::total_cmp);
        for &seed in &self.seeds {
            for &lambda in &lambdas {
                out.push(RunSpec { variant: FULL.into(), seed, lambda });
                out.push(RunSpec { variant: BASELINE.into(), seed, lambda });
                if lambda == self.ablation_lambda {
                    out.push(RunSpec { variant: NO_CONDITIONAL_TRANSFORMS.into(), seed, lambda });
                }
            }
        }
        out
    }

    pub fn lowest_lambda(&self) -> f64 {
        self.lambdas.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Builds (or reuses) the synthetic corpus under `dir/corpus`.
pub fn prepare_corpus(dir: &Path, cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus_dir = dir.join("corpus");
    let crop = cfg.base.crop_size;
    let complete = |sub: &str, n: usize| list_images(&corpus_dir.join(sub)).map(|v| v.len() == n).unwrap_or(false);
    if !complete("train", cfg.train_crops) || !complete("eval", cfg.eval_images) {
        write_synthetic_corpus(&corpus_dir, cfg.train_crops, crop, cfg.eval_images, cfg.eval_size, cfg.corpus_seed)?;
    }
    let load = |sub: &str| -> Result<Vec<FeatureMap<f64>>> { list_images(&corpus_dir.join(sub))?.iter().map(|p| load_image(p)).collect() };
    Ok(Corpus { train: load("train")?, eval: load("eval")? })
}

/// Runs every missing run of the experiment, saving results after each.
/// `progress` is called with each finished run.
pub fn run_experiment(dir: &Path, cfg: &ExperimentConfig, mut progress: impl FnMut(&RunResult)) -> Result<ExperimentResults> {
    fs::create_dir_all(dir)?;
    let results_path = dir.join("results.json");
    let mut results = if results_path.exists() { ExperimentResults::load(&results_path)? } else { ExperimentResults::default() };
    if let Some(prev) = &results.config {
        if prev != cfg {
            return Err(DcicError::Config(format!(
                "{} was produced with a different configuration; use a fresh directory",
                results_path.display()
            )));
        }
    }
    results.config = Some(cfg.clone());
    let corpus = prepare_corpus(dir, cfg)?;
    let lowest = cfg.lowest_lambda();
    for spec in cfg.runs() {
        if results.find(&spec).is_some() {
            continue;
        }
        let tc = TrainConfig { lambda: spec.lambda, seed: spec.seed, flags: spec.flags(), ..cfg.base.clone() };
        let slug = spec.variant.replace(['/', ' ', '.'], "_");
        let report = dir.join(format!("{slug}_s{}_l{}.jsonl", spec.seed, spec.lambda));
        let _ = fs::remove_file(&report);
        let start = Instant::now();
        let out = train(&tc, &corpus, &TrainOptions { report: Some(report), ..Default::default() })?;
        let checkpoint = if spec.lambda == lowest && spec.variant != NO_CONDITIONAL_TRANSFORMS {
            let name = format!("{slug}_s{}_l{}.ckpt", spec.seed, spec.lambda);
            checkpoint::save(&dir.join(&name), &out.model, &checkpoint_meta(&tc, tc.steps))?;
            Some(name)
        } else {
            None
        };
        let missing = || DcicError::Config("experiment corpus has no eval images".into());
        let eval = out.final_eval.ok_or_else(missing)?;
        let initial_eval = out.initial_eval.ok_or_else(missing)?;
        let eval_noisy = evaluate_model_noisy(&out.model, &corpus.eval, tc.lambda, tc.distortion, tc.seed)?;
        let r = RunResult {
            spec,
            initial_loss: out.initial_loss,
            initial_eval,
            eval,
            eval_noisy,
            seconds: start.elapsed().as_secs_f64(),
            checkpoint,
        };
        progress(&r);
        results.runs.push(r);
        results.save(&results_path)?;
    }
    Ok(results)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median-over-seeds eval figures of one variant at one lambda.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianPoint {
    pub variant: String,
    pub lambda: f64,
    pub seeds: usize,
    pub loss: f64,
    pub bpp: f64,
    pub psnr: f64,
}

pub fn median_point(results: &ExperimentResults, variant: &str, lambda: f64) -> Option<MedianPoint> {
    let runs: Vec<_> = results.runs.iter().filter(|r| r.spec.variant == variant && r.spec.lambda == lambda).collect();
    if runs.is_empty() {
        return None;
    }
    let pick = |f: &dyn Fn(&RunResult) -> f64| median(&mut runs.iter().map(|r| f(r)).collect::<Vec<_>>());
    Some(MedianPoint {
        variant: variant.into(),
        lambda,
        seeds: runs.len(),
        loss: pick(&|r| r.eval.terms.loss),
        bpp: pick(&|r| r.eval.terms.total_bpp()),
        psnr: pick(&|r| r.eval.psnr),
    })
}

/// Verdicts of the directional comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub points: Vec<MedianPoint>,
    /// Per lambda: full median loss strictly below the baseline's.
    pub full_beats_baseline: Vec<(f64, bool)>,
    /// BD-rate of the full model against the baseline, in percent (PCHIP on
    /// the median curves).
    pub bd_rate_percent: Option<f64>,
    /// Full median loss <= no-conditional-transform median loss at the
    /// ablation lambda.
    pub ablation_ordering: Option<bool>,
    pub complete: bool,
}

pub fn summarize(results: &ExperimentResults) -> Result<ExperimentSummary> {
    let cfg = results.config.clone().ok_or_else(|| DcicError::Config("results carry no configuration".into()))?;
    let complete = cfg.runs().iter().all(|s| results.find(s).is_some());
    let mut lambdas = cfg.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    let mut points = Vec::new();
    let mut beats = Vec::new();
    let (mut full_curve, mut base_curve) = (Vec::new(), Vec::new());
    for &l in &lambdas {
        let f = median_point(results, FULL, l);
        let b = median_point(results, BASELINE, l);
        if let (Some(f), Some(b)) = (f, b) {
            beats.push((l, f.loss < b.loss));
            full_curve.push(RdPoint { bpp: f.bpp, quality: f.psnr });
            base_curve.push(RdPoint { bpp: b.bpp, quality: b.psnr });
            points.push(f);
            points.push(b);
        }
    }
    let bd = match (RdCurve::new(BASELINE, base_curve), RdCurve::new(FULL, full_curve)) {
        (Ok(b), Ok(f)) => bd_rate(&b, &f, BdInterpolation::Pchip).ok(),
        _ => None,
    };
    let ablation_ordering = match (
        median_point(results, FULL, cfg.ablation_lambda),
        median_point(results, NO_CONDITIONAL_TRANSFORMS, cfg.ablation_lambda),
    ) {
        (Some(f), Some(a)) => {
            let ok = f.loss <= a.loss;
            points.push(a);
            Some(ok)
        }
        _ => None,
    };
    Ok(ExperimentSummary { points, full_beats_baseline: beats, bd_rate_percent: bd, ablation_ordering, complete })
}

/// Aggregate bit allocation of every eval image coded with each stored
/// lowest-lambda full-model checkpoint.
pub fn lowest_lambda_allocation(dir: &Path, results: &ExperimentResults) -> Result<(AllocationReport, Vec<AllocationReport>)> {
    let cfg = results.config.clone().ok_or_else(|| DcicError::Config("results carry no configuration".into()))?;
    let ckpts: Vec<PathBuf> = results
        .runs
        .iter()
        .filter(|r| r.spec.variant == FULL && r.spec.lambda == cfg.lowest_lambda())
        .filter_map(|r| r.checkpoint.as_ref().map(|c| dir.join(c)))
        .collect();
    if ckpts.is_empty() {
        return Err(DcicError::Config("no lowest-lambda full-model checkpoint recorded".into()));
    }
    let eval: Vec<FeatureMap<f64>> = list_images(&dir.join("corpus").join("eval"))?.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    let mut reports = Vec::new();
    for c in ckpts {
        let codec = Codec::load(&c)?;
        for x in &eval {
            reports.push(bit_allocation(&codec.encode(x)?.container)?);
        }
    }
    Ok((AllocationReport::aggregate(&reports)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_images_are_valid_and_reproducible() {
        let a = synthetic_image(&mut ChaCha8Rng::seed_from_u64(1), 64, 48);
        let b = synthetic_image(&mut ChaCha8Rng::seed_from_u64(1), 64, 48);
        assert_eq!(a, b);
        assert_eq!(a.dims(), (3, 64, 48));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.data().iter().sum::<f64>() / a.data().len() as f64;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.data().len() as f64;
        assert!(var > 1e-4);
    }

    #[test]
    fn run_list_covers_the_protocol() {
        let cfg = ExperimentConfig::default();
        let runs = cfg.runs();
        assert_eq!(runs.len(), 3 * 3 * 2 + 3);
        assert_eq!(runs.iter().filter(|r| r.variant == NO_CONDITIONAL_TRANSFORMS).count(), 3);
        assert!(runs.iter().filter(|r| r.variant == NO_CONDITIONAL_TRANSFORMS).all(|r| r.lambda == 0.01));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
