//! End-to-end rate-distortion training, evaluation and the ablation suite.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{ms_ssim_var, psnr_from_mse};
use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, CheckpointMeta};
use crate::entropy_models::rate_bits_var;
use crate::error::{DcicError, Result};
use crate::image_io::{list_images, load_image};
use crate::model::{Forward, ForwardQuant, Model, NoRng, Segment};
use crate::params::{ParamGroup, ParamStore};
use crate::real::Real;
use crate::tensor::{FeatureMap, Tensor};
use crate::transforms::{ChannelPlan, ConditioningFlags};

/// Scale that turns MSE on `[0, 1]` into MSE on the 8-bit scale.
pub const MSE_SCALE: f64 = 255.0 * 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distortion {
    Mse,
    MsSsim,
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Mse => "mse",
            Distortion::MsSsim => "ms-ssim",
        })
    }
}

impl FromStr for Distortion {
    type Err = DcicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Distortion::Mse),
            "ms-ssim" | "ms_ssim" | "msssim" => Ok(Distortion::MsSsim),
            _ => Err(DcicError::Config(format!("unknown distortion {s:?} (mse or ms-ssim)"))),
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub distortion: Distortion,
    pub flags: ConditioningFlags,
    pub plan: ChannelPlan,
    pub steps: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    /// Fraction of `steps` after which the learning rate is decayed once.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub log_every: u64,
    /// Images held out from the end of the corpus for evaluation.
    pub eval_images: usize,
    pub quality_tag: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            distortion: Distortion::Mse,
            flags: ConditioningFlags::FULL,
            plan: ChannelPlan::TINY,
            steps: 20_000,
            batch_size: 8,
            crop_size: 64,
            learning_rate: 1e-4,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 2_000,
            log_every: 100,
            eval_images: 8,
            quality_tag: 0,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    v.parse().map_err(|e| DcicError::Config(format!("{key} = {v:?}: {e}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(DcicError::Config(format!("lambda must be a finite positive number, got {}", self.lambda)));
        }
        if self.crop_size == 0 || self.crop_size % 64 != 0 {
            return Err(DcicError::Config(format!("crop_size {} is not a positive multiple of 64", self.crop_size)));
        }
        if self.batch_size == 0 {
            return Err(DcicError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay_factor > 0.0) {
            return Err(DcicError::Config("invalid learning-rate schedule".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(DcicError::Config("clip_norm must be >= 0".into()));
        }
        self.plan.validate()?;
        self.flags.validate()
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected, missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DcicError::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "lambda" => c.lambda = parse_value(k, v)?,
                "distortion" => c.distortion = v.parse()?,
                "condition_ga" => c.flags.condition_ga = parse_value(k, v)?,
                "condition_gs" => c.flags.condition_gs = parse_value(k, v)?,
                "prior_in_entropy" => c.flags.prior_in_entropy = parse_value(k, v)?,
                "hyper_y_in_entropy" => c.flags.hyper_y_in_entropy = parse_value(k, v)?,
                "plan" => {
                    c.plan = match v {
                        "tiny" => ChannelPlan::TINY,
                        "full" => ChannelPlan::FULL,
                        _ => return Err(DcicError::Config(format!("plan = {v:?}: expected tiny or full"))),
                    }
                }
                "n" => c.plan.n = parse_value(k, v)?,
                "c_s" => c.plan.c_s = parse_value(k, v)?,
                "c_y" => c.plan.c_y = parse_value(k, v)?,
                "c_z" => c.plan.c_z = parse_value(k, v)?,
                "steps" => c.steps = parse_value(k, v)?,
                "batch_size" => c.batch_size = parse_value(k, v)?,
                "crop_size" => c.crop_size = parse_value(k, v)?,
                "learning_rate" => c.learning_rate = parse_value(k, v)?,
                "lr_decay_at" => c.lr_decay_at = parse_value(k, v)?,
                "lr_decay_factor" => c.lr_decay_factor = parse_value(k, v)?,
                "clip_norm" => c.clip_norm = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "eval_every" => c.eval_every = parse_value(k, v)?,
                "log_every" => c.log_every = parse_value(k, v)?,
                "eval_images" => c.eval_images = parse_value(k, v)?,
                "quality_tag" => c.quality_tag = parse_value(k, v)?,
                _ => return Err(DcicError::Config(format!("line {}: unknown key {k:?}", i + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_config_string(&self) -> String {
        let f = &self.flags;
        let p = &self.plan;
        format!(
            "lambda = {}\ndistortion = {}\ncondition_ga = {}\ncondition_gs = {}\nprior_in_entropy = {}\nhyper_y_in_entropy = {}\n\
             n = {}\nc_s = {}\nc_y = {}\nc_z = {}\nsteps = {}\nbatch_size = {}\ncrop_size = {}\nlearning_rate = {}\n\
             lr_decay_at = {}\nlr_decay_factor = {}\nclip_norm = {}\nseed = {}\neval_every = {}\nlog_every = {}\n\
             eval_images = {}\nquality_tag = {}\n",
            self.lambda,
            self.distortion,
            f.condition_ga,
            f.condition_gs,
            f.prior_in_entropy,
            f.hyper_y_in_entropy,
            p.n,
            p.c_s,
            p.c_y,
            p.c_z,
            self.steps,
            self.batch_size,
            self.crop_size,
            self.learning_rate,
            self.lr_decay_at,
            self.lr_decay_factor,
            self.clip_norm,
            self.seed,
            self.eval_every,
            self.log_every,
            self.eval_images,
            self.quality_tag
        )
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if (step as f64) >= self.lr_decay_at * self.steps as f64 {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// Named variant of a training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub name: &'static str,
    pub config: TrainConfig,
}

/// The full model and its five single-mechanism ablations, sharing every
/// setting except the conditioning flags.
pub fn make_ablation_suite(base: &TrainConfig) -> Vec<AblationConfig> {
    let full = ConditioningFlags::FULL;
    let variants = [
        ("full", full),
        ("w/o conditional g_a", ConditioningFlags { condition_ga: false, ..full }),
        ("w/o conditional g_s", ConditioningFlags { condition_gs: false, ..full }),
        ("w/o conditional transforms", ConditioningFlags { condition_ga: false, condition_gs: false, ..full }),
        ("w/o prior in entropy", ConditioningFlags { prior_in_entropy: false, ..full }),
        ("w/o hyperprior in entropy", ConditioningFlags { hyper_y_in_entropy: false, ..full }),
    ];
    variants
        .into_iter()
        .map(|(name, flags)| AblationConfig { name, config: TrainConfig { flags, ..base.clone() } })
        .collect()
}

/// Values of every term of the loss for one image or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Rate of each segment in bits per pixel, bitstream order.
    pub rate_bpp: [f64; 4],
    /// Distortion as entering the loss (8-bit MSE or `1 - MS-SSIM`).
    pub distortion: f64,
    pub lambda: f64,
    pub loss: f64,
}

impl LossTerms {
    pub fn total_bpp(&self) -> f64 {
        self.rate_bpp.iter().sum()
    }

    fn accumulate(&mut self, o: &LossTerms, w: f64) {
        for k in 0..4 {
            self.rate_bpp[k] += o.rate_bpp[k] * w;
        }
        self.distortion += o.distortion * w;
        self.loss += o.loss * w;
        self.lambda = o.lambda;
    }
}

/// `sum(rate_bpp) + lambda * D` on the tape.
pub fn rd_loss<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    out: &Forward,
    lambda: f64,
    distortion: Distortion,
) -> Result<(Var, LossTerms)> {
    let (_, h, w) = tape.value(x).dims3();
    let pixels = (h * w) as f64;
    let mut terms = LossTerms { lambda, ..Default::default() };
    let mut loss: Option<Var> = None;
    for seg in Segment::ORDER {
        if let Some(p) = out.likelihoods[seg.index()] {
            let bits = rate_bits_var(tape, p);
            let bpp = tape.scale(bits, 1.0 / pixels);
            let v = tape.scalar(bpp).as_f64();
            if !v.is_finite() {
                return Err(DcicError::Training(format!("rate of {} is {v}", seg.label())));
            }
            terms.rate_bpp[seg.index()] = v;
            loss = Some(match loss {
                None => bpp,
                Some(l) => tape.add(l, bpp),
            });
        }
    }
    let d = match distortion {
        Distortion::Mse => {
            let diff = tape.sub(out.x_hat, x);
            let sq = tape.square(diff);
            let m = tape.mean(sq);
            tape.scale(m, MSE_SCALE)
        }
        Distortion::MsSsim => {
            let v = ms_ssim_var(tape, x, out.x_hat)?;
            let neg = tape.scale(v, -1.0);
            tape.offset(neg, 1.0)
        }
    };
    terms.distortion = tape.scalar(d).as_f64();
    if !terms.distortion.is_finite() {
        return Err(DcicError::Training(format!("distortion is {}", terms.distortion)));
    }
    let weighted = tape.scale(d, lambda);
    let total = match loss {
        Some(l) => tape.add(l, weighted),
        None => weighted,
    };
    terms.loss = tape.scalar(total).as_f64();
    if !terms.loss.is_finite() {
        return Err(DcicError::Training(format!("loss is {}", terms.loss)));
    }
    Ok((total, terms))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |_| Tensor::zeros(&[0]);
        let mut m: Vec<Tensor<T>> = (0..params.len()).map(zeros).collect();
        for (i, id) in params.ids().enumerate() {
            m[i] = Tensor::zeros(params.get(id).shape());
        }
        Adam { v: m.clone(), m, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(lr * c2.sqrt() / c1);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let eps = T::lit(self.eps * c2.sqrt());
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1t * m[j] + ob1 * g[j];
                v[j] = b2t * v[j] + ob2 * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Training and evaluation images.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<FeatureMap<f64>>,
    pub eval: Vec<FeatureMap<f64>>,
}

impl Corpus {
    /// Loads `dir`. With `train/` and `eval/` subfolders those are used as
    /// is; otherwise the last `eval_images` files are held out.
    pub fn load(dir: &Path, eval_images: usize) -> Result<Self> {
        let (train_dir, eval_dir) = (dir.join("train"), dir.join("eval"));
        let load_all = |d: &Path| -> Result<Vec<FeatureMap<f64>>> { list_images(d)?.iter().map(|p| load_image(p)).collect() };
        let corpus = if train_dir.is_dir() && eval_dir.is_dir() {
            Corpus { train: load_all(&train_dir)?, eval: load_all(&eval_dir)? }
        } else {
            let mut all = load_all(dir)?;
            let k = eval_images.min(all.len().saturating_sub(1));
            let eval = all.split_off(all.len() - k);
            Corpus { train: all, eval }
        };
        if corpus.train.is_empty() {
            return Err(DcicError::Config(format!("no training images in {}", dir.display())));
        }
        Ok(corpus)
    }

    fn check(&self, crop: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(DcicError::Config("empty training corpus".into()));
        }
        if let Some(x) = self.train.iter().find(|x| x.height() < crop || x.width() < crop || x.channels() != 3) {
            return Err(DcicError::Precondition(format!("training image {:?} smaller than the {crop}px crop", x.dims())));
        }
        Ok(())
    }
}

/// Random `size x size` crop of a random training image.
pub fn random_crop(images: &[FeatureMap<f64>], size: usize, rng: &mut impl Rng) -> FeatureMap<f64> {
    let img = &images[rng.gen_range(0..images.len())];
    let top = rng.gen_range(0..=img.height() - size);
    let left = rng.gen_range(0..=img.width() - size);
    img.crop(top, left, size, size)
}

/// Line-delimited record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdReport {
    pub kind: String,
    pub step: u64,
    pub lambda: f64,
    pub rate_z_s: f64,
    pub rate_s: f64,
    pub rate_z_y: f64,
    pub rate_y: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub psnr: Option<f64>,
    pub loss: f64,
}

impl RdReport {
    pub fn new(kind: &str, step: u64, t: &LossTerms, psnr: Option<f64>) -> Self {
        RdReport {
            kind: kind.into(),
            step,
            lambda: t.lambda,
            rate_z_s: t.rate_bpp[0],
            rate_s: t.rate_bpp[1],
            rate_z_y: t.rate_bpp[2],
            rate_y: t.rate_bpp[3],
            bpp: t.total_bpp(),
            distortion: t.distortion,
            psnr,
            loss: t.loss,
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub terms: LossTerms,
    /// Gradient L2 norm per parameter group before clipping.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
}

/// Evaluation summary over a set of images (ROUND quantization, estimated
/// rates).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub terms: LossTerms,
    pub psnr: f64,
    pub images: usize,
}

pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    adam: Adam<T>,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::<T>::new(cfg.plan, cfg.flags, cfg.seed)?;
        let adam = Adam::new(&model.params);
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        let noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0153_0153);
        Ok(Trainer { cfg, model, adam, data_rng, noise_rng, step: 0 })
    }

    /// Loss, its terms and all parameter gradients for one image.
    pub fn loss_and_grads(&mut self, x: &FeatureMap<f64>) -> Result<(LossTerms, Vec<Tensor<T>>)> {
        let mut tape = Tape::<T>::new();
        let p = self.model.params.bind(&mut tape);
        let xv = tape.constant(x.tensor().cast());
        let out = self.model.forward(&mut tape, &p, xv, ForwardQuant::Noise(&mut self.noise_rng));
        let (loss, terms) = rd_loss(&mut tape, xv, &out, self.cfg.lambda, self.cfg.distortion)?;
        let mut g = tape.backward(loss);
        let grads = self
            .model
            .params
            .ids()
            .map(|id| g.take(p[id]).unwrap_or_else(|| Tensor::zeros(self.model.params.get(id).shape())))
            .collect();
        Ok((terms, grads))
    }

    /// One optimizer step over `batch` (gradients averaged).
    pub fn step_on(&mut self, batch: &[FeatureMap<f64>]) -> Result<StepStats> {
        let w = 1.0 / batch.len() as f64;
        let mut acc: Option<Vec<Tensor<T>>> = None;
        let mut terms = LossTerms::default();
        for x in batch {
            let (t, g) = self.loss_and_grads(x)?;
            terms.accumulate(&t, w);
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let mut grads = acc.expect("non-empty batch");
        let wt = T::lit(w);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= wt));
        let mut grad_norms: BTreeMap<ParamGroup, f64> = BTreeMap::new();
        let mut total = 0.0;
        for (id, g) in self.model.params.ids().zip(&grads) {
            let sq = g.sq_norm();
            *grad_norms.entry(self.model.params.group(id)).or_default() += sq;
            total += sq;
        }
        grad_norms.values_mut().for_each(|v| *v = v.sqrt());
        if !total.is_finite() {
            return Err(DcicError::Training("non-finite gradient".into()));
        }
        let total = total.sqrt();
        if self.cfg.clip_norm > 0.0 && total > self.cfg.clip_norm {
            let s = T::lit(self.cfg.clip_norm / total);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        let lr = self.cfg.learning_rate_at(self.step);
        self.adam.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(StepStats { terms, grad_norms })
    }

    /// Samples a batch of crops and takes one step.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepStats> {
        let batch: Vec<_> = (0..self.cfg.batch_size)
            .map(|_| random_crop(&corpus.train, self.cfg.crop_size, &mut self.data_rng))
            .collect();
        self.step_on(&batch)
    }

    pub fn evaluate(&self, images: &[FeatureMap<f64>]) -> Result<EvalSummary> {
        evaluate_model(&self.model, images, self.cfg.lambda, self.cfg.distortion)
    }
}

/// Loss terms of one image under ROUND quantization (no gradients).
pub fn image_terms<T: Real>(model: &Model<T>, x: &FeatureMap<f64>, lambda: f64, distortion: Distortion, quant: ForwardQuant<'_, NoRng>) -> Result<(LossTerms, f64)> {
    let (xp, _) = crate::codec::pad_image(x, crate::codec::PAD_MULTIPLE);
    let mut tape = Tape::<T>::inference();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(xp.tensor().cast());
    let out = model.forward(&mut tape, &p, xv, quant);
    let clamped = tape.value(out.x_hat).map(|v| v.max(T::zero()).min(T::one()));
    let mse: f64 = clamped
        .data()
        .iter()
        .zip(tape.value(xv).data())
        .map(|(a, b)| ((a.as_f64() - b.as_f64()) * 255.0).powi(2))
        .sum::<f64>()
        / clamped.len() as f64;
    let (_, terms) = rd_loss(&mut tape, xv, &out, lambda, distortion)?;
    Ok((terms, psnr_from_mse(mse)))
}

/// Mean loss terms and mean PSNR over `images` with rounded latents.
pub fn evaluate_model<T: Real>(model: &Model<T>, images: &[FeatureMap<f64>], lambda: f64, distortion: Distortion) -> Result<EvalSummary> {
    evaluate_with(model, images, lambda, distortion, None)
}

/// Same as [`evaluate_model`] but with the additive-noise proxy drawn from
/// `seed`, for comparing estimated rates of the two quantization modes.
pub fn evaluate_model_noisy<T: Real>(model: &Model<T>, images: &[FeatureMap<f64>], lambda: f64, distortion: Distortion, seed: u64) -> Result<EvalSummary> {
    evaluate_with(model, images, lambda, distortion, Some(seed))
}

fn evaluate_with<T: Real>(model: &Model<T>, images: &[FeatureMap<f64>], lambda: f64, distortion: Distortion, noise: Option<u64>) -> Result<EvalSummary> {
    if images.is_empty() {
        return Err(DcicError::Config("no evaluation images".into()));
    }
    let w = 1.0 / images.len() as f64;
    let mut terms = LossTerms::default();
    let mut psnr = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.unwrap_or(0));
    for x in images {
        let quant = match noise {
            Some(_) => ForwardQuant::Noise(&mut rng),
            None => ForwardQuant::Round,
        };
        let (t, p) = image_terms(model, x, lambda, distortion, quant)?;
        terms.accumulate(&t, w);
        psnr += p * w;
    }
    Ok(EvalSummary { terms, psnr, images: images.len() })
}

/// Where and how a run reports.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub report: Option<PathBuf>,
    /// Consecutive steps above the divergence threshold before aborting.
    pub divergence_patience: u64,
    pub quiet: bool,
}

pub struct TrainOutcome {
    pub model: Model<f64>,
    pub initial_loss: f64,
    pub final_eval: Option<EvalSummary>,
    pub initial_eval: Option<EvalSummary>,
    pub records: Vec<RdReport>,
}

fn append(path: &Option<PathBuf>, rec: &RdReport) -> Result<()> {
    if let Some(p) = path {
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        let line = serde_json::to_string(rec).map_err(|e| DcicError::Training(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Runs `cfg.steps` optimizer steps in `f32` and returns the trained model
/// in `f64`. Aborts when the loss stays above ten times its initial value
/// for `divergence_patience` consecutive steps (1000 when unset).
pub fn train(cfg: &TrainConfig, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    corpus.check(cfg.crop_size)?;
    let patience = if opts.divergence_patience == 0 { 1000 } else { opts.divergence_patience };
    let mut tr = Trainer::<f32>::new(cfg.clone())?;
    let mut records = Vec::new();
    let eval_set = &corpus.eval;
    let initial_eval = if eval_set.is_empty() { None } else { Some(tr.evaluate(eval_set)?) };
    if let Some(e) = &initial_eval {
        let r = RdReport::new("eval", 0, &e.terms, Some(e.psnr));
        append(&opts.report, &r)?;
        records.push(r);
    }
    let mut initial_loss = None;
    let mut above = 0u64;
    let mut window = LossTerms::default();
    let mut window_n = 0u64;
    while tr.step < cfg.steps {
        let stats = tr.train_step(corpus)?;
        let loss = stats.terms.loss;
        let init = *initial_loss.get_or_insert(loss);
        above = if loss > 10.0 * init { above + 1 } else { 0 };
        window.accumulate(&stats.terms, 1.0);
        window_n += 1;
        if cfg.log_every > 0 && (tr.step % cfg.log_every == 0 || tr.step == cfg.steps) {
            let mut mean = LossTerms::default();
            mean.accumulate(&window, 1.0 / window_n as f64);
            let r = RdReport::new("train", tr.step, &mean, None);
            if !opts.quiet {
                log::info!("step {} loss {:.4} bpp {:.4} D {:.3}", tr.step, mean.loss, mean.total_bpp(), mean.distortion);
            }
            append(&opts.report, &r)?;
            records.push(r);
            window = LossTerms::default();
            window_n = 0;
        }
        if above >= patience {
            return Err(DcicError::Training(format!(
                "diverged: loss above {:.4} (10x initial) for {above} consecutive steps at step {}",
                10.0 * init,
                tr.step
            )));
        }
        if !eval_set.is_empty() && cfg.eval_every > 0 && tr.step % cfg.eval_every == 0 && tr.step < cfg.steps {
            let e = tr.evaluate(eval_set)?;
            let r = RdReport::new("eval", tr.step, &e.terms, Some(e.psnr));
            append(&opts.report, &r)?;
            records.push(r);
        }
    }
    let model = tr.model.cast::<f64>();
    let final_eval = if eval_set.is_empty() { None } else { Some(evaluate_model(&model, eval_set, cfg.lambda, cfg.distortion)?) };
    if let Some(e) = &final_eval {
        let r = RdReport::new("eval", tr.step, &e.terms, Some(e.psnr));
        append(&opts.report, &r)?;
        records.push(r);
    }
    Ok(TrainOutcome { model, initial_loss: initial_loss.unwrap_or(f64::NAN), final_eval, initial_eval, records })
}

pub fn checkpoint_meta(cfg: &TrainConfig, steps: u64) -> CheckpointMeta {
    CheckpointMeta {
        lambda: cfg.lambda,
        quality_tag: cfg.quality_tag,
        distortion: cfg.distortion.to_string(),
        steps,
        seed: cfg.seed,
    }
}

/// Trains and writes the checkpoint atomically; returns the outcome and the
/// model id.
pub fn train_to_checkpoint(cfg: &TrainConfig, corpus: &Corpus, out: &Path, opts: &TrainOptions) -> Result<(TrainOutcome, [u8; 8])> {
    let outcome = train(cfg, corpus, opts)?;
    let id = checkpoint::save(out, &outcome.model, &checkpoint_meta(cfg, cfg.steps))?;
    Ok((outcome, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: ChannelPlan = ChannelPlan { n: 6, c_s: 4, c_y: 4, c_z: 3 };

    fn image(seed: u64, size: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(3, size, size, (0..3 * size * size).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig { lambda: 0.05, seed: 2, flags: ConditioningFlags::BASELINE, ..Default::default() };
        assert_eq!(TrainConfig::parse(&cfg.to_config_string()).unwrap(), cfg);
        assert!(TrainConfig::parse("crop_size = 100").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("lambda = x").is_err());
        assert!(TrainConfig::parse("prior_in_entropy = false\nhyper_y_in_entropy = false").is_err());
        let c = TrainConfig::parse("# comment\nlambda = 0.003  # trailing\nplan = tiny\n").unwrap();
        assert_eq!(c.lambda, 0.003);
    }

    #[test]
    fn schedule_decays_once() {
        let cfg = TrainConfig { steps: 100, ..Default::default() };
        assert_eq!(cfg.learning_rate_at(79), 1e-4);
        assert!((cfg.learning_rate_at(80) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn ablation_suite_shape() {
        let base = TrainConfig { lambda: 0.02, seed: 9, ..Default::default() };
        let suite = make_ablation_suite(&base);
        assert_eq!(suite.len(), 6);
        let wct = suite.iter().find(|a| a.name == "w/o conditional transforms").unwrap();
        assert!(!wct.config.flags.condition_ga && !wct.config.flags.condition_gs);
        for a in &suite {
            assert_eq!(TrainConfig { flags: base.flags, ..a.config.clone() }, base);
            a.config.flags.validate().unwrap();
        }
    }

    #[test]
    fn loss_examples() {
        let x = image(1, 64);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.tensor().clone());
        let lik: Vec<Var> = [0.5, 0.25, 1.0, 0.125]
            .iter()
            .map(|&p| tape.constant(Tensor::full(&[4, 8, 8], p)))
            .collect();
        let out = Forward { x_hat: xv, likelihoods: [Some(lik[0]), Some(lik[1]), Some(lik[2]), Some(lik[3])], s_hat: None, y_hat: xv };
        let (_, t) = rd_loss(&mut tape, xv, &out, 0.01, Distortion::Mse).unwrap();
        let bpp = 256.0 * (1.0 + 2.0 + 0.0 + 3.0) / 4096.0;
        assert!((t.loss - bpp).abs() < 1e-12);
        assert_eq!(t.distortion, 0.0);

        let noisy = tape.constant(Tensor::full(&[3, 64, 64], 0.5));
        let out2 = Forward { x_hat: noisy, ..out };
        let (_, a) = rd_loss(&mut tape, xv, &out2, 0.01, Distortion::Mse).unwrap();
        let (_, b) = rd_loss(&mut tape, xv, &out2, 0.02, Distortion::Mse).unwrap();
        let (_, z) = rd_loss(&mut tape, xv, &out2, 0.0, Distortion::Mse).unwrap();
        assert!((z.loss - bpp).abs() < 1e-12);
        assert!(((b.loss - bpp) - 2.0 * (a.loss - bpp)).abs() < 1e-9);
        assert!((a.loss - (a.total_bpp() + a.lambda * a.distortion)).abs() <= 1e-6 * a.loss);
    }

    #[test]
    fn one_step_reaches_every_group() {
        let cfg = TrainConfig { plan: SMALL, batch_size: 1, steps: 1, ..Default::default() };
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        let stats = tr.step_on(&[image(3, 64)]).unwrap();
        assert_eq!(stats.grad_norms.len(), 13);
        for (g, n) in &stats.grad_norms {
            assert!(*n > 0.0, "group {g} has zero gradient");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let corpus = Corpus { train: (0..3).map(|i| image(i, 64)).collect(), eval: vec![image(10, 64)] };
        let cfg = TrainConfig { plan: SMALL, batch_size: 1, steps: 3, eval_every: 0, log_every: 0, ..Default::default() };
        let a = train(&cfg, &corpus, &TrainOptions::default()).unwrap();
        let b = train(&cfg, &corpus, &TrainOptions::default()).unwrap();
        assert_eq!(a.model.params.export(), b.model.params.export());
        assert_eq!(a.final_eval, b.final_eval);
    }
}
