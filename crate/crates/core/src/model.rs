//! The complete network: every transform, both hyperprior branches, the
//! parameter heads and the hyper-latent densities, over one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::entropy_models::{gaussian_likelihood_var, FactorizedDensity, GaussianParams};
use crate::error::{DcicError, Result};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::quantizer::round_half_away;
use crate::real::Real;
use crate::tensor::{FeatureMap, Tensor};
use crate::transforms::{
    scale_from_raw, Analysis, Builder, ChannelPlan, ConditioningFlags, DownStack, HyperAnalysis, HyperSynthesis,
    Injection, ParamHead, Synthesis,
};

/// The four coded latents, in bitstream order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    HyperS,
    Prior,
    HyperY,
    Detail,
}

impl Segment {
    pub const ORDER: [Segment; 4] = [Segment::HyperS, Segment::Prior, Segment::HyperY, Segment::Detail];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Segment::HyperS => "z_s",
            Segment::Prior => "s",
            Segment::HyperY => "z_y",
            Segment::Detail => "y",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    S,
    Y,
}

#[derive(Clone, Debug)]
pub struct Networks {
    pub prior_extractor: Option<DownStack>,
    pub hyper_s: Option<(HyperAnalysis, HyperSynthesis)>,
    pub density_zs: Option<FactorizedDensity>,
    pub analysis: Analysis,
    pub hyper_y: Option<(HyperAnalysis, HyperSynthesis)>,
    pub density_zy: Option<FactorizedDensity>,
    pub mean_head: ParamHead,
    pub scale_head: ParamHead,
    pub synthesis: Synthesis,
}

/// How latents are quantized inside a differentiable forward pass.
pub enum ForwardQuant<'a, R: Rng> {
    Noise(&'a mut R),
    Round,
}

/// Tape handles produced by [`Model::forward`].
pub struct Forward {
    pub x_hat: Var,
    /// Likelihoods per [`Segment`]; `None` for segments the flags omit.
    pub likelihoods: [Option<Var>; 4],
    pub s_hat: Option<Var>,
    pub y_hat: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub plan: ChannelPlan,
    pub flags: ConditioningFlags,
    pub params: ParamStore<T>,
    pub nets: Networks,
}

impl<T: Real> Model<T> {
    pub fn new(plan: ChannelPlan, flags: ConditioningFlags, seed: u64) -> Result<Self> {
        plan.validate()?;
        flags.validate()?;
        let mut params = ParamStore::default();
        let nets = {
            let mut b = Builder::new(&mut params, seed);
            let prior = flags.uses_prior();
            let prior_extractor = prior.then(|| DownStack::new(&mut b, ParamGroup::PriorExtractor, plan.n, plan.c_s));
            let hyper_s = prior.then(|| {
                (
                    HyperAnalysis::new(&mut b, ParamGroup::HyperAnalysisS, plan.c_s, plan.c_z),
                    HyperSynthesis::new(&mut b, ParamGroup::HyperSynthesisS, plan.c_z, plan.c_s),
                )
            });
            let density_zs = prior.then(|| FactorizedDensity::new(&mut b, ParamGroup::DensityZs, plan.c_z));
            let analysis = Analysis {
                backbone: DownStack::new(&mut b, ParamGroup::Analysis, plan.n, plan.c_y),
                injection: flags
                    .condition_ga
                    .then(|| Injection::new(&mut b, ParamGroup::AnalysisFusion, "stage0", plan.n, plan.c_s, 8)),
            };
            let hyper_y = flags.hyper_y_in_entropy.then(|| {
                (
                    HyperAnalysis::new(&mut b, ParamGroup::HyperAnalysisY, plan.c_y, plan.c_z),
                    HyperSynthesis::new(&mut b, ParamGroup::HyperSynthesisY, plan.c_z, plan.c_y),
                )
            });
            let density_zy = flags.hyper_y_in_entropy.then(|| FactorizedDensity::new(&mut b, ParamGroup::DensityZy, plan.c_z));
            let head_in = if flags.hyper_y_in_entropy { plan.c_y } else { 0 } + if flags.prior_in_entropy { plan.c_s } else { 0 };
            let mean_head = ParamHead::new(&mut b, ParamGroup::MeanHead, head_in, plan.c_y);
            let scale_head = ParamHead::new(&mut b, ParamGroup::ScaleHead, head_in, plan.c_y);
            let synthesis = Synthesis::new(&mut b, &plan, flags.condition_gs);
            Networks { prior_extractor, hyper_s, density_zs, analysis, hyper_y, density_zy, mean_head, scale_head, synthesis }
        };
        Ok(Model { plan, flags, params, nets })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { plan: self.plan, flags: self.flags, params: self.params.cast(), nets: self.nets.clone() }
    }

    fn need_prior<'a>(&self, s_hat: Option<&'a FeatureMap<T>>, what: &str) -> Result<Option<&'a FeatureMap<T>>> {
        match s_hat {
            Some(s) => {
                if s.channels() != self.plan.c_s {
                    return Err(DcicError::Shape(format!("{what}: prior has {} channels, expected {}", s.channels(), self.plan.c_s)));
                }
                Ok(Some(s))
            }
            None => Err(DcicError::Config(format!("{what}: the flags require the decoded prior"))),
        }
    }

    fn pad_check(x: &FeatureMap<T>, multiple: usize, what: &str) -> Result<()> {
        if x.height() % multiple != 0 || x.width() % multiple != 0 {
            return Err(DcicError::Precondition(format!(
                "{what}: spatial size {}x{} is not a multiple of {multiple}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Structure prior `s = E_s(x)`, shape `(C_s, H/16, W/16)`.
    pub fn extract_prior(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let es = self.nets.prior_extractor.as_ref().ok_or_else(|| DcicError::Config("model has no prior extractor".into()))?;
        if x.channels() != 3 {
            return Err(DcicError::Shape(format!("expected a 3-channel image, got {}", x.channels())));
        }
        Self::pad_check(x, 16, "extract_prior")?;
        let (mut tape, p) = self.inference_tape();
        let xv = tape.constant(x.tensor().clone());
        let s = es.forward(&mut tape, &p, xv);
        FeatureMap::from_tensor(tape.value(s).clone())
    }

    /// Analysis-side fusion of a feature at `H/2` with an already upsampled prior.
    pub fn fuse(&self, feature: &FeatureMap<T>, prior: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let inj = self.nets.analysis.injection.as_ref().ok_or_else(|| DcicError::Config("analysis fusion disabled".into()))?;
        if feature.channels() != inj.fusion.feature_channels() || prior.channels() != self.plan.c_s {
            return Err(DcicError::Shape("fusion channel counts do not match the channel plan".into()));
        }
        if (feature.height(), feature.width()) != (prior.height(), prior.width()) {
            return Err(DcicError::Shape("fusion inputs differ in spatial size".into()));
        }
        let (mut tape, p) = self.inference_tape();
        let f = tape.constant(feature.tensor().clone());
        let pr = tape.constant(prior.tensor().clone());
        let out = inj.fusion.apply(&mut tape, &p, f, pr);
        FeatureMap::from_tensor(tape.value(out).clone())
    }

    /// Detail latent `y = g_a(x, s_hat)`; `s_hat` is ignored unless the
    /// analysis is conditioned.
    pub fn analysis_conditioned(&self, x: &FeatureMap<T>, s_hat: Option<&FeatureMap<T>>) -> Result<FeatureMap<T>> {
        Self::pad_check(x, 16, "analysis")?;
        let s_hat = if self.flags.condition_ga { self.need_prior(s_hat, "analysis")? } else { None };
        let (mut tape, p) = self.inference_tape();
        let xv = tape.constant(x.tensor().clone());
        let sv = s_hat.map(|s| tape.constant(s.tensor().clone()));
        let y = self.nets.analysis.forward(&mut tape, &p, xv, sv);
        FeatureMap::from_tensor(tape.value(y).clone())
    }

    /// Reconstruction `x_hat = g_s(y_hat, s_hat)`, clamped to `[0, 1]`.
    pub fn synthesis_conditioned(&self, y_hat: &FeatureMap<T>, s_hat: Option<&FeatureMap<T>>) -> Result<FeatureMap<T>> {
        if y_hat.channels() != self.plan.c_y {
            return Err(DcicError::Shape(format!("detail latent has {} channels, expected {}", y_hat.channels(), self.plan.c_y)));
        }
        let s_hat = if self.flags.condition_gs { self.need_prior(s_hat, "synthesis")? } else { None };
        let (mut tape, p) = self.inference_tape();
        let yv = tape.constant(y_hat.tensor().clone());
        let sv = s_hat.map(|s| tape.constant(s.tensor().clone()));
        let x = self.nets.synthesis.forward(&mut tape, &p, yv, sv);
        let clamped = tape.value(x).map(|v| v.max(T::zero()).min(T::one()));
        FeatureMap::from_tensor(clamped)
    }

    /// Hyper-latent `z = h_a(v)` for either branch, shape `(C_z, h/4, w/4)`.
    pub fn hyper_analysis(&self, v: &FeatureMap<T>, branch: Branch) -> Result<FeatureMap<T>> {
        let (ha, _) = self.hyper_pair(branch)?;
        Self::pad_check(v, 4, "hyper_analysis")?;
        let (mut tape, p) = self.inference_tape();
        let vv = tape.constant(v.tensor().clone());
        let z = ha.forward(&mut tape, &p, vv);
        FeatureMap::from_tensor(tape.value(z).clone())
    }

    fn hyper_pair(&self, branch: Branch) -> Result<&(HyperAnalysis, HyperSynthesis)> {
        match branch {
            Branch::S => self.nets.hyper_s.as_ref(),
            Branch::Y => self.nets.hyper_y.as_ref(),
        }
        .ok_or_else(|| DcicError::Config(format!("model has no {branch:?} hyperprior")))
    }

    /// `(mu_s, sigma_s)` from the decoded prior hyper-latent.
    pub fn hyper_synthesis_s(&self, z_s_hat: &FeatureMap<T>) -> Result<GaussianParams> {
        let (_, hs) = self.hyper_pair(Branch::S)?;
        let (mut tape, p) = self.inference_tape();
        let z = tape.constant(z_s_hat.tensor().clone());
        let (mu, raw) = hs.forward(&mut tape, &p, z);
        let sigma = scale_from_raw(&mut tape, raw);
        GaussianParams::new(tape.value(mu).cast(), tape.value(sigma).cast())
    }

    /// `(mu_y, sigma_y)` from the active context sources.
    pub fn entropy_params_y(&self, z_y_hat: Option<&FeatureMap<T>>, s_hat: Option<&FeatureMap<T>>) -> Result<GaussianParams> {
        let (mut tape, p) = self.inference_tape();
        let hyper = if self.flags.hyper_y_in_entropy {
            let z = z_y_hat.ok_or_else(|| DcicError::Config("entropy parameters need the decoded detail hyper-latent".into()))?;
            Some(tape.constant(z.tensor().clone()))
        } else {
            None
        };
        let prior = if self.flags.prior_in_entropy {
            Some(tape.constant(self.need_prior(s_hat, "entropy parameters")?.unwrap().tensor().clone()))
        } else {
            None
        };
        let (mu, sigma) = self.entropy_params_var(&mut tape, &p, hyper, prior)?;
        GaussianParams::new(tape.value(mu).cast(), tape.value(sigma).cast())
    }

    fn entropy_params_var(&self, tape: &mut Tape<T>, p: &Bound, z_y_hat: Option<Var>, s_hat: Option<Var>) -> Result<(Var, Var)> {
        let (mut mean_in, mut scale_in) = (Vec::new(), Vec::new());
        if let Some(z) = z_y_hat {
            let (_, hs) = self.hyper_pair(Branch::Y)?;
            let (l_mean, l_scale) = hs.forward(tape, p, z);
            mean_in.push(l_mean);
            scale_in.push(l_scale);
        }
        if let Some(s) = s_hat {
            mean_in.push(s);
            scale_in.push(s);
        }
        if mean_in.is_empty() {
            return Err(DcicError::Config("no context source for the detail entropy model".into()));
        }
        let mu = self.nets.mean_head.forward(tape, p, &mean_in);
        let raw = self.nets.scale_head.forward(tape, p, &scale_in);
        Ok((mu, scale_from_raw(tape, raw)))
    }

    fn inference_tape(&self) -> (Tape<T>, Bound) {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        (tape, p)
    }

    /// Differentiable pass over one image `x: (3, H, W)` with `H, W`
    /// multiples of 64. Returns the unclamped reconstruction and the
    /// likelihoods of all coded latents.
    pub fn forward<R: Rng>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mut quant: ForwardQuant<'_, R>) -> Forward {
        let mut likelihoods = [None; 4];
        let mut s_hat = None;
        if let (Some(es), Some((ha, hs)), Some(dens)) =
            (&self.nets.prior_extractor, &self.nets.hyper_s, &self.nets.density_zs)
        {
            let s = es.forward(tape, p, x);
            let z = ha.forward(tape, p, s);
            let z_hat = quantize_var(tape, z, None, &mut quant);
            likelihoods[Segment::HyperS.index()] = Some(dens.likelihood_var(tape, p, z_hat));
            let (mu, raw) = hs.forward(tape, p, z_hat);
            let sigma = scale_from_raw(tape, raw);
            let sh = quantize_var(tape, s, Some(mu), &mut quant);
            likelihoods[Segment::Prior.index()] = Some(gaussian_likelihood_var(tape, sh, mu, sigma));
            s_hat = Some(sh);
        }
        let y = self.nets.analysis.forward(tape, p, x, s_hat);
        let mut z_y_hat = None;
        if let (Some((ha, _)), Some(dens)) = (&self.nets.hyper_y, &self.nets.density_zy) {
            let z = ha.forward(tape, p, y);
            let zh = quantize_var(tape, z, None, &mut quant);
            likelihoods[Segment::HyperY.index()] = Some(dens.likelihood_var(tape, p, zh));
            z_y_hat = Some(zh);
        }
        let prior_ctx = if self.flags.prior_in_entropy { s_hat } else { None };
        let (mu, sigma) = self
            .entropy_params_var(tape, p, z_y_hat, prior_ctx)
            .expect("flags validated at construction");
        let y_hat = quantize_var(tape, y, Some(mu), &mut quant);
        likelihoods[Segment::Detail.index()] = Some(gaussian_likelihood_var(tape, y_hat, mu, sigma));
        let s_for_gs = if self.flags.condition_gs { s_hat } else { None };
        let x_hat = self.nets.synthesis.forward(tape, p, y_hat, s_for_gs);
        Forward { x_hat, likelihoods, s_hat, y_hat }
    }
}

/// Noise: `v + u` (mean ignored). Round: `round(v - mu) + mu` as a constant.
fn quantize_var<T: Real, R: Rng>(tape: &mut Tape<T>, v: Var, mu: Option<Var>, quant: &mut ForwardQuant<'_, R>) -> Var {
    match quant {
        ForwardQuant::Noise(rng) => {
            let shape = tape.shape(v).to_vec();
            let n = tape.value(v).len();
            let noise: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-0.5..0.5))).collect();
            let u = tape.constant(Tensor::new(&shape, noise).expect("noise shape"));
            tape.add(v, u)
        }
        ForwardQuant::Round => {
            let vv = tape.value(v).clone();
            let out = match mu {
                Some(m) => vv.zip_map(tape.value(m), |a, b| T::lit(round_half_away((a - b).as_f64())) + b),
                None => vv.map(|a| T::lit(round_half_away(a.as_f64()))),
            };
            tape.constant(out)
        }
    }
}

/// Convenience for callers that only round.
pub type NoRng = rand_chacha::ChaCha8Rng;
