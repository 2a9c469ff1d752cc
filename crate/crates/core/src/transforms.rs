//! Learnable network functions: GDN, the prior extractor, the conditioned
//! analysis and synthesis transforms, both hyper-transform pairs, the fusion
//! module and the parameter heads for the detail latent.
//!
//! Every block is expressed against [`Tape`] so the same code serves
//! training (recording) and coding (inference).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_inv, Tape, Var};
use crate::error::{DcicError, Result};
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{FeatureMap, Tensor};

/// Lower bound on every predicted Gaussian scale.
pub const SIGMA_MIN: f64 = 0.11;
/// Floor added to reparameterized GDN `beta`.
pub const GDN_BETA_MIN: f64 = 1e-6;
/// Initial value of the off-diagonal GDN `gamma` reparameterization
/// (`gamma = p^2`), small but nonzero so those entries can move.
pub const GDN_GAMMA_OFFDIAG_INIT: f64 = 1e-3;
const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    /// Base width of the down/up stacks.
    pub n: usize,
    /// Channels of the structure prior `s`.
    pub c_s: usize,
    /// Channels of the detail latent `y`.
    pub c_y: usize,
    /// Channels of both hyper-latents.
    pub c_z: usize,
}

impl ChannelPlan {
    /// Desk-scale configuration.
    pub const TINY: ChannelPlan = ChannelPlan { n: 64, c_s: 48, c_y: 48, c_z: 24 };
    /// Full-scale configuration (320-channel latents, 192-channel hyper-latents).
    pub const FULL: ChannelPlan = ChannelPlan { n: 192, c_s: 320, c_y: 320, c_z: 192 };

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c_s == 0 || self.c_y == 0 || self.c_z == 0 {
            return Err(DcicError::Config(format!("channel counts must be >= 1: {self:?}")));
        }
        if self.c_s < 2 || self.c_y < 2 {
            return Err(DcicError::Config("latent channel counts must be >= 2".into()));
        }
        Ok(())
    }
}

/// Which consumers of the decoded structure prior are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditioningFlags {
    pub condition_ga: bool,
    pub condition_gs: bool,
    pub prior_in_entropy: bool,
    pub hyper_y_in_entropy: bool,
}

impl ConditioningFlags {
    pub const FULL: ConditioningFlags =
        ConditioningFlags { condition_ga: true, condition_gs: true, prior_in_entropy: true, hyper_y_in_entropy: true };

    /// Mean-scale hyperprior baseline: no structure prior anywhere.
    pub const BASELINE: ConditioningFlags =
        ConditioningFlags { condition_ga: false, condition_gs: false, prior_in_entropy: false, hyper_y_in_entropy: true };

    pub fn validate(&self) -> Result<()> {
        if !self.prior_in_entropy && !self.hyper_y_in_entropy {
            return Err(DcicError::Config(
                "the detail entropy model needs at least one context source (prior_in_entropy or hyper_y_in_entropy)".into(),
            ));
        }
        Ok(())
    }

    /// Whether anything consumes the structure prior. When nothing does, the
    /// prior branch is not built and its two segments stay empty.
    pub fn uses_prior(&self) -> bool {
        self.condition_ga || self.condition_gs || self.prior_in_entropy
    }

    pub fn uses_hyper_y(&self) -> bool {
        self.hyper_y_in_entropy
    }
}

/// Builds parameters with a per-group random stream so shared components of
/// differently flagged models start from identical weights.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder { store, seed }
    }

    pub fn rng(&self, group: ParamGroup, block: &str) -> ChaCha8Rng {
        use rand::SeedableRng;
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(group.prefix().as_bytes());
        h.update(block.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn add(&mut self, group: ParamGroup, name: &str, t: Tensor<T>) -> ParamId {
        self.store.add(group, format!("{}.{}", group.prefix(), name), t)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut rng = bld.rng(group, name);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = bld.add(group, &format!("{name}.weight"), uniform(&mut rng, &[cout, cin, k, k], bound));
        let b = bld.add(group, &format!("{name}.bias"), uniform(&mut rng, &[cout], bound));
        Conv { w, b, stride, pad: k / 2 }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

/// 5x5 stride-2 transposed convolution that doubles spatial size.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, name: &str, cin: usize, cout: usize) -> Self {
        let mut rng = bld.rng(group, name);
        let bound = 1.0 / ((cout * 25) as f64).sqrt();
        let w = bld.add(group, &format!("{name}.weight"), uniform(&mut rng, &[cin, cout, 5, 5], bound));
        let b = bld.add(group, &format!("{name}.bias"), uniform(&mut rng, &[cout], bound));
        Deconv { w, b }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv_transpose2d(x, p[self.w], Some(p[self.b]), 2, 2, 1)
    }
}

/// GDN / inverse GDN with `beta = p_beta^2 + beta_min`, `gamma = p_gamma^2`.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta: ParamId,
    pub gamma: ParamId,
    inverse: bool,
}

impl Gdn {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, name: &str, channels: usize, inverse: bool) -> Self {
        let beta_p = (1.0 - GDN_BETA_MIN).sqrt();
        let beta = bld.add(group, &format!("{name}.beta"), Tensor::full(&[channels], T::lit(beta_p)));
        let mut g = Tensor::full(&[channels, channels, 1, 1], T::lit(GDN_GAMMA_OFFDIAG_INIT));
        for i in 0..channels {
            g.data_mut()[i * channels + i] = T::lit(0.1f64.sqrt());
        }
        let gamma = bld.add(group, &format!("{name}.gamma"), g);
        Gdn { beta, gamma, inverse }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let b2 = tape.square(p[self.beta]);
        let beta = tape.offset(b2, GDN_BETA_MIN);
        let gamma = tape.square(p[self.gamma]);
        gdn_var(tape, x, beta, gamma, self.inverse)
    }

    /// Effective `(beta, gamma)` after reparameterization.
    pub fn effective<T: Real>(&self, store: &ParamStore<T>) -> GdnParams {
        let beta = store.get(self.beta).data().iter().map(|v| v.as_f64().powi(2) + GDN_BETA_MIN).collect();
        let gamma = store.get(self.gamma).data().iter().map(|v| v.as_f64().powi(2)).collect();
        GdnParams { beta, gamma }
    }
}

/// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)` (or times, when inverse).
/// `beta: [C]`, `gamma: [C, C, 1, 1]` with `gamma[i][j]`.
pub fn gdn_var<T: Real>(tape: &mut Tape<T>, x: Var, beta: Var, gamma: Var, inverse: bool) -> Var {
    let xs = tape.square(x);
    let norm = tape.conv2d(xs, gamma, Some(beta), 1, 0);
    let factor = if inverse { tape.sqrt(norm) } else { tape.rsqrt(norm) };
    tape.mul(x, factor)
}

/// Explicit GDN parameters: `beta[i]` and row-major `gamma[i * C + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Generalized divisive normalization of a feature map.
pub fn gdn(x: &FeatureMap<f64>, params: &GdnParams, inverse: bool) -> Result<FeatureMap<f64>> {
    let c = x.channels();
    if params.beta.len() != c || params.gamma.len() != c * c {
        return Err(DcicError::Config(format!(
            "GDN parameters sized for {} channels (gamma {}), input has {c}",
            params.beta.len(),
            params.gamma.len()
        )));
    }
    if params.beta.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
        return Err(DcicError::Config("GDN beta must be strictly positive".into()));
    }
    if params.gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(DcicError::Config("GDN gamma must be non-negative".into()));
    }
    let mut tape = Tape::<f64>::inference();
    let xv = tape.constant(x.tensor().clone());
    let beta = tape.constant(Tensor::new(&[c], params.beta.clone())?);
    let gamma = tape.constant(Tensor::new(&[c, c, 1, 1], params.gamma.clone())?);
    let y = gdn_var(&mut tape, xv, beta, gamma, inverse);
    FeatureMap::from_tensor(tape.value(y).clone())
}

/// Four stride-2 stages: conv-GDN x3 then a final conv (prior extractor and
/// the analysis backbone share this shape).
#[derive(Clone, Debug)]
pub struct DownStack {
    convs: Vec<Conv>,
    gdns: Vec<Gdn>,
}

impl DownStack {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, n: usize, cout: usize) -> Self {
        let convs = vec![
            Conv::new(bld, group, "conv0", 3, n, 5, 2),
            Conv::new(bld, group, "conv1", n, n, 5, 2),
            Conv::new(bld, group, "conv2", n, n, 5, 2),
            Conv::new(bld, group, "conv3", n, cout, 5, 2),
        ];
        let gdns = (0..3).map(|i| Gdn::new(bld, group, &format!("gdn{i}"), n, false)).collect();
        DownStack { convs, gdns }
    }

    /// First stride-2 block: `conv0 -> GDN`, giving features at `H/2`.
    pub fn stem<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.convs[0].apply(tape, p, x);
        self.gdns[0].apply(tape, p, h)
    }

    /// Remaining blocks after [`DownStack::stem`].
    pub fn tail<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, mut h: Var) -> Var {
        for i in 1..3 {
            h = self.convs[i].apply(tape, p, h);
            h = self.gdns[i].apply(tape, p, h);
        }
        self.convs[3].apply(tape, p, h)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.stem(tape, p, x);
        self.tail(tape, p, h)
    }
}

/// Nearest-neighbour upsampling of the prior followed by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct PriorUpsampler {
    factor: usize,
    conv: Conv,
}

impl PriorUpsampler {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, name: &str, c_s: usize, factor: usize) -> Self {
        PriorUpsampler { factor, conv: Conv::new(bld, group, name, c_s, c_s, 3, 1) }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s_hat: Var) -> Var {
        let up = tape.upsample_nearest(s_hat, self.factor);
        self.conv.apply(tape, p, up)
    }

    pub fn conv(&self) -> &Conv {
        &self.conv
    }
}

/// Channel concatenation of a feature and an upsampled prior, mixed by two
/// 3x3 convolutions with a SiLU between and added back onto the feature.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mix: Conv,
    pub out: Conv,
    feature_channels: usize,
}

impl Fusion {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, name: &str, channels: usize, c_s: usize) -> Self {
        Fusion {
            mix: Conv::new(bld, group, &format!("{name}.mix"), channels + c_s, channels, 3, 1),
            out: Conv::new(bld, group, &format!("{name}.out"), channels, channels, 3, 1),
            feature_channels: channels,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, feature: Var, prior: Var) -> Var {
        let fs = tape.shape(feature).to_vec();
        let ps = tape.shape(prior).to_vec();
        assert_eq!(fs[1..], ps[1..], "fusion inputs must share spatial size (upsampler contract)");
        let cat = tape.concat(&[feature, prior]);
        let h = self.mix.apply(tape, p, cat);
        let h = tape.silu(h);
        let h = self.out.apply(tape, p, h);
        tape.add(feature, h)
    }
}

/// Prior injection site: upsampler plus fusion.
#[derive(Clone, Debug)]
pub struct Injection {
    pub upsampler: PriorUpsampler,
    pub fusion: Fusion,
}

impl Injection {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, name: &str, channels: usize, c_s: usize, factor: usize) -> Self {
        Injection {
            upsampler: PriorUpsampler::new(bld, group, &format!("{name}.up"), c_s, factor),
            fusion: Fusion::new(bld, group, &format!("{name}.fuse"), channels, c_s),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, feature: Var, s_hat: Var) -> Var {
        let prior = self.upsampler.apply(tape, p, s_hat);
        self.fusion.apply(tape, p, feature, prior)
    }
}

/// Analysis transform `y = g_a(x, s_hat)`; the prior enters once, after the
/// first stride-2 block.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub backbone: DownStack,
    pub injection: Option<Injection>,
}

impl Analysis {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, s_hat: Option<Var>) -> Var {
        let mut h = self.backbone.stem(tape, p, x);
        if let Some(inj) = &self.injection {
            let s_hat = s_hat.expect("conditioned analysis needs the decoded prior");
            h = inj.apply(tape, p, h, s_hat);
        }
        self.backbone.tail(tape, p, h)
    }
}

/// Synthesis transform `x_hat = g_s(y_hat, s_hat)`: four up-blocks, with the
/// prior fused at the input of each (scales x1, x2, x4, x8).
#[derive(Clone, Debug)]
pub struct Synthesis {
    deconvs: Vec<Deconv>,
    igdns: Vec<Gdn>,
    pub injections: Option<Vec<Injection>>,
}

impl Synthesis {
    pub fn new<T: Real>(bld: &mut Builder<T>, plan: &ChannelPlan, conditioned: bool) -> Self {
        let g = ParamGroup::Synthesis;
        let n = plan.n;
        let deconvs = vec![
            Deconv::new(bld, g, "deconv0", plan.c_y, n),
            Deconv::new(bld, g, "deconv1", n, n),
            Deconv::new(bld, g, "deconv2", n, n),
            Deconv::new(bld, g, "deconv3", n, 3),
        ];
        let igdns = (0..3).map(|i| Gdn::new(bld, g, &format!("igdn{i}"), n, true)).collect();
        let injections = conditioned.then(|| {
            (0..4)
                .map(|i| {
                    let ch = if i == 0 { plan.c_y } else { n };
                    Injection::new(bld, ParamGroup::SynthesisFusion, &format!("stage{i}"), ch, plan.c_s, 1 << i)
                })
                .collect()
        });
        Synthesis { deconvs, igdns, injections }
    }

    /// Unclamped reconstruction.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, y_hat: Var, s_hat: Option<Var>) -> Var {
        let mut h = y_hat;
        for i in 0..4 {
            if let Some(inj) = &self.injections {
                let s_hat = s_hat.expect("conditioned synthesis needs the decoded prior");
                h = inj[i].apply(tape, p, h, s_hat);
            }
            h = self.deconvs[i].apply(tape, p, h);
            if i < 3 {
                h = self.igdns[i].apply(tape, p, h);
            }
        }
        h
    }
}

/// Hyper-analysis: 3x3 conv, then two 5x5 stride-2 convs (spatial / 4).
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    convs: Vec<Conv>,
}

impl HyperAnalysis {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, c_in: usize, c_z: usize) -> Self {
        HyperAnalysis {
            convs: vec![
                Conv::new(bld, group, "conv0", c_in, c_z, 3, 1),
                Conv::new(bld, group, "conv1", c_z, c_z, 5, 2),
                Conv::new(bld, group, "conv2", c_z, c_z, 5, 2),
            ],
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, v: Var) -> Var {
        let mut h = self.convs[0].apply(tape, p, v);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        h = self.convs[1].apply(tape, p, h);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.convs[2].apply(tape, p, h)
    }
}

/// Hyper-synthesis: two up-sampling deconvs then a 3x3 conv emitting two
/// `c_out`-channel halves (mean-like and scale-like).
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    d0: Deconv,
    d1: Deconv,
    c2: Conv,
    c_out: usize,
}

impl HyperSynthesis {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, c_z: usize, c_out: usize) -> Self {
        let mid = c_out * 3 / 2;
        HyperSynthesis {
            d0: Deconv::new(bld, group, "deconv0", c_z, c_out),
            d1: Deconv::new(bld, group, "deconv1", c_out, mid),
            c2: Conv::new(bld, group, "conv2", mid, 2 * c_out, 3, 1),
            c_out,
        }
    }

    /// Returns the two halves `(first, second)`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z_hat: Var) -> (Var, Var) {
        let mut h = self.d0.apply(tape, p, z_hat);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        h = self.d1.apply(tape, p, h);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        let out = self.c2.apply(tape, p, h);
        (tape.slice(out, 0, self.c_out), tape.slice(out, self.c_out, self.c_out))
    }
}

/// Parameter head (mean or scale): three 1x1 convolutions over the channel
/// concatenation of its active context sources.
#[derive(Clone, Debug)]
pub struct ParamHead {
    convs: Vec<Conv>,
}

impl ParamHead {
    pub fn new<T: Real>(bld: &mut Builder<T>, group: ParamGroup, c_in: usize, c_y: usize) -> Self {
        ParamHead {
            convs: vec![
                Conv::new(bld, group, "conv0", c_in, c_y, 1, 1),
                Conv::new(bld, group, "conv1", c_y, c_y, 1, 1),
                Conv::new(bld, group, "conv2", c_y, c_y, 1, 1),
            ],
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, inputs: &[Var]) -> Var {
        let x = if inputs.len() == 1 { inputs[0] } else { tape.concat(inputs) };
        let mut h = self.convs[0].apply(tape, p, x);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        h = self.convs[1].apply(tape, p, h);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.convs[2].apply(tape, p, h)
    }
}

/// `sigma = SIGMA_MIN + softplus(raw)`.
pub fn scale_from_raw<T: Real>(tape: &mut Tape<T>, raw: Var) -> Var {
    let sp = tape.softplus(raw);
    tape.offset(sp, SIGMA_MIN)
}

/// Raw logit that maps to a given sigma.
pub fn raw_from_scale(sigma: f64) -> f64 {
    softplus_inv(sigma - SIGMA_MIN)
}
