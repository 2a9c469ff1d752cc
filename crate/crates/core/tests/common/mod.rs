#![allow(dead_code)]

use dcic::autograd::Tape;
use dcic::model::{ForwardQuant, Model};
use dcic::params::{ParamGroup, ParamId};
use dcic::training::{rd_loss, Distortion};
use dcic::{FeatureMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(seed: u64, h: usize, w: usize) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dcic::experiment::synthetic_image(&mut rng, h, w)
}

/// Noisy-quantization loss with a fixed noise draw, plus all gradients.
pub fn loss_and_grads(model: &Model<f64>, x: &FeatureMap<f64>, lambda: f64, noise_seed: u64) -> (f64, Vec<(ParamId, Tensor<f64>)>) {
    let mut tape = Tape::<f64>::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x.tensor().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let out = model.forward(&mut tape, &p, xv, ForwardQuant::Noise(&mut rng));
    let (loss, terms) = rd_loss(&mut tape, xv, &out, lambda, Distortion::Mse).unwrap();
    let mut g = tape.backward(loss);
    let grads = model
        .params
        .ids()
        .map(|id| (id, g.take(p[id]).unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()))))
        .collect();
    (terms.loss, grads)
}

pub fn loss_only(model: &Model<f64>, x: &FeatureMap<f64>, lambda: f64, noise_seed: u64) -> f64 {
    let mut tape = Tape::<f64>::inference();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x.tensor().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let out = model.forward(&mut tape, &p, xv, ForwardQuant::Noise(&mut rng));
    rd_loss(&mut tape, xv, &out, lambda, Distortion::Mse).unwrap().1.loss
}

#[derive(Debug)]
pub struct GradProbe {
    pub name: String,
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-12)
    }
}

fn max_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Compares analytic and central-difference gradients for `count` scalar
/// parameters, one per group in turn, each drawn among the elements whose
/// gradient is within a decade of the tensor's largest. Tensors whose
/// gradient never exceeds 1e-4 are skipped: with a loss of order 100 their
/// finite differences are dominated by rounding.
pub fn probe_gradients(model: &Model<f64>, x: &FeatureMap<f64>, lambda: f64, count: usize, seed: u64) -> Vec<GradProbe> {
    let noise_seed = 99;
    let (_, grads) = loss_and_grads(model, x, lambda, noise_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = model.params.groups_present();
    let mut probes = Vec::new();
    let mut k = 0;
    while probes.len() < count && k < 100 * count {
        let group = groups[k % groups.len()];
        k += 1;
        let candidates: Vec<&(ParamId, Tensor<f64>)> =
            grads.iter().filter(|(id, g)| model.params.group(*id) == group && max_abs(g) >= 1e-4).collect();
        if candidates.is_empty() {
            continue;
        }
        let (id, g) = candidates[rng.gen_range(0..candidates.len())];
        let gmax = max_abs(g);
        let big: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i].abs() >= 0.1 * gmax).collect();
        let index = big[rng.gen_range(0..big.len())];
        let mut m = model.clone();
        let theta = m.params.get(*id).data()[index];
        let h = 1e-4 * theta.abs().max(1e-1);
        m.params.get_mut(*id).data_mut()[index] = theta + h;
        let up = loss_only(&m, x, lambda, noise_seed);
        m.params.get_mut(*id).data_mut()[index] = theta - h;
        let down = loss_only(&m, x, lambda, noise_seed);
        probes.push(GradProbe {
            name: model.params.name(*id).to_string(),
            group,
            index,
            analytic: g.data()[index],
            numeric: (up - down) / (2.0 * h),
        });
    }
    probes
}

/// Folder of the desk-scale experiment: `DCIC_EXPERIMENT_DIR`, or
/// `experiments/desk` at the workspace root.
pub fn experiment_dir() -> std::path::PathBuf {
    match std::env::var_os("DCIC_EXPERIMENT_DIR") {
        Some(d) => d.into(),
        None => std::path::Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().join("experiments/desk"),
    }
}

/// Results of a finished experiment, if one has been run.
pub fn experiment_results() -> Option<(std::path::PathBuf, dcic::experiment::ExperimentResults)> {
    let dir = experiment_dir();
    let r = dcic::experiment::ExperimentResults::load(&dir.join("results.json")).ok()?;
    Some((dir, r))
}

/// Writes `model` as a checkpoint in `dir` and loads it back as a codec.
pub fn codec_for(model: &Model<f64>, dir: &std::path::Path, name: &str) -> dcic::codec::Codec {
    let path = dir.join(name);
    let meta = dcic::checkpoint::CheckpointMeta { lambda: 0.01, quality_tag: 1, distortion: "mse".into(), steps: 0, seed: 0 };
    dcic::checkpoint::save(&path, model, &meta).unwrap();
    dcic::codec::Codec::load(&path).unwrap()
}
