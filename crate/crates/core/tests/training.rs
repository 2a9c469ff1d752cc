mod common;

use common::{experiment_results, random_image};
use dcic::error::DcicError;
use dcic::experiment::{median, median_point, ExperimentResults, BASELINE, FULL};
use dcic::params::ParamGroup;
use dcic::training::{train, train_to_checkpoint, Corpus, RdReport, TrainConfig, TrainOptions, Trainer};
use dcic::transforms::{ChannelPlan, ConditioningFlags};

const SMALL: ChannelPlan = ChannelPlan { n: 8, c_s: 4, c_y: 6, c_z: 3 };

fn corpus() -> Corpus {
    Corpus { train: (0..4).map(|i| random_image(i, 96, 96)).collect(), eval: vec![random_image(50, 64, 64)] }
}

fn small_config(steps: u64) -> TrainConfig {
    TrainConfig { plan: SMALL, steps, batch_size: 1, eval_every: 2, log_every: 1, ..Default::default() }
}

#[test]
fn report_records_decompose_into_their_terms() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("rd.jsonl");
    let opts = TrainOptions { report: Some(report.clone()), quiet: true, ..Default::default() };
    let out = train(&small_config(4), &corpus(), &opts).unwrap();
    let lines: Vec<RdReport> =
        std::fs::read_to_string(&report).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), out.records.len());
    for (a, b) in lines.iter().zip(&out.records) {
        assert_eq!((&a.kind, a.step), (&b.kind, b.step));
        assert!((a.loss - b.loss).abs() <= 1e-12 * b.loss.abs());
    }
    assert_eq!(lines.iter().filter(|r| r.kind == "train").count(), 4);
    let evals: Vec<u64> = lines.iter().filter(|r| r.kind == "eval").map(|r| r.step).collect();
    assert_eq!(evals, vec![0, 2, 4]);
    for r in &lines {
        let rates = r.rate_z_s + r.rate_s + r.rate_z_y + r.rate_y;
        assert!((r.bpp - rates).abs() <= 1e-12 * r.bpp.max(1.0));
        let sum = rates + r.lambda * r.distortion;
        assert!((r.loss - sum).abs() <= 1e-6 * r.loss.abs(), "{r:?}");
        assert!(r.rate_z_s > 0.0 && r.rate_s > 0.0 && r.rate_z_y > 0.0 && r.rate_y > 0.0);
    }
}

#[test]
fn one_step_reaches_every_group_of_the_tiny_models() {
    let x = random_image(7, 64, 64);
    for (flags, groups) in [(ConditioningFlags::FULL, 13), (ConditioningFlags::BASELINE, 7)] {
        let cfg = TrainConfig { flags, plan: ChannelPlan::TINY, ..small_config(1) };
        let mut tr = Trainer::<f32>::new(cfg).unwrap();
        let before = tr.model.params.clone();
        let stats = tr.step_on(&[x.clone()]).unwrap();
        assert_eq!(stats.grad_norms.len(), groups, "{flags:?}");
        for (g, n) in &stats.grad_norms {
            assert!(*n > 0.0 && n.is_finite(), "group {g} gradient norm {n}");
        }
        for g in tr.model.params.groups_present() {
            let moved = tr.model.params.ids().filter(|&id| tr.model.params.group(id) == g).any(|id| tr.model.params.get(id) != before.get(id));
            assert!(moved, "group {g} did not move");
        }
        if flags == ConditioningFlags::FULL {
            for g in [ParamGroup::PriorExtractor, ParamGroup::AnalysisFusion, ParamGroup::SynthesisFusion, ParamGroup::MeanHead, ParamGroup::ScaleHead] {
                assert!(stats.grad_norms[&g] > 0.0);
            }
        }
    }
}

#[test]
fn the_baseline_trains_under_the_same_loop() {
    let cfg = TrainConfig { flags: ConditioningFlags::BASELINE, ..small_config(3) };
    let out = train(&cfg, &corpus(), &TrainOptions { quiet: true, ..Default::default() }).unwrap();
    let e = out.final_eval.unwrap();
    assert_eq!(e.terms.rate_bpp[0], 0.0);
    assert_eq!(e.terms.rate_bpp[1], 0.0);
    assert!(e.terms.rate_bpp[2] > 0.0 && e.terms.rate_bpp[3] > 0.0);
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(3);
    let opts = TrainOptions { quiet: true, ..Default::default() };
    let (a, id_a) = train_to_checkpoint(&cfg, &corpus(), &dir.path().join("a.ckpt"), &opts).unwrap();
    let (b, id_b) = train_to_checkpoint(&cfg, &corpus(), &dir.path().join("b.ckpt"), &opts).unwrap();
    assert_eq!(id_a, id_b);
    assert_eq!(std::fs::read(dir.path().join("a.ckpt")).unwrap(), std::fs::read(dir.path().join("b.ckpt")).unwrap());
    let (ea, eb) = (a.final_eval.unwrap(), b.final_eval.unwrap());
    assert!((ea.terms.total_bpp() - eb.terms.total_bpp()).abs() <= 1e-6);
    assert!((ea.psnr - eb.psnr).abs() <= 1e-6);

    let other = TrainConfig { seed: 1, ..cfg };
    let (_, id_c) = train_to_checkpoint(&other, &corpus(), &dir.path().join("c.ckpt"), &opts).unwrap();
    assert_ne!(id_a, id_c);
}

#[test]
fn runaway_training_aborts_with_a_training_error() {
    let cfg = TrainConfig { learning_rate: 1e3, clip_norm: 0.0, ..small_config(200) };
    let opts = TrainOptions { divergence_patience: 5, quiet: true, ..Default::default() };
    match train(&cfg, &corpus(), &opts) {
        Err(DcicError::Training(msg)) => assert!(!msg.is_empty()),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training at a learning rate of 1e3 did not abort"),
    }
}

#[test]
fn undersized_corpora_are_rejected() {
    let c = Corpus { train: vec![random_image(0, 32, 32)], eval: vec![] };
    assert!(train(&small_config(1), &c, &TrainOptions::default()).is_err());
}

fn loaded() -> Option<ExperimentResults> {
    match experiment_results() {
        Some((_, r)) if !r.runs.is_empty() => Some(r),
        _ => {
            eprintln!("no experiment results; run `dcic experiment` to enable the trained-model checks");
            None
        }
    }
}

#[test]
fn trained_models_beat_their_initialization() {
    let Some(res) = loaded() else { return };
    let mut lambdas: Vec<f64> = res.runs.iter().map(|r| r.spec.lambda).collect();
    lambdas.dedup();
    for variant in [FULL, BASELINE] {
        for &lambda in &lambdas {
            let runs: Vec<_> = res.runs.iter().filter(|r| r.spec.variant == variant && r.spec.lambda == lambda).collect();
            if runs.is_empty() {
                continue;
            }
            let init = median(&mut runs.iter().map(|r| r.initial_eval.terms.loss).collect::<Vec<_>>());
            let fin = median(&mut runs.iter().map(|r| r.eval.terms.loss).collect::<Vec<_>>());
            assert!(fin < init, "{variant} at {lambda}: eval loss {fin} not below initial {init}");
        }
    }
}

#[test]
fn noise_and_rounding_rates_agree_on_trained_models() {
    let Some(res) = loaded() else { return };
    let mut outside = Vec::new();
    for r in &res.runs {
        let (round, noise) = (r.eval.terms.total_bpp(), r.eval_noisy.terms.total_bpp());
        let gap = (noise - round).abs() / round;
        if gap >= 0.15 {
            outside.push(format!("{}: noise {noise:.4} vs round {round:.4} bpp ({:.1}%)", r.spec.key(), 100.0 * gap));
        }
    }
    assert!(outside.is_empty(), "{} of {} runs outside the 15% band:\n{}", outside.len(), res.runs.len(), outside.join("\n"));
}

/// Count of adjacent pairs that go the wrong way.
fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] <= w[0]).count()
}

#[test]
fn lambda_sweep_raises_rate_and_quality() {
    let Some(res) = loaded() else { return };
    let Some(cfg) = &res.config else { return };
    let mut lambdas = cfg.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    for variant in [FULL, BASELINE] {
        let points: Vec<_> = lambdas.iter().filter_map(|&l| median_point(&res, variant, l)).collect();
        if points.len() < lambdas.len() {
            eprintln!("{variant}: {} of {} lambdas trained; sweep check skipped", points.len(), lambdas.len());
            continue;
        }
        let bpp: Vec<f64> = points.iter().map(|p| p.bpp).collect();
        let psnr: Vec<f64> = points.iter().map(|p| p.psnr).collect();
        assert!(inversions(&bpp) + inversions(&psnr) <= 1, "{variant}: bpp {bpp:?} psnr {psnr:?}");
    }
}
