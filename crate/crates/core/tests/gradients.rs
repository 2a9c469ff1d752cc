mod common;

use dcic::model::Model;
use dcic::transforms::{ChannelPlan, ConditioningFlags};

#[test]
fn full_model_gradients_match_finite_differences() {
    let model = Model::<f64>::new(ChannelPlan::TINY, ConditioningFlags::FULL, 3).unwrap();
    let x = common::random_image(5, 64, 64);
    let probes = common::probe_gradients(&model, &x, 0.01, 13, 1);
    for p in &probes {
        eprintln!("{p:?} {:.2e}", p.rel_error());
        assert!(p.rel_error() < 1e-3, "{p:?} rel error {}", p.rel_error());
    }
}

#[test]
fn baseline_gradients_match_finite_differences() {
    let plan = ChannelPlan { n: 8, c_s: 4, c_y: 6, c_z: 4 };
    let model = Model::<f64>::new(plan, ConditioningFlags::BASELINE, 4).unwrap();
    let x = common::random_image(6, 64, 64);
    for p in common::probe_gradients(&model, &x, 0.05, 8, 2) {
        eprintln!("{p:?} {:.2e}", p.rel_error());
        assert!(p.rel_error() < 1e-3, "{p:?} rel error {}", p.rel_error());
    }
}
