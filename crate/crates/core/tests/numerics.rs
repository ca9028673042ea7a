use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use raca_core::harness::selftest::{gradient_suite, GRAD_INSTANCES, GRAD_TOL};
use raca_core::numerics::{
    clip_grad_norm, Graph, ParamStore, RmsProp, RmsPropConfig, Segment, Tensor,
};
use raca_core::Error;

#[test]
fn every_layer_matches_finite_differences() {
    let start = Instant::now();
    let checks = gradient_suite(17, GRAD_INSTANCES).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let names: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
    for layer in ["linear", "softmax", "gru", "attention", "gcn", "mixer"] {
        assert!(
            names.contains(&format!("gradient/{layer}").as_str()),
            "{layer} not covered"
        );
    }
    for c in &checks {
        assert!(c.passed, "{}: {} (tolerance {GRAD_TOL})", c.name, c.detail);
    }
    assert!(secs < 60.0, "gradient suite took {secs:.1}s");
}

#[test]
fn matmul_matches_naive_product() {
    let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_rows_are_distributions_even_for_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]).unwrap());
    let s = g.softmax_rows(x).unwrap();
    for r in 0..2 {
        let row = g.value(s).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
    }
}

#[test]
fn attention_over_an_empty_segment_is_zero() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let k = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let v = g.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let segments: Arc<[Segment]> =
        vec![Segment { start: 0, len: 0 }, Segment { start: 0, len: 2 }].into();
    let out = g.segment_attention(q, k, v, segments).unwrap();
    assert_eq!(g.value(out).row(0), &[0.0, 0.0]);
    let w = [2.0f64 / 2f64.sqrt(), 4.0 / 2f64.sqrt()];
    let z = w[0].exp() + w[1].exp();
    let expect = (w[0].exp() * 5.0 + w[1].exp() * 7.0) / z;
    assert!((g.value(out).row(1)[0] - expect).abs() < 1e-12);
}

fn one_param(x: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![x]));
    p
}

fn grad(x: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::vector(vec![x]))])
}

#[test]
fn rmsprop_step_tends_to_lr_times_sign() {
    let cfg = RmsPropConfig {
        lr: 0.01,
        ..RmsPropConfig::default()
    };
    let mut opt = RmsProp::new(cfg);
    let mut p = one_param(0.0);
    let mut last = 0.0;
    for _ in 0..3000 {
        let before = p.get("w").unwrap().data()[0];
        opt.step(&mut p, &grad(-0.7)).unwrap();
        last = p.get("w").unwrap().data()[0] - before;
    }
    assert!((last - 0.01).abs() < 0.01 * 1e-4, "step {last}");
    assert_eq!(opt.steps(), 3000);
}

#[test]
fn rmsprop_first_step_closed_form() {
    let cfg = RmsPropConfig::default();
    let mut opt = RmsProp::new(cfg);
    let mut p = one_param(1.0);
    opt.step(&mut p, &grad(0.5)).unwrap();
    let v = (1.0 - cfg.alpha) * 0.25;
    let expect = 1.0 - cfg.lr * 0.5 / (v + cfg.eps).sqrt();
    assert_eq!(p.get("w").unwrap().data()[0], expect);
}

#[test]
fn rmsprop_with_zero_lr_leaves_parameters_unchanged() {
    let mut opt = RmsProp::new(RmsPropConfig {
        lr: 0.0,
        ..RmsPropConfig::default()
    });
    let mut p = one_param(0.25);
    let before = p.clone();
    opt.step(&mut p, &grad(3.0)).unwrap();
    assert!(p.bit_eq(&before));
    assert_eq!(p.version(), before.version() + 1);
}

#[test]
fn rmsprop_rejects_non_finite_gradients_without_touching_parameters() {
    let mut opt = RmsProp::new(RmsPropConfig::default());
    let mut p = one_param(0.25);
    let before = p.clone();
    let err = opt.step(&mut p, &grad(f64::NAN)).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }));
    assert!(p.bit_eq(&before));
    assert_eq!(opt.steps(), 0);
}

#[test]
fn gradient_clipping_bounds_the_global_norm() {
    let mut g = BTreeMap::from([
        ("a".to_string(), Tensor::vector(vec![30.0, 40.0])),
        ("b".to_string(), Tensor::vector(vec![0.0])),
    ]);
    let before = clip_grad_norm(&mut g, 10.0);
    assert_eq!(before, 50.0);
    assert!((g["a"].data()[0] - 6.0).abs() < 1e-12);
    assert!((g["a"].data()[1] - 8.0).abs() < 1e-12);
}
