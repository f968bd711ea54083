use std::collections::BTreeSet;

use migate::gradcheck::{composite_check, grad_check, micro_config, module_suite};
use migate::{FusionMode, GradCheckConfig, OpKind, Tensor};

#[test]
fn every_module_passes() {
    let reports = module_suite(11, &GradCheckConfig::default(), None).unwrap();
    let modules: BTreeSet<&str> = reports.iter().map(|(m, _)| *m).collect();
    for m in ["tensor-core", "mi-gate", "spatial-context", "encoder", "matching-head", "end-to-end"] {
        assert!(modules.contains(m), "missing {m}");
    }
    for (m, r) in &reports {
        assert!(r.passed(), "{m}: {r}");
    }
}

#[test]
fn composite_passes_for_each_fusion_and_seed() {
    for mode in [FusionMode::Gated, FusionMode::Linear, FusionMode::Concat] {
        let mut cfg = micro_config();
        cfg.gate.mode = mode;
        for seed in 0..3 {
            let r = composite_check(&cfg, seed, &GradCheckConfig::default(), None).unwrap();
            assert!(r.passed(), "{mode:?} seed {seed}: {r}");
        }
    }
}

#[test]
fn injected_fault_is_attributed() {
    let gc = GradCheckConfig::default();
    let cases = [
        (OpKind::Hadamard, "mi-gate"),
        (OpKind::Sweep, "spatial-context"),
        (OpKind::Conv2d, "encoder"),
        (OpKind::Cosine, "matching-head"),
    ];
    for (op, module) in cases {
        let reports = module_suite(3, &gc, Some(op)).unwrap();
        let failed: BTreeSet<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(m, _)| *m).collect();
        assert!(failed.contains(module), "{op:?}: failed modules {failed:?}");
        assert!(failed.contains("end-to-end"), "{op:?}: failed modules {failed:?}");
    }
}

#[test]
fn wrong_gradient_is_reported_with_location() {
    let x = vec![Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap()];
    // d/dx sum(x³) is 3x²; report the wrong derivative in entry 1.
    let analytic = vec![Tensor::from_f64([3], &[3.0, 0.0, 0.75]).unwrap()];
    let r = grad_check("cube", &x, &analytic, |xs| Ok(xs[0].data().iter().map(|v| v * v * v).sum()), &GradCheckConfig::default())
        .unwrap();
    assert!(!r.passed());
    assert_eq!(r.worst, Some((0, 1)));
}
