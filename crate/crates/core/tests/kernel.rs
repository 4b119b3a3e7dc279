mod common;

use common::*;
use ctmc_rkhs::kernel::{
    gram, KernelSpec, RateFunction, ScalarKernel, Standardization, WeightVector,
};
use nalgebra::DMatrix;
use rand::Rng;

#[test]
fn gram_matrices_are_symmetric_psd() {
    let mut r = rng(4);
    let top = &topologies()[3];
    for kernel in [
        ScalarKernel::Rbf { bandwidth: 0.7 },
        ScalarKernel::Linear,
        ScalarKernel::Polynomial {
            degree: 3,
            offset: 1.0,
        },
    ] {
        let z: Vec<Vec<f64>> = (0..25)
            .map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)])
            .collect();
        let spec = KernelSpec::uniform(kernel, top);
        let g = gram(&spec, &z).unwrap();
        for k in &g.matrices {
            let m = DMatrix::from_fn(25, 25, |i, j| k[[i, j]]);
            assert!((&m - m.transpose()).amax() == 0.0);
            let eig = m.clone().symmetric_eigenvalues();
            let scale = eig.amax().max(1.0);
            assert!(
                eig.iter().all(|&e| e >= -1e-10 * scale),
                "{kernel:?}: {eig}"
            );
        }
    }
}

#[test]
fn serialized_rate_function_evaluates_identically() {
    let mut r = rng(12);
    let top = &topologies()[2];
    let z: Vec<Vec<f64>> = (0..30)
        .map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-3.0..3.0)])
        .collect();
    let st = Standardization::fit(&z);
    let spec = KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 0.9 }, top);
    let w = WeightVector::from_stacked(random_beta(30, 2.0, &mut r), 1).unwrap();
    let rf = RateFunction::kernelized(top.clone(), &spec, z, Some(st), &w).unwrap();
    let back = RateFunction::from_json(&rf.to_json().unwrap()).unwrap();
    assert_eq!(back, rf);
    for _ in 0..1000 {
        let q = vec![r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)];
        for arm in top.arms() {
            let a = rf.eval_lngen(arm.arm(), &q).unwrap();
            let b = back.eval_lngen(arm.arm(), &q).unwrap();
            assert!((a - b).abs() <= 1e-15 * a.abs().max(f64::MIN_POSITIVE));
        }
    }
}

#[test]
fn standardized_expansion_uses_raw_query_scale() {
    let z: Vec<Vec<f64>> = (0..5).map(|i| vec![10.0 + i as f64 * 5.0]).collect();
    let st = Standardization::fit(&z);
    let top = &topologies()[1];
    let spec = KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 1.0 }, top);
    let mut w = WeightVector::zeros(5, 2);
    let mut vals = w.clone().into_vec();
    vals[2 * 2] = 1.0;
    w = WeightVector::from_stacked(vals, 2).unwrap();
    let rf = RateFunction::kernelized(top.clone(), &spec, z.clone(), Some(st), &w).unwrap();
    // weight sits on the middle training point: the curve peaks there at k = 1
    let peak = rf.eval_lngen(top.arms()[0].arm(), &z[2]).unwrap();
    assert!((peak - 1.0).abs() < 1e-15);
    assert_eq!(rf.eval_lngen(top.arms()[1].arm(), &z[2]).unwrap(), 0.0);
}
