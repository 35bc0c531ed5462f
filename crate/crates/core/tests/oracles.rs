mod common;

use candle_core::{DType, Device, Tensor, Var};
use implant_locator::eval::average_precision;
use implant_locator::geometry::{fit_centerline, CenterPoint3D};
use implant_locator::heatmap::{decode_predictions, dense_offsets, render_heatmap};
use implant_locator::loss::{self, LossWeights};
use implant_locator::model::{attention_weights, tvp_fuse};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_lines_are_recovered(
        s1 in -2.0f64..2.0, s2 in -2.0f64..2.0,
        b1 in -50.0f64..50.0, b2 in -50.0f64..50.0,
        z0 in 0i32..20, n in 2usize..12,
    ) {
        let pts: Vec<CenterPoint3D> = (0..n)
            .map(|i| {
                let z = (z0 + i as i32) as f64;
                CenterPoint3D::new(s1 * z + b1, s2 * z + b2, z)
            })
            .collect();
        let fit = fit_centerline(&pts).unwrap();
        prop_assert!((fit.s1 - s1).abs() < 1e-9 && (fit.s2 - s2).abs() < 1e-9);
        prop_assert!((fit.tau - (s1.abs() + s2.abs())).abs() < 1e-9);
    }

    #[test]
    fn noisy_fit_matches_normal_equations(
        pts in prop::collection::vec((-40.0f64..40.0, -40.0f64..40.0), 3..15),
        z0 in 0.0f64..10.0,
    ) {
        let with_z: Vec<(f64, f64, f64)> = pts.iter().enumerate().map(|(i, p)| (p.0, p.1, z0 + i as f64)).collect();
        let fit = fit_centerline(&with_z.iter().map(|p| CenterPoint3D::new(p.0, p.1, p.2)).collect::<Vec<_>>()).unwrap();
        let (s1, s2, b1, b2) = common::normal_equation_slopes(&with_z);
        prop_assert!((fit.s1 - s1).abs() < 1e-7 && (fit.s2 - s2).abs() < 1e-7);
        prop_assert!((fit.b1 - b1).abs() < 1e-6 && (fit.b2 - b2).abs() < 1e-6);
    }

    #[test]
    fn fusion_matches_nested_loops(
        c in 1usize..=8, h in 1usize..=4, w in 1usize..=4, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut feat = || -> common::Feat {
            (0..c).map(|_| (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let (m1, m2, m3) = (feat(), feat(), feat());
        let got = tvp_fuse(
            &common::feat_tensor(&m1, h, w, DType::F64),
            &common::feat_tensor(&m2, h, w, DType::F64),
            &common::feat_tensor(&m3, h, w, DType::F64),
        ).unwrap();
        let want = common::attention_loops(&m1, &m2, &m3);
        let got = common::tensor_feat(&got);
        let err = got.iter().flatten().zip(want.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "max abs err {err}");
    }

    #[test]
    fn ap_matches_bruteforce(
        dets in prop::collection::vec((0u8..6, any::<bool>()), 0..10),
        extra_gt in 0usize..3,
    ) {
        let scored: Vec<(f64, bool)> = dets.iter().map(|&(s, t)| (s as f64 / 5.0, t)).collect();
        let num_gt = (scored.iter().filter(|s| s.1).count() + extra_gt).max(1);
        let ap = average_precision(&scored, num_gt).unwrap();
        prop_assert!((ap - common::ap_bruteforce(&scored, num_gt)).abs() < 1e-12);
    }

    #[test]
    fn heatmap_round_trip(
        cells in prop::collection::btree_set((0usize..16, 0usize..16), 1..6),
        fracs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 6),
    ) {
        let centers: Vec<(f64, f64)> = cells
            .iter()
            .zip(&fracs)
            .map(|(&(r, c), &(fx, fy))| ((c as f64 + fx) * 4.0, (r as f64 + fy) * 4.0))
            .collect();
        let target = render_heatmap(&centers, (64, 64), 4, 0.5).unwrap();
        let (ox, oy, _) = dense_offsets(&target);
        let dets = decode_predictions(&target.heatmap, (&ox, &oy), 4, 0.99, 100).unwrap();
        let mut got: Vec<(f64, f64)> = dets.iter().map(|d| (d.x, d.y)).collect();
        let mut want = centers.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(got, want);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let q = Tensor::randn(0f64, 3.0, (2, 9, 5), &Device::Cpu).unwrap();
    let k = Tensor::randn(0f64, 3.0, (2, 9, 5), &Device::Cpu).unwrap();
    let sums: Vec<f64> = attention_weights(&q, &k).unwrap().sum(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn fusion_single_location_and_equal_inputs() {
    let m = |v: &[f64]| Tensor::from_slice(v, (1, 3, 1, 1), &Device::Cpu).unwrap();
    let out: Vec<f64> = tvp_fuse(&m(&[1.0, 2.0, 3.0]), &m(&[10.0, 20.0, 30.0]), &m(&[-1.0, 0.0, 1.0]))
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    assert_eq!(out, vec![11.0, 22.0, 33.0, 9.0, 20.0, 31.0]);

    // Equal inputs give 2M only when M is constant over positions.
    let same = Tensor::randn(0f64, 1.0, (1, 4, 1, 1), &Device::Cpu)
        .unwrap()
        .broadcast_as((1, 4, 2, 3))
        .unwrap()
        .contiguous()
        .unwrap();
    let out = tvp_fuse(&same, &same, &same).unwrap();
    let twice = Tensor::cat(&[&same, &same], 1).unwrap().affine(2.0, 0.0).unwrap();
    let diff: f64 = out.sub(&twice).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn trivial_ap_cases_are_exact() {
    assert_eq!(average_precision(&[(0.9, true), (0.5, true)], 2).unwrap(), 1.0);
    assert_eq!(average_precision(&[(0.9, false), (0.5, false)], 2).unwrap(), 0.0);
    assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn check_gradient(n: usize, x0: &[f64], f: &dyn Fn(&Tensor) -> Tensor) {
    let var = Var::from_vec(x0.to_vec(), n, &Device::Cpu).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = values(grads.get(&var).unwrap());
    let scalar = |x: &[f64]| loss::scalar(&f(&Tensor::from_slice(x, n, &Device::Cpu).unwrap())).unwrap();
    let numeric = common::fd_gradient(&scalar, x0, 1e-6);
    let err = common::max_rel_err(&analytic, &numeric, 1e-3);
    assert!(err < 1e-4, "relative gradient error {err}\n{analytic:?}\n{numeric:?}");
}

fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn focal_gradient_matches_finite_differences() {
    let mut gt = uniform(1, 16, 0.0, 0.9);
    gt[5] = 1.0;
    let gt = Tensor::from_vec(gt, (1, 4, 4), &Device::Cpu).unwrap();
    check_gradient(16, &uniform(2, 16, 0.05, 0.95), &|p| {
        loss::focal_heatmap_loss(&p.reshape((1, 4, 4)).unwrap(), &gt).unwrap().sum_all().unwrap()
    });
}

#[test]
fn offset_and_align_gradients_match_finite_differences() {
    let gt = Tensor::from_vec(uniform(3, 8, 0.0, 1.0), (4, 2), &Device::Cpu).unwrap();
    check_gradient(8, &uniform(4, 8, 0.0, 1.0), &|p| {
        loss::offset_loss(&p.reshape((4, 2)).unwrap(), &gt).unwrap()
    });
    let v = Tensor::from_vec(uniform(5, 16, -1.0, 1.0), (4, 4), &Device::Cpu).unwrap();
    check_gradient(16, &uniform(6, 16, -1.0, 1.0), &|p| {
        loss::align_loss(&p.reshape((4, 4)).unwrap(), &v).unwrap()
    });
}

#[test]
fn composed_objective_gradient_matches_finite_differences() {
    // Two 4×4 heatmaps (32), four offset pairs (8), two pooled 4-vectors (8).
    let mut gt = uniform(7, 32, 0.0, 0.9);
    gt[3] = 1.0;
    gt[16 + 10] = 1.0;
    let gt = Tensor::from_vec(gt, (2, 4, 4), &Device::Cpu).unwrap();
    let off_gt = Tensor::from_vec(uniform(8, 8, 0.0, 1.0), (4, 2), &Device::Cpu).unwrap();
    let v = Tensor::from_vec(uniform(9, 8, -1.0, 1.0), (2, 4), &Device::Cpu).unwrap();
    let mut x0 = uniform(10, 32, 0.05, 0.95);
    x0.extend(uniform(11, 8, 0.0, 1.0));
    x0.extend(uniform(12, 8, -1.0, 1.0));
    let taus = [0.2, 0.9];
    let parts = |x: &Tensor| {
        (
            x.narrow(0, 0, 32).unwrap().reshape((2, 4, 4)).unwrap(),
            x.narrow(0, 32, 8).unwrap().reshape((4, 2)).unwrap(),
            x.narrow(0, 40, 8).unwrap().reshape((2, 4)).unwrap(),
        )
    };
    // Slope weights are constants of the objective (computed once from the loss values).
    let x0t = Tensor::from_slice(&x0, 48, &Device::Cpu).unwrap();
    let l0 = loss::to_f64_vec(&loss::focal_heatmap_loss(&parts(&x0t).0, &gt).unwrap()).unwrap();
    let tau_hat = loss::normalize_slopes(&taus, &l0).unwrap();
    check_gradient(48, &x0, &|x| {
        let (h, o, p) = parts(x);
        let sal = loss::sal_loss(&loss::focal_heatmap_loss(&h, &gt).unwrap(), &tau_hat).unwrap();
        let off = loss::offset_loss(&o, &off_gt).unwrap();
        let al = loss::align_loss(&p, &v).unwrap();
        loss::total_loss(&sal, &off, &al, LossWeights::default()).unwrap()
    });
}
