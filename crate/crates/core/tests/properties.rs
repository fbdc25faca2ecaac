use proptest::prelude::*;

use roadseg::augment::histogram_equalize;
use roadseg::eval::ConfusionMatrix;
use roadseg::graph::{Graph, Mode, NormState};
use roadseg::model::{manifold_mixup, mix_rows, softmax_rows, MixPlan};
use roadseg::projection::{window_mean, SensorSpec};
use roadseg::rng::derive_rng;
use roadseg::scan::registry::DatasetEntry;
use roadseg::scan::{load_scan, save_scan, PointScan, IGNORE, NUM_CLASSES};
use roadseg::tensor::Tensor;

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1000i32..1000, 1..200).prop_map(|v| v.into_iter().map(|x| x as f64 / 10.0).collect())
}

fn cutoffs() -> impl Strategy<Value = (f64, f64)> {
    (0.0..50.0f64, 50.5..=100.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn equalization_is_monotone_and_bounded(v in values(), (lo, hi) in cutoffs()) {
        let out = histogram_equalize(&v, lo, hi).unwrap();
        for (i, &a) in v.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&out[i]));
            for (j, &b) in v.iter().enumerate() {
                if a <= b {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }

    #[test]
    fn equalization_depends_only_on_ranks(v in values(), (lo, hi) in cutoffs(), scale in 0.1..10.0f64) {
        let base = histogram_equalize(&v, lo, hi).unwrap();
        let affine: Vec<f64> = v.iter().map(|x| scale * x + 3.0).collect();
        let cubed: Vec<f64> = v.iter().map(|x| x * x * x).collect();
        prop_assert_eq!(&base, &histogram_equalize(&affine, lo, hi).unwrap());
        prop_assert_eq!(&base, &histogram_equalize(&cubed, lo, hi).unwrap());
    }

    #[test]
    fn metrics_are_invariant_to_class_relabeling(
        pairs in prop::collection::vec((0u8..8, 0u8..8), 1..300),
        perm in Just((0..NUM_CLASSES as u8).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (t, p): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut a = ConfusionMatrix::new();
        a.accumulate(&t, &p).unwrap();
        let mut b = ConfusionMatrix::new();
        let pt: Vec<u8> = t.iter().map(|&c| perm[c as usize]).collect();
        let pp: Vec<u8> = p.iter().map(|&c| perm[c as usize]).collect();
        b.accumulate(&pt, &pp).unwrap();
        let (ma, mb) = (a.metrics().unwrap(), b.metrics().unwrap());
        prop_assert!((ma.miou - mb.miou).abs() < 1e-12);
        prop_assert_eq!(ma.acc, mb.acc);
        for c in 0..NUM_CLASSES {
            prop_assert!((ma.per_class_iou[c] - mb.per_class_iou[perm[c] as usize]).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ma.per_class_iou[c]));
        }
        let max = ma.per_class_iou.iter().cloned().fold(0.0, f64::max);
        prop_assert!(ma.miou <= max + 1e-15);
        prop_assert!((0.0..=1.0).contains(&ma.acc));
    }

    #[test]
    fn merging_matches_one_pass(
        chunks in prop::collection::vec(prop::collection::vec((prop_oneof![0u8..8, Just(IGNORE)], 0u8..8), 0..50), 3),
    ) {
        let parts: Vec<ConfusionMatrix> = chunks.iter().map(|c| {
            let (t, p): (Vec<u8>, Vec<u8>) = c.iter().copied().unzip();
            let mut m = ConfusionMatrix::new();
            m.accumulate(&t, &p).unwrap();
            m
        }).collect();
        let mut left = parts[0].clone();
        left.merge(&parts[1]);
        left.merge(&parts[2]);
        let mut right = parts[1].clone();
        right.merge(&parts[2]);
        let mut right_all = parts[0].clone();
        right_all.merge(&right);
        prop_assert_eq!(&left, &right_all);
        let all: Vec<(u8, u8)> = chunks.concat();
        let (t, p): (Vec<u8>, Vec<u8>) = all.into_iter().unzip();
        let mut once = ConfusionMatrix::new();
        once.accumulate(&t, &p).unwrap();
        prop_assert_eq!(&once, &left);
    }

    #[test]
    fn mixed_labels_stay_on_the_simplex(
        classes in prop::collection::vec(0usize..8, 2..20),
        seed in any::<u64>(),
    ) {
        let n = classes.len();
        let y = Tensor::<f64>::from_rows(
            &classes.iter().map(|&c| (0..8).map(|k| if k == c { 1.0 } else { 0.0 }).collect()).collect::<Vec<_>>(),
        ).unwrap();
        let h = Tensor::<f64>::from_rows(&(0..n).map(|i| vec![i as f64, (i * i) as f64]).collect::<Vec<_>>()).unwrap();
        let mut rng = derive_rng(seed, 0);
        let (hm, ym, plan) = manifold_mixup(&h, &y, &vec![false; n], 2.0, &mut rng).unwrap();
        let plan = plan.unwrap();
        for i in 0..n {
            let row = ym.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            // the mixed feature lies on the segment between its two parents
            let (a, b) = (h.row(i), h.row(plan.perm[i]));
            for c in 0..2 {
                let expect = plan.lambda * a[c] + (1.0 - plan.lambda) * b[c];
                prop_assert!((hm.at(i, c) - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn mixing_endpoints_are_exact(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 2..10)) {
        let x = Tensor::<f64>::from_rows(&rows).unwrap();
        let n = rows.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let keep = mix_rows(&x, &MixPlan { lambda: 1.0, perm: perm.clone() }).unwrap();
        prop_assert_eq!(&keep, &x);
        let swap = mix_rows(&x, &MixPlan { lambda: 0.0, perm: perm.clone() }).unwrap();
        for i in 0..n {
            prop_assert_eq!(swap.row(i), x.row(perm[i]));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 8), 1..10)) {
        let p = softmax_rows(&Tensor::<f64>::from_rows(&rows).unwrap()).unwrap();
        for i in 0..rows.len() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_mean_is_linear(
        h in 1usize..5, w in 1usize..7, a in -3.0..3.0f64,
        seed in any::<u64>(),
    ) {
        prop_assume!(3 <= h.min(2 * w - 1));
        use rand::Rng as _;
        let mut rng = derive_rng(seed, 1);
        let mut rand_t = || Tensor::<f64>::new(vec![h * w, 2], (0..h * w * 2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (x, y) = (rand_t(), rand_t());
        let lhs = window_mean(&Tensor::new(vec![h * w, 2], x.data().iter().zip(y.data()).map(|(u, v)| a * u + v).collect()).unwrap(), h, w, 3).unwrap();
        let (wx, wy) = (window_mean(&x, h, w, 3).unwrap(), window_mean(&y, h, w, 3).unwrap());
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * wx.data()[i] + wy.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn every_point_lands_in_the_grid(x in -80.0..80.0f64, y in -80.0..80.0f64, z in -30.0..30.0f64) {
        let s = SensorSpec { height: 16, width: 128, fov_min_deg: -15.0, fov_max_deg: 15.0 };
        let (cell, r) = s.cell_of([x, y, z]);
        prop_assert!(cell < s.num_cells());
        prop_assert!(r >= 0.0);
    }

    #[test]
    fn batch_norm_output_is_standardized(
        (n, c) in (2usize..40, 1usize..5),
        seed in any::<u64>(),
        spread in 0.01..50.0f64,
        eps_on in any::<bool>(),
    ) {
        use rand::Rng as _;
        let mut rng = derive_rng(seed, 2);
        let x = Tensor::<f64>::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-spread..spread) + 3.0).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::new(vec![c], vec![1.0; c]).unwrap());
        let beta = g.constant(Tensor::new(vec![c], vec![0.0; c]).unwrap());
        let mut st = NormState::new(c);
        if !eps_on {
            st.eps = 0.0;
        }
        let eps = st.eps;
        let y = g.batch_norm(xv, gamma, beta, &mut st, Mode::Train).unwrap();
        let y = g.value(y);
        for j in 0..c {
            let col = |t: &Tensor<f64>| (0..n).map(|i| t.at(i, j)).collect::<Vec<_>>();
            let moments = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / n as f64;
                (m, v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64)
            };
            let (_, var_x) = moments(&col(&x));
            prop_assume!(var_x > 1e-8);
            let (mean, var) = moments(&col(y));
            prop_assert!(mean.abs() < 1e-10);
            // ε shrinks the variance to var/(var+ε)
            prop_assert!((var - var_x / (var_x + eps)).abs() < 1e-6);
        }
    }
}

fn arb_scan() -> impl Strategy<Value = PointScan> {
    let point = (
        prop::array::uniform3(-100.0f32..100.0),
        0.0f32..1.0,
        0.0f32..1.0,
        prop_oneof![0u8..8, Just(IGNORE)],
    );
    (prop::collection::vec(point, 1..64), any::<bool>()).prop_map(|(pts, ambient)| PointScan {
        xyz: pts.iter().map(|(p, ..)| p.map(f64::from)).collect(),
        intensity: pts.iter().map(|p| p.1 as f64).collect(),
        ambient: ambient.then(|| pts.iter().map(|p| p.2 as f64).collect()),
        labels: pts.iter().map(|p| p.3).collect(),
        dataset_id: 0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn saved_scans_load_back_bit_exact(scan in arb_scan()) {
        let dir = tempfile::tempdir().unwrap();
        let (bin, label) = (dir.path().join("s.bin"), dir.path().join("s.label"));
        save_scan(&scan, &bin, &label).unwrap();
        let entry = DatasetEntry::in_memory("x", 0, scan.ambient.is_some());
        let back = load_scan(&bin, Some(&label), &entry).unwrap();
        prop_assert_eq!(&back, &scan);
        let bytes = std::fs::read(&bin).unwrap();
        save_scan(&back, &bin, &label).unwrap();
        prop_assert_eq!(bytes, std::fs::read(&bin).unwrap());
    }
}
