use super::*;
use crate::rng::Rng;
use rand::Rng as _;

pub(crate) fn tiny_config(ppt: bool) -> ModelConfig {
    ModelConfig {
        num_datasets: 2,
        ppt,
        ctx_dim: 4,
        seed: 7,
        extractor: ExtractorConfig {
            point_dim: 8,
            embed_dim: 8,
            window: 3,
            rounds: 2,
        },
        head: HeadConfig {
            width: 8,
            expansion: 2,
            ambient_dim: 2,
            ..HeadConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub(crate) fn tiny_sensor() -> SensorSpec {
    SensorSpec {
        height: 4,
        width: 16,
        fov_min_deg: -20.0,
        fov_max_deg: 20.0,
    }
}

pub(crate) fn random_scan(n: usize, dataset_id: usize, rng: &mut Rng) -> PointScan {
    let xyz = (0..n)
        .map(|_| {
            [
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-2.0..2.0),
            ]
        })
        .collect();
    PointScan {
        xyz,
        intensity: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        ambient: Some((0..n).map(|_| rng.random_range(0.0..1.0)).collect()),
        labels: (0..n).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect(),
        dataset_id,
    }
}

fn input_of(scan: &PointScan) -> ModelInput {
    ModelInput::new(&[(scan, &tiny_sensor())]).unwrap()
}

fn randomize_generators(m: &mut Model<f64>, rng: &mut Rng) {
    for p in m.store_mut().params_mut() {
        if p.name.contains("_gen.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

#[test]
fn single_point_scan_has_one_embedding_row() {
    let mut rng = crate::rng::derive_rng(1, 0);
    let m = Model::<f64>::new(tiny_config(true)).unwrap();
    let scan = random_scan(1, 0, &mut rng);
    let e = m.extract(&input_of(&scan), Mode::Eval).unwrap();
    assert_eq!(e.shape(), &[1, 8]);
    let (cls, probs) = m.predict(&input_of(&scan)).unwrap();
    assert_eq!((cls.len(), probs.shape()), (1, &[1usize, 8][..]));
}

#[test]
fn zero_generators_match_plain_normalization() {
    let mut rng = crate::rng::derive_rng(2, 0);
    let with = Model::<f64>::new(tiny_config(true)).unwrap();
    let without = Model::<f64>::new(tiny_config(false)).unwrap();
    for ds in 0..2 {
        let scan = random_scan(40, ds, &mut rng);
        let a = with.logits(&input_of(&scan)).unwrap();
        let b = without.logits(&input_of(&scan)).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn contexts_change_output_once_generators_are_nonzero() {
    let mut rng = crate::rng::derive_rng(3, 0);
    let mut m = Model::<f64>::new(tiny_config(true)).unwrap();
    randomize_generators(&mut m, &mut rng);
    let mut scan = random_scan(30, 0, &mut rng);
    let a = m.logits(&input_of(&scan)).unwrap();
    scan.dataset_id = 1;
    let b = m.logits(&input_of(&scan)).unwrap();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6);
    scan.dataset_id = 2;
    assert!(matches!(
        m.logits(&input_of(&scan)),
        Err(Error::UnknownDataset { id: 2, count: 2 })
    ));
}

#[test]
fn extractor_is_permutation_equivariant() {
    let mut rng = crate::rng::derive_rng(4, 0);
    let mut m = Model::<f64>::new(tiny_config(true)).unwrap();
    randomize_generators(&mut m, &mut rng);
    let scan = random_scan(50, 1, &mut rng);
    let mut perm: Vec<usize> = (0..50).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
    let permuted = PointScan {
        xyz: perm.iter().map(|&i| scan.xyz[i]).collect(),
        intensity: perm.iter().map(|&i| scan.intensity[i]).collect(),
        ambient: scan.ambient.as_ref().map(|a| perm.iter().map(|&i| a[i]).collect()),
        labels: perm.iter().map(|&i| scan.labels[i]).collect(),
        dataset_id: 1,
    };
    for mode in [Mode::Train, Mode::Eval] {
        let a = m.extract(&input_of(&scan), mode).unwrap();
        let b = m.extract(&input_of(&permuted), mode).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for (x, y) in b.row(row).iter().zip(a.row(src)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn duplicated_points_share_embeddings() {
    let mut rng = crate::rng::derive_rng(5, 0);
    let m = Model::<f64>::new(tiny_config(true)).unwrap();
    let mut scan = random_scan(20, 0, &mut rng);
    scan.xyz.push(scan.xyz[3]);
    scan.intensity.push(scan.intensity[3]);
    scan.ambient.as_mut().unwrap().push(0.9);
    scan.labels.push(1);
    let e = m.extract(&input_of(&scan), Mode::Train).unwrap();
    assert_eq!(e.row(3), e.row(20));
}

#[test]
fn ambient_block_is_linear_and_zero_for_zero_input() {
    let mut rng = crate::rng::derive_rng(6, 0);
    let m = Model::<f64>::new(tiny_config(true)).unwrap();
    let embed = params::normal::<f64>(5, 8, 1.0, &mut rng);
    let a: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
    let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
    let out0 = m.inject_ambient(&embed, &[0.0; 5]).unwrap();
    let out1 = m.inject_ambient(&embed, &a).unwrap();
    let out2 = m.inject_ambient(&embed, &a2).unwrap();
    assert_eq!(out0.shape(), &[5, 10]);
    for r in 0..5 {
        assert_eq!(&out0.row(r)[..8], embed.row(r));
        assert_eq!(&out0.row(r)[8..], &[0.0, 0.0]);
        for c in 8..10 {
            let lhs = out2.at(r, c) - out1.at(r, c);
            let rhs = out1.at(r, c) - out0.at(r, c);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
    assert!(m.inject_ambient(&embed, &[0.0; 4]).is_err());

    let mut cfg = tiny_config(true);
    cfg.head.ambient_dim = 0;
    let m0 = Model::<f64>::new(cfg).unwrap();
    assert_eq!(m0.inject_ambient(&embed, &a).unwrap(), embed);
}

#[test]
fn head_shapes_and_softmax_rows() {
    let mut rng = crate::rng::derive_rng(8, 0);
    let m = Model::<f64>::new(tiny_config(true)).unwrap();
    for n in [1, 3, 17] {
        let feats = params::normal::<f64>(n, 10, 1.0, &mut rng);
        let logits = m.head_logits(&feats, 0, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[n, 8]);
        let p = softmax_rows(&logits).unwrap();
        for r in 0..n {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn predict_is_deterministic_and_shift_invariant() {
    let mut rng = crate::rng::derive_rng(9, 0);
    let m = Model::<f64>::new(tiny_config(true)).unwrap();
    let scan = random_scan(40, 1, &mut rng);
    let (c1, p1) = m.predict(&input_of(&scan)).unwrap();
    let (c2, p2) = m.predict(&input_of(&scan)).unwrap();
    assert_eq!((&c1, &p1), (&c2, &p2));
    assert_eq!(c1, argmax_rows(&p1));
    let logits = m.logits(&input_of(&scan)).unwrap();
    let shifted = logits.map(|v| v + 123.0);
    assert_eq!(argmax_rows(&shifted), argmax_rows(&logits));
}

#[test]
fn random_model_is_at_chance_on_balanced_labels() {
    let mut rng = crate::rng::derive_rng(10, 0);
    let mut cfg = tiny_config(true);
    cfg.seed = 99;
    let m = Model::<f64>::new(cfg).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for _ in 0..20 {
        let mut scan = random_scan(500, 0, &mut rng);
        for (i, l) in scan.labels.iter_mut().enumerate() {
            *l = (i % NUM_CLASSES) as u8;
        }
        // labels independent of geometry: shuffle them
        rand::seq::SliceRandom::shuffle(&mut scan.labels[..], &mut rng);
        let (pred, _) = m.predict(&input_of(&scan)).unwrap();
        hit += pred.iter().zip(&scan.labels).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    let acc = hit as f64 / total as f64;
    assert_eq!(total, 10_000);
    assert!((acc - 0.125).abs() < 0.05, "{acc}");
}

/// Loss with a fixed mixing plan, so finite differences see a deterministic function.
fn fixed_loss(m: &mut Model<f64>, input: &ModelInput, plan: Option<&MixPlan>) -> (f64, Vec<Option<Tensor<f64>>>) {
    let rows = input.labeled_rows();
    let mut targets = Tensor::<f64>::zeros(&[rows.len(), NUM_CLASSES]);
    for (i, &r) in rows.iter().enumerate() {
        targets.data_mut()[i * NUM_CLASSES + input.labels[r] as usize] = 1.0;
    }
    if let Some(p) = plan {
        targets = mix_rows(&targets, p).unwrap();
    }
    let mut g = Graph::new();
    let out = m.forward(&mut g, input, Mode::Train, Some(&rows), plan).unwrap();
    let loss = g
        .softmax_cross_entropy(out.logits, targets.data(), &vec![false; rows.len()])
        .unwrap();
    g.backward(loss).unwrap();
    let grads = out.params.iter().map(|&v| g.grad(v).cloned()).collect();
    (g.value(loss).data()[0], grads)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = crate::rng::derive_rng(11, 0);
    let mut m = Model::<f64>::new(tiny_config(true)).unwrap();
    randomize_generators(&mut m, &mut rng);
    let mut a = random_scan(20, 0, &mut rng);
    let b = random_scan(12, 1, &mut rng);
    a.labels[0] = IGNORE;
    let input = ModelInput::new(&[(&a, &tiny_sensor()), (&b, &tiny_sensor())]).unwrap();
    let n = input.labeled_rows().len();
    let plan = MixPlan {
        lambda: 0.3,
        perm: (0..n).rev().collect(),
    };
    let (_, grads) = fixed_loss(&mut m, &input, Some(&plan));
    let h = 1e-5;
    for (pi, grad) in grads.iter().enumerate() {
        let name = m.store().params()[pi].name.clone();
        let analytic = grad.as_ref().unwrap().data().to_vec();
        let mut num = vec![0.0; analytic.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = m.store().params()[pi].value.data()[j];
            m.store_mut().params_mut()[pi].value.data_mut()[j] = orig + h;
            let up = fixed_loss(&mut m, &input, Some(&plan)).0;
            m.store_mut().params_mut()[pi].value.data_mut()[j] = orig - h;
            let down = fixed_loss(&mut m, &input, Some(&plan)).0;
            m.store_mut().params_mut()[pi].value.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|x| x * x).sum::<f64>().sqrt() + num.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a bias feeding straight into batch norm has an exactly zero gradient,
        // so floor the denominator instead of dividing noise by noise
        let rel = diff / scale.max(1e-5);
        assert!(rel < 1e-4, "{name}: relative error {rel}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = crate::rng::derive_rng(12, 0);
    let mut m = Model::<f64>::new(tiny_config(true)).unwrap();
    randomize_generators(&mut m, &mut rng);
    m.store_mut().get_mut("extractor.fuse.bias").unwrap().frozen = true;
    let scan = random_scan(30, 0, &mut rng);
    let mut g = Graph::new();
    m.forward(&mut g, &input_of(&scan), Mode::Train, None, None).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back: Model<f64> = read_checkpoint(&mut &bytes[..]).unwrap();
    assert_eq!(back, m);
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(again, bytes);

    assert!(read_checkpoint::<f64>(&mut &bytes[..bytes.len() - 3]).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(read_checkpoint::<f64>(&mut &wrong[..]), Err(Error::Format { .. })));
}

#[test]
fn train_forward_updates_only_unfrozen_norm_stats() {
    let mut rng = crate::rng::derive_rng(13, 0);
    let mut m = Model::<f64>::new(tiny_config(true)).unwrap();
    m.store_mut().get_mut("extractor.fuse_pn.norm.gamma").unwrap().frozen = true;
    let before = m.store().buffers().clone();
    let scan = random_scan(30, 0, &mut rng);
    let mut g = Graph::new();
    m.forward(&mut g, &input_of(&scan), Mode::Train, None, None).unwrap();
    let after = m.store().buffers();
    assert_eq!(before["extractor.fuse_pn.norm"], after["extractor.fuse_pn.norm"]);
    assert_ne!(before["head.expand_pn.norm"], after["head.expand_pn.norm"]);
}

#[test]
fn every_tensor_registered_once() {
    let m = Model::<f64>::new(tiny_config(true)).unwrap();
    let mut names: Vec<_> = m.store().params().iter().map(|p| p.name.clone()).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
    assert!(names.iter().any(|n| n == "ctx_table"));
    let plain = Model::<f64>::new(tiny_config(false)).unwrap();
    assert!(plain.store().params().iter().all(|p| !p.name.contains("_gen") && p.name != "ctx_table"));
}
