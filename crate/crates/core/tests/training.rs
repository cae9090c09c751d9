mod common;

use common::{randn, rng};
use famlp_core::data::DomainSample;
use famlp_core::fft;
use famlp_core::model::{argmax, FamlpModel, ModelConfig};
use famlp_core::tensor::softmax_rows;
use famlp_core::training::{
    amplitude_mix, distill_loss, distill_loss_value, ema_blend, evaluate, fourier_augment, lr_at, rampup_weight,
    standard_augment, train, train_step, TeacherState, TrainConfig,
};
use famlp_core::{Graph, Tensor};
use indexmap::IndexMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_map(v: f64) -> IndexMap<String, Tensor> {
    IndexMap::from([("w".to_string(), Tensor::scalar(v))])
}

fn toy_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<DomainSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| DomainSample {
            image: common::random_image(cfg, &mut r),
            label: i % cfg.num_classes,
            domain: ["a", "b"][i % 2].to_string(),
        })
        .collect()
}

#[test]
fn ema_edge_cases_and_paper_momentum() {
    let mut t = scalar_map(0.3);
    ema_blend(&mut t, &scalar_map(0.7), 0.0).unwrap();
    assert_eq!(t["w"].data(), &[0.7]);
    ema_blend(&mut t, &scalar_map(-5.0), 1.0).unwrap();
    assert_eq!(t["w"].data(), &[0.7]);

    let mut t = scalar_map(0.0);
    ema_blend(&mut t, &scalar_map(1.0), 0.9995).unwrap();
    assert!((t["w"].data()[0] - 0.0005).abs() < 1e-15);

    let mut bad = IndexMap::from([("v".to_string(), Tensor::scalar(0.0))]);
    assert!(ema_blend(&mut bad, &scalar_map(1.0), 0.5).is_err());
    let mut wrong_shape = IndexMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
    assert!(ema_blend(&mut wrong_shape, &scalar_map(1.0), 0.5).is_err());
}

#[test]
fn teacher_converges_geometrically_to_frozen_student() {
    let cfg = common::small_config();
    let student = {
        let mut m = FamlpModel::new(cfg.clone(), 1).unwrap();
        common::randomize(&mut m, 2);
        m
    };
    let mut start = FamlpModel::new(cfg, 3).unwrap();
    common::randomize(&mut start, 4);
    let eta = 0.9;
    let mut teacher = TeacherState::new(&start, eta).unwrap();
    let probe = |m: &FamlpModel| m.named_parameters().iter().map(|(_, t)| t.data()[0]).collect::<Vec<_>>();
    let target = probe(&student);
    let mut prev: Vec<f64> = probe(teacher.model()).iter().zip(&target).map(|(a, b)| a - b).collect();
    for _ in 0..100 {
        teacher.ema_update(&student).unwrap();
        let err: Vec<f64> = probe(teacher.model()).iter().zip(&target).map(|(a, b)| a - b).collect();
        for (e, p) in err.iter().zip(&prev) {
            // Ratios are only informative while the error is well above rounding.
            if p.abs() > 1e-3 {
                assert!((e / p - eta).abs() <= 1e-12, "ratio {}", e / p);
            }
        }
        prev = err;
    }
    assert_eq!(teacher.step, 100);
}

#[test]
fn teacher_is_a_convex_combination_of_history() {
    // Scalar probe: track the mixing weights explicitly.
    let mut rng = rng(5);
    let eta = 0.7;
    let mut t = scalar_map(rng.gen_range(-1.0..1.0));
    let init = t["w"].data()[0];
    let mut weights = vec![1.0];
    let mut history = vec![init];
    for _ in 0..20 {
        let s = rng.gen_range(-1.0..1.0);
        ema_blend(&mut t, &scalar_map(s), eta).unwrap();
        weights.iter_mut().for_each(|w| *w *= eta);
        weights.push(1.0 - eta);
        history.push(s);
    }
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let combo: f64 = weights.iter().zip(&history).map(|(w, v)| w * v).sum();
    assert!((combo - t["w"].data()[0]).abs() < 1e-12);
}

#[test]
fn teacher_parameters_never_receive_gradients() {
    let cfg = common::small_config();
    let mut model = FamlpModel::new(cfg.clone(), 6).unwrap();
    let mut teacher = TeacherState::new(&model, 0.99).unwrap();
    let samples = toy_samples(&cfg, 6, 7);
    let batch: Vec<&DomainSample> = samples.iter().collect();
    let config = TrainConfig { rampup_epochs: 0, ..TrainConfig::default() };
    let mut r = ChaCha8Rng::seed_from_u64(8);
    train_step(&mut model, Some(&mut teacher), &batch, &config, 0, &mut r).unwrap();
    assert!(teacher.model().named_parameters().iter().all(|(_, t)| t.grad().is_none()));
    assert!(model.named_parameters().iter().all(|(_, t)| t.grad().is_none()));
}

#[test]
fn distillation_loss_contracts() {
    let mut r = rng(9);
    let s = randn(&[4, 7], &mut r);
    assert_eq!(distill_loss_value(&s, &s, 10.0).unwrap(), 0.0);
    let t = randn(&[4, 7], &mut r);
    assert!(distill_loss_value(&s, &t, 1000.0).unwrap() <= 1e-6);
    assert!(distill_loss_value(&s, &t, 0.0).is_err());

    // Σ p_s (ln p_s − ln p_t) at τ = 10, computed directly.
    let oracle: f64 = (0..4)
        .map(|i| {
            let row = |x: &Tensor| {
                let r: Vec<f64> = x.data()[i * 7..(i + 1) * 7].iter().map(|v| v / 10.0).collect();
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
                r.iter().map(|v| v - m - z.ln()).collect::<Vec<f64>>()
            };
            let (ls, lt) = (row(&s), row(&t));
            ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / 4.0;
    assert!((distill_loss_value(&s, &t, 10.0).unwrap() - oracle).abs() <= 1e-9);

    let mut g = Graph::new();
    let sv = g.param(&s);
    let tv = g.param(&t);
    let l = distill_loss(&mut g, sv, tv, 10.0).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(sv).is_some());
    assert!(g.grad(tv).is_none(), "teacher logits must be detached");
}

#[test]
fn zero_distillation_weight_is_pure_cross_entropy() {
    let cfg = common::small_config();
    let samples = toy_samples(&cfg, 5, 10);
    let batch: Vec<&DomainSample> = samples.iter().collect();
    let config = TrainConfig { lambda_md: 0.0, ..TrainConfig::default() };
    let mut model = FamlpModel::new(cfg.clone(), 11).unwrap();
    let mut teacher = TeacherState::new(&model, config.eta).unwrap();
    let rep = train_step(&mut model, Some(&mut teacher), &batch, &config, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(rep.loss_all, rep.loss_c);
    assert!(rep.loss_md > 0.0, "distillation is still measured");
}

#[test]
fn identical_views_give_zero_distillation() {
    let cfg = common::small_config();
    let model = FamlpModel::new(cfg.clone(), 12).unwrap();
    let teacher = TeacherState::new(&model, 0.9995).unwrap();
    let samples = toy_samples(&cfg, 4, 13);
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let s_logits: Vec<f64> = model.logits_many(&imgs).unwrap().into_iter().flat_map(Tensor::into_data).collect();
    let t_logits: Vec<f64> = teacher.model().logits_many(&imgs).unwrap().into_iter().flat_map(Tensor::into_data).collect();
    let k = cfg.num_classes;
    let s = Tensor::new(vec![4, k], s_logits).unwrap();
    let t = Tensor::new(vec![4, k], t_logits).unwrap();
    assert_eq!(distill_loss_value(&s, &t, 10.0).unwrap(), 0.0);
}

#[test]
fn one_step_descends_on_the_batch() {
    let cfg = ModelConfig { aff_enabled: false, lre_enabled: false, ..common::small_config() };
    let samples = toy_samples(&cfg, 8, 14);
    let batch: Vec<&DomainSample> = samples.iter().collect();
    let config = TrainConfig { mus_enabled: false, lr: 1e-3, ..TrainConfig::default() };
    let mut model = FamlpModel::new(cfg.clone(), 15).unwrap();
    let ce = |m: &FamlpModel| {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let imgs: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let logits = b.forward_batch(&mut g, &imgs).unwrap();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let l = g.cross_entropy(logits, &labels).unwrap();
        g.value(l).data()[0]
    };
    // Descent is checked against the unaugmented batch, so the step sees it too.
    let before = ce(&model);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true).unwrap();
    let imgs: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let logits = bound.forward_batch(&mut g, &imgs).unwrap();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let loss = g.cross_entropy(logits, &labels).unwrap();
    g.backward(loss).unwrap();
    model.accumulate_grads(&g, &bound).unwrap();
    famlp_core::training::Sgd { lr: config.lr, weight_decay: config.weight_decay }.step(&mut model);
    assert!(ce(&model) < before);
}

#[test]
fn schedules() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, &c), 0.001);
    assert_eq!(lr_at(39, &c), 0.001);
    assert!((lr_at(40, &c) - 0.0001).abs() < 1e-18);
    assert!((rampup_weight(0, 5) - (-5f64).exp()).abs() < 1e-15);
    assert!((rampup_weight(0, 5) - 0.00674).abs() < 1e-5);
    assert_eq!(rampup_weight(5, 5), 1.0);
    assert_eq!(rampup_weight(50, 5), 1.0);
    let w: Vec<f64> = (0..=5).map(|e| rampup_weight(e, 5)).collect();
    assert!(w.windows(2).all(|p| p[0] <= p[1]));
}

#[test]
fn defaults_follow_the_published_setup() {
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.lr_decay_epoch, c.lr_decay_factor), (0.001, 40, 0.1));
    assert_eq!((c.weight_decay, c.eta, c.tau_md, c.lambda_md), (5e-4, 0.9995, 10.0, 2.0));
    assert_eq!((c.rampup_epochs, c.aug_strength), (5, 1.0));
    let mut c = TrainConfig::default();
    assert!(c.set("eta", "1.5", "train.").is_ok() && c.validate().is_err());
    assert!(c.set("tau_r", "0.5", "train.").is_ok());
    assert!(c.set("momentum", "0.9", "train.").is_err());
}

#[test]
fn amplitude_mix_oracles() {
    let mut r = rng(16);
    let x = Tensor::from_fn(&[2, 8, 8], |_| r.gen_range(0.0..1.0));
    let other = Tensor::from_fn(&[2, 8, 8], |_| r.gen_range(0.0..1.0));
    assert_eq!(amplitude_mix(&x, &other, 0.0).unwrap(), x);
    assert!(amplitude_mix(&x, &x, 0.73).unwrap().max_abs_diff(&x) <= 1e-12);

    // A delta image has a flat unit spectrum.
    let mut delta = Tensor::zeros(&[1, 8, 8]);
    delta.data_mut()[0] = 1.0;
    let single = Tensor::from_fn(&[1, 8, 8], |i| x.data()[i]);
    let out = amplitude_mix(&single, &delta, 1.0).unwrap();
    let amp = fft::amplitude(&fft::fft2(&out.reshape(&[8, 8]).unwrap()).unwrap());
    let src = fft::fft2(&single.reshape(&[8, 8]).unwrap()).unwrap();
    for (i, a) in amp.data().iter().enumerate() {
        // Bins where x has no energy carry no phase to keep.
        if fft::amplitude(&src).data()[i] > 1e-9 {
            assert!((a - 1.0).abs() <= 1e-8, "bin {i}: {a}");
        }
    }
    let phase_in = fft::phase(&src);
    let phase_out = fft::phase(&fft::fft2(&out.reshape(&[8, 8]).unwrap()).unwrap());
    for i in 0..64 {
        let d = (phase_in.data()[i] - phase_out.data()[i]).rem_euclid(2.0 * std::f64::consts::PI);
        assert!(d.min(2.0 * std::f64::consts::PI - d) <= 1e-8);
    }
    assert!(amplitude_mix(&x, &delta, 0.5).is_err());
}

#[test]
fn zero_strength_is_standard_augmentation() {
    let mut r = rng(17);
    let x = Tensor::from_fn(&[1, 8, 8], |_| r.gen_range(0.0..1.0));
    let other = Tensor::from_fn(&[1, 8, 8], |_| r.gen_range(0.0..1.0));
    let a = fourier_augment(&x, &other, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = standard_augment(&x, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert!(fourier_augment(&x, &other, 1.5, &mut r).is_err());
}

#[test]
fn training_is_bit_deterministic() {
    let cfg = common::small_config();
    let samples = toy_samples(&cfg, 12, 18);
    let config = TrainConfig { epochs: 2, batch_size: 4, eta: 0.9, ..TrainConfig::default() };
    let run = || {
        let mut model = FamlpModel::new(cfg.clone(), 19).unwrap();
        let out = train(&mut model, &samples, &config, &mut ()).unwrap();
        (out.final_loss, model)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ma, mb);
    assert!(evaluate(&ma, &samples).unwrap() >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softening_keeps_the_argmax(seed in any::<u64>(), tau in 0.5f64..100.0) {
        let x = randn(&[3, 6], &mut rng(seed));
        let p = softmax_rows(&x, tau).unwrap();
        for i in 0..3 {
            prop_assert_eq!(argmax(&x.data()[i * 6..(i + 1) * 6]), argmax(&p.data()[i * 6..(i + 1) * 6]));
        }
    }

    #[test]
    fn distillation_is_nonnegative(seed in any::<u64>(), tau in 0.1f64..50.0, scale in 0.1f64..20.0) {
        let mut r = rng(seed);
        let s = randn(&[3, 5], &mut r).map(|v| v * scale);
        let t = randn(&[3, 5], &mut r).map(|v| v * scale);
        prop_assert!(distill_loss_value(&s, &t, tau).unwrap() >= 0.0);
    }

    #[test]
    fn rampup_stays_in_unit_interval(epoch in 0usize..100, len in 0usize..20) {
        let w = rampup_weight(epoch, len);
        prop_assert!(w > 0.0 && w <= 1.0);
        if epoch >= len {
            prop_assert_eq!(w, 1.0);
        }
    }

    #[test]
    fn ema_stays_between_endpoints(a in -5.0f64..5.0, b in -5.0f64..5.0, eta in 0.0f64..=1.0) {
        let mut t = scalar_map(a);
        ema_blend(&mut t, &scalar_map(b), eta).unwrap();
        let v = t["w"].data()[0];
        prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
    }
}
