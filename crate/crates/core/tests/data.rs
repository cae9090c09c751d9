use std::collections::HashSet;

use famlp_core::data::{
    batch_iter, epoch_order, gaussian_blur, generate_synthetic, import_folder_tree, leave_one_domain_out,
    load_dataset, phase_jitter, render_class, save_dataset, Domain, MultiDomainDataset, SplitSpec,
    SyntheticConfig,
};
use famlp_core::fft;
use famlp_core::tensor::write_tensor;
use famlp_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> SyntheticConfig {
    SyntheticConfig {
        num_classes: 4,
        per_domain_per_class: 9,
        image_size: 16,
        ..SyntheticConfig::default()
    }
}

/// Mean amplitude over bins whose wrapped radius is in the top quarter.
fn high_band_energy(img: &Tensor) -> f64 {
    let n = img.shape()[1];
    let plane = img.reshape(&[img.shape()[0] * n, n]).unwrap();
    let amp = fft::amplitude(&fft::fft2(&Tensor::from_fn(&[n, n], |i| plane.data()[i])).unwrap());
    let half = n as f64 / 2.0;
    let mut acc = (0.0, 0usize);
    for u in 0..n {
        for v in 0..n {
            let (a, b) = (u.min(n - u) as f64 / half, v.min(n - v) as f64 / half);
            if ((a * a + b * b) / 2.0).sqrt() >= 0.75 {
                acc.0 += amp.data()[u * n + v];
                acc.1 += 1;
            }
        }
    }
    acc.0 / acc.1 as f64
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let a = generate_synthetic(&small()).unwrap();
    let b = generate_synthetic(&small()).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SyntheticConfig { seed: 2, ..small() }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn every_cell_is_full_and_pixels_in_range() {
    let ds = generate_synthetic(&small()).unwrap();
    assert_eq!(ds.domain_names(), ["clean", "lowpass", "highpass", "phasejitter"]);
    assert_eq!(ds.class_counts(), vec![vec![9; 4]; 4]);
    for (name, samples) in ds.domains() {
        for s in samples {
            assert_eq!(s.domain, name);
            assert_eq!(s.image.shape(), [1, 16, 16]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    let tiny = SyntheticConfig { num_classes: 1, ..small() };
    assert!(generate_synthetic(&tiny).is_err());
}

#[test]
fn lowpass_domain_has_less_high_frequency_energy() {
    let ds = generate_synthetic(&SyntheticConfig { per_domain_per_class: 20, ..small() }).unwrap();
    let mean = |d: &str| {
        let s = ds.domain(d).unwrap();
        s.iter().map(|x| high_band_energy(&x.image)).sum::<f64>() / s.len() as f64
    };
    assert!(mean("lowpass") <= mean("clean"), "{} vs {}", mean("lowpass"), mean("clean"));
    assert!(mean("highpass") >= mean("lowpass"));
}

#[test]
fn blur_shrinks_high_band_of_each_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for c in 0..7 {
        let img = render_class(c, 32, 1, &mut rng);
        assert!(high_band_energy(&gaussian_blur(&img, 1.5)) <= high_band_energy(&img));
    }
}

#[test]
fn phase_jitter_keeps_dc_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = render_class(3, 16, 1, &mut rng);
    let out = phase_jitter(&img, 1.0, &mut rng);
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(out, img);
    assert_eq!("phasejitter".parse::<Domain>().unwrap(), Domain::PhaseJitter);
}

#[test]
fn split_excludes_held_out_domain_and_stratifies() {
    let ds = generate_synthetic(&small()).unwrap();
    let spec = SplitSpec {
        held_out_domain: "highpass".into(),
        train_fraction: 0.8,
        seed: 5,
    };
    let split = leave_one_domain_out(&ds, &spec).unwrap();
    assert!(split.train.iter().chain(&split.val).all(|s| s.domain != "highpass"));
    assert!(split.test.iter().all(|s| s.domain == "highpass"));
    assert_eq!(split.test.len(), 36);
    for d in ["clean", "lowpass", "phasejitter"] {
        for c in 0..4 {
            let n = split.train.iter().filter(|s| s.domain == d && s.label == c).count();
            assert!((n as f64 - 0.8 * 9.0).abs() <= 1.0, "{d}/{c}: {n}");
        }
    }
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), ds.len());

    // Every sample lands exactly once; images are distinct enough to key on.
    let key = |s: &famlp_core::data::DomainSample| {
        (s.domain.clone(), s.label, s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    let all: HashSet<_> = split.train.iter().chain(&split.val).chain(&split.test).map(key).collect();
    assert_eq!(all.len(), ds.len());

    let again = leave_one_domain_out(&ds, &spec).unwrap();
    assert_eq!(again.train, split.train);
    let bad = SplitSpec { held_out_domain: "sketch".into(), ..spec.clone() };
    assert!(leave_one_domain_out(&ds, &bad).is_err());
    assert!(leave_one_domain_out(&ds, &SplitSpec { train_fraction: 1.5, ..spec }).is_err());
}

#[test]
fn batches_reshuffle_per_epoch_and_replay_per_seed() {
    assert_ne!(epoch_order(50, 1, 0), epoch_order(50, 1, 1));
    assert_eq!(epoch_order(50, 1, 3), epoch_order(50, 1, 3));
    let a: Vec<Vec<usize>> = batch_iter(50, 16, 2, 0).collect();
    let b: Vec<Vec<usize>> = batch_iter(50, 16, 2, 0).collect();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), [16, 16, 16, 2]);
}

#[test]
fn save_load_roundtrip_is_exact() {
    let ds = generate_synthetic(&SyntheticConfig { channels: 3, ..small() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let text = std::fs::read_to_string(dir.path().join("dataset.txt")).unwrap();
    assert!(text.starts_with(famlp_core::data::DATASET_HEADER));
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    assert!(load_dataset(dir.path().join("missing")).is_err());
}

#[test]
fn folder_tree_import_orders_by_name() {
    let root = tempfile::tempdir().unwrap();
    let mut expected = Vec::new();
    for (d, domain) in ["art", "photo"].iter().enumerate() {
        for (c, class) in ["cat", "dog"].iter().enumerate() {
            let dir = root.path().join(domain).join(class);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..2 {
                let v = (d * 4 + c * 2 + i) as f64 / 10.0;
                write_tensor(dir.join(format!("{i}.famt")), &Tensor::full(&[1, 4, 4], v)).unwrap();
                expected.push((domain.to_string(), c, v));
            }
            std::fs::write(dir.join("notes.txt"), "ignored").unwrap();
        }
    }
    let ds: MultiDomainDataset = import_folder_tree(root.path()).unwrap();
    assert_eq!((ds.num_classes(), ds.channels(), ds.image_size()), (2, 1, 4));
    let got: Vec<(String, usize, f64)> = ds
        .domains()
        .flat_map(|(_, s)| s.iter().map(|x| (x.domain.clone(), x.label, x.image.data()[0])))
        .collect();
    assert_eq!(got, expected);

    write_tensor(root.path().join("art/cat/bad.famt"), &Tensor::zeros(&[1, 5, 5])).unwrap();
    assert!(import_folder_tree(root.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_partition_indices(n in 0usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0usize..10) {
        let mut seen: Vec<usize> = batch_iter(n, bs, seed, epoch).flatten().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn split_preserves_labels(seed in any::<u64>(), frac in 0.0f64..=1.0, held in 0usize..4) {
        let ds = generate_synthetic(&SyntheticConfig { per_domain_per_class: 3, num_classes: 3, image_size: 8, ..small() }).unwrap();
        let name = ds.domain_names()[held].to_string();
        let split = leave_one_domain_out(&ds, &SplitSpec { held_out_domain: name.clone(), train_fraction: frac, seed }).unwrap();
        let count = |v: &[famlp_core::data::DomainSample], c: usize| v.iter().filter(|s| s.label == c).count();
        for c in 0..3 {
            prop_assert_eq!(count(&split.train, c) + count(&split.val, c), 9);
            prop_assert_eq!(count(&split.test, c), 3);
        }
        prop_assert!(split.train.iter().all(|s| s.domain != name));
    }
}
