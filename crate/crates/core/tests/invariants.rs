use proptest::prelude::*;

use protoquad::bank::{AnchorSign, BankConfig, PrototypeBank, SmoothingKernel};
use protoquad::extractor::{select_freeze_mask, sgd_step, Mlp, MlpGrads, SgdConfig};
use protoquad::sampler::{make_session_stream, sample_episode, EpisodeConfig, StreamSpec};
use protoquad::Rng;

fn kernel(choice: u8, bandwidth: f64) -> SmoothingKernel {
    match choice % 3 {
        0 => SmoothingKernel::delta(),
        1 => SmoothingKernel::uniform(),
        _ => SmoothingKernel::gaussian(bandwidth),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernel_weights_normalise(n in 1usize..12, choice in 0u8..3, bw in 0.2f64..5.0) {
        let w = kernel(choice, bw).weights(n);
        prop_assert_eq!(w.len(), n);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn footprints_fixed_and_depth_bounded(
        seed in any::<u64>(),
        schedule in prop::collection::vec(1usize..5, 1..4),
        classes in prop::collection::vec(1usize..4, 1..4),
        rounds in 1usize..8,
        momentum in 0.0f64..1.0,
        choice in 0u8..3,
        attract in any::<bool>(),
    ) {
        let cfg = BankConfig {
            b_max: 4,
            b_schedule: Some(schedule),
            ema_momentum: momentum,
            kernel: kernel(choice, 1.0),
            anchor_sign: if attract { AnchorSign::Attract } else { AnchorSign::Literal },
            ..BankConfig::default()
        };
        let mut rng = Rng::new(seed, 0);
        let mut bank = PrototypeBank::new(4);
        let mut id = 0;
        let mut footprints = Vec::new();
        for (s, &n) in classes.iter().enumerate() {
            for _ in 0..n {
                let p: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                footprints.push(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
                bank.insert(id, s + 1, p, &cfg).unwrap();
                id += 1;
            }
            bank.begin_epoch();
            for _ in 0..rounds {
                bank.calibrate_and_update(&cfg).unwrap();
                for c in bank.classes() {
                    prop_assert!(c.copies().len() <= c.depth());
                    prop_assert_eq!(c.depth(), cfg.depth_for_session(c.session_created));
                    prop_assert!(c.newest().iter().all(|x| x.is_finite()));
                }
            }
        }
        for (c, f) in bank.classes().iter().zip(&footprints) {
            let bits: Vec<u64> = c.footprint().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(&bits, f);
        }
        let budget = bank.memory_budget();
        let cap: usize = bank.classes().iter().map(|c| c.depth()).sum();
        prop_assert!(budget.vectors <= cap);
        prop_assert_eq!(budget.stat_means, budget.vectors);
    }

    #[test]
    fn freeze_mask_keeps_frozen_parameters(seed in any::<u64>(), fraction in 0.01f64..1.0) {
        let mut rng = Rng::new(seed, 0);
        let mut mlp = Mlp::init(&[5, 9, 4], &mut rng).unwrap();
        let mask = select_freeze_mask(&mlp, fraction).unwrap();
        for (layer, m) in mlp.layers().iter().zip(&mask.layers) {
            let want = (fraction * layer.param_count() as f64).round() as usize;
            prop_assert_eq!(m.iter().filter(|&&t| t).count(), want);
        }
        let before = mlp.clone();
        let mut grads = MlpGrads::zeros_like(&mlp);
        for l in &mut grads.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|g| *g = rng.normal());
            l.bias.iter_mut().for_each(|g| *g = rng.normal());
        }
        sgd_step(&mut mlp, &grads, &mask, 0, &SgdConfig::constant(0.5)).unwrap();
        for ((a, b), m) in before.layers().iter().zip(mlp.layers()).zip(&mask.layers) {
            for ((x, y), &t) in a.params().zip(b.params()).zip(m) {
                if !t {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn episodes_respect_their_contract(
        seed in any::<u64>(),
        n_way in 3usize..6,
        n_c in 1usize..4,
        support in 1usize..3,
        query in 1usize..3,
        p_bank in 0.0f64..=1.0,
    ) {
        let spec = StreamSpec {
            base_classes: 3,
            sessions: 1,
            n_way,
            k_shot: support + query,
            input_dim: 3,
            separation: 2.0,
            variance: 1.0,
            base_train_per_class: 6,
            test_per_class: 1,
            total_classes: None,
        };
        let stream = make_session_stream(&spec, seed).unwrap();
        let mut rng = Rng::new(seed, 9);
        let mlp = Mlp::init(&[3, 4, 2], &mut rng).unwrap();
        let mut bank = PrototypeBank::new(2);
        for &l in &stream.train[0].labels {
            bank.insert(l, 1, vec![rng.normal(), rng.normal()], &BankConfig::default()).unwrap();
        }
        let cfg = EpisodeConfig { classes_per_episode: n_c.min(n_way), support, query, p_bank_negative: p_bank };
        let data = &stream.train[1];
        let ep = sample_episode(data, &mlp, &bank, &mut rng, &cfg).unwrap();
        let mut ids: Vec<usize> = ep.classes.iter().map(|c| c.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), cfg.classes_per_episode);
        for c in &ep.classes {
            prop_assert_eq!(c.support.len(), support);
            prop_assert_eq!(c.query.len(), query);
            prop_assert!(c.support.iter().all(|i| !c.query.contains(i)));
            prop_assert!(c.support.iter().chain(&c.query).all(|&i| data.samples[i].label == c.class_id));
            let (a, b) = c.negative_ids;
            prop_assert!(a != b && a != c.class_id && b != c.class_id);
        }
    }
}
