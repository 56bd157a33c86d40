use proptest::prelude::*;

use sure_denoise::checkpoint::Checkpoint;
use sure_denoise::data::{generate_synthetic, SyntheticKind};
use sure_denoise::nn::{build_dncnn_lite, ArchTag, IdentityDenoiser, LinearDenoiser, Mode};
use sure_denoise::noise::{perturb_gaussian, NoiseRng, NoiseSpec, Stream};
use sure_denoise::risk::{epsilon_rule, mc_divergence, EPSILON_FLOOR};
use sure_denoise::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epsilon_rules_are_floored_and_monotone(a in 0.0f64..255.0, b in 0.0f64..255.0) {
        for arch in [ArchTag::Sda, ArchTag::DncnnLite] {
            let (ea, eb) = (epsilon_rule(arch, a), epsilon_rule(arch, b));
            prop_assert!(ea >= EPSILON_FLOOR && eb >= EPSILON_FLOOR);
            if a <= b {
                prop_assert!(ea <= eb);
            }
        }
    }

    #[test]
    fn identity_divergence_is_probe_energy(k in 1usize..40, seed in 0u64..1000, eps in 1e-6f64..1.0) {
        let mut rng = NoiseRng::new(seed, Stream::Probe);
        let y = perturb_gaussian(&[2, k], &mut rng);
        let n = perturb_gaussian(&[2, k], &mut rng);
        let div = mc_divergence(&mut IdentityDenoiser, &y, eps, &n, Mode::Eval).unwrap();
        for j in 0..2 {
            let energy: f64 = n.data()[j * k..(j + 1) * k].iter().map(|v| v * v).sum();
            prop_assert!((div.data()[j] - energy).abs() <= 1e-6 * energy.max(1.0));
        }
    }

    #[test]
    fn linear_divergence_is_a_quadratic_form(k in 1usize..12, seed in 0u64..1000) {
        let mut rng = NoiseRng::new(seed, Stream::Evaluation);
        let a: Vec<f64> = (0..k * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut lin = LinearDenoiser::new(Tensor::new(a.clone(), &[k, k]).unwrap());
        let y = perturb_gaussian(&[1, k], &mut rng);
        let n = perturb_gaussian(&[1, k], &mut rng);
        let div = mc_divergence(&mut lin, &y, 1e-2, &n, Mode::Eval).unwrap().data()[0];
        let nd = n.data();
        let quad: f64 = (0..k).map(|i| nd[i] * (0..k).map(|c| a[i * k + c] * nd[c]).sum::<f64>()).sum();
        prop_assert!((div - quad).abs() <= 1e-8 * (1.0 + quad.abs()));
    }

    #[test]
    fn checkpoint_bytes_round_trip(depth in 3usize..6, channels in 1usize..6, seed in 0u64..500, epoch in 0usize..100) {
        let d = build_dncnn_lite(depth, channels, seed).unwrap();
        let ckpt = Checkpoint::from_denoiser(&d, None, seed, epoch);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let d2 = back.to_denoiser().unwrap();
        for (p, q) in d.params().iter().zip(d2.params()) {
            prop_assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn corruption_depends_only_on_seed_and_round(seed in 0u64..1000, round in 0u64..4, zeta in 0.01f64..0.5) {
        let mut rng = NoiseRng::new(7, Stream::Synthetic);
        let ds = generate_synthetic(3, (8, 8), SyntheticKind::Gradients, &mut rng).unwrap();
        for noise in [NoiseSpec::Gaussian { sigma: 0.1 }, NoiseSpec::Poisson { zeta }] {
            let a = ds.corrupt(&noise, seed, round).unwrap();
            let b = ds.corrupt(&noise, seed, round).unwrap();
            let c = ds.corrupt(&noise, seed, round + 1).unwrap();
            prop_assert_eq!(a.noisy().unwrap(), b.noisy().unwrap());
            prop_assert_ne!(a.noisy().unwrap(), c.noisy().unwrap());
        }
    }

    #[test]
    fn noisy_batches_do_not_depend_on_clean_images(seed in 0u64..1000, bs in 1usize..6, epoch in 0usize..5) {
        let mut rng = NoiseRng::new(8, Stream::Synthetic);
        let ds = generate_synthetic(6, (6, 6), SyntheticKind::Strokes, &mut rng)
            .unwrap()
            .corrupt(&NoiseSpec::GaussianRange { lo: 0.0, hi: 0.2 }, seed, 0)
            .unwrap();
        let blind = ds.without_clean();
        let (a, b) = (ds.batches(bs, seed, epoch).unwrap(), blind.batches(bs, seed, epoch).unwrap());
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.y.data(), y.y.data());
            prop_assert_eq!(&x.sigma, &y.sigma);
            prop_assert!(x.x.is_some() && y.x.is_none());
        }
    }
}
