use std::collections::BTreeSet;
use std::path::Path;

use caudr::data::{make_lodo_splits, Manifest, SampleRecord};
use caudr::gate::{
    gate_loss_value, identify_channels, ChannelMask, GateLossKind, GateOutput, Identification, Strategy,
};
use caudr::intervene::{do_shared, exchange_do, make_pairing, match_do, DoMode, Pairing};
use caudr::model::{Mode, ModelConfig, TaskModel};
use caudr::spectrum::{
    band_reconstruct, cache_decode, cache_encode, dct_decompose, hflip_spectrum, idct_reconstruct,
    inverse_zigzag, zigzag, ImageTensor, SpectralTensor, SPECTRAL_CHANNELS,
};
use caudr::tensor::{sgd_step, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn spectra(seed: u64, n: usize, rows: usize) -> Vec<SpectralTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rows * rows * SPECTRAL_CHANNELS;
            SpectralTensor::new(
                rows,
                rows,
                (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn gates(seed: u64, b: usize) -> GateOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..b * SPECTRAL_CHANNELS)
        .map(|_| rng.random_range(0.001f32..0.999))
        .collect();
    GateOutput::new(SPECTRAL_CHANNELS, v).unwrap()
}

fn random_mask(seed: u64) -> ChannelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ChannelMask::new((0..SPECTRAL_CHANNELS).map(|_| rng.random_bool(0.5)).collect())
}

fn shared(id: &Identification) -> &ChannelMask {
    match id {
        Identification::Shared(m) => m,
        other => panic!("expected a shared mask, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dct_round_trip_and_energy(seed in any::<u64>(), hb in 1usize..4, wb in 1usize..4) {
        let img = image(seed, hb * 8, wb * 8);
        let spec = dct_decompose(&img).unwrap();
        let back = idct_reconstruct(&spec).unwrap();
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err < 1e-4);
        let e_pix: f64 = img.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let e_coef: f64 = spec.data().iter().map(|&v| (v as f64).powi(2)).sum();
        prop_assert!(((e_pix - e_coef) / e_pix).abs() < 1e-5);
    }

    #[test]
    fn dct_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let x = image(seed, 16, 16);
        let y = image(seed ^ 0x5555, 16, 16);
        let mix: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = dct_decompose(&ImageTensor::new(16, 16, mix).unwrap()).unwrap();
        let (dx, dy) = (dct_decompose(&x).unwrap(), dct_decompose(&y).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(dx.data()).zip(dy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-5 * 16.0);
        }
    }

    #[test]
    fn one_block_edit_touches_one_position(seed in any::<u64>(), br in 0usize..3, bc in 0usize..3) {
        let img = image(seed, 24, 24);
        let mut edited = img.clone();
        let (y, x) = (br * 8 + 3, bc * 8 + 5);
        edited.data_mut()[(y * 24 + x) * 3 + 1] += 0.5;
        let (s0, s1) = (dct_decompose(&img).unwrap(), dct_decompose(&edited).unwrap());
        for ch in 0..SPECTRAL_CHANNELS {
            for r in 0..3 {
                for c in 0..3 {
                    if (r, c) != (br, bc) {
                        prop_assert_eq!(s0.get(ch, r, c).to_bits(), s1.get(ch, r, c).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn spectral_flip_matches_pixel_flip(seed in any::<u64>(), hb in 1usize..4, wb in 1usize..4) {
        let img = image(seed, hb * 8, wb * 8);
        let direct = dct_decompose(&img.hflip()).unwrap();
        let flipped = hflip_spectrum(&dct_decompose(&img).unwrap());
        for (a, b) in direct.data().iter().zip(flipped.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn bands_sum_to_full_reconstruction(seed in any::<u64>(), split in 0usize..63) {
        let spec = dct_decompose(&image(seed, 16, 16)).unwrap();
        let lo = band_reconstruct(&spec, 0, split).unwrap();
        let hi = band_reconstruct(&spec, split + 1, 63).unwrap();
        let full = idct_reconstruct(&spec).unwrap();
        for ((a, b), f) in lo.data().iter().zip(hi.data()).zip(full.data()) {
            prop_assert!((a + b - f).abs() < 1e-4);
        }
    }

    #[test]
    fn cache_round_trip_is_bitwise(seed in any::<u64>()) {
        let spec = &spectra(seed, 1, 2)[0];
        let back = cache_decode(&cache_encode(spec)).unwrap();
        prop_assert_eq!(back.shape(), spec.shape());
        prop_assert!(back.data().iter().zip(spec.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bae_ignores_batch_order(seed in any::<u64>(), b in 2usize..8, mu in 0.05f32..0.95) {
        let g = gates(seed, b);
        let mut rows: Vec<Vec<f32>> = (0..b).map(|i| g.row(i).to_vec()).collect();
        rows.reverse();
        rows.rotate_left(1);
        let shuffled = GateOutput::from_rows(&rows).unwrap();
        let m0 = identify_channels(&g, Strategy::Bae, mu, None).unwrap();
        let m1 = identify_channels(&shuffled, Strategy::Bae, mu, None).unwrap();
        prop_assert_eq!(m0, m1);
    }

    #[test]
    fn bae_shrinks_as_mu_grows(seed in any::<u64>(), b in 1usize..8, lo in 0.0f32..0.99, d in 0.0f32..0.5) {
        let hi = (lo + d).min(0.999);
        let g = gates(seed, b);
        let m_lo = identify_channels(&g, Strategy::Bae, lo, None).unwrap();
        let m_hi = identify_channels(&g, Strategy::Bae, hi, None).unwrap();
        prop_assert!(shared(&m_hi).is_subset_of(shared(&m_lo)));
    }

    #[test]
    fn single_sample_oe_equals_bae(seed in any::<u64>(), mu in 0.0f32..0.99) {
        let g = gates(seed, 1);
        let oe = identify_channels(&g, Strategy::Oe, mu, None).unwrap();
        let bae = identify_channels(&g, Strategy::Bae, mu, None).unwrap();
        match oe {
            Identification::PerSample(m) => prop_assert_eq!(&m[0], shared(&bae)),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }

    #[test]
    fn gate_loss_grows_with_any_gate(seed in any::<u64>(), idx in 0usize..(3 * SPECTRAL_CHANNELS), bump in 1e-3f32..0.5) {
        let g = gates(seed, 3);
        let mut v = g.values().to_vec();
        v[idx] = (v[idx] + bump).min(0.9999);
        prop_assume!(v[idx] > g.values()[idx]);
        let raised = GateOutput::new(SPECTRAL_CHANNELS, v).unwrap();
        for kind in [GateLossKind::Normalized, GateLossKind::RawSum] {
            prop_assert!(gate_loss_value(&raised, kind) > gate_loss_value(&g, kind));
        }
    }

    #[test]
    fn exchange_conserves_channel_slices(seed in any::<u64>(), b in 2usize..7) {
        let batch = spectra(seed, b, 2);
        let mask = random_mask(seed ^ 1);
        let pairing = make_pairing(b, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = exchange_do(&batch, &Identification::Shared(mask.clone()), &pairing).unwrap();
        for ch in 0..SPECTRAL_CHANNELS {
            let slices = |set: &[SpectralTensor]| {
                let mut v: Vec<Vec<u32>> = set.iter().map(|s| s.channel(ch).iter().map(|x| x.to_bits()).collect()).collect();
                v.sort();
                v
            };
            prop_assert_eq!(slices(&batch), slices(&out));
            if mask.is_invariant(ch) {
                for (a, o) in batch.iter().zip(&out) {
                    prop_assert_eq!(a.channel(ch), o.channel(ch));
                }
            }
        }
    }

    #[test]
    fn exchange_with_empty_mask_permutes_batch(seed in any::<u64>(), b in 2usize..7) {
        let batch = spectra(seed, b, 2);
        let pairing = make_pairing(b, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = do_shared(&batch, &ChannelMask::all(SPECTRAL_CHANNELS, false), &pairing, DoMode::Exchange).unwrap();
        for (i, o) in out.iter().enumerate() {
            prop_assert_eq!(o, &batch[pairing.partner(i)]);
        }
    }

    #[test]
    fn swap_exchange_is_an_involution(seed in any::<u64>(), pairs in 1usize..4) {
        let b = 2 * pairs;
        let batch = spectra(seed, b, 2);
        let perm: Vec<usize> = (0..b).map(|i| i ^ 1).collect();
        let pairing = Pairing::new(perm).unwrap();
        let mask = Identification::Shared(random_mask(seed));
        let twice = exchange_do(&exchange_do(&batch, &mask, &pairing).unwrap(), &mask, &pairing).unwrap();
        prop_assert_eq!(twice, batch);
    }

    #[test]
    fn match_takes_partner_statistics(seed in any::<u64>(), b in 2usize..6) {
        let batch = spectra(seed, b, 3);
        let pairing = make_pairing(b, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = match_do(&batch, &Identification::Shared(ChannelMask::all(SPECTRAL_CHANNELS, false)), &pairing).unwrap();
        let stats = |v: &[f32]| {
            let n = v.len() as f64;
            let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
            (m, (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        for (i, o) in out.iter().enumerate() {
            let partner = &batch[pairing.partner(i)];
            for ch in 0..SPECTRAL_CHANNELS {
                let (pm, ps) = stats(partner.channel(ch));
                let (om, os) = stats(o.channel(ch));
                if ps > 1e-3 && stats(batch[i].channel(ch)).1 > 1e-3 {
                    prop_assert!((pm - om).abs() < 1e-4 && (ps - os).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn pairings_are_derangements(seed in any::<u64>(), b in 2usize..40) {
        let p = make_pairing(b, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(p.len(), b);
        prop_assert!(p.is_derangement());
        let mut seen = p.as_slice().to_vec();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..b).collect::<Vec<_>>());
    }

    #[test]
    fn sgd_with_zero_lr_is_identity(w in prop::collection::vec(-5.0f32..5.0, 1..20), m in 0.0f32..0.99, wd in 0.0f32..0.1) {
        let mut weights = w.clone();
        let grads: Vec<f32> = w.iter().map(|x| x.sin()).collect();
        let mut vel = vec![0.3; w.len()];
        sgd_step(&mut weights, &grads, &mut vel, 0.0, wd, m);
        prop_assert_eq!(weights, w);
    }

    #[test]
    fn lodo_splits_are_disjoint(domains in prop::collection::btree_set(1u32..20, 2..8), n in 1usize..5) {
        let splits = make_lodo_splits(&domains).unwrap();
        prop_assert_eq!(splits.len(), domains.len());
        let samples: Vec<u32> = domains.iter().flat_map(|&d| std::iter::repeat_n(d, n)).collect();
        let mut tested = BTreeSet::new();
        for s in &splits {
            let train: Vec<usize> = (0..samples.len()).filter(|&i| s.train_domains.contains(&samples[i])).collect();
            let test: Vec<usize> = (0..samples.len()).filter(|&i| samples[i] == s.test_domain).collect();
            prop_assert!(train.iter().all(|i| !test.contains(i)));
            prop_assert_eq!(train.len() + test.len(), samples.len());
            tested.insert(s.test_domain);
        }
        prop_assert_eq!(tested, domains);
    }

    #[test]
    fn manifest_round_trips(rows in prop::collection::btree_map("[a-z]{1,8}", (0usize..5, 1u32..5), 0..30)) {
        let records: Vec<SampleRecord> = rows
            .iter()
            .map(|(name, &(grade, domain))| SampleRecord { image_path: format!("imgs/{name}.png"), grade, domain })
            .collect();
        let m = Manifest::new((1..5).collect(), records).unwrap();
        let text = m.to_text();
        let back = Manifest::parse(&text, Path::new("m.csv")).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn zigzag_is_a_bijection() {
    let mut seen = [false; 64];
    for u in 0..8 {
        for v in 0..8 {
            let k = zigzag(u, v).unwrap();
            assert!(!seen[k]);
            seen[k] = true;
            assert_eq!(inverse_zigzag(k).unwrap(), (u, v));
        }
    }
}

fn eval_logits(model: &TaskModel<f32>, x: Tensor<f32>) -> Vec<f32> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &bound, xv, Mode::Eval).unwrap();
    tape.value(out.logits).data().to_vec()
}

#[test]
fn eval_logits_follow_sample_order_and_duplicates() {
    let cfg = ModelConfig {
        stage_widths: vec![8, 8, 16],
        fuse_width: 8,
        blocks_per_stage: 1,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = TaskModel::<f32>::new(cfg, &mut rng).unwrap();
    let per = SPECTRAL_CHANNELS * 16;
    let samples: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..per).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let stack = |order: &[usize]| {
        Tensor::new(
            vec![order.len(), SPECTRAL_CHANNELS, 4, 4],
            order.iter().flat_map(|&i| samples[i].clone()).collect(),
        )
        .unwrap()
    };
    let base = eval_logits(&model, stack(&[0, 1, 2, 3]));
    let permuted = eval_logits(&model, stack(&[2, 0, 3, 1]));
    for (k, &i) in [2usize, 0, 3, 1].iter().enumerate() {
        for c in 0..5 {
            assert!((permuted[k * 5 + c] - base[i * 5 + c]).abs() < 1e-5);
        }
    }
    let dup = eval_logits(&model, stack(&[1, 1]));
    assert_eq!(dup[..5], dup[5..]);
}
