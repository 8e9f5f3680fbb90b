// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pace_core::codec::{
    fuse_prosody, read_codes, write_codes, AudioClip, AudioCodes, CodecEmbedding, EmbeddingVariant, FrameEmbedding,
    ModelDims, PaceCodec, ResidualVq, ScaleLayer, Stage1Encoder, Stage2Encoder, Through, SAMPLE_RATE,
};
use pace_core::disentangle::{club_bound, ClubEstimator, ClubTarget};
use pace_core::eval::{f0_scaled_distance, F0Contour};
use pace_core::losses::{
    adversarial_losses, recon_embedding_loss, spectral_loss, total_generator_loss, Discriminator, LossParts,
    LossWeights,
};
use pace_core::pipeline::{generate_synthetic_dataset, Checkpoint, StageTag, SyntheticSpec};
use pace_core::prosody::{extract_f0, quantize_f0, ProsodyEmbeddings, ProsodyFeatures, F0_VOCAB};
use pace_core::tensor::no_grad;
use pace_core::Tensor;

fn noise(seed: u64, n: usize, amp: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

fn matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    Tensor::new(noise(seed, rows * cols, 1.0), &[rows, cols]).unwrap()
}

fn harmonic(f0: f64, secs: f64) -> AudioClip {
    let spec = SyntheticSpec {
        f0_contour: vec![(0.0, f0)],
        harmonic_amplitudes: [1.0, 0.6, 0.4, 0.3, 0.2, 0.1, 0.1, 0.05],
        duration: secs,
        noise_floor: 0.0,
    };
    generate_synthetic_dataset(&[spec], 0).unwrap().remove(0).clip
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn ladder_is_exact(k in 1usize..6, seed in any::<u64>()) {
        let dims = ModelDims::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = Stage1Encoder::new(&dims, &mut rng);
        let s2 = Stage2Encoder::new(&dims, &mut rng);
        let len = 320 * k;
        let x = Tensor::new(noise(seed, len, 0.5), &[1, len]).unwrap();
        let mut h = s1.stem.forward(&x).unwrap();
        let mut expect = len;
        for (b, stride) in s1.blocks.iter().zip([2, 4, 5]) {
            h = b.forward(&h).unwrap();
            expect /= stride;
            prop_assert_eq!(h.dim(1), expect);
        }
        prop_assert_eq!(h.dim(1) * 40, len);
        let z = s2.forward_channels(&h).unwrap();
        prop_assert_eq!(z.shape(), &[dims.codec_dim, len / 320][..]);
    }

    #[test]
    fn forward_is_deterministic_and_frames_agree(k in 1usize..4, seed in any::<u64>()) {
        let dims = ModelDims::toy();
        let model = PaceCodec::new(&dims, &mut ChaCha8Rng::seed_from_u64(1));
        let clip = AudioClip::new(noise(seed, 320 * k, 0.5), SAMPLE_RATE);
        let feats = ProsodyFeatures::extract(&clip).unwrap();
        let a = no_grad(|| model.forward(&clip, Some(&feats), Through::Decode)).unwrap();
        let b = no_grad(|| model.forward(&clip, Some(&feats), Through::Decode)).unwrap();
        prop_assert_eq!(feats.len(), a.e_f.frames());
        prop_assert_eq!(feats.len(), clip.len() / 40);
        let (x, y) = (a.audio.unwrap().to_vec(), b.audio.unwrap().to_vec());
        prop_assert_eq!(x.len(), clip.len());
        prop_assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn pitch_shift_does_not_lower_median_f0(f0 in 70.0f64..400.0, r in 1.01f64..2.0) {
        let (lo, u_lo) = extract_f0(&harmonic(f0, 0.2)).unwrap();
        let (hi, u_hi) = extract_f0(&harmonic(f0 * r, 0.2)).unwrap();
        let voiced = |f: Vec<f64>, u: Vec<u8>| f.into_iter().zip(u).filter(|(_, u)| *u == 1).map(|(f, _)| f).collect::<Vec<_>>();
        prop_assert!(median(voiced(hi, u_hi)) >= median(voiced(lo, u_lo)));
    }

    #[test]
    fn quantization_bounds_and_monotonicity(raw in prop::collection::vec(50.0f64..1000.0, 2..60), mask in prop::collection::vec(0u8..2, 60)) {
        let uv: Vec<u8> = mask[..raw.len()].to_vec();
        let bins = quantize_f0(&raw, &uv).unwrap();
        for i in 0..raw.len() {
            prop_assert!(bins[i] < F0_VOCAB);
            if uv[i] == 0 {
                prop_assert_eq!(bins[i], 0);
            }
            for j in 0..raw.len() {
                if uv[i] == 1 && uv[j] == 1 && raw[i] < raw[j] {
                    prop_assert!(bins[i] <= bins[j]);
                }
            }
        }
    }

    #[test]
    fn rvq_residuals_never_grow(seed in any::<u64>(), frames in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rvq = ResidualVq::new(8, 64, 16, 0.5, &mut rng);
        let emb = CodecEmbedding { values: matrix(seed ^ 1, frames, 16), variant: EmbeddingVariant::Scaled };
        let out = no_grad(|| rvq.quantize(&emb)).unwrap();
        for norms in &out.residual_norms {
            prop_assert_eq!(norms.len(), 9);
            for w in norms.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn fusion_is_additive(seed in any::<u64>(), frames in 1usize..10) {
        let e = matrix(seed, frames, 8);
        let p = ProsodyEmbeddings { e_f0: matrix(seed ^ 2, frames, 8), e_uv: matrix(seed ^ 3, frames, 8) };
        let fused = fuse_prosody(&FrameEmbedding { values: e.clone() }, &p).unwrap().values.to_vec();
        let zero = fuse_prosody(&FrameEmbedding { values: Tensor::zeros(&[frames, 8]) }, &p).unwrap().values.to_vec();
        let none = ProsodyEmbeddings::zeros(frames, 8);
        let plain = fuse_prosody(&FrameEmbedding { values: e.clone() }, &none).unwrap().values.to_vec();
        let (ev, f0, uv) = (e.to_vec(), p.e_f0.to_vec(), p.e_uv.to_vec());
        for i in 0..ev.len() {
            prop_assert_eq!(fused[i], ev[i] + f0[i] + uv[i]);
            prop_assert_eq!(zero[i], f0[i] + uv[i]);
            prop_assert_eq!(plain[i], ev[i]);
        }
    }

    #[test]
    fn scale_factors_depend_on_input_only(seed in any::<u64>(), frames in 1usize..12) {
        let dims = ModelDims::toy();
        let layer = ScaleLayer::new(&dims, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor::new(noise(seed, dims.codec_dim * frames, 1.0), &[dims.codec_dim, frames]).unwrap();
        let other = Tensor::new(noise(seed ^ 9, dims.codec_dim * frames, 1.0), &[dims.codec_dim, frames]).unwrap();
        let (k1, b1) = layer.factors_channels(&x).unwrap();
        let _ = layer.factors_channels(&other).unwrap();
        let (k2, b2) = layer.factors_channels(&x.detach()).unwrap();
        prop_assert_eq!(k1.to_vec(), k2.to_vec());
        prop_assert_eq!(b1.to_vec(), b2.to_vec());
    }

    #[test]
    fn constant_estimator_bound_is_zero(seed in any::<u64>(), n in 2usize..40) {
        let mu = noise(seed, 3, 1.0);
        let s = noise(seed ^ 5, 3, 3.0);
        let est = ClubEstimator::constant(4, 6, &mu, &s, ClubTarget::F0);
        let b = club_bound(&matrix(seed ^ 7, n, 4), &matrix(seed ^ 8, n, 3), &est).unwrap();
        prop_assert_eq!(b.item(), 0.0);
    }

    #[test]
    fn losses_nonnegative_and_additive(seed in any::<u64>(), w in prop::array::uniform5(0.0f64..5.0)) {
        let x = Tensor::new(noise(seed, 640, 0.5), &[1, 640]).unwrap();
        let y = Tensor::new(noise(seed ^ 1, 640, 0.5), &[1, 640]).unwrap();
        let disc = Discriminator::new(4, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = adversarial_losses(&disc, &x, &y).unwrap();
        let rec = spectral_loss(&x, &y).unwrap();
        let e1 = CodecEmbedding { values: matrix(seed ^ 2, 2, 4), variant: EmbeddingVariant::Scaled };
        let e2 = CodecEmbedding { values: matrix(seed ^ 3, 2, 4), variant: EmbeddingVariant::Reference };
        let recon = recon_embedding_loss(&e1, &e2).unwrap();
        for v in [rec.item(), recon.item(), a.feat.item(), a.disc.item()] {
            prop_assert!(v >= 0.0);
        }
        let mi = Tensor::scalar(0.3);
        let weights = LossWeights { lambda_mi: w[0], lambda_recon_e: w[1], lambda_adv: w[2], lambda_feat: w[3], lambda_rec: w[4] };
        let parts = LossParts { mi: Some(mi.clone()), recon_e: Some(recon.clone()), adv: Some(a.adv.clone()), feat: Some(a.feat.clone()), rec: Some(rec.clone()) };
        let total = total_generator_loss(&parts, &weights).unwrap().item();
        let manual = w[0] * 0.3 + w[1] * recon.item() + w[2] * a.adv.item() + w[3] * a.feat.item() + w[4] * rec.item();
        prop_assert!((total - manual).abs() <= 1e-9 * manual.abs().max(1.0));
    }

    #[test]
    fn distance_symmetric_and_affine_invariant(
        v in prop::collection::vec(60.0f64..500.0, 3..80),
        alpha in 0.1f64..10.0,
        beta in 0.0f64..200.0,
    ) {
        let a = F0Contour::new(v.clone()).unwrap();
        let rev = F0Contour::new(v.iter().rev().copied().collect()).unwrap();
        let moved = F0Contour::new(v.iter().map(|x| alpha * x + beta).collect()).unwrap();
        prop_assert_eq!(f0_scaled_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(f0_scaled_distance(&a, &rev).unwrap(), f0_scaled_distance(&rev, &a).unwrap());
        let base = f0_scaled_distance(&a, &rev).unwrap();
        let shifted = f0_scaled_distance(&moved, &rev).unwrap();
        prop_assert!((base - shifted).abs() <= 1e-9);
    }

    #[test]
    fn codes_container_round_trip(frames in 0usize..30, stages in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = AudioCodes { stages, codes: (0..frames).map(|_| (0..stages).map(|_| rng.random()).collect()).collect() };
        let mut buf = Vec::new();
        write_codes(&mut buf, &codes).unwrap();
        prop_assert_eq!(read_codes(buf.as_slice()).unwrap(), codes);
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(any::<f64>(), 1..50), step in any::<u64>()) {
        let rng = ChaCha8Rng::seed_from_u64(step);
        let mut c = Checkpoint::new(StageTag::Stage3, step, &rng);
        let n = values.len();
        c.add_tensors(&[("t".into(), Tensor::new(values.clone(), &[n]).unwrap())]);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        let stored = &back.tensor("t").unwrap().values;
        prop_assert!(stored.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.step, step);
    }
}
