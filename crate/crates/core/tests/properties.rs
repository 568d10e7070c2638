use cpmark::dataset::{stream_rng, BadgeSet, BatchStream, Corpus};
use cpmark::distortions::{apply, diff_jpeg, gaussian_kernel, sample_transform, RobustnessConfig};
use cpmark::imaging::{load_image, rgb_to_yuv, save_image, yuv_to_rgb, ImageTensor, SaveFormat, YUV_OFFSET};
use cpmark::losses::{total_loss, total_loss_var, LossWeights, PerceptualBackend};
use cpmark::metrics::{fid, overlay_text, psnr, ssim, subjective_score, ParticipantScores, SubjectiveResponses};
use cpmark::models::{apply_perturbation, Perturbation};
use cpmark::training::{lr_schedule, TrainConfig};
use cpmark_tensor::{round_cubic, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64, lo: f32, hi: f32) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(h, w, |_, _, _| rng.random_range(lo..hi))
}

fn feature_set(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn yuv_is_affine(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = random_image(6, 5, seed, 0.0, 1.0);
        let y = random_image(6, 5, seed ^ 1, 0.0, 1.0);
        let mix = ImageTensor::rgb(x.data().zip_map(y.data(), |p, q| (a * p as f64 + b * q as f64) as f32)).unwrap();
        let (yx, yy, ym) = (rgb_to_yuv(&x).unwrap(), rgb_to_yuv(&y).unwrap(), rgb_to_yuv(&mix).unwrap());
        for c in 0..3 {
            for r in 0..6 {
                for col in 0..5 {
                    let o = YUV_OFFSET[c];
                    let lhs = ym.at(c, r, col) as f64 - o;
                    let rhs = a * (yx.at(c, r, col) as f64 - o) + b * (yy.at(c, r, col) as f64 - o);
                    // f32 storage bounds the attainable precision
                    prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + a.abs() + b.abs()) * 4.0, "{lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn yuv_round_trip(seed in any::<u64>()) {
        let x = random_image(7, 9, seed, 0.0, 1.0);
        let back = yuv_to_rgb(&rgb_to_yuv(&x).unwrap()).unwrap();
        prop_assert!(back.data().max_abs_diff(x.data()) <= 1e-5);
    }

    #[test]
    fn png_round_trip_within_half_step(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let x = random_image(9, 11, seed, 0.0, 1.0);
        let square = random_image(9, 9, seed, 0.0, 1.0);
        save_image(&square, dir.path().join("s.png"), SaveFormat::Png).unwrap();
        let loaded = load_image(dir.path().join("s.png"), 9).unwrap();
        prop_assert!(loaded.data().max_abs_diff(square.data()) <= 1.0 / 510.0 + 1e-7);
        let path = dir.path().join("x.png");
        save_image(&x, &path, SaveFormat::Png).unwrap();
        let raster = image::open(&path).unwrap().to_rgb8();
        let back = ImageTensor::from_rgb8(&raster);
        prop_assert!(back.data().max_abs_diff(x.data()) <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn rounding_surrogate_bounds(x in -300.0f64..300.0) {
        prop_assert!((round_cubic(x) - x.round()).abs() <= 0.125 + 1e-12);
        let frac = x - x.floor();
        prop_assume!((frac - 0.5).abs() > 1e-3);
        let h = 1e-7;
        let fd = (round_cubic(x + h) - round_cubic(x - h)) / (2.0 * h);
        let d = x - x.round();
        prop_assert!((fd - 3.0 * d * d).abs() <= 1e-6);
    }

    #[test]
    fn distortions_stay_in_unit_range(seed in any::<u64>()) {
        let x = random_image(20, 20, seed, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = sample_transform(&mut rng, &RobustnessConfig::default()).unwrap();
        let y = apply(&spec, &x).unwrap();
        prop_assert!(y.same_shape(&x));
        prop_assert!(y.data().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let j = diff_jpeg(&x, rng.random_range(25..=100)).unwrap();
        prop_assert!(j.data().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn perturbation_stays_in_unit_range(seed in any::<u64>()) {
        let x = random_image(8, 8, seed, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let delta = Perturbation(Tensor::from_fn([3, 8, 8], |_| rng.random_range(-3.0..3.0)));
        let y = apply_perturbation(&x, &delta).unwrap();
        prop_assert!(y.data().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let x = random_image(16, 14, seed, 0.0, 1.0);
        let y = random_image(16, 14, seed.wrapping_add(1), 0.0, 1.0);
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() <= 1e-12);
        let (a, b) = (feature_set(6, 4, seed), feature_set(9, 4, seed ^ 3));
        prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-6);
        prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn psnr_decreases_with_noise(seed in any::<u64>()) {
        let x = random_image(12, 12, seed, 0.2, 0.8);
        let noise = random_image(12, 12, seed ^ 9, -1.0, 1.0);
        let values: Vec<f64> = [0.01f32, 0.05, 0.1]
            .iter()
            .map(|&a| {
                let y = ImageTensor::rgb(x.data().zip_map(noise.data(), |p, n| p + a * n)).unwrap();
                psnr(&x, &y).unwrap()
            })
            .collect();
        prop_assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    }

    #[test]
    fn subjective_relabeling_invariance(
        pos in prop::collection::vec(1u8..=5, 1..6),
        neg in prop::collection::vec(1u8..=5, 1..6),
        k in 0usize..6,
    ) {
        let base = SubjectiveResponses { participants: vec![ParticipantScores { positive: pos.clone(), negative: neg.clone() }] };
        let k = k % pos.len();
        let mut moved_pos = pos.clone();
        let s = moved_pos.remove(k);
        let mut moved_neg = neg.clone();
        moved_neg.push(6 - s);
        let moved = SubjectiveResponses { participants: vec![ParticipantScores { positive: moved_pos, negative: moved_neg }] };
        prop_assert_eq!(subjective_score(&base).unwrap(), subjective_score(&moved).unwrap());
    }

    #[test]
    fn gaussian_kernels_are_normalized(k in 1usize..12, sigma in 0.1f64..5.0) {
        let taps = gaussian_kernel(2 * k + 1, sigma);
        prop_assert!((taps.iter().sum::<f64>() - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn warmup_is_monotone_and_bounded(total in 0u64..5000, warm in 0u64..500, step in 0u64..5000) {
        prop_assume!(warm <= total);
        let cfg = TrainConfig { total_steps: total, warmup_steps: Some(warm), lr: 3e-4, ..TrainConfig::default() };
        let (a, b) = (lr_schedule(step, &cfg), lr_schedule(step + 1, &cfg));
        prop_assert!(a <= b && b <= cfg.lr && a > 0.0);
    }

    #[test]
    fn loss_is_nonnegative_and_batch_order_invariant(seed in any::<u64>()) {
        let backend = PerceptualBackend::deterministic();
        let w = LossWeights::default();
        let h = random_image(16, 16, seed, 0.0, 1.0);
        let e = random_image(16, 16, seed ^ 1, 0.0, 1.0);
        let b = random_image(16, 16, seed ^ 2, 0.0, 1.0);
        let d = random_image(16, 16, seed ^ 3, 0.0, 1.0);
        let l = total_loss(&h, &e, &b, &d, &w, &backend).unwrap();
        prop_assert!(l.total >= 0.0 && l.enc >= 0.0 && l.dec >= 0.0 && l.yuv >= 0.0);
        let zero = total_loss(&h, &h, &b, &b, &w, &backend).unwrap();
        prop_assert_eq!(zero.total, 0.0);

        let h2 = random_image(16, 16, seed ^ 4, 0.0, 1.0);
        let batched = |order: [usize; 2]| {
            let tape = Tape::<f64>::new();
            let pick = |imgs: [&ImageTensor; 2]| {
                let v: Vec<ImageTensor> = order.iter().map(|&i| imgs[i].clone()).collect();
                tape.constant(ImageTensor::batch(&v).unwrap().cast())
            };
            total_loss_var(pick([&h, &h2]), pick([&e, &h2]), pick([&b, &b]), pick([&d, &b]), &w, &backend).1
        };
        let (fwd, rev) = (batched([0, 1]), batched([1, 0]));
        for (x, y) in [(fwd.enc, rev.enc), (fwd.dec, rev.dec), (fwd.yuv, rev.yuv)] {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn overlay_is_seed_deterministic(seed in any::<u64>()) {
        let x = random_image(40, 80, seed, 0.0, 1.0);
        let a = overlay_text(&x, "ACM MM", 8, &mut stream_rng(seed, 4, 0)).unwrap();
        let b = overlay_text(&x, "ACM MM", 8, &mut stream_rng(seed, 4, 0)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(overlay_text(&x, "", 8, &mut stream_rng(seed, 4, 0)).unwrap(), x);
    }
}

fn toy_corpus(n: usize) -> (tempfile::TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = cpmark::dataset::write_synthetic_corpus(dir.path(), n, 16, 3).unwrap();
    (dir, corpus)
}

#[test]
fn epoch_covers_each_image_once() {
    let badges = BadgeSet::new(vec![ImageTensor::constant(16, 16, [0.0; 3])]).unwrap();
    for (n, bs) in [(12, 4), (10, 3)] {
        let (_dir, corpus) = toy_corpus(n);
        let mut stream = BatchStream::new(corpus, 16, bs, 11).unwrap();
        let per = stream.batches_per_epoch();
        assert_eq!(per as usize, n / bs);
        let mut seen = vec![0; n];
        for k in 0..per {
            for i in stream.indices(k) {
                seen[i] += 1;
            }
        }
        // drop-last: every image at most once, exactly once when bs divides n
        assert!(seen.iter().all(|&c| c <= 1));
        assert_eq!(seen.iter().sum::<usize>(), per as usize * bs);
        let batch = stream.batch_at(0, &badges).unwrap();
        assert_eq!(batch.hosts.len(), bs);
    }
}

#[test]
fn equal_seeds_give_equal_streams() {
    let badges = BadgeSet::new(vec![ImageTensor::constant(16, 16, [0.0; 3]); 3]).unwrap();
    let (_dir, corpus) = toy_corpus(9);
    let mut a = BatchStream::new(corpus.clone(), 16, 2, 5).unwrap();
    let mut b = BatchStream::new(corpus.clone(), 16, 2, 5).unwrap();
    let mut c = BatchStream::new(corpus, 16, 2, 6).unwrap();
    let mut differs = false;
    for _ in 0..10 {
        let (x, y, z) = (
            a.next_batch(&badges).unwrap(),
            b.next_batch(&badges).unwrap(),
            c.next_batch(&badges).unwrap(),
        );
        assert_eq!(x, y);
        differs |= x != z;
    }
    assert!(differs);
    // random access agrees with sequential reads
    assert_eq!(a.batch_at(3, &badges).unwrap(), b.batch_at(3, &badges).unwrap());
}

#[test]
fn stream_rejects_bad_batch_sizes() {
    let (_dir, corpus) = toy_corpus(3);
    assert!(BatchStream::new(corpus.clone(), 16, 0, 0).is_err());
    assert!(BatchStream::new(corpus, 16, 4, 0).is_err());
}
