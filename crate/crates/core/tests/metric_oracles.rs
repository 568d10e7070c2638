use cpmark::imaging::ImageTensor;
use cpmark::metrics::{
    fid, fid_from_stats, psnr, ssim, subjective_score, FeatureStats, ParticipantScores, SubjectiveResponses,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct windowed SSIM: explicit 2-D Gaussian weights, no separable filtering.
fn reference_ssim(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let (h, w) = (x.height(), x.width());
    let mut win = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for c in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for top in 0..=h - 11 {
            for left in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / z;
                        let a = x.at(c, top + i, left + j) as f64;
                        let b = y.at(c, top + i, left + j) as f64;
                        mx += k * a;
                        my += k * b;
                        xx += k * a * a;
                        yy += k * b * b;
                        xy += k * a * b;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / 3.0
}

#[test]
fn ssim_matches_direct_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (h, w) in [(11, 11), (24, 19), (32, 32)] {
        let x = ImageTensor::from_fn(h, w, |_, _, _| rng.random::<f32>());
        let noise = ImageTensor::from_fn(h, w, |_, _, _| rng.random::<f32>());
        let y = ImageTensor::rgb(x.data().zip_map(noise.data(), |v, n| v * 0.7 + n * 0.3)).unwrap();
        let got = ssim(&x, &y).unwrap();
        let want = reference_ssim(&x, &y);
        assert!((got - want).abs() <= 1e-4, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn psnr_closed_form_cases() {
    let a = ImageTensor::constant(10, 10, [0.25; 3]);
    let b = ImageTensor::rgb(a.data().map(|v| v + 1.0 / 255.0)).unwrap();
    assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() <= 1e-3);
    let checker = |inv: bool| ImageTensor::from_fn(6, 6, move |_, y, x| (((x + y) % 2 == 0) != inv) as u8 as f32);
    assert!(psnr(&checker(false), &checker(true)).unwrap().abs() <= 1e-3);
    // uniform error of 0.1 everywhere: 20 dB
    let c = ImageTensor::rgb(a.data().map(|v| v + 0.1)).unwrap();
    assert!((psnr(&a, &c).unwrap() - 20.0).abs() <= 1e-3);
}

#[test]
fn fid_diagonal_closed_form() {
    // points (+-a, 0), (0, +-b) have zero mean and covariance diag(2a^2/3, 2b^2/3)
    let cross = |a: f64, b: f64, m: [f64; 2]| {
        vec![
            vec![m[0] + a, m[1]],
            vec![m[0] - a, m[1]],
            vec![m[0], m[1] + b],
            vec![m[0], m[1] - b],
        ]
    };
    let (set_a, set_b) = (cross(1.0, 2.0, [0.0, 0.0]), cross(3.0, 0.5, [1.0, -2.0]));
    let sd = |v: f64| (2.0 * v * v / 3.0).sqrt();
    let expected = 1.0 + 4.0 + (sd(1.0) - sd(3.0)).powi(2) + (sd(2.0) - sd(0.5)).powi(2);
    let got = fid(&set_a, &set_b).unwrap();
    assert!((got - expected).abs() <= 1e-9, "{got} vs {expected}");
}

#[test]
fn fid_one_dimensional_gaussians() {
    let stats = |mu: f64, var: f64| FeatureStats::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var), 2).unwrap();
    assert_eq!(fid_from_stats(&stats(0.0, 1.0), &stats(1.0, 1.0)).unwrap(), 1.0);
    // (mu1 - mu2)^2 + (sigma1 - sigma2)^2
    assert_eq!(fid_from_stats(&stats(2.0, 4.0), &stats(0.0, 1.0)).unwrap(), 5.0);
}

#[test]
fn fid_of_a_set_with_itself_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set: Vec<Vec<f64>> = (0..20).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    assert!(fid(&set, &set).unwrap() <= 1e-6);
}

#[test]
fn subjective_score_reproduces_reported_column() {
    // 13 participants at 39 and 2 at 38 average to 38.87 (rounded), the male C-C column
    let at = |pos: Vec<u8>| ParticipantScores {
        positive: pos,
        negative: vec![1, 1, 1, 1],
    };
    let mut participants = vec![at(vec![5, 5, 5, 4]); 13];
    participants.extend(vec![at(vec![5, 5, 4, 4]); 2]);
    let s = subjective_score(&SubjectiveResponses { participants }).unwrap();
    assert_eq!((s * 100.0).round() / 100.0, 38.87);
}

#[test]
fn subjective_scores_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    let mut text = String::from("participant,polarity,score\n");
    for p in ["p1", "p2"] {
        for _ in 0..4 {
            text += &format!("{p},positive,5\n{p},negative,1\n");
        }
    }
    std::fs::write(&path, text).unwrap();
    let r = SubjectiveResponses::from_csv(&path).unwrap();
    assert_eq!(r.participants.len(), 2);
    assert_eq!(subjective_score(&r).unwrap(), 40.0);
    std::fs::write(&path, "participant,polarity,score\np1,sideways,3\n").unwrap();
    assert!(SubjectiveResponses::from_csv(&path).is_err());
}
