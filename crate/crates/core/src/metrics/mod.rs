//! Image-quality metrics, the subjective score, control evaluations and the
//! robustness sweep.

mod font;

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{stream_rng, PURPOSE_OVERLAY};
use crate::distortions::{blur_sigma, gaussian_blur, gaussian_kernel, real_jpeg_roundtrip, BLUR_KERNELS};
use crate::error::{ensure, Error, Result};
use crate::imaging::ImageTensor;
use crate::losses::PerceptualBackend;
use crate::models::{decode, embed, ModelState};

pub use font::{glyph, rasterize, GLYPH_H, GLYPH_W};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// JPEG qualities of the robustness sweep.
pub const SWEEP_QUALITIES: [u8; 9] = [25, 35, 45, 55, 65, 75, 85, 95, 100];

fn check_pair(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    ensure!(
        x.same_shape(y),
        "metric inputs differ in shape: {}x{} vs {}x{}",
        x.height(),
        x.width(),
        y.height(),
        y.width()
    );
    Ok(())
}

/// `10 log10(1 / mse)` over all channels, [`PSNR_CAP`] when the images match.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let (a, b) = (x.data().data(), y.data().data());
    let mse = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM: 11x11 Gaussian window (sigma 1.5) over valid positions, dynamic
/// range 1, averaged over channels. Needs images of at least 11x11.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let (h, w) = (x.height(), x.width());
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
    );
    let taps = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = x.data().data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.data().data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mu_a, ..) = filter_valid(&a, h, w, &taps);
        let (mu_b, ..) = filter_valid(&b, h, w, &taps);
        let (aa, ..) = filter_valid(&prod(&a, &a), h, w, &taps);
        let (bb, ..) = filter_valid(&prod(&b, &b), h, w, &taps);
        let (ab, ..) = filter_valid(&prod(&a, &b), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let (va, vb, cov) = (aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Mean and covariance (unbiased) of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        ensure!(
            cov.nrows() == mean.len() && cov.ncols() == mean.len(),
            "covariance is {}x{}, mean has {} entries",
            cov.nrows(),
            cov.ncols(),
            mean.len()
        );
        Ok(Self { mean, cov, n })
    }

    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        ensure!(features.len() >= 2, "fid needs at least 2 feature vectors, got {}", features.len());
        let d = features[0].len();
        ensure!(d > 0, "feature vectors are empty");
        ensure!(features.iter().all(|f| f.len() == d), "feature vectors differ in dimension");
        let n = features.len();
        let rows = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| rows.column(j).mean());
        let centred = DMatrix::from_fn(n, d, |i, j| rows[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        Self::new(mean, cov, n)
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, evaluated as
/// `Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))` with negative eigenvalues clipped.
pub fn fid_from_stats(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    ensure!(
        a.mean.len() == b.mean.len(),
        "feature dimensions differ: {} vs {}",
        a.mean.len(),
        b.mean.len()
    );
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = sym_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    fid_from_stats(&FeatureStats::from_features(set_a)?, &FeatureStats::from_features(set_b)?)
}

/// Likert answers of one participant, each in `1..=5`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantScores {
    pub positive: Vec<u8>,
    pub negative: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectiveResponses {
    pub participants: Vec<ParticipantScores>,
}

/// Positive and negative questions per participant by default.
pub const DEFAULT_QUESTION_COUNT: usize = 4;

impl SubjectiveResponses {
    /// Every participant gives `pos` to all positive and `neg` to all negative questions.
    pub fn uniform(participants: usize, n_pos: usize, n_neg: usize, pos: u8, neg: u8) -> Self {
        Self {
            participants: vec![
                ParticipantScores {
                    positive: vec![pos; n_pos],
                    negative: vec![neg; n_neg],
                };
                participants
            ],
        }
    }

    /// Reads `participant,polarity,score` rows (polarity `positive`/`negative`);
    /// participants are ordered by first appearance.
    pub fn from_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            participant: String,
            polarity: String,
            score: u8,
        }
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut ids: Vec<String> = Vec::new();
        let mut participants: Vec<ParticipantScores> = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let i = match ids.iter().position(|p| *p == row.participant) {
                Some(i) => i,
                None => {
                    ids.push(row.participant);
                    participants.push(ParticipantScores {
                        positive: vec![],
                        negative: vec![],
                    });
                    ids.len() - 1
                }
            };
            match row.polarity.as_str() {
                "positive" => participants[i].positive.push(row.score),
                "negative" => participants[i].negative.push(row.score),
                other => return Err(Error::Data(format!("unknown polarity {other:?}"))),
            }
        }
        Ok(Self { participants })
    }
}

/// `(1/P) sum_p [sum_i s_pi + sum_j (6 - s_pj)]`.
pub fn subjective_score(r: &SubjectiveResponses) -> Result<f64> {
    ensure!(!r.participants.is_empty(), "no participants");
    let mut total = 0u64;
    for p in &r.participants {
        for &s in p.positive.iter().chain(&p.negative) {
            ensure!((1..=5).contains(&s), "score {s} outside 1..=5");
        }
        total += p.positive.iter().map(|&s| s as u64).sum::<u64>();
        total += p.negative.iter().map(|&s| 6 - s as u64).sum::<u64>();
    }
    Ok(total as f64 / r.participants.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCategory {
    EncodedVsHost,
    DecodedVsBadge,
    CleanDecodeVsBadge,
    TextwmDecodeVsBadge,
}

impl fmt::Display for PairCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EncodedVsHost => "encoded_vs_host",
            Self::DecodedVsBadge => "decoded_vs_badge",
            Self::CleanDecodeVsBadge => "clean_decode_vs_badge",
            Self::TextwmDecodeVsBadge => "textwm_decode_vs_badge",
        })
    }
}

/// Pair-averaged SSIM, PSNR and LPIPS, plus set-level FID (absent for a single pair).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pair_category: PairCategory,
    pub ssim: f64,
    pub psnr: f64,
    pub lpips: f64,
    pub fid: Option<f64>,
    pub n_pairs: usize,
}

/// Metrics of `outputs[i]` against `references[i]`.
pub fn evaluate_pairs(
    category: PairCategory,
    outputs: &[ImageTensor],
    references: &[ImageTensor],
    backend: &PerceptualBackend,
) -> Result<MetricsReport> {
    ensure!(!outputs.is_empty(), "no image pairs to evaluate");
    ensure!(
        outputs.len() == references.len(),
        "{} outputs for {} references",
        outputs.len(),
        references.len()
    );
    let n = outputs.len() as f64;
    let (mut s, mut p, mut l) = (0.0, 0.0, 0.0);
    for (o, r) in outputs.iter().zip(references) {
        s += ssim(o, r)?;
        p += psnr(o, r)?;
        l += backend.distance(o, r)?;
    }
    let fid = if outputs.len() >= 2 {
        let fa: Vec<_> = outputs.iter().map(|i| backend.pooled_features(i)).collect();
        let fb: Vec<_> = references.iter().map(|i| backend.pooled_features(i)).collect();
        Some(fid(&fa, &fb)?)
    } else {
        None
    };
    Ok(MetricsReport {
        pair_category: category,
        ssim: s / n,
        psnr: p / n,
        lpips: l / n,
        fid,
        n_pairs: outputs.len(),
    })
}

pub fn encode_all(hosts: &[ImageTensor], badge: &ImageTensor, state: &ModelState) -> Result<Vec<ImageTensor>> {
    hosts.iter().map(|h| embed(h, badge, state)).collect()
}

pub fn decode_all(images: &[ImageTensor], state: &ModelState) -> Result<Vec<ImageTensor>> {
    images.iter().map(|i| decode(i, state)).collect()
}

/// Encoded-vs-host and decoded-vs-badge reports for one badge.
pub fn evaluate_model(
    state: &ModelState,
    hosts: &[ImageTensor],
    badge: &ImageTensor,
    backend: &PerceptualBackend,
) -> Result<[MetricsReport; 2]> {
    let encoded = encode_all(hosts, badge, state)?;
    let decoded = decode_all(&encoded, state)?;
    let badges = vec![badge.clone(); hosts.len()];
    Ok([
        evaluate_pairs(PairCategory::EncodedVsHost, &encoded, hosts, backend)?,
        evaluate_pairs(PairCategory::DecodedVsBadge, &decoded, &badges, backend)?,
    ])
}

/// Decodes images that were never encoded.
pub fn control_clean_decode(
    state: &ModelState,
    clean: &[ImageTensor],
    badge: &ImageTensor,
    backend: &PerceptualBackend,
) -> Result<MetricsReport> {
    let decoded = decode_all(clean, state)?;
    evaluate_pairs(
        PairCategory::CleanDecodeVsBadge,
        &decoded,
        &vec![badge.clone(); clean.len()],
        backend,
    )
}

/// Burns `text` into `img`: white glyphs scaled to roughly `font_size` pixels
/// tall, a 1-px black outline, at a uniformly random valid position.
pub fn overlay_text(img: &ImageTensor, text: &str, font_size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if text.is_empty() {
        return Ok(img.clone());
    }
    ensure!(font_size > 0, "font size must be positive");
    let scale = ((font_size as f64 / GLYPH_H as f64).round() as usize).max(1);
    let (th, tw, mask) = rasterize(text, scale);
    let (rh, rw) = (th + 2, tw + 2);
    let (h, w) = (img.height(), img.width());
    ensure!(rh <= h && rw <= w, "text raster {rh}x{rw} does not fit a {h}x{w} image");
    let y0 = rng.random_range(0..=h - rh);
    let x0 = rng.random_range(0..=w - rw);
    let lit = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < th && (x as usize) < tw && mask[y as usize * tw + x as usize];
    let mut out = img.data().clone();
    let plane = h * w;
    let data = out.data_mut();
    for ry in 0..rh {
        for rx in 0..rw {
            let (ty, tx) = (ry as isize - 1, rx as isize - 1);
            let value = if lit(ty, tx) {
                1.0
            } else if (-1..=1).any(|dy| (-1..=1).any(|dx| lit(ty + dy, tx + dx))) {
                0.0
            } else {
                continue;
            };
            let p = (y0 + ry) * w + x0 + rx;
            for c in 0..3 {
                data[c * plane + p] = value;
            }
        }
    }
    ImageTensor::rgb(out)
}

/// Overlays `text` on each encoded image (positions drawn from `seed`), then decodes.
pub fn control_text_watermark(
    state: &ModelState,
    encoded: &[ImageTensor],
    badge: &ImageTensor,
    text: &str,
    font_size: usize,
    seed: u64,
    backend: &PerceptualBackend,
) -> Result<MetricsReport> {
    let marked = encoded
        .iter()
        .enumerate()
        .map(|(i, img)| overlay_text(img, text, font_size, &mut stream_rng(seed, PURPOSE_OVERLAY, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let decoded = decode_all(&marked, state)?;
    evaluate_pairs(
        PairCategory::TextwmDecodeVsBadge,
        &decoded,
        &vec![badge.clone(); encoded.len()],
        backend,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDistortion {
    Jpeg,
    Blur,
}

/// One sweep point: decoded-vs-badge metrics after a real-world distortion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub badge: usize,
    pub distortion: SweepDistortion,
    /// JPEG quality or blur kernel size.
    pub param: u32,
    pub ssim: f64,
    pub psnr: f64,
    pub lpips: f64,
    pub fid: Option<f64>,
}

/// Real JPEG at every [`SWEEP_QUALITIES`] point and Gaussian blur at every
/// [`BLUR_KERNELS`] size, each followed by decoding.
pub fn robustness_sweep(
    state: &ModelState,
    hosts: &[ImageTensor],
    badges: &[ImageTensor],
    backend: &PerceptualBackend,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (bi, badge) in badges.iter().enumerate() {
        let encoded = encode_all(hosts, badge, state)?;
        let targets = vec![badge.clone(); hosts.len()];
        let mut point = |distortion, param: u32, distorted: Vec<ImageTensor>| -> Result<()> {
            let r = evaluate_pairs(PairCategory::DecodedVsBadge, &decode_all(&distorted, state)?, &targets, backend)?;
            rows.push(SweepRow {
                badge: bi,
                distortion,
                param,
                ssim: r.ssim,
                psnr: r.psnr,
                lpips: r.lpips,
                fid: r.fid,
            });
            Ok(())
        };
        for q in SWEEP_QUALITIES {
            let d = encoded.iter().map(|e| real_jpeg_roundtrip(e, q)).collect::<Result<_>>()?;
            point(SweepDistortion::Jpeg, q as u32, d)?;
        }
        for k in BLUR_KERNELS {
            let d = encoded
                .iter()
                .map(|e| gaussian_blur(e, k, blur_sigma(k)))
                .collect::<Result<_>>()?;
            point(SweepDistortion::Blur, k as u32, d)?;
        }
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// CSV with one row per `(badge, report)`: badge, category, ssim, psnr, lpips, fid, n_pairs.
pub fn reports_to_csv(rows: &[(usize, MetricsReport)]) -> String {
    let mut out = String::from("badge,category,ssim,psnr,lpips,fid,n_pairs\n");
    for (b, r) in rows {
        out += &format!(
            "{b},{},{},{},{},{},{}\n",
            r.pair_category,
            r.ssim,
            r.psnr,
            r.lpips,
            fmt_opt(r.fid),
            r.n_pairs
        );
    }
    out
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("badge,distortion,param,ssim,psnr,lpips,fid\n");
    for r in rows {
        let d = match r.distortion {
            SweepDistortion::Jpeg => "jpeg",
            SweepDistortion::Blur => "blur",
        };
        out += &format!(
            "{},{d},{},{},{},{},{}\n",
            r.badge,
            r.param,
            r.ssim,
            r.psnr,
            r.lpips,
            fmt_opt(r.fid)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize, invert: bool) -> ImageTensor {
        ImageTensor::from_fn(h, w, |_, y, x| (((y + x) % 2 == 0) ^ invert) as u8 as f32)
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageTensor::constant(8, 8, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = ImageTensor::from_fn(8, 8, |_, _, _| 0.5 + 1.0 / 255.0);
        let expect = 20.0 * 255f64.log10();
        // f32 storage of 0.5 + 1/255 costs a few 1e-7
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-3);
        assert!(psnr(&checker(8, 8, false), &checker(8, 8, true)).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &ImageTensor::constant(8, 9, [0.5; 3])).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let x = checker(16, 16, false);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&x, &checker(16, 16, true)).unwrap() < 0.0);
        let tiny = ImageTensor::constant(8, 8, [0.1; 3]);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        let a = FeatureStats::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0), 2).unwrap();
        let b = FeatureStats::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0), 2).unwrap();
        assert_eq!(fid_from_stats(&a, &b).unwrap(), 1.0);
        assert!(fid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(fid(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 0.0]]).is_err());
    }

    #[test]
    fn subjective_peak_and_neutral() {
        let peak = SubjectiveResponses::uniform(15, 4, 4, 5, 1);
        assert_eq!(subjective_score(&peak).unwrap(), 40.0);
        let neutral = SubjectiveResponses::uniform(3, 4, 4, 3, 3);
        assert_eq!(subjective_score(&neutral).unwrap(), 24.0);
        assert!(subjective_score(&SubjectiveResponses::uniform(1, 1, 1, 0, 3)).is_err());
        assert!(subjective_score(&SubjectiveResponses { participants: vec![] }).is_err());
    }

    #[test]
    fn overlay_draws_white_text_with_black_outline() {
        let img = ImageTensor::constant(32, 64, [0.5; 3]);
        let mut rng = stream_rng(1, PURPOSE_OVERLAY, 0);
        let out = overlay_text(&img, "HI", 7, &mut rng).unwrap();
        let d = out.data().data();
        assert!(d.contains(&1.0) && d.contains(&0.0));
        assert_eq!(overlay_text(&img, "", 7, &mut rng).unwrap(), img);
        assert!(overlay_text(&img, "MUCH TOO LONG", 14, &mut rng).is_err());
    }
}
