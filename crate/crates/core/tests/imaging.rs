use cpmark::distortions::real_jpeg_roundtrip;
use cpmark::imaging::{
    load_image, resize_bilinear, rgb_to_yuv, save_image, yuv_to_rgb, ColorSpace, ImageTensor, SaveFormat,
};
use cpmark::Error;
use cpmark_tensor::Tensor;
use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_png(dir: &std::path::Path, name: &str, img: &RgbImage) -> std::path::PathBuf {
    let p = dir.join(name);
    img.save(&p).unwrap();
    p
}

/// Bilinear sample of an 8-bit raster with half-pixel centres and edge clamping.
fn reference_resize(src: &RgbImage, side: usize) -> Vec<f64> {
    let (w, h) = (src.width() as usize, src.height() as usize);
    let mut out = Vec::new();
    for c in 0..3 {
        for oy in 0..side {
            for ox in 0..side {
                let sy = ((oy as f64 + 0.5) * h as f64 / side as f64 - 0.5).max(0.0).min((h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / side as f64 - 0.5).max(0.0).min((w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |y: usize, x: usize| src.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
                out.push(
                    v(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + v(y0, x1) * (1.0 - fy) * fx
                        + v(y1, x0) * fy * (1.0 - fx)
                        + v(y1, x1) * fy * fx,
                );
            }
        }
    }
    out
}

#[test]
fn load_black_and_grey() {
    let dir = tempfile::tempdir().unwrap();
    let black = write_png(dir.path(), "black.png", &RgbImage::new(400, 400));
    let t = load_image(&black, 400).unwrap();
    assert!(t.data().data().iter().all(|&v| v == 0.0));
    let grey = write_png(dir.path(), "grey.png", &RgbImage::from_pixel(800, 800, Rgb([128, 128, 128])));
    let t = load_image(&grey, 400).unwrap();
    assert_eq!((t.height(), t.width()), (400, 400));
    assert!(t.data().data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
}

#[test]
fn resize_matches_reference_bilinear() {
    let dir = tempfile::tempdir().unwrap();
    let checker = RgbImage::from_fn(16, 16, |x, y| if (x / 2 + y / 2) % 2 == 0 { Rgb([255, 0, 40]) } else { Rgb([0, 255, 200]) });
    let path = write_png(dir.path(), "checker.png", &checker);
    let got = load_image(&path, 8).unwrap();
    let want = reference_resize(&checker, 8);
    for (g, w) in got.data().data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let odd = RgbImage::from_fn(13, 17, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let path = write_png(dir.path(), "odd.png", &odd);
    let got = load_image(&path, 11).unwrap();
    for (g, w) in got.data().data().iter().zip(&reference_resize(&odd, 11)) {
        assert!((*g as f64 - w).abs() < 1e-6);
    }
    let img = ImageTensor::constant(5, 5, [0.3; 3]);
    assert_eq!(resize_bilinear(&img, 5, 5), img);
}

#[test]
fn missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_image(dir.path().join("none.png"), 8), Err(Error::Io { .. })));
    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"not an image").unwrap();
    assert!(load_image(&bad, 8).is_err());
}

#[test]
fn png_round_trip_is_lossless_to_a_quantization_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = ImageTensor::from_fn(24, 24, |_, _, _| rng.random());
    let p = dir.path().join("x.png");
    save_image(&x, &p, SaveFormat::Png).unwrap();
    let y = load_image(&p, 24).unwrap();
    assert!(y.data().max_abs_diff(x.data()) <= 1.0 / 255.0);
    let zero = ImageTensor::constant(24, 24, [0.0; 3]);
    save_image(&zero, &p, SaveFormat::Png).unwrap();
    assert_eq!(load_image(&p, 24).unwrap(), zero);
}

#[test]
fn lossy_save_matches_codec_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = ImageTensor::from_fn(32, 32, |c, y, xx| ((y + xx + c * 5) as f32 / 70.0 + rng.random::<f32>() * 0.1).min(1.0));
    let p = dir.path().join("x.jpg");
    save_image(&x, &p, SaveFormat::Jpeg { quality: 25 }).unwrap();
    let loaded = load_image(&p, 32).unwrap();
    // independent oracle: encode with the codec directly, decode with the image crate
    let raster = x.to_rgb8();
    let mut bytes = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut bytes, 25);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_2_0);
    enc.encode(raster.as_raw(), 32, 32, jpeg_encoder::ColorType::Rgb).unwrap();
    let oracle = ImageTensor::from_rgb8(&image::load_from_memory(&bytes).unwrap().to_rgb8());
    let mae = |a: &ImageTensor| {
        a.data().data().iter().zip(x.data().data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / 3072.0
    };
    assert_eq!(mae(&loaded), mae(&oracle));
    assert_eq!(real_jpeg_roundtrip(&x, 25).unwrap(), oracle);
}

#[test]
fn bt601_hand_values() {
    let red = ImageTensor::constant(1, 1, [1.0, 0.0, 0.0]);
    let yuv = rgb_to_yuv(&red).unwrap();
    assert_eq!(yuv.color_space(), ColorSpace::Yuv);
    let want = [0.299, 0.5 - 0.5 * 0.299 / 0.886, 1.0];
    for (c, w) in want.iter().enumerate() {
        assert!((yuv.at(c, 0, 0) as f64 - w).abs() < 1e-6);
    }
    let black = yuv_to_rgb(&ImageTensor::new(Tensor::new([3, 1, 1], vec![0.0, 0.5, 0.5]), ColorSpace::Yuv).unwrap()).unwrap();
    assert!(black.data().data().iter().all(|&v| v.abs() < 1e-7));
}

#[test]
fn yuv_to_rgb_solves_the_forward_system() {
    let m = Matrix3::new(
        0.299, 0.587, 0.114, //
        -0.168736, -0.331264, 0.5, //
        0.5, -0.418688, -0.081312,
    );
    let lu = m.lu();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let yuv = Vector3::new(rng.random_range(0.3..0.7), rng.random_range(0.4..0.6), rng.random_range(0.4..0.6));
        let rgb = lu.solve(&(yuv - Vector3::new(0.0, 0.5, 0.5))).unwrap();
        let img = ImageTensor::new(Tensor::new([3, 1, 1], vec![yuv[0] as f32, yuv[1] as f32, yuv[2] as f32]), ColorSpace::Yuv).unwrap();
        let got = yuv_to_rgb(&img).unwrap();
        for c in 0..3 {
            if (0.0..=1.0).contains(&rgb[c]) {
                assert!((got.at(c, 0, 0) as f64 - rgb[c]).abs() < 1e-5, "{} vs {}", got.at(c, 0, 0), rgb[c]);
            }
        }
    }
}
