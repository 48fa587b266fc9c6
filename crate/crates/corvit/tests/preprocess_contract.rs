//! Behavioral contract for the preprocessing pipeline, with expected values
//! computed by hand or via independent formulas rather than the library code.

use corvit::preprocess::{
    bilinear_resize_grid, gaussian_blur3, histogram_equalize, intensity_stats, load_image,
    normalize, resize, run_pipeline, save_png, Image, PreprocessConfig, StageOrder, BLUR_SIGMA,
};
use corvit::rng::RngStream;

fn constant_image(h: usize, w: usize, v: f64) -> Image {
    Image::new(h, w, vec![v; h * w]).unwrap()
}

// ---- histogram equalization ----

#[test]
fn equalize_constant_image_maps_to_one() {
    let img = constant_image(4, 4, 0.37);
    let out = histogram_equalize(&img, 256).unwrap();
    assert!(out.pixels().iter().all(|&p| p == 1.0));
}

#[test]
fn equalize_two_level_half_and_half() {
    // 50% at 0.2 and 50% at 0.8: CDF steps to 0.5 at the low level, 1.0 at
    // the high level.
    let mut px = vec![0.2; 8];
    px.extend(vec![0.8; 8]);
    let img = Image::new(4, 4, px).unwrap();
    let out = histogram_equalize(&img, 256).unwrap();
    for (i, &p) in out.pixels().iter().enumerate() {
        let expect = if i < 8 { 0.5 } else { 1.0 };
        assert!((p - expect).abs() < 1e-12, "pixel {i}: {p}");
    }
}

#[test]
fn equalize_is_monotone_and_bounded() {
    let mut rng = RngStream::new(3, "prep-eq", 0);
    let px: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
    let img = Image::new(8, 8, px.clone()).unwrap();
    let out = histogram_equalize(&img, 64).unwrap();
    for (i, &a) in px.iter().enumerate() {
        assert!(out.pixels()[i] > 0.0 && out.pixels()[i] <= 1.0);
        for (j, &b) in px.iter().enumerate() {
            if a <= b {
                assert!(
                    out.pixels()[i] <= out.pixels()[j] + 1e-12,
                    "monotonicity violated between pixels {i} and {j}"
                );
            }
        }
    }
}

#[test]
fn equalize_uniform_histogram_is_near_fixed_point() {
    // a perfect ramp occupies every bin equally; equalization maps bin k to
    // (k+1)/bins, which reproduces the ramp up to quantization
    let n = 256;
    let px: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let img = Image::new(16, 16, px.clone()).unwrap();
    let out = histogram_equalize(&img, n).unwrap();
    for (i, (&before, &after)) in px.iter().zip(out.pixels()).enumerate() {
        assert!(
            (after - before).abs() <= 1.0 / n as f64 + 1e-12,
            "pixel {i}: {before} -> {after}"
        );
    }
}

// ---- gaussian blur ----

#[test]
fn blur_preserves_constant_images() {
    let img = constant_image(5, 7, 0.42);
    let out = gaussian_blur3(&img).unwrap();
    for &p in out.pixels() {
        assert!((p - 0.42).abs() < 1e-12);
    }
}

#[test]
fn blur_impulse_stamps_kernel_weights() {
    // independently evaluate the kernel: w(dx,dy) = exp(-(dx^2+dy^2)/(2s^2)),
    // normalized over the 3x3 support
    let s2 = 2.0 * BLUR_SIGMA * BLUR_SIGMA;
    let mut weights = [[0.0f64; 3]; 3];
    let mut z = 0.0;
    for (dy, row) in weights.iter_mut().enumerate() {
        for (dx, w) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 1.0, dx as f64 - 1.0);
            *w = (-(fx * fx + fy * fy) / s2).exp();
            z += *w;
        }
    }

    let mut px = vec![0.0; 25];
    px[2 * 5 + 2] = 1.0;
    let img = Image::new(5, 5, px).unwrap();
    let out = gaussian_blur3(&img).unwrap();
    for y in 0..5 {
        for x in 0..5 {
            let expect = if (1..=3).contains(&y) && (1..=3).contains(&x) {
                weights[y - 1][x - 1] / z
            } else {
                0.0
            };
            assert!(
                (out.pixels()[y * 5 + x] - expect).abs() < 1e-12,
                "pixel ({y},{x})"
            );
        }
    }
}

#[test]
fn blur_stays_within_input_range() {
    let mut rng = RngStream::new(4, "prep-blur", 0);
    let px: Vec<f64> = (0..100).map(|_| rng.uniform_in(0.1, 0.9)).collect();
    let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let img = Image::new(10, 10, px).unwrap();
    let out = gaussian_blur3(&img).unwrap();
    for &p in out.pixels() {
        assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
    }
}

#[test]
fn blur_preserves_mean_of_interior_dominated_image() {
    // border pixels equal their interior neighbours, so replicate padding
    // introduces no mass distortion
    let mut px = vec![0.5; 81];
    for y in 3..6 {
        for x in 3..6 {
            px[y * 9 + x] = 0.7;
        }
    }
    let img = Image::new(9, 9, px.clone()).unwrap();
    let before: f64 = px.iter().sum::<f64>() / 81.0;
    let out = gaussian_blur3(&img).unwrap();
    let after: f64 = out.pixels().iter().sum::<f64>() / 81.0;
    assert!((before - after).abs() < 1e-9);
}

#[test]
fn blur_rejects_tiny_images() {
    let img = constant_image(2, 5, 0.5);
    assert!(matches!(
        gaussian_blur3(&img),
        Err(corvit::Error::ImageTooSmall { .. })
    ));
}

// ---- resize ----

#[test]
fn resize_same_size_is_bitwise_identity() {
    let mut rng = RngStream::new(5, "prep-resize", 0);
    let px: Vec<f64> = (0..48).map(|_| rng.uniform()).collect();
    let img = Image::new(6, 8, px).unwrap();
    let out = resize(&img, 6, 8).unwrap();
    for (a, b) in img.pixels().iter().zip(out.pixels()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn resize_checkerboard_corners_match_source() {
    let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let out = resize(&img, 4, 4).unwrap();
    let p = out.pixels();
    assert_eq!(p[0], 0.0);
    assert_eq!(p[3], 1.0);
    assert_eq!(p[12], 1.0);
    assert_eq!(p[15], 0.0);
    // half-pixel convention: the exact centre is the average of all four
    let (row, col) = (1, 1);
    let center = bilinear_resize_grid(img.pixels(), 2, 2, 4, 4)[row * 4 + col];
    // sample position for output (1,1) is source (0.25, 0.25):
    // (1-.25)(1-.25)*0 + .25*.75*1 + .75*.25*1 + .25*.25*0 = 0.375
    assert!((center - 0.375).abs() < 1e-12);
}

#[test]
fn resize_constant_stays_constant() {
    let img = constant_image(3, 3, 0.77);
    let out = resize(&img, 11, 5).unwrap();
    for &p in out.pixels() {
        assert!((p - 0.77).abs() < 1e-12);
    }
}

// ---- normalize ----

#[test]
fn normalize_identity_parameters_pass_values_through() {
    let img = Image::new(2, 2, vec![0.1, 0.4, 0.6, 0.9]).unwrap();
    let t = normalize(&img, 0.0, 1.0).unwrap();
    assert_eq!(t.shape(), &[1, 1, 2, 2]);
    assert_eq!(t.data(), img.pixels());
}

#[test]
fn normalize_centers_constant_image_to_zero() {
    let img = constant_image(3, 3, 0.5);
    let t = normalize(&img, 0.5, 0.25).unwrap();
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn normalize_rejects_non_positive_std() {
    let img = constant_image(3, 3, 0.5);
    assert!(matches!(
        normalize(&img, 0.0, 0.0),
        Err(corvit::Error::NonPositiveStd { .. })
    ));
    assert!(matches!(
        normalize(&img, 0.0, -1.0),
        Err(corvit::Error::NonPositiveStd { .. })
    ));
}

#[test]
fn dataset_stats_normalize_to_zero_mean() {
    let mut rng = RngStream::new(6, "prep-stats", 0);
    let images: Vec<Image> = (0..5)
        .map(|_| {
            let px: Vec<f64> = (0..64).map(|_| rng.uniform_in(0.2, 0.9)).collect();
            Image::new(8, 8, px).unwrap()
        })
        .collect();
    let (mean, std) = intensity_stats(images.iter());
    assert!(std > 0.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for img in &images {
        let t = normalize(img, mean, std).unwrap();
        total += t.data().iter().sum::<f64>();
        count += t.numel();
    }
    assert!((total / count as f64).abs() < 1e-6);
}

// ---- pipeline ----

#[test]
fn pipeline_is_deterministic_and_shaped() {
    let mut rng = RngStream::new(7, "prep-pipe", 0);
    let px: Vec<f64> = (0..32 * 32).map(|_| rng.uniform()).collect();
    let img = Image::new(32, 32, px).unwrap();
    let cfg = PreprocessConfig {
        bins: 64,
        order: StageOrder::EqualizeThenBlur,
        out_size: 16,
        mean: 0.45,
        std: 0.2,
    };
    let a = run_pipeline(&img, &cfg).unwrap();
    let b = run_pipeline(&img, &cfg).unwrap();
    assert_eq!(a.shape(), &[1, 1, 16, 16]);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    // the alternate stage order is a different function of the input
    let cfg_swapped = PreprocessConfig {
        order: StageOrder::BlurThenEqualize,
        ..cfg
    };
    let c = run_pipeline(&img, &cfg_swapped).unwrap();
    assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
}

#[test]
fn png_roundtrip_preserves_8bit_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gray.png");
    let px: Vec<f64> = (0..64).map(|i| (i as f64 * 4.0) / 255.0).collect();
    let img = Image::new(8, 8, px.clone()).unwrap();
    save_png(&path, &img).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back.height(), 8);
    assert_eq!(back.width(), 8);
    for (a, b) in back.pixels().iter().zip(&px) {
        assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn raw_img_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.img");
    let px: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
    let t = corvit::Tensor::from_vec(vec![4, 5], px.clone()).unwrap();
    corvit::tensor::io::save_tensor(&path, &t).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!(img.height(), 4);
    assert_eq!(img.width(), 5);
    for (a, b) in img.pixels().iter().zip(&px) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
