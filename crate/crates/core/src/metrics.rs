//! Full-reference image quality: PSNR over all channels and SSIM on luma.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// Reported value for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "images {}x{}x{} and {}x{}x{} differ",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    if !(a.in_unit_range() && b.in_unit_range()) {
        return Err(Error::InvalidParameter("quality metrics expect values in [0, 1]".into()));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Empty("PSNR of empty images".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2)).sum::<f64>() / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-region separable filtering of a `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes, valid windows only.
pub fn ssim<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (x, y) = (a.to_luma(), b.to_luma());
    let k = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, h, w, &k);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mx, my) = (f(&x), f(&y));
    let (exx, eyy, exy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random(h: usize, w: usize, s: u64) -> ImageTensor<f64> {
        let mut r = seed::rng(s);
        ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_analytic_and_cap() {
        let a = ImageTensor::<f64>::filled(8, 8, 3, 0.0);
        let b = ImageTensor::<f64>::filled(8, 8, 3, 0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-3);
        assert_eq!(psnr(&b, &b).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &ImageTensor::filled(8, 7, 3, 0.0)).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let (a, b) = (random(8, 8, 1), random(8, 8, 2));
        let mut sse = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    sse += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
                }
            }
        }
        let want = 10.0 * (192.0 / sse).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    /// Every valid window evaluated directly with 2-D weights.
    fn ssim_oracle(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> f64 {
        let (h, w) = (a.height(), a.width());
        let la = a.to_luma();
        let lb = b.to_luma();
        let mut g = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                s += *v;
            }
        }
        let mut acc = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / s;
                        mx += wt * la[(y0 + i) * w + x0 + j];
                        my += wt * lb[(y0 + i) * w + x0 + j];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / s;
                        let (dx, dy) = (la[(y0 + i) * w + x0 + j] - mx, lb[(y0 + i) * w + x0 + j] - my);
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let a = random(32, 32, 3);
        let b = ImageTensor::from_fn(32, 32, 3, |y, x, c| (0.7 * a.get(y, x, c) + 0.2 * ((x + y) % 5) as f64 / 5.0).min(1.0));
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-6, "{got}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn ssim_identity_inversion_and_size() {
        let a = random(20, 24, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let bin = ImageTensor::<f64>::from_fn(24, 24, 3, |y, x, _| ((x / 3 + y / 2) % 2) as f64);
        let inv = ImageTensor::from_fn(24, 24, 3, |y, x, c| 1.0 - bin.get(y, x, c));
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        assert!(matches!(ssim(&random(10, 30, 1), &random(10, 30, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn noisier_images_never_score_higher() {
        let clean = random(16, 16, 9);
        let noisy = |sd: f64, s: u64| {
            let mut r = seed::rng(s);
            let n = Normal::new(0.0, sd).unwrap();
            ImageTensor::new(16, 16, 3, clean.data().iter().map(|v| (v + n.sample(&mut r)).clamp(0.0, 1.0)).collect()).unwrap()
        };
        let mut wins = 0;
        for s in 0..20 {
            let lo = psnr(&clean, &noisy(0.02, s)).unwrap();
            let hi = psnr(&clean, &noisy(0.1, s + 100)).unwrap();
            wins += usize::from(lo > hi);
        }
        assert_eq!(wins, 20);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_flip_invariant(s in 0u64..500) {
            let (a, b) = (random(14, 13, s), random(14, 13, s + 1000));
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ab - ssim(&a.flip_horizontal(), &b.flip_horizontal()).unwrap()).abs() < 1e-9);
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&a.flip_horizontal(), &b.flip_horizontal()).unwrap()).abs() < 1e-9);
        }
    }
}
