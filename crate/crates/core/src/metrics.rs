//! Image comparison metrics and the differentiable photometric loss.

use crate::error::Result;
use crate::image::Image;

/// SSIM stabilizers for images in `[0, 1]`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const WINDOW_RADIUS: usize = 5;
const WINDOW_SIGMA: f64 = 1.5;

/// Weight of the structural term in [`photometric_loss`].
pub const LAMBDA_SSIM: f64 = 0.2;
/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP: f64 = 100.0;

fn window() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut w = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *v = (-(d * d) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Mirror index without repeating the edge sample (`… c b | a b c … | y x y …`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    if j >= n as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}

/// Separable Gaussian blur with reflective borders, and its exact adjoint.
struct Blur {
    w: usize,
    h: usize,
    taps: [f64; 2 * WINDOW_RADIUS + 1],
    /// Source index of tap `t` for output `i` along each axis, at `i * taps + t`.
    xs: Vec<usize>,
    ys: Vec<usize>,
}

fn reflect_table(n: usize) -> Vec<usize> {
    let r = WINDOW_RADIUS as isize;
    (0..n as isize)
        .flat_map(|i| (0..=2 * r).map(move |t| reflect(i + t - r, n)))
        .collect()
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            taps: window(),
            xs: reflect_table(w),
            ys: reflect_table(h),
        }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let k = self.taps.len();
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let idx = &self.xs[x * k..(x + 1) * k];
                let mut acc = 0.0;
                for (&wt, &j) in self.taps.iter().zip(idx) {
                    acc += wt * row[j];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let idx = &self.ys[y * k..(y + 1) * k];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (&wt, &j) in self.taps.iter().zip(idx) {
                    acc += wt * tmp[j * w + x];
                }
                dst[x] = acc;
            }
        }
        out
    }

    fn adjoint(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let k = self.taps.len();
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let idx = &self.ys[y * k..(y + 1) * k];
            for x in 0..w {
                let v = src[y * w + x];
                for (&wt, &j) in self.taps.iter().zip(idx) {
                    tmp[j * w + x] += wt * v;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let row = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                let v = tmp[y * w + x];
                let idx = &self.xs[x * k..(x + 1) * k];
                for (&wt, &j) in self.taps.iter().zip(idx) {
                    row[j] += wt * v;
                }
            }
        }
        out
    }
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

/// Local statistics of one channel pair.
struct ChannelStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn channel_stats(blur: &Blur, a: &[f64], b: &[f64]) -> ChannelStats {
    let mu_a = blur.apply(a);
    let mu_b = blur.apply(b);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (eaa, ebb, eab) = (blur.apply(&aa), blur.apply(&bb), blur.apply(&ab));
    let n = a.len();
    let mut var_a = vec![0.0; n];
    let mut var_b = vec![0.0; n];
    let mut cov = vec![0.0; n];
    for i in 0..n {
        var_a[i] = eaa[i] - mu_a[i] * mu_a[i];
        var_b[i] = ebb[i] - mu_b[i] * mu_b[i];
        cov[i] = eab[i] - mu_a[i] * mu_b[i];
    }
    ChannelStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

/// Per-pixel SSIM (11x11 Gaussian window, σ = 1.5, reflective borders)
/// averaged over the three channels. Row-major, `width * height` values.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.ensure_same_dims(b)?;
    let (w, h) = a.dims();
    let blur = Blur::new(w, h);
    let mut out = vec![0.0; w * h];
    for c in 0..3 {
        let st = channel_stats(&blur, &channel(a, c), &channel(b, c));
        for (i, o) in out.iter_mut().enumerate() {
            let num = (2.0 * st.mu_a[i] * st.mu_b[i] + SSIM_C1) * (2.0 * st.cov[i] + SSIM_C2);
            let den = (st.mu_a[i].powi(2) + st.mu_b[i].powi(2) + SSIM_C1)
                * (st.var_a[i] + st.var_b[i] + SSIM_C2);
            *o += num / den / 3.0;
        }
    }
    Ok(out)
}

pub fn mean_ssim(a: &Image, b: &Image) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Mean SSIM and its gradient with respect to `a`.
fn mean_ssim_with_grad(a: &Image, b: &Image) -> (f64, Vec<f64>) {
    let (w, h) = a.dims();
    let n = (w * h) as f64;
    let blur = Blur::new(w, h);
    let mut grad = vec![0.0; w * h * 3];
    let mut total = 0.0;
    for c in 0..3 {
        let (ca, cb) = (channel(a, c), channel(b, c));
        let st = channel_stats(&blur, &ca, &cb);
        let m = w * h;
        let mut d_mu = vec![0.0; m];
        let mut d_eaa = vec![0.0; m];
        let mut d_eab = vec![0.0; m];
        for i in 0..m {
            let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * st.cov[i] + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = st.var_a[i] + st.var_b[i] + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            // Per-pixel weight of the mean over pixels and channels.
            let scale = 1.0 / (3.0 * n);
            d_mu[i] = scale * ((2.0 * mb * n2 - 2.0 * mb * n1) / (d1 * d2) - s * (2.0 * ma / d1 - 2.0 * ma / d2));
            d_eaa[i] = scale * (-s / d2);
            d_eab[i] = scale * (2.0 * n1 / (d1 * d2));
        }
        let g_mu = blur.adjoint(&d_mu);
        let g_eaa = blur.adjoint(&d_eaa);
        let g_eab = blur.adjoint(&d_eab);
        for i in 0..m {
            grad[i * 3 + c] = g_mu[i] + 2.0 * ca[i] * g_eaa[i] + cb[i] * g_eab[i];
        }
    }
    (total / (3.0 * n), grad)
}

/// `(1 - λ)·L1 + λ·(1 - mean SSIM)` and its gradient with respect to
/// `rendered`.
pub fn photometric_loss(rendered: &Image, observed: &Image) -> Result<(f64, Image)> {
    photometric_loss_weighted(rendered, observed, LAMBDA_SSIM)
}

pub fn photometric_loss_weighted(rendered: &Image, observed: &Image, lambda_ssim: f64) -> Result<(f64, Image)> {
    rendered.ensure_same_dims(observed)?;
    let (w, h) = rendered.dims();
    let count = rendered.data().len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = rendered
        .data()
        .iter()
        .zip(observed.data())
        .map(|(r, o)| {
            let d = r - o;
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (1.0 - lambda_ssim) * sign / count
        })
        .collect();
    l1 /= count;
    let mut loss = (1.0 - lambda_ssim) * l1;
    if lambda_ssim != 0.0 {
        let (ssim, gs) = mean_ssim_with_grad(rendered, observed);
        loss += lambda_ssim * (1.0 - ssim);
        for (g, s) in grad.iter_mut().zip(gs) {
            *g -= lambda_ssim * s;
        }
    }
    Ok((loss, Image::new(w, h, grad)?))
}

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 20, 13);
        for v in ssim_map(&img, &img).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_binary_image_is_anticorrelated() {
        let img = Image::from_fn(24, 24, |x, y| if (x / 3 + y / 3) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let inv = Image::from_fn(24, 24, |x, y| {
            let p = img.pixel(x, y);
            [1.0 - p.x, 1.0 - p.y, 1.0 - p.z]
        });
        assert!(ssim_map(&img, &inv).unwrap().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn constant_images_follow_the_closed_form() {
        let a = Image::filled(16, 16, [0.5; 3]);
        let b = Image::filled(16, 16, [0.6; 3]);
        let (ma, mb): (f64, f64) = (0.5, 0.6);
        let expect = (2.0 * ma * mb + SSIM_C1) * SSIM_C2 / ((ma * ma + mb * mb + SSIM_C1) * SSIM_C2);
        for v in ssim_map(&a, &b).unwrap() {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 2), 1);
    }

    #[test]
    fn blur_adjoint_is_a_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (9, 7);
        let blur = Blur::new(w, h);
        let x: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let lhs: f64 = blur.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(blur.adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = Image::zeros(4, 4);
        let b = Image::zeros(4, 5);
        assert!(matches!(ssim_map(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(photometric_loss(&a, &b).is_err());
        assert!(mae(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 12, 12);
        let (loss, grad) = photometric_loss(&img, &img).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn pure_l1_offset() {
        let obs = Image::filled(8, 8, [0.3; 3]);
        let ren = Image::filled(8, 8, [0.4; 3]);
        let (loss, grad) = photometric_loss_weighted(&ren, &obs, 0.0).unwrap();
        assert!((loss - 0.1).abs() < 1e-12);
        let n = 8.0 * 8.0 * 3.0;
        assert!(grad.data().iter().all(|&g| (g - 1.0 / n).abs() < 1e-15));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let ren = random_image(&mut rng, 16, 16);
            let obs = random_image(&mut rng, 16, 16);
            let (_, grad) = photometric_loss(&ren, &obs).unwrap();
            let h = 1e-6;
            for idx in (0..16 * 16 * 3).step_by(7) {
                let mut plus = ren.clone();
                plus.data_mut()[idx] += h;
                let mut minus = ren.clone();
                minus.data_mut()[idx] -= h;
                let fd = (photometric_loss(&plus, &obs).unwrap().0 - photometric_loss(&minus, &obs).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad.data()[idx]).abs() < 1e-5, "idx {idx}: fd {fd} vs {}", grad.data()[idx]);
            }
        }
    }

    #[test]
    fn mae_and_psnr_examples() {
        let a = Image::filled(6, 6, [0.2; 3]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(6, 6, [0.3; 3]);
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let checker = Image::from_fn(6, 6, |x, y| [((x + y) % 2) as f64; 3]);
        let inverse = Image::from_fn(6, 6, |x, y| [((x + y + 1) % 2) as f64; 3]);
        assert_eq!(mae(&checker, &inverse).unwrap(), 1.0);
        assert_eq!(psnr(&checker, &inverse).unwrap(), 0.0);
    }
}
